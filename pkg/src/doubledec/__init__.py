"""Block-partitioned double-decoder transformer, desk scale.

A NumPy implementation of a two-stack language model: a causal context
decoder feeding, through per-layer cross projections of its final latents,
a generation decoder whose attention merges within-block and cross-block
sources exactly via log-sum-exp recombination. Ships with a decoder-only
baseline on the same substrate, KV-cached inference, width-scaled training,
and an analytical FLOP/memory cost model.
"""

__version__ = "0.1.0"
