"""Training: losses, collators, width-scaled learning-rate groups, AdamW, loops.

Learning rates follow the width-scaling rule: hidden matrices train at
base_lr * base_width / d, the tied embedding and all norm gains/biases at
base_lr, and weight decay applies to matrices only. Pretraining supervises
every next-token position regardless of the sampled block partition; the
prefix-LM phase supervises suffix targets only, with identical batches
handed to both architectures under a shared seed.

Determinism contract: batch selection and per-step RNG derive statelessly
from (seed, step), so a run resumed from a checkpoint consumes exactly the
sequence of batches and partitions the uninterrupted run would have.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, replace
from math import ceil

import numpy as np

from . import kernels, model
from .model import DECODER_ONLY, DOUBLE_DECODER, ModelConfig
from .partition import BlockPartition, sample as sample_partition, validate as validate_partition


class EmptyMask(ValueError):
    """Loss mask selects no positions."""


class NonFiniteLoss(RuntimeError):
    """Loss or gradients became NaN/Inf."""


class UnclassifiedParameter(ValueError):
    """A parameter matched no learning-rate group rule."""


ARCH_WEIGHT_DECAY = {DECODER_ONLY: 0.1, DOUBLE_DECODER: 0.5}
ARCH_BASE_LR = {DECODER_ONLY: 0.01, DOUBLE_DECODER: 0.01}

# spawn-key tags for per-step RNG streams
_STREAM_PARTITION = 1
_STREAM_BREAKPOINT = 2


@dataclass(frozen=True)
class TrainConfig:
    base_lr: float = 0.01
    weight_decay: float | None = None  # None -> architecture default
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    warmup_frac: float = 0.05
    final_lr_frac: float = 0.1
    grad_clip: float = 1.0
    batch_size: int = 16
    total_tokens: int = 200_000
    seed: int = 0
    min_blocks: int = 2
    max_blocks: int = 32
    min_block_len: int = 8
    sft_base_lr: float = 2e-4
    sft_batch_size: int = 32
    sft_token_frac: float = 0.1
    sft_min_prefix: int = 16
    sft_min_suffix: int = 16
    checkpoint_interval: int = 0  # steps; 0 = final checkpoint only
    eval_fracs: tuple[float, ...] = (0.25, 0.5, 0.75)
    eval_sequences: int = 64

    def __post_init__(self):
        if not 0.0 < self.warmup_frac < 1.0:
            raise ValueError(f"warmup_frac must lie in (0,1), got {self.warmup_frac}")
        if not 0.0 < self.final_lr_frac <= 1.0:
            raise ValueError(f"final_lr_frac must lie in (0,1], got {self.final_lr_frac}")
        if self.grad_clip <= 0.0:
            raise ValueError(f"grad_clip must be positive, got {self.grad_clip}")


def resolve_weight_decay(tc: TrainConfig, arch: str) -> float:
    return ARCH_WEIGHT_DECAY[arch] if tc.weight_decay is None else tc.weight_decay


@dataclass
class Batch:
    tokens: np.ndarray  # (B, T) token ids
    loss_mask: np.ndarray  # (B, T) bool; True at rows whose next token is supervised
    partition: BlockPartition | None = None  # shared across the batch
    breakpoint: int | None = None  # prefix-LM collation only


def step_rng(seed: int, stream: int, step: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(stream, step)))


# ---------------------------------------------------------------------------
# losses

def shifted_targets(tokens: np.ndarray) -> np.ndarray:
    """targets[b, t] = tokens[b, t+1]; last column is a placeholder (never unmasked)."""
    targets = np.zeros_like(tokens)
    targets[:, :-1] = tokens[:, 1:]
    return targets


def lm_loss_and_grad(logits: np.ndarray, targets: np.ndarray, loss_mask: np.ndarray):
    """Mean natural-log cross entropy over masked positions, plus dlogits."""
    idx = np.nonzero(loss_mask)
    count = idx[0].size
    if count == 0:
        raise EmptyMask("loss mask selects no positions")
    rows = np.ascontiguousarray(logits[idx])
    losses, drows = kernels.xent_rows(rows, targets[idx])
    dlogits = np.zeros_like(logits)
    dlogits[idx] = drows / count
    return float(losses.mean(dtype=np.float64)), dlogits


def lm_loss(logits: np.ndarray, targets: np.ndarray, loss_mask: np.ndarray) -> float:
    return lm_loss_and_grad(logits, targets, loss_mask)[0]


# ---------------------------------------------------------------------------
# collators

def partition_bounds(tc: TrainConfig, seq_len: int) -> tuple[int, int, int]:
    """Clamp the configured partition knobs to what a sequence can hold.

    The defaults target seq_len 2048; shorter packing lengths shrink the
    block-count ceiling (and, if necessary, the minimum block length) so the
    sampler always has a feasible range.
    """
    min_len = max(1, min(tc.min_block_len, seq_len // 2))
    max_blocks = max(1, min(tc.max_blocks, seq_len // min_len))
    min_blocks = max(1, min(tc.min_blocks, max_blocks))
    return min_blocks, max_blocks, min_len


def pretrain_collate(
    data: np.ndarray, step: int, tc: TrainConfig, arch: str, seq_len: int
) -> Batch:
    """Next-token batch: every position 0..T-2 is supervised, any partition."""
    n = data.shape[0]
    rows = (step * tc.batch_size + np.arange(tc.batch_size)) % n
    tokens = data[rows]
    loss_mask = np.zeros(tokens.shape, dtype=bool)
    loss_mask[:, :-1] = True
    partition = None
    if arch == DOUBLE_DECODER:
        rng = step_rng(tc.seed, _STREAM_PARTITION, step)
        min_blocks, max_blocks, min_len = partition_bounds(tc, seq_len)
        partition = sample_partition(rng, seq_len, min_blocks, max_blocks, min_len)
    return Batch(tokens=tokens, loss_mask=loss_mask, partition=partition)


def prefix_lm_collate(
    rng: np.random.Generator,
    tokens: np.ndarray,
    min_prefix: int = 16,
    min_suffix: int = 16,
) -> Batch:
    """Suffix-supervised batch with one breakpoint shared across the batch.

    Architecture-agnostic: the double decoder routes the prefix through its
    context path via the (0, breakpoint, T) partition, the decoder-only
    baseline sees the same tokens and loss mask under a full causal mask.
    """
    t = tokens.shape[1]
    if t < 2 or min_prefix < 1 or min_suffix < 1 or min_prefix > t - min_suffix:
        raise ValueError(f"cannot place breakpoint with T={t}, bounds ({min_prefix}, {min_suffix})")
    breakpoint = int(rng.integers(min_prefix, t - min_suffix + 1))
    loss_mask = np.zeros(tokens.shape, dtype=bool)
    loss_mask[:, breakpoint - 1 : t - 1] = True
    partition = validate_partition((0, breakpoint, t), t)
    return Batch(tokens=tokens, loss_mask=loss_mask, partition=partition, breakpoint=breakpoint)


def sft_collate(data: np.ndarray, step: int, tc: TrainConfig, arch: str, seq_len: int) -> Batch:
    n = data.shape[0]
    rows = (step * tc.batch_size + np.arange(tc.batch_size)) % n
    rng = step_rng(tc.seed, _STREAM_BREAKPOINT, step)
    # clamp the breakpoint window for packing lengths shorter than the defaults assume
    min_prefix = max(1, min(tc.sft_min_prefix, seq_len // 2))
    min_suffix = max(1, min(tc.sft_min_suffix, seq_len - min_prefix))
    return prefix_lm_collate(rng, data[rows], min_prefix, min_suffix)


# ---------------------------------------------------------------------------
# learning-rate groups, schedule, optimizer

@dataclass(frozen=True)
class ParamGroup:
    tag: str
    names: tuple[str, ...]
    lr: float
    weight_decay: float


_MATRIX_LEAVES = frozenset(["wq", "wk", "wv", "wks", "wvs", "wkc", "wvc", "wo", "w1", "w2"])
_NO_DECAY_LEAVES = frozenset(
    ["g", "b", "bq", "bk", "bv", "bks", "bvs", "bkc", "bvc", "bo", "b1", "b2"]
)


def _classify(name: str) -> str:
    leaf = name.rsplit(".", 1)[-1]
    if name == "embed.weight":
        return "embed"
    if leaf in _MATRIX_LEAVES:
        return "hidden"
    if leaf in _NO_DECAY_LEAVES:
        return "no_decay"
    raise UnclassifiedParameter(f"no learning-rate rule matches parameter {name!r}")


def mup_param_groups(
    cfg: ModelConfig, params: dict[str, np.ndarray], tc: TrainConfig, arch: str
) -> list[ParamGroup]:
    """Partition parameters into (embedding, hidden-matrix, no-decay) groups.

    Hidden matrices: lr = base_lr * base_width / d, decayed. Embedding
    (tied input/output): base_lr, decayed. Norm gains and all biases:
    base_lr, no decay. Every parameter lands in exactly one group.
    """
    wd = resolve_weight_decay(tc, arch)
    buckets: dict[str, list[str]] = {"embed": [], "hidden": [], "no_decay": []}
    for name in params:
        buckets[_classify(name)].append(name)
    hidden_lr = tc.base_lr * cfg.base_width / cfg.d
    return [
        ParamGroup("embed", tuple(buckets["embed"]), tc.base_lr, wd),
        ParamGroup("hidden", tuple(buckets["hidden"]), hidden_lr, wd),
        ParamGroup("no_decay", tuple(buckets["no_decay"]), tc.base_lr, 0.0),
    ]


def lr_schedule(step: int, total_steps: int, tc: TrainConfig) -> float:
    """Linear 0 -> 1 over the warmup fraction, then linear 1 -> final fraction."""
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    warmup = tc.warmup_frac * total_steps
    if step <= warmup:
        return step / warmup if warmup > 0 else 1.0
    return 1.0 - (1.0 - tc.final_lr_frac) * (step - warmup) / (total_steps - warmup)


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Global-norm clip in place; returns the post-clip norm.

    Accumulates in float64 over sorted names so the result is independent of
    dict insertion order (fresh init vs checkpoint load).
    """
    total = 0.0
    for name in sorted(grads):
        g = grads[name].ravel().astype(np.float64, copy=False)
        total += float(np.dot(g, g))
    norm = float(np.sqrt(total))
    if norm > max_norm:
        scale = max_norm / norm
        for g in grads.values():
            g *= scale
        return max_norm
    return norm


@dataclass
class OptState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]

    @classmethod
    def zeros_like(cls, params: dict[str, np.ndarray]) -> "OptState":
        return cls(
            m={k: np.zeros_like(p) for k, p in params.items()},
            v={k: np.zeros_like(p) for k, p in params.items()},
        )


def adamw_apply(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    opt: OptState,
    groups: list[ParamGroup],
    lr_mult: float,
    t: int,
    tc: TrainConfig,
) -> None:
    bc1 = 1.0 - tc.beta1**t
    bc2 = 1.0 - tc.beta2**t
    for group in groups:
        lr = group.lr * lr_mult
        for name in group.names:
            kernels.adamw_update(
                params[name].ravel(), grads[name].ravel(),
                opt.m[name].ravel(), opt.v[name].ravel(),
                lr, tc.beta1, tc.beta2, tc.eps, group.weight_decay, bc1, bc2,
            )


# ---------------------------------------------------------------------------
# steps and loops

def forward_batch(cfg: ModelConfig, arch: str, params, batch: Batch, tape: dict | None = None):
    if arch == DOUBLE_DECODER:
        return model.double_decoder_forward(cfg, params, batch.tokens, batch.partition, tape=tape)
    return model.decoder_only_forward(cfg, params, batch.tokens, tape=tape)


def train_step(
    cfg: ModelConfig,
    tc: TrainConfig,
    arch: str,
    params,
    opt: OptState,
    groups: list[ParamGroup],
    batch: Batch,
    step: int,
    total_steps: int,
):
    """One forward/backward/clip/update cycle. Returns (loss, grad_norm, lr_mult)."""
    from .attention import BothEmpty

    t0 = time.monotonic()
    tape: dict = {}
    try:
        logits = forward_batch(cfg, arch, params, batch, tape=tape)
    except BothEmpty as e:
        # the self mask guarantees every row its diagonal, so an "empty" row
        # here means NaN/Inf activations collapsed the max-scan
        raise NonFiniteLoss(f"non-finite attention scores at step {step}: {e}") from e
    loss, dlogits = lm_loss_and_grad(logits, shifted_targets(batch.tokens), batch.loss_mask)
    if not np.isfinite(loss):
        raise NonFiniteLoss(f"loss {loss} at step {step}")
    grads = model.backward(cfg, params, tape, dlogits)
    grad_norm = clip_gradients(grads, tc.grad_clip)
    if not np.isfinite(grad_norm):
        raise NonFiniteLoss(f"gradient norm {grad_norm} at step {step}")
    # schedule indexed by completed-step count so the first update is nonzero
    lr_mult = lr_schedule(step + 1, total_steps, tc)
    adamw_apply(params, grads, opt, groups, lr_mult, step + 1, tc)
    elapsed = time.monotonic() - t0
    tokens = batch.tokens.size
    return loss, grad_norm, lr_mult, tokens / elapsed if elapsed > 0 else 0.0


@dataclass
class TrainState:
    params: dict[str, np.ndarray]
    opt: OptState
    step: int = 0
    tokens_seen: int = 0


def total_steps_for(tc: TrainConfig, seq_len: int, total_tokens: int | None = None) -> int:
    budget = tc.total_tokens if total_tokens is None else total_tokens
    return max(1, ceil(budget / (tc.batch_size * seq_len)))


def run_training(
    cfg: ModelConfig,
    tc: TrainConfig,
    arch: str,
    data: np.ndarray,
    collate,
    state: TrainState,
    *,
    total_tokens: int | None = None,
    on_step=None,
) -> tuple[TrainState, list[dict]]:
    """Drive train_step over a token budget with a stateless-per-step collator.

    on_step(record, timing) fires after every step; `record` holds only
    deterministic fields, wall-clock numbers ride in `timing`.
    """
    if data.shape[0] == 0:
        raise ValueError("training split is empty")
    seq_len = data.shape[1]
    steps = total_steps_for(tc, seq_len, total_tokens)
    groups = mup_param_groups(cfg, state.params, tc, arch)
    records = []
    for step in range(state.step, steps):
        batch = collate(data, step, tc, arch, seq_len)
        loss, grad_norm, lr_mult, tps = train_step(
            cfg, tc, arch, state.params, state.opt, groups, batch, step, steps
        )
        state.step = step + 1
        state.tokens_seen += batch.tokens.size
        record = {
            "step": step,
            "tokens": state.tokens_seen,
            "loss": loss,
            "lr": lr_mult * tc.base_lr,
            "grad_norm": grad_norm,
        }
        if batch.partition is not None:
            record["partition"] = batch.partition.serialize()
        if batch.breakpoint is not None:
            record["breakpoint"] = batch.breakpoint
        records.append(record)
        if on_step is not None:
            on_step(record, {"step": step, "tokens_per_sec": tps})
    return state, records


def pretrain(
    cfg: ModelConfig,
    tc: TrainConfig,
    arch: str,
    data: np.ndarray,
    state: TrainState | None = None,
    *,
    dtype=np.float32,
    on_step=None,
) -> tuple[TrainState, list[dict]]:
    """Architecture-native pretraining: full next-token supervision, random
    partitions per batch for the double decoder."""
    if state is None:
        params = model.init_params(cfg, arch, np.random.default_rng(tc.seed), dtype=dtype)
        state = TrainState(params=params, opt=OptState.zeros_like(params))
    return run_training(cfg, tc, arch, data, pretrain_collate, state, on_step=on_step)


def sft_prefix_lm(
    cfg: ModelConfig,
    tc: TrainConfig,
    arch: str,
    state: TrainState,
    data: np.ndarray,
    *,
    sft_tokens: int | None = None,
    on_step=None,
) -> tuple[TrainState, list[dict]]:
    """Prefix-LM fine-tuning at the SFT learning rate and batch size.

    Token budget defaults to sft_token_frac of the tokens the incoming state
    has seen. The optimizer restarts (fresh moments and schedule).
    """
    if sft_tokens is None:
        sft_tokens = int(round(tc.sft_token_frac * state.tokens_seen))
    sft_tc = replace(tc, base_lr=tc.sft_base_lr, batch_size=tc.sft_batch_size)
    sft_state = TrainState(params=state.params, opt=OptState.zeros_like(state.params))
    return run_training(
        cfg, sft_tc, arch, data, sft_collate, sft_state,
        total_tokens=max(1, sft_tokens), on_step=on_step,
    )


# ---------------------------------------------------------------------------
# evaluation

def evaluate_prefix_lm(
    cfg: ModelConfig,
    arch: str,
    params,
    data: np.ndarray,
    fracs: tuple[float, ...] = (0.25, 0.5, 0.75),
    max_sequences: int = 64,
    batch_size: int = 8,
) -> float:
    """Mean suffix cross entropy over a deterministic breakpoint grid.

    No RNG is consumed: breakpoints sit at fixed fractions of the sequence
    length and the same evaluation sequences are used every call.
    """
    if data.shape[0] == 0:
        return float("nan")
    seqs = data[:max_sequences]
    t = seqs.shape[1]
    total_nats = 0.0
    total_count = 0
    for frac in fracs:
        bp = min(t - 1, max(1, int(round(frac * t))))
        partition = validate_partition((0, bp, t), t)
        for lo in range(0, seqs.shape[0], batch_size):
            tokens = seqs[lo : lo + batch_size]
            if arch == DOUBLE_DECODER:
                logits = model.double_decoder_forward(cfg, params, tokens, partition)
            else:
                logits = model.decoder_only_forward(cfg, params, tokens)
            rows = np.ascontiguousarray(logits[:, bp - 1 : t - 1].reshape(-1, cfg.vocab_size))
            targets = np.ascontiguousarray(tokens[:, bp:].reshape(-1))
            losses, _ = kernels.xent_rows(rows, targets)
            total_nats += float(losses.sum(dtype=np.float64))
            total_count += losses.size
    return total_nats / total_count
