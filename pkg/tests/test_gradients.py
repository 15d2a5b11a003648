"""Finite-difference verification of the hand-written backward pass."""

import numpy as np

from doubledec import model
from doubledec.model import DECODER_ONLY, DOUBLE_DECODER, ModelConfig, init_params
from doubledec.partition import validate
from doubledec.training import lm_loss, lm_loss_and_grad, shifted_targets

CFG = ModelConfig(d=64, layers=2, ctx_layers=2, gen_layers=1, vocab_size=41, max_seq_len=32)


def batch_for(cfg, seed=0, t=8, b=2):
    rng = np.random.default_rng(seed)
    tokens = rng.integers(0, cfg.vocab_size, size=(b, t))
    mask = np.zeros((b, t), dtype=bool)
    mask[:, :-1] = True
    return tokens, mask


def loss_of(cfg, arch, params, tokens, mask, part):
    if arch == DOUBLE_DECODER:
        logits = model.double_decoder_forward(cfg, params, tokens, part)
    else:
        logits = model.decoder_only_forward(cfg, params, tokens)
    return lm_loss(logits, shifted_targets(tokens), mask)


def analytic_grads(cfg, arch, params, tokens, mask, part):
    tape = {}
    if arch == DOUBLE_DECODER:
        logits = model.double_decoder_forward(cfg, params, tokens, part, tape=tape)
    else:
        logits = model.decoder_only_forward(cfg, params, tokens, tape=tape)
    loss, dlogits = lm_loss_and_grad(logits, shifted_targets(tokens), mask)
    return loss, model.backward(cfg, params, tape, dlogits)


def check_subset_fd(cfg, arch, part, seed, coords_per_tensor=6, eps=1e-4, rel=1e-5):
    params = init_params(cfg, arch, np.random.default_rng(seed), dtype=np.float64)
    tokens, mask = batch_for(cfg, seed=seed + 1)
    _, grads = analytic_grads(cfg, arch, params, tokens, mask, part)
    rng = np.random.default_rng(seed + 2)
    worst = 0.0
    for name, w in params.items():
        flat = w.ravel()
        g = grads[name].ravel()
        for ix in rng.choice(flat.size, size=min(coords_per_tensor, flat.size), replace=False):
            old = flat[ix]
            flat[ix] = old + eps
            up = loss_of(cfg, arch, params, tokens, mask, part)
            flat[ix] = old - eps
            down = loss_of(cfg, arch, params, tokens, mask, part)
            flat[ix] = old
            fd = (up - down) / (2 * eps)
            err = abs(fd - g[ix]) / max(abs(fd), abs(g[ix]), 1e-3)
            worst = max(worst, err)
            assert err < rel, f"{name}[{ix}]: fd={fd:.6e} analytic={g[ix]:.6e} err={err:.2e}"
    return worst


def check_directional_fd(cfg, arch, part, seed, eps=1e-6, rel=1e-6):
    """Whole-parameter-vector check: d/da loss(params + a*dir) vs <grads, dir>."""
    params = init_params(cfg, arch, np.random.default_rng(seed), dtype=np.float64)
    tokens, mask = batch_for(cfg, seed=seed + 1)
    _, grads = analytic_grads(cfg, arch, params, tokens, mask, part)
    rng = np.random.default_rng(seed + 3)
    direction = {k: rng.standard_normal(v.shape) for k, v in params.items()}
    plus = {k: v + eps * direction[k] for k, v in params.items()}
    minus = {k: v - eps * direction[k] for k, v in params.items()}
    fd = (loss_of(cfg, arch, plus, tokens, mask, part)
          - loss_of(cfg, arch, minus, tokens, mask, part)) / (2 * eps)
    an = sum(float(np.sum(grads[k] * direction[k])) for k in params)
    assert abs(fd - an) < rel * max(1.0, abs(an))


def test_double_decoder_gradients_subset_fd():
    part = validate((0, 3, 6, 8), 8)
    check_subset_fd(CFG, DOUBLE_DECODER, part, seed=0)


def test_double_decoder_gradients_directional_all_params():
    part = validate((0, 3, 6, 8), 8)
    check_directional_fd(CFG, DOUBLE_DECODER, part, seed=1)


def test_decoder_only_gradients_subset_fd():
    check_subset_fd(CFG, DECODER_ONLY, None, seed=2)


def test_decoder_only_gradients_directional_all_params():
    check_directional_fd(CFG, DECODER_ONLY, None, seed=3)


def test_gradients_with_empty_cross_rows():
    # first block has no cross keys: the merge backward must stay clean
    part = validate((0, 5, 8), 8)
    check_directional_fd(CFG, DOUBLE_DECODER, part, seed=4)


def test_gradients_single_block_partition():
    part = validate((0, 8), 8)
    check_directional_fd(CFG, DOUBLE_DECODER, part, seed=5)


def test_loss_gradient_matches_probability_identity():
    rng = np.random.default_rng(6)
    logits = rng.standard_normal((2, 5, 41))
    tokens = rng.integers(0, 41, size=(2, 5))
    mask = np.zeros((2, 5), dtype=bool)
    mask[:, :-1] = True
    loss, dlogits = lm_loss_and_grad(logits, shifted_targets(tokens), mask)
    # unsupervised rows carry no gradient; each supervised row sums to zero
    assert np.abs(dlogits[:, -1]).max() == 0.0
    assert np.abs(dlogits[:, :-1].sum(-1)).max() < 1e-12
    eps = 1e-6
    bumped = logits.copy()
    bumped[0, 1, 7] += eps
    fd = (lm_loss(bumped, shifted_targets(tokens), mask) - loss) / eps
    assert abs(fd - dlogits[0, 1, 7]) < 1e-5
