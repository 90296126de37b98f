from __future__ import annotations

import math

import numpy as np
import pytest

from conftest import TINY
from speedrl.errors import ConfigError, InputError, NumericalError
from speedrl.net import NULL_COND, NetConfig, backward, finite_diff_check, forward, init_params, param_shapes


def test_init_deterministic_and_seed_sensitive():
    a, b, c = init_params(TINY, 7), init_params(TINY, 7), init_params(TINY, 8)
    assert a.equals(b)
    assert not a.equals(c)


def test_init_biases_zero_and_shapes_from_config():
    p = init_params(TINY, 0)
    assert {k: v.shape for k, v in p.tensors.items()} == param_shapes(TINY)
    for name, arr in p.tensors.items():
        if name.rsplit(".", 1)[-1].startswith("b") or name.endswith("_b"):
            assert not arr.any(), name


@pytest.mark.parametrize("bad", [dict(vocab=1), dict(embed_dim=3), dict(num_layers=0), dict(grid_h=0),
                                 dict(cond_dropout_prob=1.0)])
def test_invalid_config_rejected(bad):
    with pytest.raises(ConfigError):
        init_params(NetConfig(**bad), 0)


def test_forward_shape_fully_masked_4x4_vocab8():
    cfg = NetConfig(grid_h=4, grid_w=4, vocab=8, embed_dim=8, num_layers=1)
    p = init_params(cfg, 0)
    logits, _ = forward(p, np.full((4, 4), cfg.mask_id), 0, 0.0)
    assert logits.shape == (1, 16, 8)
    assert np.isfinite(logits).all()


def test_forward_pure(tiny_params):
    rng = np.random.default_rng(0)
    tok = rng.integers(0, TINY.vocab + 1, size=(3, TINY.num_positions))
    a, _ = forward(tiny_params, tok, [0, 1, NULL_COND], [0.0, 0.5, 0.9])
    b, _ = forward(tiny_params, tok, [0, 1, NULL_COND], [0.0, 0.5, 0.9])
    assert np.array_equal(a, b)


def test_null_condition_ignores_other_rows(tiny_params):
    tok = np.full((1, TINY.num_positions), TINY.mask_id)
    a, _ = forward(tiny_params, tok, None, 0.3)
    t = dict(tiny_params.tensors)
    emb = t["cond_emb"].copy()
    emb[:-1] += 5.0  # every non-null row; the null row is last
    t["cond_emb"] = emb
    b, _ = forward(type(tiny_params)(TINY, t), tok, None, 0.3)
    assert np.array_equal(a, b)


def test_token_out_of_range(tiny_params):
    with pytest.raises(InputError):
        forward(tiny_params, np.full(TINY.num_positions, TINY.mask_id + 1), 0, 0.0)


def test_backward_linearity(tiny_params):
    rng = np.random.default_rng(1)
    tok = rng.integers(0, TINY.vocab + 1, size=(2, TINY.num_positions))
    logits, cache = forward(tiny_params, tok, [1, 2], [0.1, 0.7])
    zero = backward(cache, np.zeros_like(logits))
    assert all(not g.any() for g in zero.values())
    u1, u2 = rng.standard_normal(logits.shape), rng.standard_normal(logits.shape)
    g1, g2, g12 = backward(cache, u1), backward(cache, u2), backward(cache, u1 + u2)
    for k in g12:
        np.testing.assert_allclose(g12[k], g1[k] + g2[k], rtol=0, atol=1e-12)


def test_backward_shape_mismatch(tiny_params):
    logits, cache = forward(tiny_params, np.full(TINY.num_positions, TINY.mask_id), 0, 0.0)
    with pytest.raises(InputError):
        backward(cache, np.zeros(logits.shape[1:]))


def _weighted_logit_loss(tok, cond, sf, u):
    def fn(p):
        logits, cache = forward(p, tok, cond, sf)
        return float((u * logits).sum()), backward(cache, u)
    return fn


def test_finite_diff_sum_of_logits(tiny_params):
    tok = np.full((1, TINY.num_positions), TINY.mask_id)
    logits, _ = forward(tiny_params, tok, 0, 0.0)
    fn = _weighted_logit_loss(tok, 0, 0.0, np.ones_like(logits))
    # linear in the logits but not in the parameters below the head
    assert finite_diff_check(tiny_params, fn, num_coords=64) < 1e-4


def test_finite_diff_exact_on_linear_function(tiny_params):
    rng = np.random.default_rng(2)
    direction = {k: rng.choice([-1.0, 1.0], size=v.shape) for k, v in tiny_params.tensors.items()}

    def linear(p):
        val = math.fsum(float(x) for k in direction for x in (direction[k] * p.tensors[k]).ravel())
        return val, direction

    assert finite_diff_check(tiny_params, linear, num_coords=64) < 1e-9


def test_finite_diff_random_instance(tiny_params):
    rng = np.random.default_rng(3)
    tok = rng.integers(0, TINY.vocab + 1, size=(2, TINY.num_positions))
    logits, _ = forward(tiny_params, tok, [0, NULL_COND], [0.25, 0.5])
    fn = _weighted_logit_loss(tok, [0, NULL_COND], [0.25, 0.5], rng.standard_normal(logits.shape))
    assert finite_diff_check(tiny_params, fn, num_coords=200) < 1e-4


def test_finite_diff_zero_step(tiny_params):
    with pytest.raises(NumericalError):
        finite_diff_check(tiny_params, lambda p: (0.0, {}), h=0.0)
