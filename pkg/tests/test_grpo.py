from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import TINY, random_batch
from speedrl.conditions import ConditionRef
from speedrl.errors import InputError
from speedrl.grpo import (GroupBatch, TrainConfig, TrainerState, clip_grad_norm, group_advantages, kl_exact,
                          kl_k3, merged_loss, ratio_objective_grad, speedrl_loss, speedrl_terms, train_step)
from speedrl.net import NetConfig, PolicyParams, init_params
from speedrl.rewards import composite_reward
from speedrl.sampler import SampleConfig, sample_trajectory, trajectory_logprob


def uniform_params(cfg: NetConfig) -> PolicyParams:
    p = init_params(cfg, 0)
    t = dict(p.tensors)
    t["head_w"] = np.zeros_like(t["head_w"])
    t["head_b"] = np.zeros_like(t["head_b"])
    return PolicyParams(cfg, t)


def single_token_batch(adv: float) -> tuple[PolicyParams, GroupBatch]:
    cfg = NetConfig(grid_h=1, grid_w=1, vocab=2, embed_dim=4, num_layers=1)
    p = uniform_params(cfg)
    tr = sample_trajectory(p, ConditionRef(0, (0,)), SampleConfig(nfe=1))
    return p, GroupBatch(tr.cond, [tr], [composite_reward(0.0, 1, 0.0)], np.array([adv]))


# ------------------------------------------------------------------ advantages


def test_advantages_examples():
    np.testing.assert_allclose(group_advantages([1, 2, 3], 0.0), [-1.2247448714, 0, 1.2247448714], atol=1e-9)
    assert not group_advantages([0.4] * 5).any()
    with pytest.raises(InputError):
        group_advantages([1.0])


@given(st.lists(st.floats(-5, 5), min_size=2, max_size=12), st.floats(-10, 10), st.floats(0.1, 10))
def test_advantages_invariances(r, shift, scale):
    r = np.asarray(r)
    if r.std() < 1e-3:
        return
    a = group_advantages(r, 0.0)
    assert abs(a.mean()) <= 1e-10 and abs(a.std() - 1) <= 1e-6
    np.testing.assert_allclose(group_advantages(r + shift, 0.0), a, atol=1e-9)
    np.testing.assert_allclose(group_advantages(r * scale, 0.0), a, atol=1e-9)


# ------------------------------------------------------------------ KL estimators


def test_k3_examples():
    assert kl_k3(-1.3, -1.3) == 0.0
    assert kl_k3(0.0, math.log(2)) == pytest.approx(2 - math.log(2) - 1, abs=1e-15)
    assert kl_k3(0.0, math.log(0.5)) == pytest.approx(0.5 + math.log(2) - 1, abs=1e-15)


def test_exact_examples():
    p = np.array([0.2, 0.3, 0.5])
    assert abs(kl_exact(p, np.log(p))) <= 1e-12
    assert kl_exact([0.5, 0.5], np.log([0.25, 0.75])) == pytest.approx(0.5 * math.log(2) + 0.5 * math.log(2 / 3),
                                                                      abs=1e-14)
    q = np.array([0.9, 0.05, 0.05])
    assert kl_exact([1.0, 0.0, 0.0], np.log(q)) == pytest.approx(math.log(1 / 0.9), abs=1e-14)
    with pytest.raises(InputError):
        kl_exact([0.5, 0.6], np.log([0.5, 0.5]))


@given(st.lists(st.floats(0.01, 1), min_size=2, max_size=8), st.lists(st.floats(0.01, 1), min_size=2, max_size=8))
def test_kl_nonnegative(a, b):
    n = min(len(a), len(b))
    p, q = np.array(a[:n]) / sum(a[:n]), np.array(b[:n]) / sum(b[:n])
    assert kl_exact(p, np.log(q)) >= -1e-15
    assert (kl_k3(np.log(q), np.log(p)) >= 0).all()


# ------------------------------------------------------------------ losses


def test_single_token_advantage_loss():
    p, batch = single_token_batch(1.0)
    loss, _ = speedrl_loss(batch, p, p, TrainConfig(beta=0.0))
    assert loss == pytest.approx(-math.log(0.5), abs=1e-12)


def test_no_signal_gives_zero():
    p = init_params(TINY, 2)
    batch = random_batch(p, 1)
    batch.advantages = np.zeros(len(batch.trajectories))
    loss, grads = speedrl_loss(batch, p, p, TrainConfig(beta=0.0))
    assert loss == 0.0 and all(not g.any() for g in grads.values())


def test_kl_term_is_cross_entropy_of_uniform():
    p, batch = single_token_batch(0.0)
    terms = speedrl_terms(batch, p, p, TrainConfig(beta=1.0))
    assert terms.kl_loss == pytest.approx(math.log(2), abs=1e-12)
    assert terms.kl_estimate == pytest.approx(0.0, abs=1e-12)


@pytest.mark.parametrize("per_token", [False, True])
def test_merged_matches_two_term(perturbed_pair, per_token):
    p, ref = perturbed_pair
    batch = random_batch(p, 4, cfg_weight=1.5)
    cfg = TrainConfig(beta=0.3, per_token_likelihood=per_token)
    _, g1 = speedrl_loss(batch, p, ref, cfg)
    _, g2 = merged_loss(batch, p, ref, cfg)
    assert max(np.abs(g1[k] - g2[k]).max() for k in g1) <= 1e-10


def test_merged_linearity(perturbed_pair):
    p, ref = perturbed_pair
    batch = random_batch(p, 5)
    terms = speedrl_terms(batch, p, ref, TrainConfig(beta=0.0))
    assert merged_loss(batch, p, ref, TrainConfig(beta=0.0))[0] == pytest.approx(terms.adv_loss, abs=1e-10)
    batch.advantages = np.zeros(len(batch.trajectories))
    terms = speedrl_terms(batch, p, ref, TrainConfig(beta=0.7))
    assert merged_loss(batch, p, ref, TrainConfig(beta=0.7))[0] == pytest.approx(terms.kl_loss, abs=1e-10)


def test_merged_rejects_k3(tiny_params):
    batch = random_batch(tiny_params, 0)
    with pytest.raises(InputError):
        merged_loss(batch, tiny_params, tiny_params, TrainConfig(kl_estimator="k3_sampled"))


def test_online_ratio_gradient_identity(tiny_params):
    batch = random_batch(tiny_params, 6)
    cfg = TrainConfig(beta=0.0)
    adv = speedrl_terms(batch, tiny_params, tiny_params, cfg).adv_grads
    g = ratio_objective_grad(batch, tiny_params, tiny_params.copy(), cfg)
    assert max(np.abs(g[k] + adv[k]).max() for k in g) <= 1e-8


def test_ratio_zero_advantages(tiny_params, perturbed_pair):
    p, old = perturbed_pair
    batch = random_batch(p, 2)
    batch.advantages = np.zeros(len(batch.trajectories))
    g = ratio_objective_grad(batch, p, old, TrainConfig())
    assert all(not v.any() for v in g.values())


def test_ratio_clip_blocks_gradient(perturbed_pair):
    p, old = perturbed_pair
    batch = random_batch(p, 8, group_size=6)
    ratios = np.array([math.exp(trajectory_logprob(p, t) - trajectory_logprob(old, t)) for t in batch.trajectories])
    eps = 0.2
    outside = (ratios > 1 + eps) | (ratios < 1 - eps)
    assert outside.any(), ratios
    # choose each sign so every out-of-range sample sits on its clipped side
    batch.advantages = np.where(ratios > 1 + eps, 1.0, np.where(ratios < 1 - eps, -1.0, 0.0))
    g = ratio_objective_grad(batch, p, old, TrainConfig(clip_eps=eps))
    assert all(not v.any() for v in g.values())


# ------------------------------------------------------------------ training step


def _state(p, cfg):
    return TrainerState(p.copy(), p, cfg)


def test_zero_signal_step_leaves_params(tiny_params):
    batch = random_batch(tiny_params, 3)
    batch.advantages = np.zeros(len(batch.trajectories))
    st_, _ = train_step(_state(tiny_params, TrainConfig(beta=0.0)), batch)
    assert st_.params.equals(tiny_params.copy()) or all(
        np.array_equal(st_.params.tensors[k], tiny_params.tensors[k]) for k in tiny_params.tensors)


@pytest.mark.parametrize("iters", [1, 3])
def test_positive_advantage_raises_logprob(tiny_params, iters):
    batch = random_batch(tiny_params, 9, group_size=2)
    batch.advantages = np.array([1.0, 0.0])
    tr = batch.trajectories[0]
    before = trajectory_logprob(tiny_params, tr)
    st_, m = train_step(_state(tiny_params, TrainConfig(beta=0.0, learning_rate=1e-3,
                                                        num_iterations_per_batch=iters)), batch)
    assert trajectory_logprob(st_.params, tr) > before
    assert set(m.as_dict()) >= {"step", "mean_reward", "std_reward", "mean_nfe", "loss", "kl", "accept_rate",
                                "resamples", "wall_ms"}


def test_train_step_deterministic(tiny_params):
    cfg = TrainConfig(num_iterations_per_batch=2)
    batch = random_batch(tiny_params, 10)
    a, ma = train_step(_state(tiny_params, cfg), batch)
    b, mb = train_step(_state(tiny_params, cfg), batch)
    assert a.params.equals(b.params)
    ma.wall_ms = mb.wall_ms = 0.0
    assert ma.as_dict() == mb.as_dict()


def test_grad_norm_clip():
    g = {"a": np.array([3.0, 4.0])}
    assert clip_grad_norm(g, 0.0) is g
    np.testing.assert_allclose(clip_grad_norm(g, 1.0)["a"], [0.6, 0.8])
    assert clip_grad_norm(g, 10.0) is g


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 1000))
def test_k3_loss_runs(seed):
    p = init_params(TINY, 1)
    batch = random_batch(p, seed)
    terms = speedrl_terms(batch, p, p, TrainConfig(kl_estimator="k3_sampled", beta=0.5))
    assert math.isfinite(terms.loss)
    assert terms.kl_estimate == pytest.approx(0.0, abs=1e-12)
