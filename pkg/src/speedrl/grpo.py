"""Group-relative policy optimisation with the cross-entropy KL regulariser.

Loss conventions (all averaged over the G members of a group):

* advantage term: sum over finalized (step, position) of ``A_i * -log p(token)``
* exact KL term:  ``beta * sum`` over masked (step, position) of
  ``CE(p_ref, p_theta) = -sum_j p_ref(j) log p_theta(j)``
* k3 KL term:     ``beta * sum`` over finalized tokens of ``k3(log p_theta, log p_ref)``

With ``per_token_likelihood`` each step's contributions are divided by that
step's finalized count (advantage and k3 terms) or masked count (exact term).
Gradients are taken with respect to the guided, temperature-scaled logits and
pushed through :func:`speedrl.sampler.policy_backward`.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .conditions import ConditionRef
from .errors import ConfigError, DivergenceError, InputError
from .filtering import FilterState
from .net import ParamGrads, PolicyParams, add_grads
from .rewards import RewardRecord, composite_reward
from .sampler import PolicyEval, ReplayArrays, SampleConfig, Trajectory, policy_backward, policy_eval, \
    replay_arrays, sample_group

KL_ESTIMATORS = ("exact_ce", "k3_sampled")


@dataclass(frozen=True)
class TrainConfig:
    group_size: int = 8
    nfe_choices: tuple[int, ...] = (4, 8, 12)
    beta: float = 0.05
    alpha: float = 0.2
    clip_eps: float = 0.2
    num_iterations_per_batch: int = 1
    per_token_likelihood: bool = False
    kl_estimator: str = "exact_ce"
    learning_rate: float = 1e-3
    max_grad_norm: float = 0.0
    adv_std_floor: float = 1e-6
    total_steps: int = 2000

    def validate(self, num_positions: int | None = None) -> "TrainConfig":
        if self.group_size < 2:
            raise ConfigError(f"group_size must be >= 2, got {self.group_size}")
        if not self.nfe_choices:
            raise ConfigError("nfe_choices must be non-empty")
        if any(n < 1 for n in self.nfe_choices):
            raise ConfigError("every nfe choice must be >= 1")
        if num_positions is not None and max(self.nfe_choices) > num_positions:
            raise ConfigError(f"nfe choice {max(self.nfe_choices)} exceeds grid size {num_positions}")
        if self.beta < 0 or self.alpha < 0:
            raise ConfigError("beta and alpha must be >= 0")
        if not self.clip_eps > 0:
            raise ConfigError("clip_eps must be > 0")
        if self.num_iterations_per_batch < 1:
            raise ConfigError("num_iterations_per_batch must be >= 1")
        if self.kl_estimator not in KL_ESTIMATORS:
            raise ConfigError(f"kl_estimator must be one of {KL_ESTIMATORS}, got {self.kl_estimator!r}")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be > 0")
        if self.max_grad_norm < 0:
            raise ConfigError("max_grad_norm must be >= 0 (0 disables clipping)")
        if not self.adv_std_floor > 0:
            raise ConfigError("adv_std_floor must be > 0")
        if self.total_steps < 0:
            raise ConfigError("total_steps must be >= 0")
        return self


@dataclass
class GroupBatch:
    cond: ConditionRef
    trajectories: list[Trajectory]
    rewards: list[RewardRecord]
    advantages: np.ndarray

    def __post_init__(self):
        self.advantages = np.asarray(self.advantages, dtype=np.float64)
        if not len(self.trajectories) == len(self.rewards) == len(self.advantages):
            raise InputError("trajectories, rewards and advantages must have equal length")


def group_advantages(totals: Sequence[float], floor: float = 1e-6) -> np.ndarray:
    """``(r - mean) / (population_std + floor)``."""
    r = np.asarray(totals, dtype=np.float64)
    if r.size < 2:
        raise InputError("a group needs at least 2 rewards")
    return (r - r.mean()) / (r.std() + floor)


def kl_k3(logp_theta_x, logp_ref_x):
    """Sampled-token estimate ``ratio - log ratio - 1`` with ratio = p_ref / p_theta."""
    d = np.asarray(logp_ref_x, dtype=np.float64) - np.asarray(logp_theta_x, dtype=np.float64)
    out = np.expm1(d) - d
    return float(out) if out.ndim == 0 else out


def kl_exact(p_ref, logp_theta) -> float | np.ndarray:
    """``H(p_ref, p_theta) - H(p_ref)`` over the last axis, with 0 log 0 = 0."""
    p = np.asarray(p_ref, dtype=np.float64)
    lq = np.asarray(logp_theta, dtype=np.float64)
    if p.shape != lq.shape:
        raise InputError(f"shape mismatch {p.shape} vs {lq.shape}")
    if np.any(p < 0) or np.any(np.abs(p.sum(axis=-1) - 1.0) > 1e-9):
        raise InputError("p_ref must be a probability vector")
    lse = np.logaddexp.reduce(lq, axis=-1)
    if np.any(np.abs(lse) > 1e-9):
        raise InputError("logp_theta must be log-normalized")
    pos = p > 0
    logp = np.log(np.where(pos, p, 1.0))
    terms = np.where(pos, p * (logp - np.where(pos, lq, 0.0)), 0.0)
    out = terms.sum(axis=-1)
    return float(out) if out.ndim == 0 else out


@dataclass
class PreparedBatch:
    """A group replayed once: stacked network inputs, reference log-probs and weights."""

    batch: GroupBatch
    ra: ReplayArrays
    ref_logp: np.ndarray
    adv_w: np.ndarray   # (N, L) weight of -log p(token) at finalized positions
    kl_w: np.ndarray    # (N, L) weight of the KL term per position
    tok_w: np.ndarray   # (N, L) 1/G or 1/(G n_k) at finalized positions (ratio objective)
    cfg: TrainConfig


def prepare(batch: GroupBatch, ref_params: PolicyParams, cfg: TrainConfig) -> PreparedBatch:
    G = len(batch.trajectories)
    if G == 0:
        raise InputError("empty group")
    ra = replay_arrays(batch.trajectories, ref_params.cfg.mask_id)
    if ra.tokens.shape[1] != ref_params.cfg.num_positions:
        raise InputError("trajectory grid size does not match the network")
    ref_logp = policy_eval(ref_params, ra.tokens, ra.cond, ra.step_frac, ra.w, ra.temperature).logp
    fin = ra.finalized.astype(np.float64)
    msk = ra.masked.astype(np.float64)
    A = batch.advantages[ra.traj_index][:, None]
    if cfg.per_token_likelihood:
        tok_w = fin / (G * fin.sum(axis=1, keepdims=True))
        msk_w = msk / (G * msk.sum(axis=1, keepdims=True))
    else:
        tok_w = fin / G
        msk_w = msk / G
    kl_w = cfg.beta * (msk_w if cfg.kl_estimator == "exact_ce" else tok_w)
    return PreparedBatch(batch, ra, ref_logp, A * tok_w, kl_w, tok_w, cfg)


def _as_prepared(batch, ref_params, cfg) -> PreparedBatch:
    if isinstance(batch, PreparedBatch):
        return batch
    cfg.validate()
    return prepare(batch, ref_params, cfg)


def _onehot(tokens: np.ndarray, V: int) -> np.ndarray:
    oh = np.zeros(tokens.shape + (V,))
    np.put_along_axis(oh, tokens[..., None], 1.0, axis=-1)
    return oh


def _token_logp(logp: np.ndarray, tokens: np.ndarray) -> np.ndarray:
    return np.take_along_axis(logp, tokens[..., None], axis=-1)[..., 0]


@dataclass
class LossTerms:
    loss: float
    adv_loss: float
    kl_loss: float
    kl_estimate: float
    grads: ParamGrads | None = None
    adv_grads: ParamGrads | None = None
    kl_grads: ParamGrads | None = None


def _advantage_term(pb: PreparedBatch, ev: PolicyEval, with_grad: bool):
    lp_tok = _token_logp(ev.logp, pb.ra.final)
    val = float(-(pb.adv_w * lp_tok).sum())
    if not with_grad:
        return val, None
    p = np.exp(ev.logp)
    d = pb.adv_w[..., None] * (p - _onehot(pb.ra.final, p.shape[-1]))
    return val, d


def _kl_term(pb: PreparedBatch, ev: PolicyEval, with_grad: bool):
    """Value, per-element estimate, and d/d(scaled logits) of the beta-weighted KL term."""
    if pb.cfg.kl_estimator == "exact_ce":
        p_ref = np.exp(pb.ref_logp)
        ce = -(p_ref * ev.logp).sum(axis=-1)
        val = float((pb.kl_w * ce).sum())
        kl_pos = (p_ref * (pb.ref_logp - ev.logp)).sum(axis=-1)
        est = float(kl_pos[pb.ra.masked].mean())
        if not with_grad:
            return val, est, None
        p = np.exp(ev.logp)
        return val, est, pb.kl_w[..., None] * (p - p_ref)
    lp = _token_logp(ev.logp, pb.ra.final)
    lr = _token_logp(pb.ref_logp, pb.ra.final)
    k3 = kl_k3(lp, lr)
    val = float((pb.kl_w * k3).sum())
    est = float(k3[pb.ra.finalized].mean())
    if not with_grad:
        return val, est, None
    p = np.exp(ev.logp)
    coef = pb.kl_w * (-np.expm1(lr - lp))
    return val, est, coef[..., None] * (_onehot(pb.ra.final, p.shape[-1]) - p)


def _eval(params: PolicyParams, pb: PreparedBatch) -> PolicyEval:
    ra = pb.ra
    return policy_eval(params, ra.tokens, ra.cond, ra.step_frac, ra.w, ra.temperature)


def speedrl_terms(batch, params: PolicyParams, ref_params: PolicyParams, cfg: TrainConfig,
                  with_grad: bool = True) -> LossTerms:
    pb = _as_prepared(batch, ref_params, cfg)
    ev = _eval(params, pb)
    adv_val, d_adv = _advantage_term(pb, ev, with_grad)
    kl_val, est, d_kl = _kl_term(pb, ev, with_grad)
    terms = LossTerms(adv_val + kl_val, adv_val, kl_val, est)
    if with_grad:
        terms.adv_grads = policy_backward(ev, d_adv)
        terms.kl_grads = policy_backward(ev, d_kl)
        terms.grads = add_grads(terms.adv_grads, terms.kl_grads)
    return terms


def speedrl_loss(batch, params: PolicyParams, ref_params: PolicyParams,
                 cfg: TrainConfig) -> tuple[float, ParamGrads]:
    """Two-term loss: advantage cross-entropy plus beta times the KL term.

    Each term is backpropagated separately and the gradients summed.
    """
    t = speedrl_terms(batch, params, ref_params, cfg)
    return t.loss, t.grads


def merged_loss(batch, params: PolicyParams, ref_params: PolicyParams,
                cfg: TrainConfig, with_grad: bool = True) -> tuple[float, ParamGrads | None]:
    """Single cross-entropy against the unnormalised target ``A * onehot + beta * p_ref``."""
    pb = _as_prepared(batch, ref_params, cfg)
    if pb.cfg.kl_estimator != "exact_ce":
        raise InputError("the merged form only exists for the exact cross-entropy KL")
    ev = _eval(params, pb)
    V = ev.logp.shape[-1]
    target = pb.adv_w[..., None] * _onehot(pb.ra.final, V) + pb.kl_w[..., None] * np.exp(pb.ref_logp)
    loss = float(-(target * ev.logp).sum())
    if not with_grad:
        return loss, None
    d = target.sum(axis=-1, keepdims=True) * np.exp(ev.logp) - target
    return loss, policy_backward(ev, d)


def _ratio_objective(pb: PreparedBatch, ev: PolicyEval, lp_old: np.ndarray, with_grad: bool):
    """Clipped surrogate ``mean_i min(A r, A clip(r))`` and its gradient wrt scaled logits."""
    cfg = pb.cfg
    ra = pb.ra
    eps = cfg.clip_eps
    A_row = pb.batch.advantages[ra.traj_index][:, None]
    lp = _token_logp(ev.logp, ra.final)
    fin = ra.finalized
    if cfg.per_token_likelihood:
        r = np.where(fin, np.exp(np.where(fin, lp - lp_old, 0.0)), 0.0)
        unclipped = ~(((A_row > 0) & (r > 1 + eps)) | ((A_row < 0) & (r < 1 - eps)))
        surrogate = np.minimum(A_row * r, A_row * np.clip(r, 1 - eps, 1 + eps))
        val = float((pb.tok_w * surrogate).sum())
        coef = pb.tok_w * A_row * r * unclipped
    else:
        G = len(pb.batch.trajectories)
        delta = np.zeros(G)
        np.add.at(delta, ra.traj_index, np.where(fin, lp - lp_old, 0.0).sum(axis=1))
        r_i = np.exp(delta)
        A = pb.batch.advantages
        unclipped = ~(((A > 0) & (r_i > 1 + eps)) | ((A < 0) & (r_i < 1 - eps)))
        val = float(np.minimum(A * r_i, A * np.clip(r_i, 1 - eps, 1 + eps)).mean())
        coef = pb.tok_w * (A * r_i * unclipped)[ra.traj_index][:, None]
    if not with_grad:
        return val, None
    p = np.exp(ev.logp)
    return val, coef[..., None] * (_onehot(ra.final, p.shape[-1]) - p)


def ratio_objective_grad(batch, params: PolicyParams, old_params: PolicyParams, cfg: TrainConfig,
                         ref_params: PolicyParams | None = None) -> ParamGrads:
    """Gradient (ascent direction) of the clipped group-mean ratio objective.

    The behaviour log-probs are computed from ``old_params`` and treated as
    constants, so at ``old_params == params`` every ratio is exactly 1.
    """
    pb = _as_prepared(batch, ref_params or old_params, cfg)
    lp_old = _token_logp(_eval(old_params, pb).logp, pb.ra.final)
    ev = _eval(params, pb)
    _, d = _ratio_objective(pb, ev, lp_old, True)
    return policy_backward(ev, d)


@dataclass
class StepMetrics:
    step: int
    mean_reward: float
    std_reward: float
    mean_nfe: float
    loss: float
    kl: float
    accept_rate: float = 1.0
    resamples: int = 0
    wall_ms: float = 0.0
    mean_quality: float = 0.0
    mean_speed: float = 0.0
    sigma_batch: float | None = None
    tau: float | None = None
    attempts: int = 0
    accepted: bool = True

    def as_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class TrainerState:
    params: PolicyParams
    ref_params: PolicyParams
    cfg: TrainConfig
    filter_state: FilterState = field(default_factory=FilterState)
    step: int = 0
    generated: int = 0
    accepted: int = 0


def _check_finite(value: float, grads: ParamGrads, step: int) -> None:
    if not math.isfinite(value) or not all(np.isfinite(g).all() for g in grads.values()):
        raise DivergenceError(f"non-finite loss or gradient at step {step}", step=step)


def clip_grad_norm(grads: ParamGrads, max_norm: float) -> ParamGrads:
    """Rescale so the global L2 norm is at most ``max_norm`` (0 disables)."""
    if max_norm <= 0:
        return grads
    norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if norm <= max_norm:
        return grads
    return {k: g * (max_norm / norm) for k, g in grads.items()}


def train_step(state: TrainerState, group: GroupBatch) -> tuple[TrainerState, StepMetrics]:
    """``num_iterations_per_batch`` plain gradient-descent updates on one group.

    The first iteration is on-policy and uses :func:`speedrl_loss`; later
    iterations use the clipped ratio objective against the snapshot that
    generated the group, plus the KL term.
    """
    cfg = state.cfg
    t0 = time.perf_counter()
    pb = prepare(group, state.ref_params, cfg)
    params = state.params
    lp_old = None
    first_loss = first_kl = math.nan
    for it in range(cfg.num_iterations_per_batch):
        if it == 0:
            terms = speedrl_terms(pb, params, state.ref_params, cfg)
            loss, grads = terms.loss, terms.grads
            first_loss, first_kl = loss, terms.kl_estimate
            if cfg.num_iterations_per_batch > 1:
                lp_old = _token_logp(_eval(params, pb).logp, pb.ra.final)
        else:
            ev = _eval(params, pb)
            obj, d_obj = _ratio_objective(pb, ev, lp_old, True)
            kl_val, _, d_kl = _kl_term(pb, ev, True)
            loss = kl_val - obj
            grads = policy_backward(ev, d_kl - d_obj)
        _check_finite(loss, grads, state.step)
        grads = clip_grad_norm(grads, cfg.max_grad_norm)
        params = params.apply_update(grads, cfg.learning_rate)
        if not params.is_finite():
            raise DivergenceError(f"non-finite parameters after update at step {state.step}", step=state.step)
    totals = np.array([r.total for r in group.rewards])
    metrics = StepMetrics(
        step=state.step,
        mean_reward=float(totals.mean()),
        std_reward=float(totals.std()),
        mean_nfe=float(np.mean([r.nfe for r in group.rewards])),
        loss=first_loss,
        kl=first_kl,
        wall_ms=(time.perf_counter() - t0) * 1e3,
        mean_quality=float(np.mean([r.base for r in group.rewards])),
        mean_speed=float(np.mean([8.0 / r.nfe for r in group.rewards])),
    )
    return replace(state, params=params, step=state.step + 1), metrics


def generate_group(params: PolicyParams, cond: ConditionRef, cfg: TrainConfig, sample: SampleConfig,
                   stream: Sequence[int], score: Callable[[np.ndarray, ConditionRef], float],
                   group_id: int = 0) -> tuple[list[Trajectory], list[RewardRecord]]:
    """Sample G trajectories with per-member step counts drawn from ``nfe_choices``."""
    rng = np.random.default_rng([*stream, 0xF00D])
    nfes = rng.choice(np.asarray(cfg.nfe_choices), size=cfg.group_size)
    scfgs = [replace(sample, nfe=int(n), rng_stream=(*stream, i)) for i, n in enumerate(nfes)]
    trajs = sample_group(params, cond, scfgs)
    rewards = [composite_reward(score(t.final_grid, cond), t.nfe, cfg.alpha, group_id) for t in trajs]
    return trajs, rewards
