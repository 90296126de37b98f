"""Iterative masked-token sampling with a confidence schedule and CFG.

The sampling policy at each step is ``softmax(guided_logits / temperature)``
restricted to the still-masked positions. The same distribution is used when
trajectories are replayed for likelihoods, so the RL ratio and KL terms are
defined under guidance and temperature.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .conditions import ConditionRef
from .errors import ConfigError, InputError
from .net import NULL_COND, ForwardCache, PolicyParams, backward, forward

SCHEDULES = ("cosine", "linear")


@dataclass(frozen=True)
class SampleConfig:
    nfe: int
    cfg_weight: float = 1.0
    temperature: float = 1.0
    schedule: str = "cosine"
    rng_stream: tuple[int, ...] = (0,)

    def validate(self, num_positions: int) -> "SampleConfig":
        if not 1 <= self.nfe <= num_positions:
            raise ConfigError(f"nfe must be in [1, {num_positions}], got {self.nfe}")
        if not self.cfg_weight >= 0 or not math.isfinite(self.cfg_weight):
            raise ConfigError(f"cfg_weight must be finite and >= 0, got {self.cfg_weight}")
        if not self.temperature > 0 or not math.isfinite(self.temperature):
            raise ConfigError(f"temperature must be finite and > 0, got {self.temperature}")
        if self.schedule not in SCHEDULES:
            raise ConfigError(f"schedule must be one of {SCHEDULES}, got {self.schedule!r}")
        return self


@dataclass
class Step:
    mask_before: np.ndarray  # sorted flat positions still masked when the step starts
    positions: np.ndarray    # flat positions finalized at this step
    tokens: np.ndarray       # tokens committed at ``positions``
    step_frac: float


@dataclass
class Trajectory:
    cond: ConditionRef
    nfe: int
    steps: list[Step]
    final_grid: np.ndarray
    logprob_tokens: np.ndarray
    cfg_weight: float = 1.0
    temperature: float = 1.0
    schedule: str = "cosine"
    logprob_seq: float = field(init=False)

    def __post_init__(self):
        self.logprob_seq = float(self.logprob_tokens.sum())

    @property
    def num_positions(self) -> int:
        return self.final_grid.size

    def grid_at(self, k: int, mask_id: int) -> np.ndarray:
        """Flat network input at step ``k``."""
        g = self.final_grid.reshape(-1).copy()
        g[self.steps[k].mask_before] = mask_id
        return g


def mask_schedule(nfe: int, L: int, kind: str = "cosine") -> list[int]:
    """Tokens unmasked at each step; every count >= 1 and they sum to L.

    Cosine: masked-after-step-k = floor(L * cos(pi*k / (2*nfe))), then clamped
    minimally so the masked count strictly decreases to 0.
    """
    if not 1 <= nfe <= L:
        raise ConfigError(f"nfe must be in [1, L={L}], got {nfe}")
    if kind == "cosine":
        masked = [L] + [math.floor(L * math.cos(math.pi * k / (2 * nfe))) for k in range(1, nfe)] + [0]
    elif kind == "linear":
        masked = [L * (nfe - k) // nfe for k in range(nfe + 1)]
    else:
        raise ConfigError(f"unknown schedule {kind!r}")
    for k in range(1, nfe):
        masked[k] = min(masked[k], masked[k - 1] - 1)
    for k in range(nfe - 1, 0, -1):
        masked[k] = max(masked[k], masked[k + 1] + 1)
    return [masked[k] - masked[k + 1] for k in range(nfe)]


def guided_logits(cond_logits: np.ndarray, uncond_logits: np.ndarray, w: float) -> np.ndarray:
    """``uncond + w * (cond - uncond)``; w = 1 and w = 0 return the exact inputs."""
    c = np.asarray(cond_logits, dtype=np.float64)
    u = np.asarray(uncond_logits, dtype=np.float64)
    if c.shape != u.shape:
        raise InputError(f"logit shapes differ: {c.shape} vs {u.shape}")
    if w == 1.0:
        return c.copy()
    if w == 0.0:
        return u.copy()
    return u + w * (c - u)


def log_softmax(x: np.ndarray) -> np.ndarray:
    m = x.max(axis=-1, keepdims=True)
    z = x - m
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


@dataclass
class PolicyEval:
    """Guided, temperature-scaled log-probabilities plus what backward needs."""

    logp: np.ndarray
    cache: ForwardCache
    w: float
    temperature: float
    branches: tuple[bool, bool]  # (conditional evaluated, unconditional evaluated)


def policy_eval(params: PolicyParams, tokens: np.ndarray, cond: np.ndarray, step_frac: np.ndarray,
                w: float, temperature: float) -> PolicyEval:
    """Evaluate the sampling policy on a batch; CFG branches share one forward."""
    tokens = np.asarray(tokens)
    cond = np.asarray(cond, dtype=np.int64)
    step_frac = np.asarray(step_frac, dtype=np.float64)
    need_c, need_u = w != 0.0, w != 1.0
    if need_c and need_u:
        B = tokens.shape[0]
        logits, cache = forward(params, np.concatenate([tokens, tokens]),
                                np.concatenate([cond, np.full(B, NULL_COND)]),
                                np.concatenate([step_frac, step_frac]))
        g = guided_logits(logits[:B], logits[B:], w)
    elif need_c:
        g, cache = forward(params, tokens, cond, step_frac)
    else:
        g, cache = forward(params, tokens, np.full(tokens.shape[0], NULL_COND), step_frac)
    return PolicyEval(log_softmax(g / temperature), cache, w, temperature, (need_c, need_u))


def policy_backward(ev: PolicyEval, dscaled: np.ndarray):
    """Backpropagate a gradient w.r.t. the scaled guided logits ``g / T``."""
    d = dscaled / ev.temperature
    need_c, need_u = ev.branches
    if need_c and need_u:
        upstream = np.concatenate([ev.w * d, (1.0 - ev.w) * d])
    else:
        upstream = d
    return backward(ev.cache, upstream)


def _rng(stream: Sequence[int]) -> np.random.Generator:
    return np.random.default_rng([int(s) for s in stream])


def sample_group(params: PolicyParams, cond: ConditionRef, scfgs: Sequence[SampleConfig]) -> list[Trajectory]:
    """Sample one trajectory per config, stepping all of them in lockstep.

    Each member draws from its own ``rng_stream``; members may have different
    step counts and simply drop out of the batch once finished.
    """
    cfg = params.cfg
    L, V, MASK = cfg.num_positions, cfg.vocab, cfg.mask_id
    for s in scfgs:
        s.validate(L)
    if len({(s.cfg_weight, s.temperature) for s in scfgs}) > 1:
        raise InputError("members of one group must share cfg_weight and temperature")
    if not scfgs:
        return []
    w, T = scfgs[0].cfg_weight, scfgs[0].temperature
    n = len(scfgs)
    grids = np.full((n, L), MASK, dtype=np.int64)
    sched = [mask_schedule(s.nfe, L, s.schedule) for s in scfgs]
    rngs = [_rng(s.rng_stream) for s in scfgs]
    steps: list[list[Step]] = [[] for _ in range(n)]
    logps: list[list[np.ndarray]] = [[] for _ in range(n)]
    for k in range(max(s.nfe for s in scfgs)):
        active = [i for i in range(n) if k < scfgs[i].nfe]
        sf = np.array([k / scfgs[i].nfe for i in active])
        ev = policy_eval(params, grids[active], np.full(len(active), cond.index), sf, w, T)
        probs = np.exp(ev.logp)
        for row, i in enumerate(active):
            masked = np.flatnonzero(grids[i] == MASK)
            u = rngs[i].random(L)
            cum = np.cumsum(probs[row], axis=-1)
            drawn = np.minimum((cum < u[:, None]).sum(axis=-1), V - 1)
            conf = probs[row, masked, drawn[masked]]
            order = np.argsort(-conf, kind="stable")[: sched[i][k]]
            pos = masked[order]
            tok = drawn[pos]
            steps[i].append(Step(masked, pos, tok, float(sf[row])))
            logps[i].append(ev.logp[row, pos, tok])
            grids[i, pos] = tok
    out = []
    for i, s in enumerate(scfgs):
        out.append(Trajectory(cond, s.nfe, steps[i], grids[i].reshape(cfg.grid_h, cfg.grid_w),
                              np.concatenate(logps[i]), w, T, s.schedule))
    return out


def sample_trajectory(params: PolicyParams, cond: ConditionRef, scfg: SampleConfig) -> Trajectory:
    return sample_group(params, cond, [scfg])[0]


@dataclass
class ReplayArrays:
    """All (trajectory, step) network inputs of a list of trajectories, stacked.

    Row r replays step ``step_index[r]`` of trajectory ``traj_index[r]``.
    ``final`` holds each row's final-grid tokens, which are the targets at the
    row's finalized positions.
    """

    tokens: np.ndarray
    cond: np.ndarray
    step_frac: np.ndarray
    traj_index: np.ndarray
    step_index: np.ndarray
    finalized: np.ndarray
    masked: np.ndarray
    final: np.ndarray
    w: float
    temperature: float


def replay_arrays(trajs: Sequence[Trajectory], mask_id: int) -> ReplayArrays:
    if not trajs:
        raise InputError("nothing to replay")
    if len({(t.cfg_weight, t.temperature) for t in trajs}) > 1:
        raise InputError("replayed trajectories must share cfg_weight and temperature")
    rows, conds, sfs, ti, si, fin, msk, finals = [], [], [], [], [], [], [], []
    for i, tr in enumerate(trajs):
        flat = tr.final_grid.reshape(-1)
        L = flat.size
        for k, st in enumerate(tr.steps):
            g = flat.copy()
            g[st.mask_before] = mask_id
            rows.append(g)
            m = np.zeros(L, dtype=bool)
            m[st.mask_before] = True
            f = np.zeros(L, dtype=bool)
            f[st.positions] = True
            msk.append(m)
            fin.append(f)
            finals.append(flat)
            conds.append(tr.cond.index)
            sfs.append(st.step_frac)
            ti.append(i)
            si.append(k)
    return ReplayArrays(np.stack(rows), np.array(conds, dtype=np.int64), np.array(sfs),
                        np.array(ti), np.array(si), np.stack(fin), np.stack(msk), np.stack(finals),
                        trajs[0].cfg_weight, trajs[0].temperature)


def trajectory_logprob(params: PolicyParams, traj: Trajectory, per_token: bool = False):
    """Log-likelihood of a recorded trajectory under ``params``.

    Returns the sequence total, or with ``per_token`` the per-token values in
    the order they were recorded.
    """
    cfg = params.cfg
    if traj.final_grid.size != cfg.num_positions:
        raise InputError(f"trajectory grid has {traj.final_grid.size} positions, "
                         f"network expects {cfg.num_positions}")
    ra = replay_arrays([traj], cfg.mask_id)
    ev = policy_eval(params, ra.tokens, ra.cond, ra.step_frac, ra.w, ra.temperature)
    vals = np.concatenate([ev.logp[k, st.positions, st.tokens] for k, st in enumerate(traj.steps)])
    return vals if per_token else float(vals.sum())
