"""Orchestration: pretraining, RL fine-tuning, evaluation, estimator benchmark, ablations.

All randomness flows from the config seed through named integer streams, so
identical configs give byte-identical metrics files and checkpoints.
"""

from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .conditions import (CLASS_NAMES, ConditionRef, TaskSpec, make_condition_set, stack_dataset,
                         synth_pretrain_set)
from .config import ExperimentConfig
from .errors import ConfigError, DivergenceError, InputError, UsageError
from .filtering import decide, record, sharded_std
from .grpo import GroupBatch, StepMetrics, TrainerState, generate_group, group_advantages, kl_exact, kl_k3, \
    train_step
from .net import NULL_COND, PolicyParams, backward, forward, init_params
from .rewards import QualityThresholds, calibrate_thresholds, quality_reward, speed_reward
from .sampler import SampleConfig, log_softmax, sample_group

# Stream tags keep the random sources of different phases independent.
PRETRAIN_TAG = 0x5EED
HELDOUT_TAG = 0x4E1D
RL_TAG = 0x7A11
EVAL_TAG = 0xE7A1
KLBENCH_TAG = 0xB3AC


class JsonlWriter:
    """Line-buffered JSONL log; floats are written with ``repr`` precision."""

    def __init__(self, path: Path):
        path.parent.mkdir(parents=True, exist_ok=True)
        self.path = path
        self._fh = open(path, "w")

    def write(self, row: dict) -> None:
        self._fh.write(json.dumps(_jsonable(row), sort_keys=False) + "\n")
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def _jsonable(row: dict) -> dict:
    out = {}
    for k, v in row.items():
        if isinstance(v, (np.floating, np.integer)):
            v = v.item()
        if isinstance(v, float) and not math.isfinite(v):
            v = None
        out[k] = v
    return out


# ---------------------------------------------------------------- pretraining


class Adam:
    def __init__(self, params: PolicyParams, lr: float, b1: float = 0.9, b2: float = 0.999, eps: float = 1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.tensors.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.tensors.items()}
        self.t = 0

    def step(self, params: PolicyParams, grads: dict[str, np.ndarray], lr_scale: float = 1.0) -> PolicyParams:
        self.t += 1
        lr = self.lr * lr_scale
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        new = {}
        for k, p in params.tensors.items():
            g = grads[k]
            self.m[k] = self.b1 * self.m[k] + (1.0 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1.0 - self.b2) * g * g
            new[k] = p - lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
        return PolicyParams(params.cfg, new, params.version + 1)


def masked_fraction_to_step_frac(masked: np.ndarray, L: int) -> np.ndarray:
    """Invert the cosine schedule: a masked fraction m sits at step fraction (2/pi) acos(m)."""
    return (2.0 / math.pi) * np.arccos(np.clip(masked / L, 0.0, 1.0))


def random_masks(rng: np.random.Generator, B: int, L: int) -> np.ndarray:
    """Boolean (B, L) masks; the masked count is ceil(r L) with r uniform in (0, 1]."""
    r = 1.0 - rng.random(B)
    counts = np.maximum(1, np.ceil(r * L).astype(np.int64))
    ranks = np.argsort(rng.random((B, L)), axis=1).argsort(axis=1)
    return ranks < counts[:, None]


def masked_ce(params: PolicyParams, tokens: np.ndarray, targets: np.ndarray, mask: np.ndarray,
              cond: np.ndarray, with_grad: bool = True):
    """Mean cross-entropy over masked positions; returns (loss, grads, accuracy)."""
    L = tokens.shape[1]
    inp = np.where(mask, params.cfg.mask_id, tokens)
    sf = masked_fraction_to_step_frac(mask.sum(axis=1), L)
    logits, cache = forward(params, inp, cond, sf)
    logp = log_softmax(logits)
    n = mask.sum()
    tgt_lp = np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    loss = float(-(tgt_lp * mask).sum() / n)
    acc = float(((logp.argmax(axis=-1) == targets) & mask).sum() / n)
    if not with_grad:
        return loss, None, acc
    d = np.exp(logp)
    np.put_along_axis(d, targets[..., None], np.take_along_axis(d, targets[..., None], axis=-1) - 1.0, axis=-1)
    d *= (mask / n)[..., None]
    return loss, backward(cache, d), acc


@dataclass
class PretrainResult:
    params: PolicyParams
    heldout_accuracy: float
    heldout_accuracy_noisy: float
    final_loss: float
    checkpoint: Path | None


def heldout_accuracy(params: PolicyParams, task: TaskSpec, n: int, seed: int, noise_rate: float = 0.1):
    """Masked-token accuracy on fresh noisy grids: (vs clean pattern, vs noisy grid)."""
    conds = make_condition_set(task, n, seed + HELDOUT_TAG)
    arr = stack_dataset(task, synth_pretrain_set(task, conds, 1, noise_rate, seed + HELDOUT_TAG))
    rng = np.random.default_rng([seed, HELDOUT_TAG])
    mask = random_masks(rng, len(conds), task.num_positions)
    _, _, acc_clean = masked_ce(params, arr.tokens, arr.clean, mask, arr.cond, with_grad=False)
    _, _, acc_noisy = masked_ce(params, arr.tokens, arr.tokens, mask, arr.cond, with_grad=False)
    return acc_clean, acc_noisy


def pretrain(cfg: ExperimentConfig, out_dir: Path | None = None, write: bool = True) -> PretrainResult:
    """Masked-token pretraining on the synthetic corpus with condition dropout."""
    cfg.validate()
    p = cfg.pretrain
    out = Path(out_dir or cfg.out_dir)
    task = cfg.task
    conds = make_condition_set(task, p.num_conditions, cfg.seed)
    arr = stack_dataset(task, synth_pretrain_set(task, conds, p.per_cond, p.noise_rate, cfg.seed))
    N, L = arr.tokens.shape
    params = init_params(cfg.net, cfg.seed)
    opt = Adam(params, p.learning_rate)
    rng = np.random.default_rng([cfg.seed, PRETRAIN_TAG])
    log = JsonlWriter(out / "pretrain_metrics.jsonl") if write else None
    loss = math.nan
    try:
        for step in range(p.steps):
            idx = rng.integers(0, N, size=p.batch_size)
            mask = random_masks(rng, p.batch_size, L)
            cond = arr.cond[idx].copy()
            cond[rng.random(p.batch_size) < cfg.net.cond_dropout_prob] = NULL_COND
            loss, grads, acc = masked_ce(params, arr.tokens[idx], arr.tokens[idx], mask, cond)
            if not math.isfinite(loss) or not all(np.isfinite(g).all() for g in grads.values()):
                if log:
                    log.write({"step": step, "event": "diverged", "loss": loss})
                raise DivergenceError(f"pretraining diverged at step {step}", step=step)
            params = opt.step(params, grads, 0.5 * (1.0 + math.cos(math.pi * step / p.steps)))
            if log and step % p.log_every == 0:
                log.write({"step": step, "loss": loss, "accuracy": acc})
        acc_clean, acc_noisy = heldout_accuracy(params, task, p.eval_examples, cfg.seed)
        if log:
            log.write({"event": "heldout", "accuracy_clean": acc_clean, "accuracy_noisy": acc_noisy,
                       "noise_rate": 0.1})
    finally:
        if log:
            log.close()
    ckpt = save_checkpoint(params, out / "pretrain.ckpt") if write else None
    return PretrainResult(params, acc_clean, acc_noisy, loss, ckpt)


# ---------------------------------------------------------------- RL fine-tuning


@dataclass
class RLResult:
    params: PolicyParams
    metrics: list[dict]
    diverged: bool
    checkpoint: Path | None
    resamples: int
    error: str | None = None


def _scorer(task: TaskSpec) -> Callable[[np.ndarray, ConditionRef], float]:
    return lambda grid, cond: quality_reward(task, grid, cond)


def check_compatible(cfg: ExperimentConfig, params: PolicyParams) -> None:
    if params.cfg != cfg.net:
        raise ConfigError(f"checkpoint NetConfig {params.cfg} does not match the config {cfg.net}")


def rl_train(cfg: ExperimentConfig, base: PolicyParams, out_dir: Path | None = None,
             tag: str = "rl", write: bool = True, raise_on_divergence: bool = True) -> RLResult:
    """GRPO fine-tuning from ``base`` with the variance-percentile filter in the loop.

    One accepted group is one step. Metrics go to ``<tag>_metrics.jsonl``; on
    divergence a final ``event = diverged`` line is written before aborting.
    """
    cfg.validate()
    check_compatible(cfg, base)
    out = Path(out_dir or cfg.out_dir)
    task, train = cfg.task, cfg.train
    conds = make_condition_set(task, cfg.run.num_conditions, cfg.seed + RL_TAG)
    score = _scorer(task)
    state = TrainerState(base.copy(), base, train, cfg.filter.initial_state())
    sample = replace(cfg.sample, nfe=max(train.nfe_choices))
    log = JsonlWriter(out / f"{tag}_metrics.jsonl") if write else None
    rows: list[dict] = []
    generated = accepted = resamples_total = 0
    diverged, error = False, None
    try:
        for step in range(train.total_steps):
            cond = conds[step % len(conds)]
            fs = state.filter_state
            t0 = time.perf_counter()
            attempt = 0
            while True:
                trajs, rewards = generate_group(state.params, cond, train, sample,
                                                (cfg.seed, RL_TAG, step, attempt), score, group_id=step)
                generated += 1
                sigma = sharded_std([r.total for r in rewards], cfg.filter.num_shards)
                if not cfg.filter.enabled:
                    decision = None
                    break
                decision = decide(fs, sigma)
                fs = record(fs, decision)
                if decision.accepted:
                    break
                attempt += 1
            accepted += 1
            resamples_total += attempt
            adv = group_advantages([r.total for r in rewards], train.adv_std_floor)
            group = GroupBatch(cond, trajs, rewards, adv)
            state = replace(state, filter_state=fs)
            try:
                state, m = train_step(state, group)
            except DivergenceError as exc:
                diverged, error = True, str(exc)
                row = {"step": step, "event": "diverged", "message": str(exc)}
                rows.append(row)
                if log:
                    log.write(row)
                if raise_on_divergence:
                    raise
                break
            m.accept_rate = accepted / generated
            m.resamples = attempt
            m.sigma_batch = sigma
            if decision is not None:
                m.tau, m.attempts, m.accepted = decision.tau, decision.attempts, decision.accepted
            m.wall_ms = (time.perf_counter() - t0) * 1e3 if cfg.run.log_wall_time else 0.0
            row = m.as_dict()
            rows.append(row)
            if log:
                log.write(row)
            every = cfg.run.checkpoint_every
            if write and every and (step + 1) % every == 0:
                save_checkpoint(state.params, out / f"{tag}_step{step + 1}.ckpt")
    finally:
        if log:
            log.close()
    ckpt = save_checkpoint(state.params, out / f"{tag}.ckpt") if write else None
    return RLResult(state.params, rows, diverged, ckpt, resamples_total, error)


# ---------------------------------------------------------------- evaluation


@dataclass(frozen=True)
class EvalRow:
    tag: str
    nfe: int
    mean_quality: float
    mean_composite: float
    std: float
    n: int

    @property
    def stderr(self) -> float:
        return self.std / math.sqrt(self.n)


EVAL_COLUMNS = ("model", "nfe", "mean_quality", "mean_composite", "std", "n")


@dataclass
class EvalTable:
    rows: list[EvalRow]

    def __post_init__(self):
        self.rows = sorted(self.rows, key=lambda r: (r.tag, r.nfe))

    def row(self, tag: str, nfe: int) -> EvalRow:
        for r in self.rows:
            if r.tag == tag and r.nfe == nfe:
                return r
        raise KeyError((tag, nfe))

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            self.write(fh)

    def write(self, fh) -> None:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(EVAL_COLUMNS)
        for r in self.rows:
            w.writerow([r.tag, r.nfe, repr(r.mean_quality), repr(r.mean_composite), repr(r.std), r.n])


def sample_scores(params: PolicyParams, task: TaskSpec, conds: Sequence[ConditionRef], nfe: int, n: int,
                  seed: int, sample: SampleConfig) -> np.ndarray:
    """Quality of ``n`` samples per condition at a fixed step count, shape (len(conds), n)."""
    out = np.zeros((len(conds), n))
    for ci, cond in enumerate(conds):
        scfgs = [replace(sample, nfe=nfe, rng_stream=(seed, EVAL_TAG, nfe, ci, j)) for j in range(n)]
        for j, tr in enumerate(sample_group(params, cond, scfgs)):
            out[ci, j] = quality_reward(task, tr.final_grid, cond)
    return out


def evaluation_conditions(task: TaskSpec, seed: int, per_class: int = 1) -> list[ConditionRef]:
    return make_condition_set(task, per_class * len(task.classes), seed + EVAL_TAG)


def evaluate(params: PolicyParams, task: TaskSpec, nfe_list: Sequence[int], n_per_cell: int, seed: int,
             sample: SampleConfig | None = None, tag: str = "model", alpha: float = 0.2,
             conds: Sequence[ConditionRef] | None = None) -> EvalTable:
    """Quality-only table over step counts. ``mean_composite`` adds alpha * 8/nfe for reference."""
    L = params.cfg.num_positions
    if n_per_cell < 1:
        raise ConfigError("n_per_cell must be >= 1")
    for nfe in nfe_list:
        if not 1 <= nfe <= L:
            raise ConfigError(f"nfe {nfe} outside [1, {L}]")
    sample = sample or SampleConfig(nfe=1)
    conds = list(conds) if conds is not None else evaluation_conditions(task, seed)
    rows = []
    for nfe in nfe_list:
        q = sample_scores(params, task, conds, nfe, n_per_cell, seed, sample).ravel()
        rows.append(EvalRow(tag, int(nfe), float(q.mean()), float(q.mean() + speed_reward(nfe, alpha)),
                            float(q.std(ddof=1)) if q.size > 1 else 0.0, int(q.size)))
    return EvalTable(rows)


def calibrate(params: PolicyParams, task: TaskSpec, nfe_list: Sequence[int], n: int, seed: int,
              sample: SampleConfig | None = None) -> list[tuple[str, int, QualityThresholds]]:
    """Per (class, nfe) quality thresholds from baseline samples."""
    sample = sample or SampleConfig(nfe=1)
    conds = evaluation_conditions(task, seed)
    out = []
    for cond in conds:
        for nfe in nfe_list:
            scores = sample_scores(params, task, [cond], nfe, n, seed, sample).ravel()
            out.append((cond.name, int(nfe), calibrate_thresholds(scores)))
    return out


# ---------------------------------------------------------------- KL estimator benchmark


KLBENCH_COLUMNS = ("vocab", "entropy_level", "support", "exact_kl", "k3_mean",
                   "k3_stderr", "k3_single_draw_var", "exact_eval_var", "n_draws")


def _mixture_pair(m: int, target_kl: float) -> tuple[np.ndarray, np.ndarray]:
    """(p_theta, p_ref) on ``m`` tokens with KL(p_theta || p_ref) = ``target_kl``.

    p_ref is uniform; p_theta mixes it with a point mass on token 0.
    """
    from scipy.optimize import brentq
    from scipy.special import rel_entr

    ref = np.full(m, 1.0 / m)

    def build(lam: float) -> np.ndarray:
        th = (1.0 - lam) * ref
        th[0] += lam
        return th

    if target_kl <= 0.0 or m == 1:
        return ref.copy(), ref
    if target_kl >= math.log(m):
        raise InputError(f"target KL {target_kl} unreachable with support {m}")
    lam = brentq(lambda x: float(rel_entr(build(x), ref).sum()) - target_kl,
                 0.0, 1.0, xtol=1e-15, rtol=1e-15)
    return build(lam), ref


def klbench(vocab_sizes: Sequence[int], entropy_levels: Sequence[int], n_draws: int, seed: int,
            target_kl: float = 0.1) -> list[dict]:
    """Exact vs k3 KL(p_theta || p_ref) on pairs of rising entropy at a fixed true KL.

    Entropy level ``h`` gives a reference uniform on ``min(V, 4**h)`` tokens
    (entropy ``h log 4`` until the vocabulary saturates; levels past saturation
    repeat a support size and are skipped). Level 0 means identical
    distributions. Tokens outside the support have zero mass under both, so
    they are left out of every sum.
    """
    if n_draws < 1000:
        raise ConfigError("n_draws must be >= 1000")
    rows = []
    for V in vocab_sizes:
        seen = set()
        for h in entropy_levels:
            m = min(V, 4 ** h)
            if m in seen:
                continue
            seen.add(m)
            rng = np.random.default_rng([seed, KLBENCH_TAG, V, h])
            th, ref = _mixture_pair(m, target_kl if h > 0 else 0.0)
            lth, lref = np.log(th), np.log(ref)
            evals = np.array([kl_exact(th, lref) for _ in range(3)])
            x = rng.choice(m, size=n_draws, p=th)
            draws = kl_k3(lth[x], lref[x])
            rows.append({
                "vocab": V, "entropy_level": h, "support": m,
                "exact_kl": float(evals[0]),
                "k3_mean": float(draws.mean()), "k3_stderr": float(draws.std(ddof=1) / math.sqrt(n_draws)),
                "k3_single_draw_var": float(draws.var(ddof=1)), "exact_eval_var": float(np.mean((evals - evals[0]) ** 2)),
                "n_draws": n_draws,
            })
    return rows


def write_rows_csv(rows: Sequence[dict], columns: Sequence[str], path_or_fh) -> None:
    def _w(fh):
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([repr(r[c]) if isinstance(r[c], float) else r[c] for c in columns])

    if isinstance(path_or_fh, (str, Path)):
        with open(path_or_fh, "w", newline="") as fh:
            _w(fh)
    else:
        _w(path_or_fh)


# ---------------------------------------------------------------- ablations


ABLATION_PRESETS: dict[str, list[tuple[str, dict]]] = {
    "speed_reward": [("alpha0", {"train.alpha": 0.0}), ("default", {})],
    "kl_estimator": [("exact_ce", {"train.kl_estimator": "exact_ce"}),
                     ("k3_sampled", {"train.kl_estimator": "k3_sampled"})],
    "per_token": [("sequence", {"train.per_token_likelihood": False}),
                  ("per_token", {"train.per_token_likelihood": True})],
    "filter_percentile": [(f"p{p}", {"filter.percentile_p": float(p), "filter.enabled": True})
                          for p in (0, 10, 25, 50)],
    "num_iterations": [(f"iters{k}", {"train.num_iterations_per_batch": k}) for k in (1, 2, 4)],
    "cfg_weight": [(f"cfg{w}", {"sample.cfg_weight": w}) for w in (1.0, 1.5, 2.0, 3.0)],
}

SUMMARY_COLUMNS = ("preset", "run", "status", "steps", "auc_reward", "auc_speed_adjusted", "loss_var",
                   "reward_var", "final_ma_reward", "mean_nfe", "resamples")


def apply_overrides(cfg: ExperimentConfig, overrides: dict) -> ExperimentConfig:
    for key, val in overrides.items():
        section, name = key.split(".")
        cfg = replace(cfg, **{section: replace(getattr(cfg, section), **{name: val})})
    return cfg


def moving_average(x: Sequence[float], window: int) -> np.ndarray:
    """Trailing mean; the first ``window - 1`` entries average what is available."""
    a = np.asarray(x, dtype=np.float64)
    c = np.concatenate([[0.0], np.cumsum(a)])
    idx = np.arange(1, a.size + 1)
    lo = np.maximum(0, idx - window)
    return (c[idx] - c[lo]) / (idx - lo)


def summarize_run(rows: Sequence[dict], default_alpha: float) -> dict:
    """Curve aggregates. AUC is the mean per-step value (area divided by step count).

    ``auc_speed_adjusted`` scores every run with the same speed factor, so an
    alpha = 0 run is judged by the objective the default run optimises.
    """
    steps = [r for r in rows if "event" not in r]
    if not steps:
        return {"steps": 0, "auc_reward": math.nan, "auc_speed_adjusted": math.nan, "loss_var": math.nan,
                "reward_var": math.nan, "final_ma_reward": math.nan, "mean_nfe": math.nan}
    q = np.array([r["mean_quality"] for r in steps])
    spd = np.array([r["mean_speed"] for r in steps])
    reward = np.array([r["mean_reward"] for r in steps])
    loss = np.array([r["loss"] for r in steps])
    return {
        "steps": len(steps),
        "auc_reward": float(reward.mean()),
        "auc_speed_adjusted": float((q + default_alpha * spd).mean()),
        "loss_var": float(loss.var()),
        "reward_var": float(reward.var()),
        "final_ma_reward": float(moving_average(reward, 100)[-1]),
        "mean_nfe": float(np.mean([r["mean_nfe"] for r in steps])),
    }


def ablate(preset: str, cfg: ExperimentConfig, base: PolicyParams, out_dir: Path | None = None) -> list[dict]:
    """Run the matched-seed grid of one ablation axis; writes per-run logs and ``ablate_<preset>.csv``."""
    if preset not in ABLATION_PRESETS:
        raise UsageError(f"unknown preset {preset!r}; choose from {', '.join(ABLATION_PRESETS)}")
    out = Path(out_dir or cfg.out_dir)
    summary = []
    for name, overrides in ABLATION_PRESETS[preset]:
        run_cfg = apply_overrides(cfg, overrides).validate()
        res = rl_train(run_cfg, base, out, tag=f"ablate_{preset}_{name}", raise_on_divergence=False)
        row = {"preset": preset, "run": name, "status": "diverged" if res.diverged else "ok",
               "resamples": res.resamples, **summarize_run(res.metrics, cfg.train.alpha)}
        summary.append(row)
    write_rows_csv(summary, SUMMARY_COLUMNS, out / f"ablate_{preset}.csv")
    return summary


def resolve_base(path: str | Path) -> PolicyParams:
    return load_checkpoint(path)


def condition_names(task: TaskSpec) -> list[str]:
    return [CLASS_NAMES[c] for c in task.classes]
