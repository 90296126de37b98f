"""Quality scoring, the speed bonus and quality-threshold calibration."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .conditions import ConditionRef, TaskSpec, num_roles, role_map
from .errors import InputError

REF_NFE = 8


@dataclass(frozen=True)
class RewardRecord:
    base: float
    speed_bonus: float
    total: float
    nfe: int
    group_id: int = 0


@dataclass(frozen=True)
class QualityThresholds:
    mean: float
    std: float
    high: float
    low: float

    def classify(self, score: float) -> str:
        """``"high"`` if score >= high, ``"low"`` if score < low, else ``"mid"``."""
        if score >= self.high:
            return "high"
        if score < self.low:
            return "low"
        return "mid"


def predicate_fraction(task: TaskSpec, grid: np.ndarray, cond: ConditionRef) -> float:
    """Best fraction of positions matching the class pattern over palette colourings."""
    g = np.asarray(grid).reshape(task.grid_h, task.grid_w)
    roles = role_map(cond.task_class, task.grid_h, task.grid_w)
    P = task.palette_size
    counts = np.zeros((num_roles(cond.task_class), P))
    in_palette = g < P
    np.add.at(counts, (roles[in_palette], g[in_palette]), 1.0)
    if counts.shape[0] == 1:
        best = counts[0].max()
    else:
        pair = counts[0][:, None] + counts[1][None, :]
        np.fill_diagonal(pair, -np.inf)
        best = pair.max()
    return float(best) / task.num_positions


def smoothness(task: TaskSpec, grid: np.ndarray, cond: ConditionRef) -> float:
    """Fraction of 4-neighbour pairs whose equal/different relation matches the pattern's."""
    g = np.asarray(grid).reshape(task.grid_h, task.grid_w)
    roles = role_map(cond.task_class, task.grid_h, task.grid_w)
    agree = []
    for axis in (0, 1):
        a = slice(None, -1)
        b = slice(1, None)
        ga, gb = (g[a], g[b]) if axis == 0 else (g[:, a], g[:, b])
        ra, rb = (roles[a], roles[b]) if axis == 0 else (roles[:, a], roles[:, b])
        agree.append(((ga == gb) == (ra == rb)).ravel())
    pairs = np.concatenate(agree)
    return float(pairs.mean()) if pairs.size else 0.0


def quality_reward(task: TaskSpec, grid: np.ndarray, cond: ConditionRef) -> float:
    """Quality in [0, 1]; exactly 1.0 iff the grid is a perfect instance of the class.

    Otherwise ``(1 - w) * predicate_fraction + w * smoothness`` with
    ``w = task.smooth_weight``.
    """
    g = np.asarray(grid)
    if g.size != task.num_positions:
        raise InputError(f"grid has {g.size} positions, task expects {task.num_positions}")
    if g.min() < 0 or g.max() >= task.vocab:
        raise InputError("grid contains MASK or out-of-range tokens")
    frac = predicate_fraction(task, g, cond)
    if frac == 1.0:
        return 1.0
    w = task.smooth_weight
    return (1.0 - w) * frac + w * smoothness(task, g, cond)


def speed_reward(nfe: int, alpha: float, ref_nfe: int = REF_NFE) -> float:
    if nfe < 1:
        raise InputError(f"nfe must be >= 1, got {nfe}")
    if alpha < 0:
        raise InputError(f"speed factor must be >= 0, got {alpha}")
    return alpha * (ref_nfe / nfe)


def composite_reward(base: float, nfe: int, alpha: float, group_id: int = 0) -> RewardRecord:
    bonus = speed_reward(nfe, alpha)
    return RewardRecord(float(base), bonus, float(base) + bonus, int(nfe), group_id)


def calibrate_thresholds(scores: Sequence[float]) -> QualityThresholds:
    """Mean and population std of baseline scores; high = mean + std, low = mean."""
    arr = np.asarray(scores, dtype=np.float64)
    if arr.size < 2:
        raise InputError("calibration needs at least 2 scores")
    mean = float(arr.mean())
    std = float(arr.std())
    return QualityThresholds(mean, std, mean + std, mean)


def write_calibration_csv(rows: Iterable[tuple[str, int, QualityThresholds]], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["task", "nfe", "mean", "std", "high", "low"])
        for task_name, nfe, th in rows:
            w.writerow([task_name, nfe] + [repr(v) for v in (th.mean, th.std, th.high, th.low)])
