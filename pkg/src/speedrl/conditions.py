"""Synthetic pattern tasks, condition references and pretraining data.

A condition names a pattern class. Every class splits the grid into one or
two *roles* (row parity, column parity, ...); a grid satisfies the class when
each role is painted with a single palette colour, distinct across roles.
``ConditionRef.params`` carries the colours drawn for one concrete instance.
The network only sees the class, so the colours are a free choice the sampler
has to commit to consistently across positions.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InputError

CLASS_NAMES = ("constant", "hstripes", "vstripes", "checkerboard", "twoband")


@dataclass(frozen=True)
class ConditionRef:
    task_class: int
    params: tuple[int, ...] = ()

    @property
    def index(self) -> int:
        """Row of the network's condition-embedding table."""
        return self.task_class

    @property
    def name(self) -> str:
        return CLASS_NAMES[self.task_class]


@dataclass(frozen=True)
class TaskSpec:
    """Task family over an ``grid_h x grid_w`` grid.

    Pattern colours come from the first ``palette_size`` tokens; the remaining
    vocabulary entries never satisfy a predicate.
    """

    grid_h: int = 8
    grid_w: int = 8
    vocab: int = 16
    palette_size: int = 8
    smooth_weight: float = 0.25
    classes: tuple[int, ...] = tuple(range(len(CLASS_NAMES)))

    def __post_init__(self):
        if not 1 <= self.palette_size <= self.vocab:
            raise InputError("palette_size must lie in [1, vocab]")
        if any(c < 0 or c >= len(CLASS_NAMES) for c in self.classes) or not self.classes:
            raise InputError(f"classes must be a non-empty subset of 0..{len(CLASS_NAMES) - 1}")
        if self.palette_size < 2 and any(num_roles(c) > 1 for c in self.classes):
            raise InputError("two-role classes need at least two palette colours")

    @property
    def num_positions(self) -> int:
        return self.grid_h * self.grid_w

    @property
    def num_conditions(self) -> int:
        return len(CLASS_NAMES)


def num_roles(task_class: int) -> int:
    return 1 if task_class == 0 else 2


def role_map(task_class: int, h: int, w: int) -> np.ndarray:
    """Role id of every position, shape (h, w)."""
    rows, cols = np.indices((h, w))
    if task_class == 0:
        return np.zeros((h, w), dtype=np.int64)
    if task_class == 1:
        return rows % 2
    if task_class == 2:
        return cols % 2
    if task_class == 3:
        return (rows + cols) % 2
    if task_class == 4:
        return (rows >= (h + 1) // 2).astype(np.int64)
    raise InputError(f"unknown task class {task_class}")


def canonical_pattern(task: TaskSpec, cond: ConditionRef) -> np.ndarray:
    roles = role_map(cond.task_class, task.grid_h, task.grid_w)
    colours = np.asarray(cond.params, dtype=np.int64)
    if colours.size != num_roles(cond.task_class):
        raise InputError(f"condition {cond} needs {num_roles(cond.task_class)} colour params")
    return colours[roles]


def partner_colour(colour: int, palette_size: int) -> int:
    """Colour of the second role: the palette's complement of the first."""
    return (colour + palette_size // 2) % palette_size


def make_condition_set(task: TaskSpec, n: int, seed: int) -> list[ConditionRef]:
    """``n`` conditions cycling through the task classes with a random base colour each.

    Base colours are uniform over the palette. Two-role classes pair the base
    colour with its complement, so the second colour is predictable from the first.
    """
    if n < 1:
        raise InputError(f"condition set size must be >= 1, got {n}")
    rng = np.random.default_rng([seed, 0xC0])
    out = []
    for i in range(n):
        cls = task.classes[i % len(task.classes)]
        a = int(rng.integers(task.palette_size))
        colours = (a,) if num_roles(cls) == 1 else (a, partner_colour(a, task.palette_size))
        out.append(ConditionRef(cls, colours))
    return out


def resample_noise(grid: np.ndarray, vocab: int, noise_rate: float,
                   rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Resample each position uniformly with probability ``noise_rate``.

    Returns the noisy grid and the boolean mask of resampled positions.
    """
    hit = rng.random(grid.shape) < noise_rate
    noisy = grid.copy()
    noisy[hit] = rng.integers(0, vocab, size=int(hit.sum()))
    return noisy, hit


def synth_pretrain_set(task: TaskSpec, conds: list[ConditionRef], per_cond: int,
                       noise_rate: float, seed: int) -> list[tuple[ConditionRef, np.ndarray]]:
    if not 0.0 <= noise_rate < 0.5:
        raise InputError(f"noise_rate must be in [0, 0.5), got {noise_rate}")
    rng = np.random.default_rng([seed, 0xDA7A])
    data = []
    for cond in conds:
        base = canonical_pattern(task, cond)
        for _ in range(per_cond):
            noisy, _ = resample_noise(base, task.vocab, noise_rate, rng)
            data.append((cond, noisy))
    return data


@dataclass
class PretrainArrays:
    """Stacked dataset: tokens (N, L), condition indices (N,), clean targets (N, L)."""

    tokens: np.ndarray
    cond: np.ndarray
    clean: np.ndarray = field(repr=False)


def stack_dataset(task: TaskSpec, data: list[tuple[ConditionRef, np.ndarray]]) -> PretrainArrays:
    tokens = np.stack([g.reshape(-1) for _, g in data])
    cond = np.array([c.index for c, _ in data], dtype=np.int64)
    clean = np.stack([canonical_pattern(task, c).reshape(-1) for c, _ in data])
    return PretrainArrays(tokens, cond, clean)


def parse_condition(text: str, task: TaskSpec) -> ConditionRef:
    """Parse ``name`` / ``id`` optionally followed by ``:c1,c2`` colours."""
    head, _, tail = text.partition(":")
    head = head.strip()
    if head.isdigit():
        cls = int(head)
    elif head in CLASS_NAMES:
        cls = CLASS_NAMES.index(head)
    else:
        raise InputError(f"unknown condition {text!r}; expected one of {', '.join(CLASS_NAMES)}")
    if cls not in task.classes:
        raise InputError(f"condition class {cls} not in the task family")
    k = num_roles(cls)
    if tail:
        try:
            params = tuple(int(v) for v in tail.split(","))
        except ValueError:
            raise InputError(f"bad colour list in {text!r}") from None
        if len(params) != k or not all(0 <= c < task.palette_size for c in params):
            raise InputError(f"{CLASS_NAMES[cls]} needs {k} colour(s) in [0, {task.palette_size})")
    else:
        params = (0,) if k == 1 else (0, partner_colour(0, task.palette_size))
    return ConditionRef(cls, params)
