"""Variance-percentile batch filter.

A group whose reward spread falls below the p-th percentile of recently
accepted spreads is regenerated, up to ``max_attempts`` times. Only accepted
groups enter the history window.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, InputError


@dataclass(frozen=True)
class FilterState:
    history: tuple[float, ...] = ()
    history_size: int = 100
    percentile_p: float = 10.0
    max_attempts: int = 3
    num_shards: int = 1
    attempts_this_batch: int = 0
    # Reject HIGH-variance groups instead (the prose variant of the rule).
    invert: bool = False

    def validate(self) -> "FilterState":
        if self.history_size < 1:
            raise ConfigError("history_size must be >= 1")
        if not 0.0 <= self.percentile_p <= 100.0:
            raise ConfigError(f"percentile must be in [0, 100], got {self.percentile_p}")
        if self.max_attempts < 0:
            raise ConfigError("max_attempts must be >= 0")
        if self.num_shards < 1:
            raise ConfigError("num_shards must be >= 1")
        return self


@dataclass(frozen=True)
class FilterDecision:
    sigma_batch: float
    tau: float
    attempts: int
    accepted: bool

    def as_dict(self) -> dict:
        return {"sigma_batch": self.sigma_batch, "tau": self.tau,
                "attempts": self.attempts, "accepted": self.accepted}


def sharded_std(totals: Sequence[float], k: int = 1) -> float:
    """Mean of the population stds of ``k`` equal, in-order shards."""
    arr = np.asarray(totals, dtype=np.float64)
    if k < 1:
        raise InputError(f"shard count must be >= 1, got {k}")
    if arr.size == 0 or arr.size % k:
        raise InputError(f"{arr.size} rewards cannot be split into {k} equal shards")
    return float(arr.reshape(k, -1).std(axis=1).mean())


def percentile(history: Sequence[float], p: float) -> float:
    """Linear interpolation at rank (p/100)*(m-1); -inf for an empty history."""
    if len(history) == 0:
        return -math.inf
    return float(np.percentile(np.asarray(history, dtype=np.float64), p, method="linear"))


def accept(sigma_batch: float, tau: float, attempts: int, max_attempts: int) -> bool:
    return sigma_batch >= tau or attempts > max_attempts


def threshold(state: FilterState) -> float:
    if state.invert:
        return math.inf if not state.history else percentile(state.history, 100.0 - state.percentile_p)
    return percentile(state.history, state.percentile_p)


def decide(state: FilterState, sigma_batch: float) -> FilterDecision:
    tau = threshold(state)
    if state.invert:
        ok = sigma_batch <= tau or state.attempts_this_batch > state.max_attempts
    else:
        ok = accept(sigma_batch, tau, state.attempts_this_batch, state.max_attempts)
    return FilterDecision(float(sigma_batch), tau, state.attempts_this_batch, ok)


def update_history(state: FilterState, sigma: float) -> FilterState:
    """Append an accepted sigma, dropping the oldest entry past ``history_size``."""
    hist = state.history + (float(sigma),)
    if len(hist) > state.history_size:
        hist = hist[len(hist) - state.history_size:]
    return replace(state, history=hist)


def record(state: FilterState, decision: FilterDecision) -> FilterState:
    """Advance the state after a decision: accepted groups reset the attempt counter."""
    if decision.accepted:
        return replace(update_history(state, decision.sigma_batch), attempts_this_batch=0)
    return replace(state, attempts_this_batch=state.attempts_this_batch + 1)


@dataclass
class FilterSimResult:
    decisions: list[FilterDecision] = field(default_factory=list)
    final_state: FilterState | None = None

    @property
    def first_attempt_rejection_rate(self) -> float:
        first = [d for d in self.decisions if d.attempts == 0]
        return sum(not d.accepted for d in first) / max(len(first), 1)


def simulate(sigmas: Iterable[float], state: FilterState) -> FilterSimResult:
    """Feed a stream of group spreads through the filter, one attempt per value."""
    state.validate()
    res = FilterSimResult()
    for s in sigmas:
        d = decide(state, s)
        res.decisions.append(d)
        state = record(state, d)
    res.final_state = state
    return res
