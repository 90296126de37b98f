from __future__ import annotations

import csv
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from speedrl import rewards
from speedrl.conditions import (CLASS_NAMES, ConditionRef, TaskSpec, canonical_pattern, make_condition_set,
                                parse_condition, partner_colour, synth_pretrain_set)
from speedrl.errors import InputError
from speedrl.rewards import (calibrate_thresholds, composite_reward, quality_reward, speed_reward,
                             write_calibration_csv)

TASK = TaskSpec()


@pytest.mark.parametrize("cond", make_condition_set(TASK, 10, 4))
def test_canonical_pattern_scores_one(cond):
    assert quality_reward(TASK, canonical_pattern(TASK, cond), cond) == 1.0


def test_zero_matches_zero_smoothness():
    # constant class: an off-palette checkerboard matches nowhere and every neighbour pair disagrees
    cond = ConditionRef(0, (2,))
    rows, cols = np.indices((8, 8))
    grid = np.where((rows + cols) % 2 == 0, 8, 9)
    assert quality_reward(TASK, grid, cond) == 0.0


def test_blend_checkerboard_half_correct(monkeypatch):
    cond = ConditionRef(3, (0, 4))
    grid = canonical_pattern(TASK, cond).copy()
    grid[4:] = 9  # 32 of 64 positions off-palette
    assert rewards.predicate_fraction(TASK, grid, cond) == 0.5
    monkeypatch.setattr(rewards, "smoothness", lambda *a: 0.5)
    assert quality_reward(TASK, grid, cond) == 0.75 * 0.5 + 0.25 * 0.5 == 0.5


def test_quality_rejects_masked_grid():
    with pytest.raises(InputError):
        quality_reward(TASK, np.full((8, 8), TASK.vocab), ConditionRef(0, (0,)))


def test_speed_reward_examples():
    assert speed_reward(8, 1.0) == 1.0
    assert speed_reward(16, 0.5) == 0.25
    assert speed_reward(4, 1.0) == 2.0
    with pytest.raises(InputError):
        speed_reward(0, 1.0)


def test_composite_examples():
    assert composite_reward(0.6, 8, 0.2).total == pytest.approx(0.8, abs=1e-15)
    assert composite_reward(0.6, 4, 0.0).total == 0.6
    assert composite_reward(0.0, 4, 1.0).total == 2.0


@given(st.floats(0, 1), st.integers(1, 63), st.floats(0.01, 5))
def test_composite_additive_and_monotone(base, nfe, alpha):
    a, b = composite_reward(base, nfe, alpha), composite_reward(base, nfe + 1, alpha)
    assert a.speed_bonus == alpha * (8 / nfe)
    assert a.total == a.base + a.speed_bonus
    assert b.total < a.total


def test_calibration_examples():
    th = calibrate_thresholds([0, 1, 2])
    assert th.mean == 1 and th.low == 1
    assert th.std == pytest.approx(math.sqrt(2 / 3), abs=1e-12)
    assert th.high == pytest.approx(1.8165, abs=1e-4)
    eq = calibrate_thresholds([0.3] * 5)
    assert eq.high == eq.low == 0.3
    with pytest.raises(InputError):
        calibrate_thresholds([5])


def test_calibration_classes_disjoint():
    th = calibrate_thresholds([0.1, 0.4, 0.9, 0.2])
    for s in np.linspace(0, 1, 101):
        assert not (th.classify(s) == "high" and s < th.low)


def test_calibration_csv(tmp_path):
    path = tmp_path / "cal.csv"
    write_calibration_csv([("checkerboard", 4, calibrate_thresholds([0, 1, 2]))], path)
    rows = list(csv.reader(path.open()))
    assert rows[0] == ["task", "nfe", "mean", "std", "high", "low"]
    assert rows[1][:2] == ["checkerboard", "4"]


def test_condition_set_round_robin_and_deterministic():
    conds = make_condition_set(TASK, len(CLASS_NAMES), 1)
    assert [c.task_class for c in conds] == list(range(len(CLASS_NAMES)))
    assert make_condition_set(TASK, 12, 3) == make_condition_set(TASK, 12, 3)
    for c in make_condition_set(TASK, 50, 2):
        if len(c.params) == 2:
            assert c.params[1] == partner_colour(c.params[0], TASK.palette_size)
    with pytest.raises(InputError):
        make_condition_set(TASK, 0, 0)


def test_synth_pretrain_noiseless_and_deterministic():
    conds = make_condition_set(TASK, 5, 0)
    data = synth_pretrain_set(TASK, conds, 2, 0.0, 0)
    assert all(quality_reward(TASK, g, c) == 1.0 for c, g in data)
    a = synth_pretrain_set(TASK, conds, 2, 0.2, 5)
    b = synth_pretrain_set(TASK, conds, 2, 0.2, 5)
    assert all(np.array_equal(x[1], y[1]) for x, y in zip(a, b))


def test_synth_pretrain_noise_count():
    # a position is "resampled" with prob 0.25; resampling to the same token is invisible,
    # so compare the visible change rate 0.25 * (1 - 1/V) over many grids.
    conds = make_condition_set(TASK, 400, 9)
    data = synth_pretrain_set(TASK, conds, 1, 0.25, 9)
    changed = np.array([(g != canonical_pattern(TASK, c)).sum() for c, g in data])
    p = 0.25 * (1 - 1 / TASK.vocab)
    se = math.sqrt(64 * p * (1 - p) / len(changed))
    assert abs(changed.mean() - 64 * p) < 3 * se


def test_parse_condition():
    assert parse_condition("checkerboard", TASK) == ConditionRef(3, (0, 4))
    assert parse_condition("1:2,6", TASK) == ConditionRef(1, (2, 6))
    for bad in ("spiral", "constant:1,2", "twoband:0,99"):
        with pytest.raises(InputError):
            parse_condition(bad, TASK)
