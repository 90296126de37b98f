from __future__ import annotations

import numpy as np
import pytest

from speedrl.conditions import ConditionRef, TaskSpec, make_condition_set
from speedrl.grpo import GroupBatch, TrainConfig, generate_group, group_advantages
from speedrl.net import NetConfig, init_params
from speedrl.rewards import quality_reward
from speedrl.sampler import SampleConfig

TINY = NetConfig(grid_h=4, grid_w=4, vocab=8, embed_dim=8, num_layers=1, num_conditions=5)
DESK = NetConfig()

_ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE_LINES):
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def report():
    """Record one ``CRITERION n PASS|FAIL: detail`` line for the terminal summary."""

    def _report(n: int, ok: bool, detail: str) -> None:
        line = f"CRITERION {n} {'PASS' if ok else 'FAIL'}: {detail}"
        _ACCEPTANCE_LINES.append(line)
        print(line)

    return _report


def task_for(cfg: NetConfig) -> TaskSpec:
    return TaskSpec(grid_h=cfg.grid_h, grid_w=cfg.grid_w, vocab=cfg.vocab, palette_size=min(8, cfg.vocab))


def random_batch(params, seed: int, group_size: int = 4, nfe_choices=(1, 2, 4), cfg_weight: float = 1.0,
                 temperature: float = 1.0, alpha: float = 0.2, cond: ConditionRef | None = None):
    """A scored group sampled from ``params`` with random advantages if the group is degenerate."""
    task = task_for(params.cfg)
    cond = cond or make_condition_set(task, 5, seed)[seed % 5]
    tcfg = TrainConfig(group_size=group_size, nfe_choices=tuple(nfe_choices), alpha=alpha)
    sample = SampleConfig(nfe=1, cfg_weight=cfg_weight, temperature=temperature)
    trajs, rewards = generate_group(params, cond, tcfg, sample, (seed, 77),
                                    lambda g, c: quality_reward(task, g, c))
    adv = group_advantages([r.total for r in rewards])
    if not np.any(adv):
        adv = np.random.default_rng(seed).standard_normal(group_size)
    return GroupBatch(cond, trajs, rewards, adv)


@pytest.fixture
def tiny_params():
    return init_params(TINY, 3)


@pytest.fixture
def perturbed_pair():
    """Two nearby parameter stores, for tests that need params != ref_params."""
    p = init_params(TINY, 5)
    rng = np.random.default_rng(11)
    q = p.apply_update({k: rng.standard_normal(v.shape) for k, v in p.tensors.items()}, 0.05)
    return p, q


SMALL_CONFIG = """\
# a few-second configuration for harness and CLI tests
grid_h = 4
grid_w = 4
vocab = 8
embed_dim = 8
num_layers = 1
group_size = 4
nfe_choices = 1,2,4
total_steps = 6
sample_nfe = 2
pretrain_steps = 20
pretrain_batch_size = 8
pretrain_num_conditions = 20
pretrain_eval_examples = 50
rl_num_conditions = 5
checkpoint_every = 0
eval_n = 4
seed = 3
"""


@pytest.fixture
def small_config(tmp_path):
    path = tmp_path / "small.cfg"
    path.write_text(SMALL_CONFIG + f"out_dir = {tmp_path / 'out'}\n")
    return path
