from __future__ import annotations

import json

import numpy as np
import pytest

from speedrl.checkpoint import load_checkpoint
from speedrl.cli import EXIT_CODES, main
from speedrl.conditions import ConditionRef
from speedrl.config import load_config
from speedrl.errors import ConfigError, InputError, UsageError
from speedrl.export import DEFAULT_PALETTE, export_grid_image, export_side_by_side
from speedrl.harness import ablate, apply_overrides, evaluate, klbench, moving_average, pretrain, rl_train
from speedrl.net import init_params

# ------------------------------------------------------------------ export


def test_ppm_2x2(tmp_path):
    pal = {0: (1, 2, 3), 1: (4, 5, 6), 2: (7, 8, 9), 3: (10, 11, 12)}
    path = export_grid_image(np.array([[0, 1], [2, 3]]), pal, tmp_path / "g.ppm")
    text = path.read_text()
    assert text.startswith("P3\n2 2\n255\n")
    assert text.split("\n")[3:7] == ["1 2 3", "4 5 6", "7 8 9", "10 11 12"]


def test_ppm_side_by_side_26x8(tmp_path):
    grids = [np.full((8, 8), i) for i in range(3)]
    text = export_side_by_side(grids, DEFAULT_PALETTE, tmp_path / "s.ppm").read_text()
    assert text.startswith("P3\n26 8\n255\n")
    assert len(text.strip().split("\n")) == 3 + 26 * 8


def test_ppm_errors(tmp_path):
    with pytest.raises(InputError):
        export_grid_image(np.array([[0, 99]]), DEFAULT_PALETTE, tmp_path / "x.ppm")
    with pytest.raises(InputError):
        export_grid_image(np.array([[0, 16]]), DEFAULT_PALETTE, tmp_path / "x.ppm", mask_id=16)


# ------------------------------------------------------------------ klbench


def test_klbench_properties():
    rows = klbench([64, 1024], [0, 1, 2, 3, 4, 5], 20_000, 0)
    for r in rows:
        assert r["exact_eval_var"] == 0.0
        if r["entropy_level"] == 0:
            assert r["exact_kl"] == 0.0 and abs(r["k3_mean"]) <= 3 * r["k3_stderr"] + 1e-15
        else:
            assert r["exact_kl"] == pytest.approx(0.1, abs=1e-10)
            assert abs(r["k3_mean"] - r["exact_kl"]) <= 3 * r["k3_stderr"]
    for V in (64, 1024):
        var = [r["k3_single_draw_var"] for r in rows if r["vocab"] == V]
        assert all(b > a for a, b in zip(var, var[1:])), var
    with pytest.raises(ConfigError):
        klbench([64], [1], 10, 0)


# ------------------------------------------------------------------ pretrain / rl / eval


def test_pretrain_zero_steps_is_init(small_config, tmp_path):
    cfg = apply_overrides(load_config(small_config), {"pretrain.steps": 0})
    res = pretrain(cfg, tmp_path / "p0")
    assert load_checkpoint(res.checkpoint).equals(init_params(cfg.net, cfg.seed))


def test_rl_small_run_and_filter(small_config, tmp_path):
    cfg = load_config(small_config)
    base = init_params(cfg.net, 0)
    on = rl_train(cfg, base, tmp_path / "on")
    off = rl_train(apply_overrides(cfg, {"filter.enabled": False}), base, tmp_path / "off")
    assert len(on.metrics) == len(off.metrics) == cfg.train.total_steps
    assert on.resamples > 0 and off.resamples == 0
    assert {"sigma_batch", "tau", "attempts", "accepted"} <= set(on.metrics[-1])


def test_evaluate_shape_and_determinism(small_config):
    cfg = load_config(small_config)
    p = init_params(cfg.net, 1)
    one = evaluate(p, cfg.task, [4], 1, 0, conds=[ConditionRef(0, (1,))])
    assert len(one.rows) == 1 and one.rows[0].n == 1
    a = evaluate(p, cfg.task, [2, 4], 3, 5)
    b = evaluate(p, cfg.task, [2, 4], 3, 5)
    assert a.rows == b.rows and [r.nfe for r in a.rows] == [2, 4]
    with pytest.raises(ConfigError):
        evaluate(p, cfg.task, [17], 1, 0)


def test_ablate_shapes(small_config, tmp_path):
    cfg = apply_overrides(load_config(small_config), {"train.total_steps": 2})
    base = init_params(cfg.net, 0)
    rows = ablate("num_iterations", cfg, base, tmp_path)
    assert [r["run"] for r in rows] == ["iters1", "iters2", "iters4"]
    assert len(list(tmp_path.glob("ablate_num_iterations_*_metrics.jsonl"))) == 3
    assert (tmp_path / "ablate_num_iterations.csv").read_text().count("\n") == 4
    assert [r["run"] for r in ablate("speed_reward", cfg, base, tmp_path)] == ["alpha0", "default"]
    with pytest.raises(UsageError):
        ablate("bogus", cfg, base, tmp_path)


def test_moving_average():
    np.testing.assert_allclose(moving_average([1, 2, 3, 4], 2), [1, 1.5, 2.5, 3.5])


# ------------------------------------------------------------------ CLI


def _err(capsys):
    return capsys.readouterr().err.strip().splitlines()


@pytest.mark.parametrize("argv,code", [
    ([], "USAGE"),
    (["frobnicate"], "USAGE"),
    (["eval"], "USAGE"),
    (["ablate", "--preset", "nope"], "USAGE"),
    (["eval", "--ckpt", "/nonexistent.ckpt"], "IO"),
    (["klbench", "--draws", "5"], "CONFIG"),
    (["filter-sim", "--sigmas", "/nonexistent"], "IO"),
])
def test_cli_error_codes(argv, code, capsys):
    assert main(argv) == EXIT_CODES[code]
    lines = _err(capsys)
    assert len(lines) == 1 and lines[0].startswith(f"speedrl: error[{code}]: ")


def test_cli_bad_config_and_format(tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text("beta = x\n")
    assert main(["pretrain", "--config", str(bad)]) == EXIT_CODES["CONFIG"]
    junk = tmp_path / "junk.ckpt"
    junk.write_bytes(b"not a checkpoint")
    assert main(["eval", "--ckpt", str(junk)]) == EXIT_CODES["FORMAT"]
    assert len(_err(capsys)) == 2


def test_cli_filter_sim_and_prompts(tmp_path, capsys):
    sig = tmp_path / "s.txt"
    sig.write_text("0.5 0.4 0.1 0.6\n")
    assert main(["filter-sim", "--sigmas", str(sig), "--p", "50"]) == 0
    out = [json.loads(line) for line in capsys.readouterr().out.splitlines()]
    assert out[0]["tau"] is None and out[0]["accepted"] and not out[2]["accepted"]
    f = tmp_path / "p.txt"
    f.write_text("a person\nthis prompt has exactly seven words here\n")
    assert main(["prompts", "--in", str(f), "--report", str(tmp_path / "r.csv")]) == 0
    assert json.loads(capsys.readouterr().out)["kept"] == 1


def test_cli_end_to_end_small(small_config, tmp_path, capsys):
    out = tmp_path / "run"
    assert main(["pretrain", "--config", str(small_config), "--out", str(out)]) == 0
    ckpt = out / "pretrain.ckpt"
    assert main(["train", "--config", str(small_config), "--base", str(ckpt), "--out", str(out)]) == 0
    assert main(["eval", "--config", str(small_config), "--ckpt", str(out / "rl.ckpt"), "--nfe", "2,4",
                 "--n", "2"]) == 0
    assert main(["render", "--config", str(small_config), "--ckpt", str(ckpt), "--cond", "checkerboard",
                 "--nfe", "1,4", "--out", str(tmp_path / "r.ppm")]) == 0
    assert (tmp_path / "r.ppm").read_text().startswith("P3\n9 4\n255\n")
