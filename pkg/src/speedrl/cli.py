"""Command-line entry point: ``speedrl <subcommand> ...``.

Failures print one line ``speedrl: error[CODE]: message`` to stderr and exit
with the code's status number.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint
from .conditions import parse_condition
from .config import ExperimentConfig, dump_config, load_config
from .errors import InputError, ReadError, SpeedRLError, UsageError
from .export import DEFAULT_PALETTE, export_side_by_side
from .filtering import FilterState, simulate
from .harness import (ABLATION_PRESETS, KLBENCH_COLUMNS, ablate, check_compatible, evaluate, klbench,
                      pretrain, rl_train, write_rows_csv)
from .prompts import load_many, preprocess
from .sampler import sample_group

EXIT_CODES = {"USAGE": 2, "CONFIG": 3, "INPUT": 4, "FORMAT": 5, "IO": 6, "NUMERICAL": 7, "DIVERGED": 8, "ERROR": 1}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _ints(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"expected a comma list of integers, got {text!r}") from None


def _out_dir(cfg: ExperimentConfig, override: str | None) -> Path:
    out = Path(override) if override else cfg.out_path
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_cfg(args) -> ExperimentConfig:
    cfg = load_config(getattr(args, "config", None))
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, seed=args.seed).validate()
    return cfg


def cmd_pretrain(args) -> int:
    cfg = _load_cfg(args)
    out = _out_dir(cfg, args.out)
    res = pretrain(cfg, out)
    print(json.dumps({"checkpoint": str(res.checkpoint), "heldout_accuracy": res.heldout_accuracy,
                      "heldout_accuracy_noisy": res.heldout_accuracy_noisy, "final_loss": res.final_loss}))
    return 0


def cmd_train(args) -> int:
    cfg = _load_cfg(args)
    out = _out_dir(cfg, args.out)
    base = load_checkpoint(args.base)
    res = rl_train(cfg, base, out)
    last = next((r for r in reversed(res.metrics) if "event" not in r), {})
    print(json.dumps({"checkpoint": str(res.checkpoint), "steps": len(res.metrics),
                      "resamples": res.resamples, "final_mean_reward": last.get("mean_reward")}))
    return 0


def cmd_eval(args) -> int:
    cfg = _load_cfg(args)
    params = load_checkpoint(args.ckpt)
    check_compatible(cfg, params)
    table = evaluate(params, cfg.task, _ints(args.nfe), args.n, cfg.seed, cfg.sample, tag=args.tag,
                     alpha=cfg.train.alpha)
    if args.out:
        table.write_csv(args.out)
    table.write(sys.stdout)
    return 0


def cmd_klbench(args) -> int:
    rows = klbench(_ints(args.vocab), _ints(args.levels), args.draws, args.seed, args.target_kl)
    if args.out:
        write_rows_csv(rows, KLBENCH_COLUMNS, args.out)
    write_rows_csv(rows, KLBENCH_COLUMNS, sys.stdout)
    return 0


def cmd_ablate(args) -> int:
    if args.preset not in ABLATION_PRESETS:
        raise UsageError(f"unknown preset {args.preset!r}; choose from {', '.join(ABLATION_PRESETS)}")
    cfg = _load_cfg(args)
    out = _out_dir(cfg, args.out)
    base = load_checkpoint(args.base) if args.base else pretrain(cfg, out).params
    summary = ablate(args.preset, cfg, base, out)
    for row in summary:
        print(json.dumps(row))
    return 0


def _read_sigmas(path: str) -> list[float]:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ReadError(f"cannot read {path}: {exc.strerror}") from None
    try:
        return [float(v) for v in text.replace(",", " ").split()]
    except ValueError as exc:
        raise InputError(f"bad sigma value in {path}: {exc}") from None


def cmd_filter_sim(args) -> int:
    state = FilterState(history_size=args.history, percentile_p=args.p, max_attempts=args.max_attempts)
    res = simulate(_read_sigmas(args.sigmas), state)
    lines = [json.dumps({**d.as_dict(), "tau": None if not np.isfinite(d.tau) else d.tau})
             for d in res.decisions]
    if args.out:
        Path(args.out).write_text("".join(line + "\n" for line in lines))
    else:
        for line in lines:
            print(line)
    print(json.dumps({"batches": len(res.decisions), "first_attempt_rejection_rate": res.first_attempt_rejection_rate,
                      "history_len": len(res.final_state.history)}), file=sys.stderr)
    return 0


def cmd_prompts(args) -> int:
    kept, dropped, report = preprocess(load_many(args.inputs))
    report.write_csv(args.report)
    if args.kept:
        Path(args.kept).write_text("".join(r.text + "\n" for r in kept))
    print(json.dumps({"kept": len(kept), "dropped": len(dropped), "report": args.report}))
    return 0


def cmd_render(args) -> int:
    cfg = _load_cfg(args)
    params = load_checkpoint(args.ckpt)
    check_compatible(cfg, params)
    cond = parse_condition(args.cond, cfg.task)
    nfes = _ints(args.nfe)
    scfgs = [replace(cfg.sample, nfe=n, rng_stream=(cfg.seed, j)).validate(params.cfg.num_positions)
             for j, n in enumerate(nfes)]
    trajs = sample_group(params, cond, scfgs)
    h, w = params.cfg.grid_h, params.cfg.grid_w
    grids = [t.final_grid.reshape(h, w) for t in trajs]
    export_side_by_side(grids, DEFAULT_PALETTE, args.out, mask_id=params.cfg.mask_id)
    print(json.dumps({"out": args.out, "cond": cond.name, "nfe": nfes}))
    return 0


def cmd_show_config(args) -> int:
    sys.stdout.write(dump_config(load_config(args.config)))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="speedrl", description="Speed-rewarded GRPO on a toy masked grid generator.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def add(name, fn, help_text, config=True):
        sp = sub.add_parser(name, help=help_text)
        sp.set_defaults(fn=fn)
        if config:
            sp.add_argument("--config", help="flat key = value config file (defaults if omitted)")
            sp.add_argument("--seed", type=int, help="override the config seed")
        return sp

    sp = add("pretrain", cmd_pretrain, "train the base masked-token model")
    sp.add_argument("--out", help="output directory (default: out_dir)")

    sp = add("train", cmd_train, "GRPO fine-tuning from a base checkpoint")
    sp.add_argument("--base", required=True)
    sp.add_argument("--out")

    sp = add("eval", cmd_eval, "quality table over step counts")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--nfe", default="4,8,12")
    sp.add_argument("--n", type=int, default=64, help="samples per condition and step count")
    sp.add_argument("--tag", default="model")
    sp.add_argument("--out", help="CSV path (the table is also printed)")

    sp = add("klbench", cmd_klbench, "exact vs k3 KL estimator benchmark", config=False)
    sp.add_argument("--vocab", default="64,256,1024")
    sp.add_argument("--levels", default="0,1,2,3,4,5")
    sp.add_argument("--draws", type=int, default=100_000)
    sp.add_argument("--target-kl", type=float, default=0.1)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out")

    sp = add("ablate", cmd_ablate, "matched-seed ablation grid")
    sp.add_argument("--preset", required=True, help=", ".join(ABLATION_PRESETS))
    sp.add_argument("--base", help="base checkpoint (pretrains one if omitted)")
    sp.add_argument("--out")

    sp = add("filter-sim", cmd_filter_sim, "replay a sigma stream through the batch filter", config=False)
    sp.add_argument("--sigmas", required=True, help="file of whitespace/comma separated values")
    sp.add_argument("--p", type=float, default=10.0)
    sp.add_argument("--history", type=int, default=100)
    sp.add_argument("--max-attempts", type=int, default=3)
    sp.add_argument("--out", help="JSONL decisions path (default stdout)")

    sp = add("prompts", cmd_prompts, "clean prompt files and write the drop report", config=False)
    sp.add_argument("--in", dest="inputs", nargs="+", required=True)
    sp.add_argument("--report", required=True)
    sp.add_argument("--kept", help="write kept prompts here")

    sp = add("render", cmd_render, "sample grids and write a PPM image")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--cond", required=True, help="class name or id, optionally :c1,c2 colours")
    sp.add_argument("--nfe", default="8", help="comma list; several values tile side by side")
    sp.add_argument("--out", required=True)

    sp = sub.add_parser("show-config", help="print every config key with its value")
    sp.set_defaults(fn=cmd_show_config)
    sp.add_argument("--config")
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not getattr(args, "fn", None):
            raise UsageError("missing subcommand; see speedrl --help")
        return args.fn(args)
    except SpeedRLError as exc:
        msg = " ".join(str(exc).split())
        print(f"speedrl: error[{exc.code}]: {msg}", file=sys.stderr)
        return EXIT_CODES.get(exc.code, 1)


if __name__ == "__main__":
    sys.exit(main())
