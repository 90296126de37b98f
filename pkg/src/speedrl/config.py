"""Experiment configuration and its flat ``key = value`` file format.

Every field of :class:`ExperimentConfig` has one documented key; see
:data:`KEY_DOCS`. Lines starting with ``#`` and trailing ``# ...`` comments
are ignored. ``SPEEDRL_OUT_DIR`` overrides ``out_dir``.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .conditions import CLASS_NAMES, TaskSpec
from .errors import ConfigError, ReadError
from .filtering import FilterState
from .grpo import TrainConfig
from .net import NetConfig
from .sampler import SampleConfig

OUT_DIR_ENV = "SPEEDRL_OUT_DIR"


@dataclass(frozen=True)
class FilterSettings:
    enabled: bool = True
    invert_filter: bool = False
    history_size: int = 100
    percentile_p: float = 10.0
    max_attempts: int = 3
    num_shards: int = 1

    def initial_state(self) -> FilterState:
        return FilterState(history_size=self.history_size, percentile_p=self.percentile_p,
                           max_attempts=self.max_attempts, num_shards=self.num_shards,
                           invert=self.invert_filter).validate()


@dataclass(frozen=True)
class PretrainSettings:
    steps: int = 4000
    batch_size: int = 32
    learning_rate: float = 6e-3
    noise_rate: float = 0.1
    num_conditions: int = 2000
    per_cond: int = 2
    eval_examples: int = 2000
    log_every: int = 1


@dataclass(frozen=True)
class RunSettings:
    """Orchestration knobs for the RL loop."""

    num_conditions: int = 40
    checkpoint_every: int = 500
    log_wall_time: bool = False
    eval_n: int = 64


@dataclass(frozen=True)
class ExperimentConfig:
    net: NetConfig = field(default_factory=NetConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    filter: FilterSettings = field(default_factory=FilterSettings)
    sample: SampleConfig = field(default_factory=lambda: SampleConfig(nfe=8))
    task: TaskSpec = field(default_factory=TaskSpec)
    pretrain: PretrainSettings = field(default_factory=PretrainSettings)
    run: RunSettings = field(default_factory=RunSettings)
    seed: int = 0
    out_dir: str = "runs/default"

    def validate(self) -> "ExperimentConfig":
        """Check every section and the cross-field constraints before any compute."""
        self.net.validate()
        L = self.net.num_positions
        self.train.validate(L)
        self.filter.initial_state()
        self.sample.validate(L)
        if (self.task.grid_h, self.task.grid_w, self.task.vocab) != (self.net.grid_h, self.net.grid_w, self.net.vocab):
            raise ConfigError("task grid/vocab must match the network")
        if self.net.num_conditions != self.task.num_conditions:
            raise ConfigError(f"num_conditions must equal the task family size {self.task.num_conditions}")
        if self.train.group_size % self.filter.num_shards:
            raise ConfigError(f"group_size {self.train.group_size} is not divisible by "
                              f"num_shards {self.filter.num_shards}")
        if self.sample.cfg_weight != 1.0 and self.net.cond_dropout_prob == 0.0:
            raise ConfigError("cfg_weight != 1 needs an unconditional branch (cond_dropout_prob > 0)")
        p = self.pretrain
        if p.steps < 0 or p.batch_size < 1 or not p.learning_rate > 0:
            raise ConfigError("pretrain steps >= 0, batch_size >= 1 and learning_rate > 0 are required")
        if not 0.0 <= p.noise_rate < 0.5:
            raise ConfigError(f"pretrain_noise_rate must be in [0, 0.5), got {p.noise_rate}")
        if p.num_conditions < 1 or p.per_cond < 1 or p.eval_examples < 1 or p.log_every < 1:
            raise ConfigError("pretrain sizes must be >= 1")
        if self.run.num_conditions < 1 or self.run.checkpoint_every < 0 or self.run.eval_n < 1:
            raise ConfigError("run sizes out of range")
        return self

    def with_out_dir_override(self) -> "ExperimentConfig":
        env = os.environ.get(OUT_DIR_ENV)
        return replace(self, out_dir=env) if env else self

    @property
    def out_path(self) -> Path:
        return Path(self.out_dir)


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.replace(" ", "").split(",") if v)


def _classes(text: str) -> tuple[int, ...]:
    out = []
    for v in text.replace(" ", "").split(","):
        out.append(CLASS_NAMES.index(v) if v in CLASS_NAMES else int(v))
    return tuple(out)


# key -> (section, field, parser, doc)
KEYS: dict[str, tuple[str | None, str, object, str]] = {
    "grid_h": ("net", "grid_h", int, "grid height"),
    "grid_w": ("net", "grid_w", int, "grid width"),
    "vocab": ("net", "vocab", int, "token vocabulary size (MASK is extra)"),
    "embed_dim": ("net", "embed_dim", int, "transformer width"),
    "num_layers": ("net", "num_layers", int, "transformer blocks"),
    "num_conditions": ("net", "num_conditions", int, "condition embeddings (task classes)"),
    "cond_dropout_prob": ("net", "cond_dropout_prob", float, "pretraining condition dropout"),
    "group_size": ("train", "group_size", int, "trajectories per group (G)"),
    "nfe_choices": ("train", "nfe_choices", _ints, "comma list of step counts drawn per member"),
    "beta": ("train", "beta", float, "KL coefficient"),
    "alpha": ("train", "alpha", float, "speed reward factor"),
    "clip_eps": ("train", "clip_eps", float, "ratio clip range"),
    "num_iterations_per_batch": ("train", "num_iterations_per_batch", int, "updates per accepted group"),
    "per_token_likelihood": ("train", "per_token_likelihood", _bool, "normalise per step token count"),
    "kl_estimator": ("train", "kl_estimator", str, "exact_ce or k3_sampled"),
    "learning_rate": ("train", "learning_rate", float, "RL gradient-descent step size"),
    "max_grad_norm": ("train", "max_grad_norm", float, "global gradient-norm clip (0 = off)"),
    "adv_std_floor": ("train", "adv_std_floor", float, "advantage std floor"),
    "total_steps": ("train", "total_steps", int, "accepted RL batches"),
    "filter_enabled": ("filter", "enabled", _bool, "variance-percentile filter on/off"),
    "invert_filter": ("filter", "invert_filter", _bool, "reject high-spread groups instead"),
    "history_size": ("filter", "history_size", int, "accepted spreads remembered"),
    "percentile_p": ("filter", "percentile_p", float, "filter percentile in [0, 100]"),
    "max_attempts": ("filter", "max_attempts", int, "resamples before forced acceptance"),
    "num_shards": ("filter", "num_shards", int, "shards for the group spread"),
    "cfg_weight": ("sample", "cfg_weight", float, "classifier-free guidance weight"),
    "temperature": ("sample", "temperature", float, "sampling temperature"),
    "schedule": ("sample", "schedule", str, "cosine or linear unmasking schedule"),
    "sample_nfe": ("sample", "nfe", int, "default step count for render"),
    "palette_size": ("task", "palette_size", int, "colours usable by patterns"),
    "smooth_weight": ("task", "smooth_weight", float, "smoothness weight in imperfect grids"),
    "task_classes": ("task", "classes", _classes, "comma list of class names or ids"),
    "pretrain_steps": ("pretrain", "steps", int, "pretraining updates"),
    "pretrain_batch_size": ("pretrain", "batch_size", int, "pretraining batch"),
    "pretrain_learning_rate": ("pretrain", "learning_rate", float, "pretraining Adam step size"),
    "pretrain_noise_rate": ("pretrain", "noise_rate", float, "label noise in the synthetic corpus"),
    "pretrain_num_conditions": ("pretrain", "num_conditions", int, "conditions in the corpus"),
    "pretrain_per_cond": ("pretrain", "per_cond", int, "grids per corpus condition"),
    "pretrain_eval_examples": ("pretrain", "eval_examples", int, "held-out grids for accuracy"),
    "pretrain_log_every": ("pretrain", "log_every", int, "metrics line interval"),
    "rl_num_conditions": ("run", "num_conditions", int, "conditions cycled by the RL loop"),
    "checkpoint_every": ("run", "checkpoint_every", int, "RL checkpoint interval (0 = final only)"),
    "log_wall_time": ("run", "log_wall_time", _bool, "record wall_ms (breaks byte-identical logs)"),
    "eval_n": ("run", "eval_n", int, "samples per (condition, nfe) cell in evaluation"),
    "seed": (None, "seed", int, "master seed"),
    "out_dir": (None, "out_dir", str, "output directory"),
}

KEY_DOCS = {k: v[3] for k, v in KEYS.items()}


def _sync_task(cfg: ExperimentConfig) -> ExperimentConfig:
    task = replace(cfg.task, grid_h=cfg.net.grid_h, grid_w=cfg.net.grid_w, vocab=cfg.net.vocab)
    return replace(cfg, task=task)


def parse_config_text(text: str, base: ExperimentConfig | None = None) -> ExperimentConfig:
    cfg = base or ExperimentConfig()
    updates: dict[str, dict[str, object]] = {}
    top: dict[str, object] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, val = line.partition("=")
        key, val = key.strip(), val.strip()
        if not sep:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw.strip()!r}")
        if key not in KEYS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        section, name, parse, _ = KEYS[key]
        try:
            value = parse(val)
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: bad value for {key}: {exc}") from None
        if section is None:
            top[name] = value
        else:
            updates.setdefault(section, {})[name] = value
    try:
        for section, vals in updates.items():
            cfg = replace(cfg, **{section: replace(getattr(cfg, section), **vals)})
        cfg = replace(cfg, **top)
        return _sync_task(cfg)
    except Exception as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from None


def load_config(path: str | Path | None, validate: bool = True) -> ExperimentConfig:
    if path is None:
        cfg = ExperimentConfig()
    else:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ReadError(f"cannot read config {path}: {exc.strerror}") from None
        cfg = parse_config_text(text)
    cfg = cfg.with_out_dir_override()
    return cfg.validate() if validate else cfg


def dump_config(cfg: ExperimentConfig) -> str:
    """Render every key; ``parse_config_text(dump_config(c)) == c``."""
    lines = []
    for key, (section, name, parse, doc) in KEYS.items():
        obj = cfg if section is None else getattr(cfg, section)
        val = getattr(obj, name)
        if key == "task_classes":
            text = ",".join(CLASS_NAMES[c] for c in val)
        elif isinstance(val, tuple):
            text = ",".join(str(v) for v in val)
        elif isinstance(val, bool):
            text = "true" if val else "false"
        else:
            text = str(val)
        lines.append(f"{key} = {text}  # {doc}")
    return "\n".join(lines) + "\n"


def config_fields() -> list[str]:
    return [f.name for f in fields(ExperimentConfig)]
