"""Flat ``key = value`` run configuration.

Blank lines and ``#`` comments are ignored; unknown keys are errors so a
typo in a sweep cannot silently fall back to a default.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path

from ..trainers import TrainerConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    data_dir: str = ""
    task_loss: str = "edit"
    init_ckpt: str = ""
    scorer_ckpt: str = ""
    emb_dim: int = 32
    hidden_dim: int = 64
    batch_size: int = 32
    max_steps: int = 2000
    eval_interval: int = 100
    patience: int = 10
    eval_max_len: int = 100
    eval_examples: int = 0
    train_decoder: str = "greedy"
    eval_decoder: str = "greedy"
    beam_width: int = 5
    selection: str = "auto"
    trainer: TrainerConfig = field(default_factory=TrainerConfig)


_RUN_KEYS = {f.name: f for f in fields(RunConfig) if f.name != "trainer"}
_TRAINER_KEYS = {f.name: f for f in fields(TrainerConfig)}


def _coerce(raw: str, default, key: str):
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {type(default).__name__}") from None


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    run, trainer, errors = {}, {}, []
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            errors.append(f"{source}:{n}: expected key=value")
            continue
        key, value = (s.strip() for s in line.split("=", 1))
        if key in _RUN_KEYS:
            run[key] = value
        elif key in _TRAINER_KEYS:
            trainer[key] = value
        else:
            errors.append(f"{source}:{n}: unknown key {key!r}")
    if errors:
        raise ConfigError("; ".join(errors))
    return build_config(run, trainer)


def build_config(run: dict, trainer: dict) -> RunConfig:
    base_t, base_r = TrainerConfig(), RunConfig()
    errors = []
    t_kwargs, r_kwargs = {}, {}
    for key, raw in trainer.items():
        try:
            t_kwargs[key] = _coerce(str(raw), getattr(base_t, key), key)
        except ConfigError as e:
            errors.append(str(e))
    for key, raw in run.items():
        try:
            r_kwargs[key] = _coerce(str(raw), getattr(base_r, key), key)
        except ConfigError as e:
            errors.append(str(e))
    if errors:
        raise ConfigError("; ".join(errors))
    try:
        tcfg = TrainerConfig(**t_kwargs)
    except ValueError as e:
        raise ConfigError(f"trainer: {e}") from None
    cfg = RunConfig(trainer=tcfg, **r_kwargs)
    _validate(cfg)
    return cfg


def _validate(cfg: RunConfig) -> None:
    errors = []
    if not cfg.data_dir:
        errors.append("data_dir: required")
    if cfg.task_loss not in ("lm", "edit", "sbleu"):
        errors.append("task_loss: must be lm, edit or sbleu")
    if cfg.task_loss == "lm" and not (cfg.scorer_ckpt or cfg.init_ckpt):
        errors.append("scorer_ckpt: lm loss needs scorer_ckpt or init_ckpt")
    for key in ("emb_dim", "hidden_dim", "batch_size", "max_steps", "eval_interval", "patience", "eval_max_len", "beam_width"):
        if getattr(cfg, key) < 1:
            errors.append(f"{key}: must be positive")
    if cfg.eval_examples < 0:
        errors.append("eval_examples: must be non-negative")
    for key in ("train_decoder", "eval_decoder"):
        if getattr(cfg, key) not in ("greedy", "ancestral", "beam"):
            errors.append(f"{key}: must be greedy, ancestral or beam")
    if cfg.selection not in ("auto", "perplexity", "task_loss"):
        errors.append("selection: must be auto, perplexity or task_loss")
    if errors:
        raise ConfigError("; ".join(errors))


_PATH_KEYS = ("data_dir", "init_ckpt", "scorer_ckpt")


def load_config(path, overrides: dict | None = None) -> RunConfig:
    """Read a config file; relative paths resolve against its directory."""
    cfg = parse_config(Path(path).read_text(encoding="utf-8"), str(path))
    base = Path(path).resolve().parent
    fixed = {k: str(base / getattr(cfg, k)) for k in _PATH_KEYS if getattr(cfg, k) and not Path(getattr(cfg, k)).is_absolute()}
    if fixed:
        cfg = dataclasses.replace(cfg, **fixed)
    if overrides:
        cfg = with_overrides(cfg, overrides)
    return cfg


def with_overrides(cfg: RunConfig, overrides: dict) -> RunConfig:
    run = {k: getattr(cfg, k) for k in _RUN_KEYS}
    trainer = dataclasses.asdict(cfg.trainer)
    for key, value in overrides.items():
        if key in _RUN_KEYS:
            run[key] = value
        elif key in _TRAINER_KEYS:
            trainer[key] = value
        else:
            raise ConfigError(f"unknown key {key!r}")
    return build_config(run, trainer)


def dump_config(cfg: RunConfig) -> str:
    lines = [f"{k} = {getattr(cfg, k)}" for k in _RUN_KEYS]
    lines += [f"{k} = {v}" for k, v in dataclasses.asdict(cfg.trainer).items()]
    return "\n".join(lines) + "\n"
