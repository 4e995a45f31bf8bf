"""Run configuration: a strict JSON tree mirroring the module configs.

Unknown keys are errors (with their full path), defaults live on the
dataclasses, and explicit CLI flags override file values.  Every command
prints the fully-resolved config before running, and re-running with that
printed config reproduces the run in deterministic mode.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

from .corpus import SamplerConfig
from .model import ModelConfig
from .pretrain import OptimConfig


class ConfigError(ValueError):
    pass


@dataclass
class FinetuneConfig:
    stage: int = 1
    depth: int = 200
    per_query: int = 7
    tied: bool = True
    in_batch: bool = True


@dataclass
class EvalConfig:
    k: int = 1000
    metrics: tuple[str, ...] = ("mrr@10", "recall@50", "recall@1000")


@dataclass
class PathsConfig:
    corpus: str | None = None
    queries: str | None = None
    passages: str | None = None
    qrels: str | None = None
    out_dir: str | None = None


@dataclass
class RunConfig:
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    model: ModelConfig = field(default_factory=lambda: ModelConfig(vocab_size=8192))
    optim: OptimConfig = field(default_factory=lambda: OptimConfig(total_steps=1000))
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)
    seed: int = 0
    deterministic: bool = False
    checkpoint_every: int = 0
    figures: bool = True


_SECTIONS = {
    "sampler": SamplerConfig,
    "model": ModelConfig,
    "optim": OptimConfig,
    "finetune": FinetuneConfig,
    "eval": EvalConfig,
    "paths": PathsConfig,
}

_TUPLE_FIELDS = {"mixture_weights", "betas", "metrics"}


def _build_section(cls, data: dict, path: str):
    known = {f.name: f for f in fields(cls)}
    kwargs = {}
    for key, value in data.items():
        if key not in known:
            raise ConfigError(f"unknown key {path}.{key}")
        if key in _TUPLE_FIELDS and isinstance(value, list):
            value = tuple(value)
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid section {path!r}: {exc}") from exc


def config_from_dict(data: dict) -> RunConfig:
    top_known = {f.name for f in fields(RunConfig)}
    kwargs: dict[str, Any] = {}
    for key, value in data.items():
        if key not in top_known:
            raise ConfigError(f"unknown key {key}")
        if key in _SECTIONS:
            if not isinstance(value, dict):
                raise ConfigError(f"section {key!r} must be an object")
            kwargs[key] = _build_section(_SECTIONS[key], value, key)
        else:
            kwargs[key] = value
    try:
        return RunConfig(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def parse_config(path: str | Path) -> RunConfig:
    """Strictly parse a JSON run config; unknown keys are errors."""
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return config_from_dict(data)


def resolved_dict(cfg: RunConfig) -> dict:
    return dataclasses.asdict(cfg)


def dump_config(cfg: RunConfig, path: str | Path) -> None:
    Path(path).write_text(json.dumps(resolved_dict(cfg), indent=2, sort_keys=True) + "\n",
                          encoding="utf-8")


def apply_override(cfg: RunConfig, dotted_key: str, value) -> None:
    """Set ``sampler.max_span_len``-style keys, validating the path."""
    parts = dotted_key.split(".")
    target: Any = cfg
    for part in parts[:-1]:
        if not hasattr(target, part):
            raise ConfigError(f"unknown key {dotted_key}")
        target = getattr(target, part)
    leaf = parts[-1]
    if not dataclasses.is_dataclass(target) or leaf not in {f.name for f in fields(target)}:
        raise ConfigError(f"unknown key {dotted_key}")
    setattr(target, leaf, value)
    # Re-run the section's validation.
    if hasattr(target, "__post_init__"):
        try:
            target.__post_init__()
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid value for {dotted_key}: {exc}") from exc


def require_paths(cfg: RunConfig, *names: str) -> dict[str, Path]:
    """Check the named path fields exist on disk; returns resolved paths."""
    out = {}
    for name in names:
        value = getattr(cfg.paths, name)
        if value is None:
            raise ConfigError(f"paths.{name} is required for this command")
        p = Path(value)
        if name != "out_dir" and not p.exists():
            raise ConfigError(f"paths.{name}: {p} does not exist")
        out[name] = p
    return out
