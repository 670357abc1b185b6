"""Run configuration: JSON file + dotted ``--set`` overrides, validated before any work starts."""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .data import DataConfig
from .evaluation import ProbeConfig
from .model import ModelConfig
from .pretrain import Stage1Config
from .tune import Stage2Config

SEED_ENV = "STARS_SEED"


class ConfigError(ValueError):
    pass


@dataclass
class EvalConfig:
    k: int = 1
    n_shot: int = 1
    probe_epochs: int = 100
    probe_batch_size: int = 256
    probe_lr: float = 0.1
    probe_momentum: float = 0.9

    def validate(self) -> None:
        if self.k < 1 or self.n_shot < 1:
            raise ValueError("eval.k and eval.n_shot must be >= 1")
        self.probe(0).validate()

    def probe(self, seed: int) -> ProbeConfig:
        return ProbeConfig(epochs=self.probe_epochs, batch_size=self.probe_batch_size,
                           lr=self.probe_lr, momentum=self.probe_momentum, seed=seed)


SECTIONS = {
    "data": DataConfig,
    "model": ModelConfig,
    "stage1": Stage1Config,
    "stage2": Stage2Config,
    "eval": EvalConfig,
}


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    stage1: Stage1Config = field(default_factory=Stage1Config)
    stage2: Stage2Config = field(default_factory=Stage2Config)
    eval: EvalConfig = field(default_factory=EvalConfig)
    seed: int = 0
    out: str | None = None

    def validate(self) -> None:
        try:
            self.model.validate()
            self.data.validate(self.model.segment_length)
            self.stage1.validate()
            self.stage2.validate()
            self.eval.validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if self.data.target_length // self.model.segment_length > self.model.max_segments:
            raise ConfigError(
                f"data.target_length {self.data.target_length} gives more segments than model.max_segments {self.model.max_segments}"
            )

    def to_dict(self) -> dict[str, Any]:
        """Loadable form: stage seeds are derived from the top-level seed, so they are dropped."""
        out = dataclasses.asdict(self)
        for name in SECTIONS:
            out[name].pop("seed", None)
        return out


def _build_section(cls, values: dict[str, Any], where: str):
    if not isinstance(values, dict):
        raise ConfigError(f"{where} must be an object")
    known = {f.name: f for f in dataclasses.fields(cls) if f.name != "seed"}
    unknown = sorted(set(values) - set(known))
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(unknown)}")
    kwargs = {}
    for k, v in values.items():
        if k == "betas":
            if not isinstance(v, (list, tuple)) or len(v) != 2:
                raise ConfigError(f"{where}.betas must be a pair")
            v = tuple(float(b) for b in v)
        kwargs[k] = v
    return cls(**kwargs)


def config_from_dict(raw: dict[str, Any]) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a JSON object")
    unknown = sorted(set(raw) - set(SECTIONS) - {"seed", "out"})
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(unknown)}")
    sections = {name: _build_section(cls, raw.get(name, {}), name) for name, cls in SECTIONS.items()}
    return RunConfig(**sections, seed=int(raw.get("seed", 0)), out=raw.get("out"))


def _parse_value(text: str) -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(raw: dict[str, Any], overrides: list[str]) -> dict[str, Any]:
    """Apply ``section.key=value`` strings; values are parsed as JSON when possible."""
    raw = json.loads(json.dumps(raw))
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, value = item.split("=", 1)
        parts = key.strip().split(".")
        node = raw
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {key!r} descends into a non-object")
        node[parts[-1]] = _parse_value(value)
    return raw


def load_config(path: str | Path | None = None, overrides: list[str] | None = None,
                env: dict[str, str] | None = None) -> RunConfig:
    """Merge file, overrides and the ``STARS_SEED`` environment variable, then validate."""
    raw: dict[str, Any] = {}
    if path is not None:
        try:
            raw = json.loads(Path(path).read_text())
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    raw = apply_overrides(raw, overrides or [])
    try:
        cfg = config_from_dict(raw)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    env = os.environ if env is None else env
    if env.get(SEED_ENV):
        try:
            cfg.seed = int(env[SEED_ENV])
        except ValueError as exc:
            raise ConfigError(f"{SEED_ENV} must be an integer") from exc
    cfg.stage1.seed = cfg.seed
    cfg.stage2.seed = cfg.seed
    cfg.validate()
    return cfg
