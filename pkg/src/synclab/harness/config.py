"""Run configuration: dataclass, file loading (JSON or key=value), overrides."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Optional

from ..curriculum import MODES, CurriculumConfig, default_k
from ..negatives import PerturbationKind

METHODS = ("sft", "dpo", "syncdpo")

# dotted spellings accepted in config files
ALIASES = {
    "curriculum.k_percent": "curriculum_k_percent",
    "curriculum.mode": "curriculum_mode",
}


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    method: str = "sft"
    steps: int = 3000
    batch_size: int = 32
    learning_rate: float = 1e-3
    warmup_steps: int = 100
    weight_decay: float = 1e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.95
    adam_eps: float = 1e-8
    ema_decay: float = 0.9
    beta: float = 0.2
    curriculum_mode: str = "curriculum"
    curriculum_k_percent: Optional[float] = None  # None: reach p_replace=0 at 80% of steps
    negative_kind: Optional[str] = None  # fixed-kind ablation; bypasses the curriculum
    n_candidates: int = 3
    seed: int = 0
    dataset: str = ""
    output_dir: str = "runs/run"
    init_checkpoint: Optional[str] = None  # also the frozen reference for dpo/syncdpo
    hidden: int = 256
    time_dim: int = 16
    depth: int = 2
    sampling_steps: int = 30
    eval_every: int = 500
    eval_n: int = 200
    eval_seed: int = 1234
    val_n: int = 256
    ckpt_every: int = 1000
    log_records: bool = True

    def validate(self) -> "TrainConfig":
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {METHODS}, got {self.method!r}")
        for name in ("batch_size", "learning_rate", "adam_eps", "n_candidates", "hidden",
                     "time_dim", "depth", "sampling_steps", "eval_every", "eval_n", "val_n",
                     "ckpt_every", "beta"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)!r}")
        for name in ("steps", "warmup_steps", "weight_decay"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0, got {getattr(self, name)!r}")
        if not 0 <= self.ema_decay < 1:
            raise ConfigError(f"ema_decay must be in [0, 1), got {self.ema_decay}")
        if not (0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1):
            raise ConfigError("adam betas must be in [0, 1)")
        if self.curriculum_mode not in MODES:
            raise ConfigError(f"curriculum.mode must be one of {MODES}, got {self.curriculum_mode!r}")
        if self.curriculum_k_percent is not None and self.curriculum_k_percent < 0:
            raise ConfigError("curriculum.k_percent must be >= 0")
        if self.negative_kind is not None:
            try:
                PerturbationKind(self.negative_kind)
            except ValueError:
                raise ConfigError(f"unknown negative_kind {self.negative_kind!r}") from None
        if self.n_candidates < 2:
            raise ConfigError("n_candidates must be >= 2")
        if not self.dataset:
            raise ConfigError("dataset path is required")
        if self.method in ("dpo", "syncdpo") and not self.init_checkpoint:
            raise ConfigError(f"method {self.method} needs init_checkpoint (the frozen reference)")
        return self

    def curriculum(self) -> CurriculumConfig:
        if self.curriculum_k_percent is None:
            k = default_k(max(self.steps, 1))
        else:
            k = self.curriculum_k_percent / 100.0
        return CurriculumConfig(k, self.curriculum_mode, self.steps)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)


def _coerce(name: str, raw):
    field_types = {f.name: f.type for f in fields(TrainConfig)}
    default = TrainConfig.__dataclass_fields__[name].default
    if raw is None or (isinstance(raw, str) and raw.lower() in ("none", "null", "")):
        if "Optional" in str(field_types[name]):
            return None
        raise ConfigError(f"{name} cannot be empty")
    if not isinstance(raw, str):
        return raw
    kind = str(field_types[name])
    try:
        if "bool" in kind:
            if raw.lower() in ("1", "true", "yes"):
                return True
            if raw.lower() in ("0", "false", "no"):
                return False
            raise ValueError(raw)
        if "int" in kind and "float" not in kind:
            return int(raw)
        if "float" in kind:
            return float(raw)
    except ValueError:
        raise ConfigError(f"bad value for {name}: {raw!r} (default {default!r})") from None
    return raw


def apply_settings(cfg: TrainConfig, settings: dict) -> TrainConfig:
    known = {f.name for f in fields(TrainConfig)}
    changes = {}
    for key, raw in settings.items():
        name = ALIASES.get(key, key)
        if name not in known:
            raise ConfigError(f"unknown config key {key!r}")
        changes[name] = _coerce(name, raw)
    return dataclasses.replace(cfg, **changes)


def parse_kv_lines(text: str) -> dict:
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def load_config(path: Optional[str] = None, overrides: Optional[list[str]] = None,
                **base) -> TrainConfig:
    cfg = TrainConfig(**base)
    if path:
        text = Path(path).read_text(encoding="utf-8")
        stripped = text.lstrip()
        settings = json.loads(text) if stripped.startswith("{") else parse_kv_lines(text)
        cfg = apply_settings(cfg, settings)
    if overrides:
        cfg = apply_settings(cfg, parse_kv_lines("\n".join(overrides)))
    return cfg.validate()
