"""Difficulty schedule moving negative sampling from Replace to Scale."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .negatives import PerturbationKind

MODES = ("curriculum", "uniform", "scale_only", "replace_only")


def default_k(total_steps: int) -> float:
    """Rate at which p_replace hits zero at 80% of ``total_steps``."""
    return 0.5 / (0.8 * total_steps)


@dataclass
class CurriculumConfig:
    k: float = 1e-4  # per optimizer step, as a fraction (1e-4 == 0.01 %)
    mode: str = "curriculum"
    total_steps: Optional[int] = None

    def __post_init__(self):
        if self.k < 0:
            raise ValueError(f"curriculum rate must be >= 0, got {self.k}")
        if self.mode not in MODES:
            raise ValueError(f"unknown curriculum mode {self.mode!r}; expected one of {MODES}")

    @property
    def k_percent(self) -> float:
        return self.k * 100.0

    @classmethod
    def from_percent(cls, k_percent: float, mode: str = "curriculum",
                     total_steps: Optional[int] = None) -> "CurriculumConfig":
        return cls(k_percent / 100.0, mode, total_steps)


@dataclass(frozen=True)
class CurriculumState:
    step: int
    p_replace: float
    p_scale: float


def sampling_probs(step: int, cfg: CurriculumConfig) -> tuple[float, float]:
    """(p_replace, p_scale) at ``step``; p_replace = clamp(0.5 - k*step, 0, 0.5)."""
    if step < 0:
        raise ValueError(f"step must be >= 0, got {step}")
    if cfg.mode == "scale_only":
        return 0.0, 1.0
    if cfg.mode == "replace_only":
        return 1.0, 0.0
    if cfg.mode == "uniform":
        return 0.5, 0.5
    p_replace = min(max(0.5 - cfg.k * step, 0.0), 0.5)
    return p_replace, 1.0 - p_replace


def state_at(step: int, cfg: CurriculumConfig) -> CurriculumState:
    return CurriculumState(step, *sampling_probs(step, cfg))


def sample_kind(step: int, cfg: CurriculumConfig, rng: np.random.Generator) -> PerturbationKind:
    p_replace, _ = sampling_probs(step, cfg)
    # one uniform per call keeps the rng stream layout mode-independent
    return PerturbationKind.REPLACE if rng.random() < p_replace else PerturbationKind.SCALE
