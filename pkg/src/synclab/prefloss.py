"""Flow-DPO preference loss and the gradient-norm-ratio diagnostic."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .flowcore import NumericalFault, interpolate, target_velocity


@dataclass
class PreferenceBatch:
    """Winner/loser states sharing noise, timestep and condition per row."""

    winner: torch.Tensor  # (B, N)
    loser: torch.Tensor  # (B, N)
    cond: torch.Tensor  # (B, C)
    x0: torch.Tensor  # (B, N)
    t: torch.Tensor  # (B,)

    @property
    def xt_winner(self) -> torch.Tensor:
        return interpolate(self.x0, self.winner, self.t)

    @property
    def xt_loser(self) -> torch.Tensor:
        return interpolate(self.x0, self.loser, self.t)

    @property
    def v_winner(self) -> torch.Tensor:
        return target_velocity(self.x0, self.winner)

    @property
    def v_loser(self) -> torch.Tensor:
        return target_velocity(self.x0, self.loser)

    def swapped(self) -> "PreferenceBatch":
        return PreferenceBatch(self.loser, self.winner, self.cond, self.x0, self.t)

    @classmethod
    def draw(cls, winner: np.ndarray, loser: np.ndarray, cond: np.ndarray,
             rng: np.random.Generator, dtype=torch.float32) -> "PreferenceBatch":
        x0 = rng.standard_normal(winner.shape)
        t = rng.uniform(0.0, 1.0, size=winner.shape[0])
        as_t = lambda a: torch.as_tensor(np.asarray(a), dtype=dtype)
        return cls(as_t(winner), as_t(loser), as_t(cond), as_t(x0), as_t(t))


@dataclass
class LossConfig:
    beta: float = 0.2
    literal_sign: bool = False  # debug only: the double-negative form as typeset

    def __post_init__(self):
        if not self.beta > 0:
            raise ValueError(f"beta must be positive, got {self.beta}")


def _sq_err(model: nn.Module, xt, t, y, v) -> torch.Tensor:
    return ((v - model(xt, t, y)) ** 2).sum(dim=1)


def preference_score(model: nn.Module, ref: Optional[nn.Module], batch: PreferenceBatch) -> torch.Tensor:
    """Per-row z = (e_w(theta) - e_w(ref)) - (e_l(theta) - e_l(ref)), e = squared velocity error.

    With ``ref=None`` the reference terms are dropped; they are constant in the
    parameters, so gradients are unaffected.
    """
    xw, xl, vw, vl = batch.xt_winner, batch.xt_loser, batch.v_winner, batch.v_loser
    z = _sq_err(model, xw, batch.t, batch.cond, vw) - _sq_err(model, xl, batch.t, batch.cond, vl)
    if ref is not None:
        with torch.no_grad():
            z_ref = _sq_err(ref, xw, batch.t, batch.cond, vw) - _sq_err(ref, xl, batch.t, batch.cond, vl)
        z = z - z_ref
    bad = ~torch.isfinite(z)
    if bad.any():
        raise NumericalFault(f"non-finite preference score at sample {int(bad.nonzero()[0, 0])}")
    return z


def syncdpo_loss(model: nn.Module, ref: nn.Module, batch: PreferenceBatch,
                 cfg: LossConfig = LossConfig(), return_scores: bool = False):
    """mean softplus(beta * z): lowers winner error and raises loser error relative to ``ref``."""
    z = preference_score(model, ref, batch)
    if cfg.literal_sign:
        losses = -F.softplus(-cfg.beta * z)  # log sigmoid(beta z), unbounded below
    else:
        losses = F.softplus(cfg.beta * z)
    loss = losses.mean()
    if not torch.isfinite(loss):
        raise NumericalFault(f"non-finite preference loss: {loss.item()}")
    return (loss, z) if return_scores else loss


def softplus(x: np.ndarray) -> np.ndarray:
    """Overflow-safe log(1 + exp(x))."""
    x = np.asarray(x, dtype=np.float64)
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


@dataclass
class GradRatio:
    ratio: float
    z: float
    winner_mse: float
    numerator: float
    denominator: float
    degenerate: bool = False


def _flat_grad(value: torch.Tensor, params) -> torch.Tensor:
    grads = torch.autograd.grad(value, params, allow_unused=True)
    return torch.cat([(g if g is not None else torch.zeros_like(p)).reshape(-1)
                      for g, p in zip(grads, params)])


def score_and_mse_grads(model: nn.Module, batch: PreferenceBatch):
    """Gradients (flattened) of the unweighted preference score and of the winner squared error.

    ``batch`` must hold a single row.
    """
    params = [p for p in model.parameters() if p.requires_grad]
    z = preference_score(model, None, batch).sum()
    g_z = _flat_grad(z, params)
    mse = _sq_err(model, batch.xt_winner, batch.t, batch.cond, batch.v_winner).sum()
    g_mse = _flat_grad(mse, params)
    return z.detach(), g_z, mse.detach(), g_mse


def grad_norm_ratio(model: nn.Module, winner: np.ndarray, loser: np.ndarray, cond: np.ndarray,
                    rng: np.random.Generator, ref: Optional[nn.Module] = None) -> GradRatio:
    """||grad z|| / ||grad e_w|| for one pair at a shared (x0, t) draw, before beta and log-sigmoid."""
    dtype = next(model.parameters()).dtype
    batch = PreferenceBatch.draw(np.asarray(winner)[None], np.asarray(loser)[None],
                                 np.asarray(cond)[None], rng, dtype=dtype)
    z_theta, g_z, mse, g_mse = score_and_mse_grads(model, batch)
    z = float(z_theta)
    if ref is not None:
        with torch.no_grad():
            z = float(preference_score(model, ref, batch)[0])
    num = float(torch.linalg.vector_norm(g_z))
    den = float(torch.linalg.vector_norm(g_mse))
    if den == 0.0 or not np.isfinite(den):
        return GradRatio(float("nan"), z, float(mse), num, den, degenerate=True)
    return GradRatio(num / den, z, float(mse), num, den)
