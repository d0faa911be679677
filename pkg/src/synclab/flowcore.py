"""Conditional flow matching: interpolant, loss, velocity MLP, Euler sampler, checkpoints."""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .toyworld import (
    AUDIO_DIM,
    AUDIO_RATE,
    AUDIO_SAMPLES,
    NUM_CLASSES,
    VIDEO_DIM,
    VIDEO_FRAMES,
    VIDEO_RATE,
    ModalityTrack,
    PairSample,
)

# Layout: video block (frame-major, T_v x d_v) followed by audio block (T_a x d_a).
VIDEO_SIZE = VIDEO_FRAMES * VIDEO_DIM
AUDIO_SIZE = AUDIO_SAMPLES * AUDIO_DIM
STATE_DIM = VIDEO_SIZE + AUDIO_SIZE

CHECKPOINT_FORMAT_VERSION = 1


class NumericalFault(FloatingPointError):
    """A loss, score or sampler state became non-finite."""


def pack(pair: PairSample) -> np.ndarray:
    return np.concatenate([pair.video.samples.reshape(-1), pair.audio.samples.reshape(-1)])


def pack_arrays(video: np.ndarray, audio: np.ndarray) -> np.ndarray:
    """Batched pack: (n, T_v, d_v), (n, T_a, d_a) -> (n, N)."""
    n = video.shape[0]
    return np.concatenate([video.reshape(n, -1), audio.reshape(n, -1)], axis=1)


def unpack(state, cond: Optional[np.ndarray] = None) -> PairSample:
    state = np.asarray(state, dtype=np.float32)
    if state.shape != (STATE_DIM,):
        raise ValueError(f"state must have shape ({STATE_DIM},), got {state.shape}")
    video = state[:VIDEO_SIZE].reshape(VIDEO_FRAMES, VIDEO_DIM).copy()
    audio = state[VIDEO_SIZE:].reshape(AUDIO_SAMPLES, AUDIO_DIM).copy()
    if cond is None:
        cond = np.zeros(NUM_CLASSES, dtype=np.float32)
    return PairSample(ModalityTrack(video, VIDEO_RATE, "video"),
                      ModalityTrack(audio, AUDIO_RATE, "audio"),
                      np.asarray(cond, dtype=np.float32))


def interpolate(x0, x1, t):
    """x_t = (1 - t) x0 + t x1, with ``t`` broadcast over trailing dims."""
    if x0.shape != x1.shape:
        raise ValueError(f"shape mismatch {tuple(x0.shape)} vs {tuple(x1.shape)}")
    if torch.is_tensor(t) and t.dim() == 1 and x0.dim() == 2:
        t = t[:, None]
    elif isinstance(t, np.ndarray) and t.ndim == 1 and x0.ndim == 2:
        t = t[:, None]
    return (1 - t) * x0 + t * x1


def target_velocity(x0, x1):
    if x0.shape != x1.shape:
        raise ValueError(f"shape mismatch {tuple(x0.shape)} vs {tuple(x1.shape)}")
    return x1 - x0


def time_embedding(t: torch.Tensor, dim: int = 16, max_freq: float = 200.0) -> torch.Tensor:
    """Sinusoidal features of t in [0, 1] with log-spaced frequencies in [1, max_freq]."""
    half = dim // 2
    freqs = torch.exp(torch.linspace(0.0, math.log(max_freq), half, dtype=t.dtype))
    args = t[:, None] * freqs[None, :]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=1)


class VelocityField(nn.Module):
    """MLP velocity field v(x_t, t, y) on [state | time embedding | condition]."""

    def __init__(self, state_dim: int = STATE_DIM, cond_dim: int = NUM_CLASSES,
                 hidden: int = 256, time_dim: int = 16, depth: int = 2, state_skip: bool = True):
        super().__init__()
        self.state_dim = state_dim
        self.cond_dim = cond_dim
        self.hidden = hidden
        self.time_dim = time_dim
        self.depth = depth
        layers = []
        width = state_dim + time_dim + cond_dim
        for _ in range(depth):
            layers.append(nn.Linear(width, hidden))
            width = hidden
        self.hidden_layers = nn.ModuleList(layers)
        self.out = nn.Linear(width, state_dim)
        # time-gated per-dimension gain on x_t; the optimal field is close to
        # linear in x_t, which a hidden width below state_dim cannot pass through
        self.state_skip = state_skip
        self.skip_gain = nn.Linear(time_dim, state_dim) if state_skip else None

    def descriptor(self) -> dict:
        return {"kind": "mlp", "state_dim": self.state_dim, "cond_dim": self.cond_dim,
                "hidden": self.hidden, "time_dim": self.time_dim, "depth": self.depth,
                "activation": "silu", "state_skip": self.state_skip}

    @classmethod
    def from_descriptor(cls, desc: dict) -> "VelocityField":
        return cls(desc["state_dim"], desc["cond_dim"], desc["hidden"], desc["time_dim"], desc["depth"],
                   desc.get("state_skip", False))

    def forward(self, x: torch.Tensor, t: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
        if t.dim() == 0:
            t = t.expand(x.shape[0])
        emb = time_embedding(t.to(x.dtype), self.time_dim)
        h = torch.cat([x, emb, y.to(x.dtype)], dim=1)
        for layer in self.hidden_layers:
            h = F.silu(layer(h))
        out = self.out(h)
        if self.skip_gain is not None:
            out = out + self.skip_gain(emb) * x
        return out

    def num_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())


def frozen_copy(model: nn.Module) -> nn.Module:
    """Detached copy used as the reference model; never receives gradients."""
    ref = copy.deepcopy(model)
    for p in ref.parameters():
        p.requires_grad_(False)
    ref.eval()
    return ref


def flat_params(model: nn.Module) -> torch.Tensor:
    return torch.cat([p.detach().reshape(-1) for p in model.parameters()])


@dataclass
class FMBatch:
    x1: torch.Tensor  # (B, N)
    cond: torch.Tensor  # (B, C)
    x0: torch.Tensor  # (B, N)
    t: torch.Tensor  # (B,)


def draw_fm_batch(x1: np.ndarray, cond: np.ndarray, rng: np.random.Generator,
                  dtype=torch.float32) -> FMBatch:
    x0 = rng.standard_normal(x1.shape)
    t = rng.uniform(0.0, 1.0, size=x1.shape[0])
    return FMBatch(torch.as_tensor(x1, dtype=dtype), torch.as_tensor(cond, dtype=dtype),
                   torch.as_tensor(x0, dtype=dtype), torch.as_tensor(t, dtype=dtype))


def fm_per_sample(model: nn.Module, batch: FMBatch) -> torch.Tensor:
    xt = interpolate(batch.x0, batch.x1, batch.t)
    err = model(xt, batch.t, batch.cond) - target_velocity(batch.x0, batch.x1)
    return (err ** 2).sum(dim=1)


def fm_loss(model: nn.Module, batch: FMBatch) -> torch.Tensor:
    """Mean over the batch of ||v(x_t, t, y) - (x1 - x0)||^2; differentiable in the parameters."""
    loss = fm_per_sample(model, batch).mean()
    if not torch.isfinite(loss):
        raise NumericalFault(f"non-finite flow-matching loss: {loss.item()}")
    return loss


@torch.no_grad()
def sample_ode(model: nn.Module, y, rng: np.random.Generator, steps: int = 30,
               x0: Optional[np.ndarray] = None) -> np.ndarray:
    """Euler-integrate dx/dt = v(x, t, y) from Gaussian noise at t=0 to t=1.

    ``y`` is a single condition (C,) or a batch (B, C); the return value has the
    matching shape (N,) or (B, N).
    """
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    y = np.asarray(y, dtype=np.float32)
    single = y.ndim == 1
    y2 = y[None, :] if single else y
    dtype = next(model.parameters()).dtype
    if x0 is None:
        x0 = rng.standard_normal((y2.shape[0], model.state_dim))
    x = torch.as_tensor(np.asarray(x0).reshape(y2.shape[0], -1), dtype=dtype).clone()
    yt = torch.as_tensor(y2, dtype=dtype)
    dt = 1.0 / steps
    for i in range(steps):
        t = torch.full((x.shape[0],), i * dt, dtype=dtype)
        x = x + dt * model(x, t, yt)
        if not torch.isfinite(x).all():
            raise NumericalFault(f"sampler state became non-finite at step {i}")
    out = x.numpy().astype(np.float32)
    return out[0] if single else out


class ODESampler:
    """Counts generated samples; one sampler call == one generated joint sample."""

    def __init__(self, model: nn.Module, steps: int = 30):
        self.model = model
        self.steps = steps
        self.calls = 0

    def __call__(self, y, rng: np.random.Generator) -> np.ndarray:
        y = np.asarray(y)
        self.calls += 1 if y.ndim == 1 else y.shape[0]
        return sample_ode(self.model, y, rng, self.steps)


class EMA:
    """Shadow parameters: shadow <- decay * shadow + (1 - decay) * theta."""

    def __init__(self, model: nn.Module, decay: float):
        self.decay = decay
        self.shadow = {k: v.detach().clone() for k, v in model.state_dict().items()}

    @torch.no_grad()
    def update(self, model: nn.Module) -> None:
        for k, v in model.state_dict().items():
            self.shadow[k].mul_(self.decay).add_(v.detach(), alpha=1 - self.decay)

    def copy_to(self, model: nn.Module) -> nn.Module:
        model.load_state_dict(self.shadow)
        return model


def save_checkpoint(path, model: VelocityField, *, optimizer=None, ema: Optional[EMA] = None,
                    step: int = 0, config: Optional[dict] = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    state = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "arch": model.descriptor(),
        "params": {k: v.detach().to(torch.float32).clone() for k, v in model.state_dict().items()},
        "ema": None if ema is None else {k: v.to(torch.float32).clone() for k, v in ema.shadow.items()},
        "ema_decay": None if ema is None else ema.decay,
        "optimizer": None if optimizer is None else optimizer.state_dict(),
        "step": int(step),
        "config": dict(config or {}),
    }
    torch.save(state, path)
    return path


def load_checkpoint(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    state = torch.load(path, map_location="cpu", weights_only=False)
    if not isinstance(state, dict) or state.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint format_version "
                         f"{state.get('format_version') if isinstance(state, dict) else None!r}")
    return state


def model_from_checkpoint(state: dict, use_ema: bool = True) -> VelocityField:
    model = VelocityField.from_descriptor(state["arch"])
    params = state["ema"] if use_ema and state.get("ema") is not None else state["params"]
    model.load_state_dict(params)
    return model
