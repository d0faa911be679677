"""Rule-based temporal negatives and the sample-and-rank preference baseline.

Every perturbation picks video or audio with equal probability and edits only
that modality. Vacated or padded regions follow one convention across
operators: video repeats an edge frame ("frozen"), audio is zero ("silent").
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .flowcore import ODESampler, pack, unpack
from .toyworld import Dataset, ModalityTrack, PairSample, measure_offset

log = logging.getLogger(__name__)

SCALE_RANGE = (0.5, 1.5)
SHIFT_RANGE = (-2.5, 2.5)  # seconds
MASK_RANGE = (0.1, 0.3)
MODALITIES = ("video", "audio")


class PerturbationKind(str, enum.Enum):
    SCALE = "scale"
    REPLACE = "replace"
    SHIFT = "shift"
    MASK = "mask"
    SYNTHESIZE = "synthesize"


@dataclass(frozen=True)
class PerturbationRecord:
    kind: PerturbationKind
    modality: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        expected = {
            PerturbationKind.SCALE: {"s"},
            PerturbationKind.REPLACE: {"source_id"},
            PerturbationKind.SHIFT: {"delta"},
            PerturbationKind.MASK: {"m", "start"},
            PerturbationKind.SYNTHESIZE: {"gen_seed"},
        }[PerturbationKind(self.kind)]
        if set(self.params) != expected:
            raise ValueError(f"{self.kind} expects params {sorted(expected)}, got {sorted(self.params)}")
        if self.modality not in MODALITIES:
            raise ValueError(f"unknown modality {self.modality!r}")

    def to_dict(self) -> dict:
        return {"kind": PerturbationKind(self.kind).value, "modality": self.modality, "params": dict(self.params)}

    @classmethod
    def from_dict(cls, d: dict) -> "PerturbationRecord":
        return cls(PerturbationKind(d["kind"]), d["modality"], dict(d["params"]))


@dataclass
class NegativeSample:
    pair: PairSample
    record: PerturbationRecord
    parent_id: Optional[int] = None


@dataclass
class NegativeContext:
    """Dependencies some perturbations need: a pool for Replace, a reference sampler for Synthesize."""

    pool: Optional[Dataset] = None
    sampler: Optional[ODESampler] = None


def _choose_modality(rng: np.random.Generator) -> str:
    return MODALITIES[int(rng.integers(2))]


def _fill(track: ModalityTrack, n: int, edge: np.ndarray) -> np.ndarray:
    if track.modality == "video":
        return np.repeat(edge[None, :], n, axis=0)
    return np.zeros((n, track.samples.shape[1]), dtype=track.samples.dtype)


# ---------------------------------------------------------------------------
# Track-level operators (deterministic given their parameters)
# ---------------------------------------------------------------------------

def scale_track(track: ModalityTrack, s: float) -> ModalityTrack:
    """Resample the time axis to round(T*s) samples, then pad or center-crop back to T."""
    x = track.samples
    T = x.shape[0]
    L = max(int(round(T * s)), 1)
    if L == T:
        out = x.copy()
    else:
        src = np.arange(L) * ((T - 1) / (L - 1)) if L > 1 else np.zeros(1)
        grid = np.arange(T)
        stretched = np.stack([np.interp(src, grid, x[:, c]) for c in range(x.shape[1])], axis=1)
        stretched = stretched.astype(x.dtype)
        if L < T:
            out = np.concatenate([stretched, _fill(track, T - L, stretched[-1])], axis=0)
        else:
            start = (L - T) // 2
            out = stretched[start:start + T]
    return ModalityTrack(out, track.rate, track.modality)


def shift_track(track: ModalityTrack, delta: float) -> ModalityTrack:
    """Translate by ``delta`` seconds (positive = later); padded, not circular."""
    x = track.samples
    T = x.shape[0]
    n = int(round(delta * track.rate))
    if n == 0:
        return ModalityTrack(x.copy(), track.rate, track.modality)
    n = max(-T, min(T, n))
    if n > 0:
        out = np.concatenate([_fill(track, n, x[0]), x[:T - n]], axis=0)
    else:
        out = np.concatenate([x[-n:], _fill(track, -n, x[-1])], axis=0)
    return ModalityTrack(out, track.rate, track.modality)


def mask_window(T: int, m: float) -> int:
    return max(int(round(m * T)), 1)


def mask_track(track: ModalityTrack, m: float, start: int) -> ModalityTrack:
    """Silence (audio) or freeze (video) a contiguous window of round(m*T) samples."""
    x = track.samples.copy()
    T = x.shape[0]
    length = mask_window(T, m)
    if not 0 <= start <= T - length:
        raise ValueError(f"mask window [{start}, {start + length}) outside track of length {T}")
    if track.modality == "audio":
        x[start:start + length] = 0.0
    else:
        x[start:start + length] = x[start - 1] if start > 0 else x[0]
    return ModalityTrack(x, track.rate, track.modality)


# ---------------------------------------------------------------------------
# Pair-level perturbations
# ---------------------------------------------------------------------------

def _derive(pair: PairSample, modality: str, track: ModalityTrack) -> PairSample:
    # schedule dropped: it no longer describes the perturbed pair
    out = pair.replace_track(modality, track)
    out.schedule = None
    return out


def perturb_scale(pair: PairSample, rng: np.random.Generator, parent_id=None) -> NegativeSample:
    modality = _choose_modality(rng)
    s = float(rng.uniform(*SCALE_RANGE))
    rec = PerturbationRecord(PerturbationKind.SCALE, modality, {"s": s})
    return NegativeSample(_derive(pair, modality, scale_track(pair.track(modality), s)), rec, parent_id)


def perturb_replace(pair: PairSample, pool: Dataset, rng: np.random.Generator,
                    parent_id: Optional[int] = None) -> NegativeSample:
    if pool is None or len(pool) < 2:
        raise ValueError("Replace needs a pool of at least 2 samples")
    modality = _choose_modality(rng)
    if parent_id is None:
        source = int(rng.integers(len(pool)))
    else:
        source = int(rng.integers(len(pool) - 1))
        source += source >= parent_id
    rec = PerturbationRecord(PerturbationKind.REPLACE, modality, {"source_id": source})
    return NegativeSample(_apply_replace(pair, modality, pool, source), rec, parent_id)


def _apply_replace(pair: PairSample, modality: str, pool: Dataset, source: int) -> PairSample:
    donor = pool.pair(source).track(modality)
    return _derive(pair, modality, ModalityTrack(donor.samples.copy(), donor.rate, modality))


def perturb_shift(pair: PairSample, rng: np.random.Generator, parent_id=None) -> NegativeSample:
    modality = _choose_modality(rng)
    delta = float(rng.uniform(*SHIFT_RANGE))
    rec = PerturbationRecord(PerturbationKind.SHIFT, modality, {"delta": delta})
    return NegativeSample(_derive(pair, modality, shift_track(pair.track(modality), delta)), rec, parent_id)


def perturb_mask(pair: PairSample, rng: np.random.Generator, parent_id=None) -> NegativeSample:
    modality = _choose_modality(rng)
    m = float(rng.uniform(*MASK_RANGE))
    T = pair.track(modality).samples.shape[0]
    start = int(rng.integers(0, T - mask_window(T, m) + 1))
    rec = PerturbationRecord(PerturbationKind.MASK, modality, {"m": m, "start": start})
    return NegativeSample(_derive(pair, modality, mask_track(pair.track(modality), m, start)), rec, parent_id)


def perturb_synthesize(pair: PairSample, sampler: ODESampler, rng: np.random.Generator,
                       parent_id=None) -> NegativeSample:
    """Swap one modality for a generation from the frozen reference sampler."""
    if sampler is None:
        raise ValueError("Synthesize needs a reference sampler")
    modality = _choose_modality(rng)
    gen_seed = int(rng.integers(2**31 - 1))
    rec = PerturbationRecord(PerturbationKind.SYNTHESIZE, modality, {"gen_seed": gen_seed})
    return NegativeSample(_apply_synthesize(pair, modality, sampler, gen_seed), rec, parent_id)


def _apply_synthesize(pair: PairSample, modality: str, sampler: ODESampler, gen_seed: int) -> PairSample:
    generated = unpack(sampler(pair.cond, np.random.default_rng(gen_seed)), pair.cond)
    return _derive(pair, modality, generated.track(modality))


def construct_negative(pair: PairSample, kind, ctx: NegativeContext, rng: np.random.Generator,
                       parent_id: Optional[int] = None) -> NegativeSample:
    kind = PerturbationKind(kind)
    if kind is PerturbationKind.SCALE:
        return perturb_scale(pair, rng, parent_id)
    if kind is PerturbationKind.REPLACE:
        if ctx.pool is None:
            raise ValueError("Replace requires ctx.pool")
        return perturb_replace(pair, ctx.pool, rng, parent_id)
    if kind is PerturbationKind.SHIFT:
        return perturb_shift(pair, rng, parent_id)
    if kind is PerturbationKind.MASK:
        return perturb_mask(pair, rng, parent_id)
    if ctx.sampler is None:
        raise ValueError("Synthesize requires ctx.sampler (frozen reference model)")
    return perturb_synthesize(pair, ctx.sampler, rng, parent_id)


def replay(parent: PairSample, record: PerturbationRecord, ctx: Optional[NegativeContext] = None) -> PairSample:
    """Rebuild a negative from its parent and record."""
    ctx = ctx or NegativeContext()
    kind, mod, p = PerturbationKind(record.kind), record.modality, record.params
    if kind is PerturbationKind.SCALE:
        return _derive(parent, mod, scale_track(parent.track(mod), p["s"]))
    if kind is PerturbationKind.SHIFT:
        return _derive(parent, mod, shift_track(parent.track(mod), p["delta"]))
    if kind is PerturbationKind.MASK:
        return _derive(parent, mod, mask_track(parent.track(mod), p["m"], p["start"]))
    if kind is PerturbationKind.REPLACE:
        if ctx.pool is None:
            raise ValueError("replaying Replace requires ctx.pool")
        return _apply_replace(parent, mod, ctx.pool, p["source_id"])
    if ctx.sampler is None:
        raise ValueError("replaying Synthesize requires ctx.sampler")
    return _apply_synthesize(parent, mod, ctx.sampler, p["gen_seed"])


# ---------------------------------------------------------------------------
# Sample-and-rank baseline
# ---------------------------------------------------------------------------

@dataclass
class RankedPair:
    winner: np.ndarray  # packed state
    loser: np.ndarray
    winner_offset: float
    loser_offset: float
    sampler_calls: int


def rank_candidates(candidates: np.ndarray, cond: np.ndarray) -> Optional[tuple[int, int, list]]:
    """Indices (winner, loser) by oracle |offset|; None if every candidate is degenerate."""
    measures = [measure_offset(p.video, p.audio) for p in (unpack(c, cond) for c in candidates)]
    live = [i for i, m in enumerate(measures) if not m.degenerate]
    if not live:
        return None
    # degenerate candidates carry no aligned events: rank them worst
    key_loser = lambda i: (measures[i].degenerate, abs(measures[i].offset), -measures[i].score)
    winner = min(live, key=lambda i: (abs(measures[i].offset), -measures[i].score))
    loser = max((i for i in range(len(measures)) if i != winner), key=key_loser)
    return winner, loser, measures


def build_vanilla_dpo_pair(sampler: ODESampler, cond: np.ndarray, rng: np.random.Generator,
                           n_candidates: int = 3) -> Optional[RankedPair]:
    """Generate ``n_candidates`` joint samples and keep the best/worst synchronized as a pair."""
    if n_candidates < 2:
        raise ValueError(f"n_candidates must be >= 2, got {n_candidates}")
    before = sampler.calls
    candidates = sampler(np.tile(np.asarray(cond, dtype=np.float32), (n_candidates, 1)), rng)
    calls = sampler.calls - before
    ranked = rank_candidates(candidates, cond)
    if ranked is None:
        log.info("skipping preference pair: all %d candidates degenerate", n_candidates)
        return None
    w, l, measures = ranked
    return RankedPair(candidates[w], candidates[l], measures[w].offset, measures[l].offset, calls)


__all__ = [
    "PerturbationKind", "PerturbationRecord", "NegativeSample", "NegativeContext",
    "scale_track", "shift_track", "mask_track", "perturb_scale", "perturb_replace",
    "perturb_shift", "perturb_mask", "perturb_synthesize", "construct_negative", "replay",
    "build_vanilla_dpo_pair", "rank_candidates", "RankedPair", "pack",
]
