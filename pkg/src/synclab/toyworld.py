"""Synthetic synchronized video/audio tracks and the cross-correlation sync oracle.

Each sample is rendered from an :class:`EventSchedule`: the video track shows a
Gaussian bump per event on channel 0, the audio track an exponentially decaying
envelope starting at each event. Remaining channels carry a class texture so the
model cannot get away with modelling a single channel.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

DURATION = 5.0
NUM_CLASSES = 4
VIDEO_RATE = 8
VIDEO_DIM = 4
AUDIO_RATE = 32
AUDIO_DIM = 2
VIDEO_FRAMES = round(VIDEO_RATE * DURATION)
AUDIO_SAMPLES = round(AUDIO_RATE * DURATION)

EDGE_MARGIN = 0.5
MIN_SPACING = 0.6
BUMP_STD = 0.15
DECAY_TAU = 0.2
TEXTURE_AMPLITUDE = 0.3
TEXTURE_NOISE = 0.02
MAX_REJECTIONS = 10_000

DATASET_MAGIC = b"SYNCDATA"
DATASET_FORMAT_VERSION = 1


@dataclass(frozen=True)
class EventSchedule:
    class_id: int
    event_times: tuple[float, ...]
    duration: float = DURATION

    def __post_init__(self):
        times = self.event_times
        if not 1 <= len(times) <= 4:
            raise ValueError(f"expected 1-4 events, got {len(times)}")
        if any(b <= a for a, b in zip(times, times[1:])):
            raise ValueError(f"event times not strictly increasing: {times}")
        lo, hi = EDGE_MARGIN, self.duration - EDGE_MARGIN
        if any(t < lo or t > hi for t in times):
            raise ValueError(f"event times outside [{lo}, {hi}]: {times}")


@dataclass
class ModalityTrack:
    samples: np.ndarray  # (T, d) float32
    rate: int
    modality: str  # "video" | "audio"

    @property
    def duration(self) -> float:
        return self.samples.shape[0] / self.rate

    def times(self) -> np.ndarray:
        return np.arange(self.samples.shape[0]) / self.rate

    def copy(self) -> "ModalityTrack":
        return ModalityTrack(self.samples.copy(), self.rate, self.modality)


@dataclass
class PairSample:
    video: ModalityTrack
    audio: ModalityTrack
    cond: np.ndarray  # one-hot (C,) float32
    schedule: Optional[EventSchedule] = None

    @property
    def class_id(self) -> int:
        return int(np.argmax(self.cond))

    def track(self, modality: str) -> ModalityTrack:
        return self.video if modality == "video" else self.audio

    def replace_track(self, modality: str, track: ModalityTrack) -> "PairSample":
        if modality == "video":
            return PairSample(track, self.audio, self.cond, self.schedule)
        return PairSample(self.video, track, self.cond, self.schedule)


@dataclass(frozen=True)
class SyncMeasurement:
    offset: float  # seconds; positive means audio lags video
    score: float
    degenerate: bool = False


def one_hot(class_id: int, num_classes: int = NUM_CLASSES) -> np.ndarray:
    y = np.zeros(num_classes, dtype=np.float32)
    y[class_id] = 1.0
    return y


def sample_schedule(rng: np.random.Generator, class_id: int,
                    duration: float = DURATION) -> EventSchedule:
    """Draw event times for a class: class ``c`` has ``c + 1`` events."""
    if not 0 <= class_id < NUM_CLASSES:
        raise ValueError(f"class_id {class_id} outside [0, {NUM_CLASSES - 1}]")
    count = class_id + 1
    lo, hi = EDGE_MARGIN, duration - EDGE_MARGIN
    for _ in range(MAX_REJECTIONS):
        times = np.sort(rng.uniform(lo, hi, size=count))
        if count == 1 or np.min(np.diff(times)) >= MIN_SPACING:
            return EventSchedule(class_id, tuple(float(t) for t in times), duration)
    raise RuntimeError(f"rejection sampling exceeded {MAX_REJECTIONS} tries for class {class_id}")


def _texture(class_id: int, channel: int, t: np.ndarray) -> np.ndarray:
    freq = 0.2 + 0.15 * class_id + 0.1 * channel
    phase = 0.7 * class_id + 1.3 * channel
    return TEXTURE_AMPLITUDE * np.sin(2 * np.pi * freq * t + phase)


def _fill_texture(out: np.ndarray, class_id: int, t: np.ndarray,
                  rng: Optional[np.random.Generator]) -> None:
    for ch in range(1, out.shape[1]):
        out[:, ch] = _texture(class_id, ch, t)
    if rng is not None:
        out[:, 1:] += rng.normal(0.0, TEXTURE_NOISE, size=out[:, 1:].shape)


def render_video(schedule: EventSchedule, rng: Optional[np.random.Generator] = None,
                 rate: int = VIDEO_RATE, dim: int = VIDEO_DIM) -> ModalityTrack:
    """Channel 0: Gaussian bump per event; channels 1..: texture (+ noise if ``rng``)."""
    n = round(rate * schedule.duration)
    t = np.arange(n) / rate
    out = np.zeros((n, dim))
    for e in schedule.event_times:
        out[:, 0] += np.exp(-0.5 * ((t - e) / BUMP_STD) ** 2)
    _fill_texture(out, schedule.class_id, t, rng)
    return ModalityTrack(out.astype(np.float32), rate, "video")


def render_audio(schedule: EventSchedule, extra_offset: float = 0.0,
                 rng: Optional[np.random.Generator] = None,
                 rate: int = AUDIO_RATE, dim: int = AUDIO_DIM) -> ModalityTrack:
    """Channel 0: decaying exponential from each (event + extra_offset); channel 1: texture."""
    n = round(rate * schedule.duration)
    t = np.arange(n) / rate
    out = np.zeros((n, dim))
    for e in schedule.event_times:
        lag = t - (e + extra_offset)
        on = lag >= -1e-9
        out[on, 0] += np.exp(-np.maximum(lag[on], 0.0) / DECAY_TAU)
    _fill_texture(out, schedule.class_id, t, rng)
    return ModalityTrack(out.astype(np.float32), rate, "audio")


def make_pair(rng: np.random.Generator) -> PairSample:
    class_id = int(rng.integers(NUM_CLASSES))
    schedule = sample_schedule(rng, class_id)
    video = render_video(schedule, rng)
    audio = render_audio(schedule, 0.0, rng)
    return PairSample(video, audio, one_hot(class_id), schedule)


# ---------------------------------------------------------------------------
# Sync oracle
# ---------------------------------------------------------------------------

def _gaussian_kernel(std_samples: float) -> np.ndarray:
    half = int(np.ceil(4 * std_samples))
    x = np.arange(-half, half + 1)
    k = np.exp(-0.5 * (x / std_samples) ** 2)
    return k / k.sum()


def video_envelope(video: ModalityTrack, audio_rate: int = AUDIO_RATE) -> np.ndarray:
    """Channel 0 linearly resampled onto the audio grid."""
    n = round(video.duration * audio_rate)
    grid = np.arange(n) / audio_rate
    return np.interp(grid, video.times(), video.samples[:, 0].astype(np.float64))


def audio_envelope(audio: ModalityTrack) -> np.ndarray:
    """Rectified first difference of channel 0, smoothed to the video bump width.

    Onsets of a decaying envelope show up as positive jumps; smoothing with the
    same Gaussian width as the video bumps makes both envelopes symmetric about
    the event time, so a synchronized pair peaks at zero lag.
    """
    x = audio.samples[:, 0].astype(np.float64)
    onset = np.maximum(np.diff(x, prepend=x[0]), 0.0)
    return np.convolve(onset, _gaussian_kernel(BUMP_STD * audio.rate), mode="same")


def measure_offset(video: ModalityTrack, audio: ModalityTrack) -> SyncMeasurement:
    """Lag (seconds) of the audio onsets relative to the video events.

    Returns the lag within ``[-D/2, D/2]`` maximizing the normalized
    cross-correlation of the two onset envelopes, with parabolic sub-sample
    refinement. Ties go to the smallest ``|lag|``.
    """
    if abs(video.duration - audio.duration) > 1e-9:
        raise ValueError(f"track durations differ: {video.duration} vs {audio.duration}")
    v = video_envelope(video, audio.rate)
    a = audio_envelope(audio)
    v = v - v.mean()
    a = a - a.mean()
    nv, na = np.linalg.norm(v), np.linalg.norm(a)
    if nv < 1e-8 or na < 1e-8:
        return SyncMeasurement(0.0, 0.0, degenerate=True)

    n = len(a)
    full = np.correlate(a, v, mode="full") / (nv * na)  # index k <-> lag k-(n-1)
    max_lag = int(np.floor(video.duration / 2 * audio.rate))
    lags = np.arange(-max_lag, max_lag + 1)
    corr = full[lags + n - 1]
    best = corr.max()
    # smallest |lag| among maxima
    ties = lags[corr >= best - 1e-12]
    lag = int(ties[np.argmin(np.abs(ties) * 2 + (ties > 0))])

    frac = 0.0
    i = lag + max_lag
    if 0 < i < len(corr) - 1:
        left, mid, right = corr[i - 1], corr[i], corr[i + 1]
        denom = left - 2 * mid + right
        if denom < 0:
            frac = float(np.clip(0.5 * (left - right) / denom, -0.5, 0.5))
    half = video.duration / 2
    # a backward difference at sample k locates an onset in ((k-1)/rate, k/rate],
    # so the envelope sits half a sample late on average
    offset = float(np.clip((lag + frac - 0.5) / audio.rate, -half, half))
    return SyncMeasurement(offset, float(np.clip(best, -1.0, 1.0)))


# ---------------------------------------------------------------------------
# Dataset container
# ---------------------------------------------------------------------------

@dataclass
class Dataset:
    video: np.ndarray  # (n, T_v, d_v) float32
    audio: np.ndarray  # (n, T_a, d_a) float32
    cond: np.ndarray  # (n, C) float32
    event_offsets: np.ndarray  # (n + 1,) int64
    event_times: np.ndarray  # (total_events,) float32
    manifest: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return self.video.shape[0]

    def pair(self, i: int) -> PairSample:
        times = self.event_times[self.event_offsets[i]:self.event_offsets[i + 1]]
        class_id = int(np.argmax(self.cond[i]))
        schedule = EventSchedule(class_id, tuple(float(t) for t in times))
        return PairSample(
            ModalityTrack(self.video[i], VIDEO_RATE, "video"),
            ModalityTrack(self.audio[i], AUDIO_RATE, "audio"),
            self.cond[i],
            schedule,
        )

    def pairs(self) -> list[PairSample]:
        return [self.pair(i) for i in range(len(self))]

    def fingerprint(self) -> str:
        import hashlib
        h = hashlib.sha256()
        for arr in (self.video, self.audio, self.cond, self.event_offsets, self.event_times):
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()[:16]


def stack_pairs(pairs: Sequence[PairSample], manifest: Optional[dict] = None) -> Dataset:
    offsets = [0]
    times: list[float] = []
    for p in pairs:
        times.extend(p.schedule.event_times)
        offsets.append(len(times))
    return Dataset(
        video=np.stack([p.video.samples for p in pairs]).astype(np.float32),
        audio=np.stack([p.audio.samples for p in pairs]).astype(np.float32),
        cond=np.stack([p.cond for p in pairs]).astype(np.float32),
        event_offsets=np.asarray(offsets, dtype=np.int64),
        event_times=np.asarray(times, dtype=np.float32),
        manifest=dict(manifest or {}),
    )


def generate_pairs(seed: int, n: int) -> list[PairSample]:
    rng = np.random.default_rng(seed)
    return [make_pair(rng) for _ in range(n)]


_ARRAY_NAMES = ("video", "audio", "cond", "event_offsets", "event_times")


def write_dataset(ds: Dataset, path) -> Path:
    """Write ``ds`` in the container layout described in docs/FORMATS.md."""
    path = Path(path)
    directory = []
    blobs = []
    offset = 0
    for name in _ARRAY_NAMES:
        arr = getattr(ds, name)
        dtype = "<i8" if arr.dtype.kind == "i" else "<f4"
        data = np.ascontiguousarray(arr, dtype=dtype).tobytes()
        directory.append({"name": name, "dtype": dtype, "shape": list(arr.shape),
                          "offset": offset, "nbytes": len(data)})
        blobs.append(data)
        offset += len(data)
    header = json.dumps({"manifest": ds.manifest, "arrays": directory},
                        sort_keys=True).encode("utf-8")
    try:
        with open(path, "wb") as f:
            f.write(DATASET_MAGIC)
            f.write(struct.pack("<I", len(header)))
            f.write(header)
            for b in blobs:
                f.write(b)
    except OSError as exc:
        raise OSError(f"cannot write dataset to {path}: {exc}") from exc
    return path


def make_dataset(seed: int, n: int, path) -> Path:
    if n <= 0:
        raise ValueError(f"dataset size must be positive, got {n}")
    manifest = {
        "format_version": DATASET_FORMAT_VERSION,
        "seed": int(seed),
        "n": int(n),
        "rates": {"video": VIDEO_RATE, "audio": AUDIO_RATE},
        "dims": {"video": VIDEO_DIM, "audio": AUDIO_DIM},
        "D": DURATION,
        "C": NUM_CLASSES,
    }
    return write_dataset(stack_pairs(generate_pairs(seed, n), manifest), path)


def load_dataset(path, expected_seed: Optional[int] = None) -> Dataset:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise OSError(f"cannot read dataset {path}: {exc}") from exc
    if raw[:8] != DATASET_MAGIC:
        raise ValueError(f"{path}: not a dataset file (bad magic)")
    (hlen,) = struct.unpack("<I", raw[8:12])
    header = json.loads(raw[12:12 + hlen].decode("utf-8"))
    manifest = header["manifest"]
    version = manifest.get("format_version")
    if version != DATASET_FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported format_version {version!r}")
    if expected_seed is not None and manifest.get("seed") != expected_seed:
        raise ValueError(f"{path}: manifest seed {manifest.get('seed')} != expected {expected_seed}")
    base = 12 + hlen
    arrays = {}
    for entry in header["arrays"]:
        start = base + entry["offset"]
        buf = raw[start:start + entry["nbytes"]]
        arrays[entry["name"]] = np.frombuffer(buf, dtype=entry["dtype"]).reshape(entry["shape"]).copy()
    missing = set(_ARRAY_NAMES) - set(arrays)
    if missing:
        raise ValueError(f"{path}: missing arrays {sorted(missing)}")
    if arrays["video"].shape[0] != manifest["n"]:
        raise ValueError(f"{path}: manifest n={manifest['n']} but {arrays['video'].shape[0]} samples")
    return Dataset(manifest=manifest, **{k: arrays[k].astype(np.float32) if k != "event_offsets"
                                           else arrays[k].astype(np.int64) for k in _ARRAY_NAMES})
