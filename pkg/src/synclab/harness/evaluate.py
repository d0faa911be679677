"""Generation-quality evaluation with the sync oracle."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from ..flowcore import fm_per_sample, draw_fm_batch, load_checkpoint, model_from_checkpoint, pack_arrays, sample_ode, unpack
from ..toyworld import NUM_CLASSES, measure_offset, one_hot, stack_pairs, generate_pairs


@dataclass
class GenerationMetrics:
    n: int
    mean_abs_offset: float  # over non-degenerate samples
    mean_score: float
    n_degenerate: int


def eval_conditions(n: int) -> np.ndarray:
    """Classes cycled so every class gets n/C generations."""
    return np.stack([one_hot(i % NUM_CLASSES) for i in range(n)])


def generate(model, n: int, seed: int, steps: int = 30, batch: int = 256) -> tuple[np.ndarray, np.ndarray]:
    conds = eval_conditions(n)
    rng = np.random.default_rng(seed)
    out = [sample_ode(model, conds[i:i + batch], rng, steps) for i in range(0, n, batch)]
    return np.concatenate(out, axis=0), conds


def score_states(states: np.ndarray, conds: np.ndarray) -> list[dict]:
    rows = []
    for i, (s, y) in enumerate(zip(states, conds)):
        pair = unpack(s, y)
        m = measure_offset(pair.video, pair.audio)
        rows.append({"sample_index": i, "class_id": int(np.argmax(y)), "offset": m.offset,
                     "abs_offset": abs(m.offset), "score": m.score, "degenerate": int(m.degenerate)})
    return rows


def summarize(rows: list[dict]) -> GenerationMetrics:
    live = [r for r in rows if not r["degenerate"]]
    mean_abs = float(np.mean([r["abs_offset"] for r in live])) if live else float("nan")
    mean_score = float(np.mean([r["score"] for r in live])) if live else float("nan")
    return GenerationMetrics(len(rows), mean_abs, mean_score, len(rows) - len(live))


def generation_metrics(model, n: int, seed: int, steps: int = 30) -> tuple[GenerationMetrics, list[dict]]:
    if n <= 0:
        raise ValueError(f"evaluation needs n >= 1, got {n}")
    states, conds = generate(model, n, seed, steps)
    rows = score_states(states, conds)
    return summarize(rows), rows


class ValidationSet:
    """Held-out positives with frozen (x0, t) draws so val loss is comparable across runs."""

    def __init__(self, data_seed: int, n: int):
        ds = stack_pairs(generate_pairs(data_seed, n))
        x1 = pack_arrays(ds.video, ds.audio)
        self.batch = draw_fm_batch(x1, ds.cond, np.random.default_rng(data_seed + 1))

    @torch.no_grad()
    def loss(self, model) -> float:
        return float(fm_per_sample(model, self.batch).mean())


def validation_seed(dataset_seed: int) -> int:
    return int(dataset_seed) + 7919


def write_rows(path, rows: list[dict]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        if rows:
            w = csv.DictWriter(f, fieldnames=list(rows[0]))
            w.writeheader()
            w.writerows(rows)
    return path


def evaluate(checkpoint, n: int, seed: int, use_ema: bool = True, out_dir=None,
             steps: int = 30, tag: Optional[str] = None) -> tuple[GenerationMetrics, list[dict]]:
    """Sample ``n`` generations from a checkpoint, score them, and optionally write eval CSV/JSON."""
    if n <= 0:
        raise ValueError(f"evaluation needs n >= 1, got {n}")
    state = load_checkpoint(checkpoint)
    model = model_from_checkpoint(state, use_ema=use_ema)
    metrics, rows = generation_metrics(model, n, seed, steps)
    if out_dir is not None:
        tag = tag or f"{Path(checkpoint).stem}_seed{seed}{'' if use_ema else '_raw'}"
        out = Path(out_dir)
        write_rows(out / f"{tag}.csv", rows)
        summary = {"checkpoint": str(checkpoint), "step": state["step"], "seed": seed,
                   "use_ema": use_ema, **asdict(metrics)}
        (out / f"{tag}.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    return metrics, rows
