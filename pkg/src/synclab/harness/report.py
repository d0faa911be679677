"""Cross-run comparison tables and the gradient-norm-ratio diagnostic."""

from __future__ import annotations

import csv
import json
from collections import defaultdict
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from ..flowcore import load_checkpoint, model_from_checkpoint, pack
from ..negatives import perturb_replace
from ..prefloss import grad_norm_ratio
from ..toyworld import Dataset, generate_pairs, stack_pairs
from .evaluate import write_rows

COMPARE_COLUMNS = ("run", "method", "variant", "seed", "steps", "val_fm_loss", "mean_abs_offset",
                   "mean_score", "n_degenerate", "sampler_calls", "wall_time_per_step")
METRIC_COLUMNS = ("val_fm_loss", "mean_abs_offset", "mean_score", "n_degenerate",
                  "sampler_calls", "wall_time_per_step")


def run_variant(config: dict) -> str:
    if config["method"] == "syncdpo":
        kind = config.get("negative_kind")
        return f"{kind}_only" if kind else config.get("curriculum_mode", "curriculum")
    if config["method"] == "dpo":
        return f"rank{config.get('n_candidates', 3)}"
    return "-"


def load_run(run_dir) -> dict:
    run_dir = Path(run_dir)
    manifest_path = run_dir / "manifest.json"
    metrics_path = run_dir / "metrics.csv"
    for p in (manifest_path, metrics_path):
        if not p.exists():
            raise FileNotFoundError(f"{run_dir}: missing {p.name}")
    manifest = json.loads(manifest_path.read_text())
    with open(metrics_path) as f:
        rows = list(csv.DictReader(f))
    if not rows:
        raise ValueError(f"{metrics_path} has no rows")
    final = rows[-1]
    row = {
        "run": run_dir.name,
        "method": manifest["method"],
        "variant": run_variant(manifest["config"]),
        "seed": manifest["seed"],
        "steps": manifest["steps"],
        "val_fm_loss": float(final["val_fm_loss"]),
        "mean_abs_offset": float(final["mean_abs_offset"]) if final["mean_abs_offset"] else float("nan"),
        "mean_score": float(final["mean_score"]) if final["mean_score"] else float("nan"),
        "n_degenerate": int(final["n_degenerate"]),
        "sampler_calls": int(manifest["sampler_calls"]),
        "wall_time_per_step": float(manifest["wall_time_per_step"]),
    }
    # a dedicated final evaluation, when present, supersedes the in-training row
    final_eval = run_dir / "eval" / "final.json"
    if final_eval.exists():
        ev = json.loads(final_eval.read_text())
        row.update(mean_abs_offset=ev["mean_abs_offset"], mean_score=ev["mean_score"],
                   n_degenerate=ev["n_degenerate"])
    return row


def median_rows(rows: Sequence[dict]) -> list[dict]:
    """One row per (method, variant) holding the per-column median over seeds."""
    groups: dict[tuple, list[dict]] = defaultdict(list)
    for r in rows:
        groups[(r["method"], r["variant"])].append(r)
    out = []
    for (method, variant), members in groups.items():
        agg = {"run": f"median(n={len(members)})", "method": method, "variant": variant,
               "seed": "*", "steps": members[0]["steps"]}
        for col in METRIC_COLUMNS:
            agg[col] = float(np.median([m[col] for m in members]))
        out.append(agg)
    return out


def format_table(rows: Sequence[dict], columns: Sequence[str] = COMPARE_COLUMNS) -> str:
    def cell(v):
        if isinstance(v, float):
            return f"{v:.4g}"
        return str(v)
    cells = [[cell(r[c]) for c in columns] for r in rows]
    widths = [max(len(c), *(len(row[i]) for row in cells)) if cells else len(c)
              for i, c in enumerate(columns)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(columns, widths)),
             "  ".join("-" * w for w in widths)]
    lines += ["  ".join(v.ljust(w) for v, w in zip(row, widths)) for row in cells]
    return "\n".join(lines)


def compare(run_dirs: Sequence, out_dir=None) -> tuple[list[dict], list[dict], str]:
    """Per-run rows, per-group medians and a text table; writes compare.csv/.txt when ``out_dir``."""
    if len(run_dirs) < 2:
        raise ValueError("compare needs at least two runs")
    rows = [load_run(d) for d in run_dirs]
    rows.sort(key=lambda r: (r["method"], r["variant"], str(r["seed"]), r["run"]))
    medians = median_rows(rows)
    text = format_table(rows) + "\n\nmedians over seeds\n" + format_table(medians)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_rows(out / "compare.csv", [*rows, *medians])
        (out / "compare.txt").write_text(text + "\n")
    return rows, medians, text


def diag_gradnorm(checkpoint, n: int, seed: int, dataset: Optional[Dataset] = None,
                  ref_checkpoint=None, out_dir=None) -> tuple[dict, list[dict]]:
    """Ratio ||grad z|| / ||grad winner MSE|| over ``n`` (positive, Replace negative, x0, t) draws."""
    if n <= 0:
        raise ValueError(f"n must be positive, got {n}")
    model = model_from_checkpoint(load_checkpoint(checkpoint), use_ema=True)
    ref = model_from_checkpoint(load_checkpoint(ref_checkpoint)) if ref_checkpoint else None
    pool = dataset if dataset is not None else stack_pairs(generate_pairs(seed, max(n, 2)))
    rng = np.random.default_rng(seed)
    rows, degenerate = [], 0
    for i in range(n):
        parent = int(rng.integers(len(pool)))
        pos = pool.pair(parent)
        neg = perturb_replace(pos, pool, rng, parent)
        r = grad_norm_ratio(model, pack(pos), pack(neg.pair), pos.cond, rng, ref=ref)
        if r.degenerate:
            degenerate += 1
            continue
        rows.append({"sample_index": i, "ratio": r.ratio, "z": r.z, "winner_mse": r.winner_mse})
    ratios = np.array([r["ratio"] for r in rows])
    histogram = None
    if len(ratios):
        counts, edges = np.histogram(ratios, bins=20)
        histogram = {"counts": counts.tolist(), "edges": edges.tolist()}
    summary = {
        "checkpoint": str(checkpoint),
        "n": n,
        "n_valid": len(rows),
        "n_degenerate": degenerate,
        "median": float(np.median(ratios)) if len(ratios) else float("nan"),
        "mean": float(np.mean(ratios)) if len(ratios) else float("nan"),
        "fraction_gt_1": float(np.mean(ratios > 1.0)) if len(ratios) else float("nan"),
        "histogram": histogram,
    }
    if out_dir is not None:
        out = Path(out_dir)
        write_rows(out / "gradnorm.csv", rows)
        (out / "gradnorm_summary.json").write_text(json.dumps(summary, indent=2))
    return summary, rows
