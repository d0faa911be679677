"""Multi-seed comparison driver: pretrain a base, then post-train every arm at equal budgets.

Per seed the layout under ``workdir/seed_<s>/`` is::

    data.bin            training positives
    pretrain/           the no-tune base (also the frozen reference)
    <arm>/              one post-training run per arm, each with eval/final.json
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from ..toyworld import make_dataset
from .config import TrainConfig
from .evaluate import evaluate
from .train import train

log = logging.getLogger(__name__)

ARMS = {
    "sft": {"method": "sft"},
    "syncdpo": {"method": "syncdpo", "curriculum_mode": "curriculum"},
    "uniform": {"method": "syncdpo", "curriculum_mode": "uniform"},
    "scale_only": {"method": "syncdpo", "curriculum_mode": "scale_only"},
    "replace_only": {"method": "syncdpo", "curriculum_mode": "replace_only"},
    "mask_only": {"method": "syncdpo", "negative_kind": "mask"},
    "shift_only": {"method": "syncdpo", "negative_kind": "shift"},
    "dpo": {"method": "dpo"},
}
DEFAULT_ARMS = ("sft", "syncdpo", "scale_only", "replace_only", "mask_only")


@dataclass
class StudyConfig:
    data_n: int = 2048
    pretrain_steps: int = 12000
    post_steps: int = 1000
    post_lr: float = 1e-4
    batch_size: int = 32
    beta: float = 0.2
    eval_n: int = 400
    eval_seed_base: int = 5000
    arms: Sequence[str] = DEFAULT_ARMS
    arm_overrides: dict = field(default_factory=dict)  # arm -> extra TrainConfig fields


def _final_eval(ckpt, run_dir: Path, n: int, seed: int) -> dict:
    metrics, _ = evaluate(ckpt, n, seed, out_dir=run_dir / "eval", tag="final")
    return asdict(metrics)


def pretrain(workdir: Path, seed: int, study: StudyConfig) -> Path:
    data = workdir / "data.bin"
    if not data.exists():
        make_dataset(seed, study.data_n, data)
    run_dir = workdir / "pretrain"
    ckpt = run_dir / "checkpoints" / f"step_{study.pretrain_steps:06d}.ckpt"
    if not (run_dir / "manifest.json").exists():
        train(TrainConfig(method="sft", steps=study.pretrain_steps, batch_size=study.batch_size,
                          seed=seed, dataset=str(data), output_dir=str(run_dir),
                          eval_every=max(study.pretrain_steps // 4, 1),
                          ckpt_every=study.pretrain_steps))
    return ckpt


def run_seed(seed: int, workdir, study: Optional[StudyConfig] = None) -> dict:
    """Pretrain (cached), post-train each arm (cached), evaluate; returns per-arm summaries."""
    study = study or StudyConfig()
    workdir = Path(workdir) / f"seed_{seed}"
    workdir.mkdir(parents=True, exist_ok=True)
    base = pretrain(workdir, seed, study)
    eval_seed = study.eval_seed_base + seed
    results = {"notune": _final_eval(base, workdir / "pretrain", study.eval_n, eval_seed)}
    results["notune"]["val_fm_loss"] = _final_val_loss(workdir / "pretrain")
    for arm in study.arms:
        run_dir = workdir / arm
        settings = {**ARMS[arm], **study.arm_overrides.get(arm, {})}
        cfg = TrainConfig(steps=study.post_steps, learning_rate=study.post_lr,
                          batch_size=study.batch_size, beta=study.beta, seed=seed,
                          dataset=str(workdir / "data.bin"), output_dir=str(run_dir),
                          init_checkpoint=str(base), eval_every=max(study.post_steps // 4, 1),
                          ckpt_every=study.post_steps, **settings)
        manifest_path = run_dir / "manifest.json"
        if manifest_path.exists():
            manifest = json.loads(manifest_path.read_text())
        else:
            manifest = train(cfg).manifest
        ckpt = run_dir / manifest["final_checkpoint"]
        summary = _final_eval(ckpt, run_dir, study.eval_n, eval_seed)
        summary["val_fm_loss"] = manifest["final_metrics"]["val_fm_loss"]
        summary["sampler_calls"] = manifest["sampler_calls"]
        summary["wall_time_per_step"] = manifest["wall_time_per_step"]
        results[arm] = summary
        log.info("seed %d %-12s |offset| %.4f  val_fm %.2f", seed, arm,
                 summary["mean_abs_offset"], summary["val_fm_loss"])
    (workdir / "results.json").write_text(json.dumps(results, indent=2, sort_keys=True))
    return results


def _final_val_loss(run_dir: Path) -> float:
    return json.loads((run_dir / "manifest.json").read_text())["final_metrics"]["val_fm_loss"]


def run_study(seeds: Sequence[int], workdir, study: Optional[StudyConfig] = None) -> dict:
    per_seed = {s: run_seed(s, workdir, study) for s in seeds}
    arms = list(next(iter(per_seed.values())))
    medians = {a: {k: float(np.median([per_seed[s][a][k] for s in seeds]))
                   for k in ("mean_abs_offset", "mean_score", "val_fm_loss")} for a in arms}
    report = {"seeds": list(seeds), "per_seed": {str(s): r for s, r in per_seed.items()},
              "medians": medians}
    Path(workdir, "study.json").write_text(json.dumps(report, indent=2, sort_keys=True))
    return report
