"""Trainers for SFT, sample-and-rank DPO and SyncDPO (rule-based negatives + curriculum)."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import time
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .. import __version__
from ..curriculum import sample_kind, sampling_probs
from ..flowcore import (
    CHECKPOINT_FORMAT_VERSION,
    EMA,
    NumericalFault,
    ODESampler,
    VelocityField,
    draw_fm_batch,
    fm_loss,
    frozen_copy,
    load_checkpoint,
    model_from_checkpoint,
    pack,
    pack_arrays,
    save_checkpoint,
)
from ..negatives import NegativeContext, PerturbationKind, construct_negative, rank_candidates
from ..prefloss import LossConfig, PreferenceBatch, syncdpo_loss
from ..toyworld import DATASET_FORMAT_VERSION, load_dataset
from .config import TrainConfig
from .evaluate import ValidationSet, generation_metrics, validation_seed

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("step", "train_loss", "val_fm_loss", "mean_abs_offset", "mean_score",
                  "n_degenerate", "sampler_calls", "p_replace")


class TrainingStarved(RuntimeError):
    """Every preference pair in a step was skipped."""


@dataclass
class RunResult:
    run_dir: Path
    checkpoint: Path
    manifest: dict


def param_digest(model_or_state) -> str:
    state = model_or_state.state_dict() if hasattr(model_or_state, "state_dict") else model_or_state
    h = hashlib.sha256()
    for k in sorted(state):
        h.update(k.encode())
        h.update(state[k].detach().cpu().numpy().tobytes())
    return h.hexdigest()[:16]


def lr_factor(step: int, warmup: int, total: int) -> float:
    """Linear warmup to 1 over ``warmup`` steps, then cosine decay to 0 at ``total``."""
    if warmup > 0 and step < warmup:
        return (step + 1) / warmup
    if total <= warmup:
        return 1.0
    progress = min((step - warmup) / (total - warmup), 1.0)
    return 0.5 * (1.0 + math.cos(math.pi * progress))


def _fmt(x) -> str:
    if x is None or (isinstance(x, float) and math.isnan(x)):
        return ""
    return repr(float(x)) if isinstance(x, float) else str(x)


class Trainer:
    def __init__(self, cfg: TrainConfig):
        self.cfg = cfg.validate()
        self.run_dir = Path(cfg.output_dir)
        (self.run_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
        self.dataset = load_dataset(cfg.dataset)
        self.x1_all = pack_arrays(self.dataset.video, self.dataset.audio)
        self.curriculum = cfg.curriculum()

        torch.manual_seed(cfg.seed)
        self.ref: Optional[VelocityField] = None
        if cfg.init_checkpoint:
            init_state = load_checkpoint(cfg.init_checkpoint)
            self.model = model_from_checkpoint(init_state, use_ema=True)
            self.init_ckpt_digest = _file_digest(cfg.init_checkpoint)
        else:
            self.model = VelocityField(hidden=cfg.hidden, time_dim=cfg.time_dim, depth=cfg.depth)
            self.init_ckpt_digest = None
        if cfg.method in ("dpo", "syncdpo"):
            self.ref = frozen_copy(self.model)
            self.ref_digest_start = param_digest(self.ref)
        self.ema = EMA(self.model, cfg.ema_decay)
        self.optimizer = torch.optim.Adam(self.model.parameters(), lr=cfg.learning_rate,
                                          betas=(cfg.adam_beta1, cfg.adam_beta2),
                                          eps=cfg.adam_eps, weight_decay=cfg.weight_decay)
        self.scheduler = torch.optim.lr_scheduler.LambdaLR(
            self.optimizer, lambda s: lr_factor(s, cfg.warmup_steps, cfg.steps))

        # independent streams so methods sharing a seed see the same positives and noise
        data_ss, noise_ss, neg_ss = np.random.SeedSequence(cfg.seed).spawn(3)
        self.rng_data = np.random.default_rng(data_ss)
        self.rng_noise = np.random.default_rng(noise_ss)
        self.rng_neg = np.random.default_rng(neg_ss)

        self.loss_cfg = LossConfig(cfg.beta)
        self.ref_sampler = ODESampler(self.ref, cfg.sampling_steps) if self.ref is not None else None
        self.neg_ctx = NegativeContext(pool=self.dataset, sampler=self.ref_sampler)
        self.val = ValidationSet(validation_seed(self.dataset.manifest["seed"]), cfg.val_n)
        self.eval_model = VelocityField.from_descriptor(self.model.descriptor())

        self.rows: list[dict] = []
        self.kind_counts: dict[str, int] = {}
        self.prob_hash = hashlib.sha256()
        self.skipped_pairs = 0
        self.first_loss: Optional[float] = None
        self.step_times: list[float] = []
        self.records_file = None

    # -- per-method losses ------------------------------------------------

    def _positives(self):
        idx = self.rng_data.integers(len(self.dataset), size=self.cfg.batch_size)
        return idx, self.x1_all[idx], self.dataset.cond[idx]

    def _sft_loss(self, step):
        _, x1, cond = self._positives()
        return fm_loss(self.model, draw_fm_batch(x1, cond, self.rng_noise))

    def _syncdpo_loss(self, step):
        idx, x1, cond = self._positives()
        losers = np.empty_like(x1)
        fixed = self.cfg.negative_kind
        for j, i in enumerate(idx):
            kind = PerturbationKind(fixed) if fixed else sample_kind(step, self.curriculum, self.rng_neg)
            neg = construct_negative(self.dataset.pair(int(i)), kind, self.neg_ctx, self.rng_neg, int(i))
            losers[j] = pack(neg.pair)
            self.kind_counts[kind.value] = self.kind_counts.get(kind.value, 0) + 1
            if self.records_file is not None:
                self.records_file.write(json.dumps({"step": step, "parent_id": int(i),
                                                    **neg.record.to_dict()}) + "\n")
        batch = PreferenceBatch.draw(x1, losers, cond, self.rng_noise)
        return syncdpo_loss(self.model, self.ref, batch, self.loss_cfg)

    def _dpo_loss(self, step):
        _, _, cond = self._positives()
        n = self.cfg.n_candidates
        tiled = np.repeat(cond, n, axis=0)
        candidates = self.ref_sampler(tiled, self.rng_neg)
        winners, losers, conds = [], [], []
        for j in range(len(cond)):
            ranked = rank_candidates(candidates[j * n:(j + 1) * n], cond[j])
            if ranked is None:
                self.skipped_pairs += 1
                log.info("step %d: skipped pair %d, all candidates degenerate", step, j)
                continue
            w, l, _ = ranked
            winners.append(candidates[j * n + w])
            losers.append(candidates[j * n + l])
            conds.append(cond[j])
        if not winners:
            raise TrainingStarved(f"step {step}: every preference pair was skipped")
        batch = PreferenceBatch.draw(np.stack(winners), np.stack(losers), np.stack(conds), self.rng_noise)
        return syncdpo_loss(self.model, self.ref, batch, self.loss_cfg)

    # -- bookkeeping --------------------------------------------------------

    def _eval_row(self, step: int, train_loss: Optional[float]) -> dict:
        model = self.ema.copy_to(self.eval_model)
        metrics, _ = generation_metrics(model, self.cfg.eval_n, self.cfg.eval_seed, self.cfg.sampling_steps)
        p_replace = sampling_probs(step, self.curriculum)[0] if self.cfg.method == "syncdpo" and not self.cfg.negative_kind else None
        return {
            "step": step,
            "train_loss": train_loss,
            "val_fm_loss": self.val.loss(model),
            "mean_abs_offset": metrics.mean_abs_offset,
            "mean_score": metrics.mean_score,
            "n_degenerate": metrics.n_degenerate,
            "sampler_calls": self.ref_sampler.calls if self.ref_sampler else 0,
            "p_replace": p_replace,
        }

    def _checkpoint(self, step: int, name: Optional[str] = None) -> Path:
        path = self.run_dir / "checkpoints" / (name or f"step_{step:06d}.ckpt")
        return save_checkpoint(path, self.model, optimizer=self.optimizer, ema=self.ema,
                               step=step, config=self.cfg.to_dict())

    def _write_metrics(self) -> None:
        with open(self.run_dir / "metrics.csv", "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(METRIC_COLUMNS)
            for row in self.rows:
                w.writerow([_fmt(row[c]) for c in METRIC_COLUMNS])

    # -- main loop ----------------------------------------------------------

    def run(self) -> RunResult:
        cfg = self.cfg
        loss_fn = {"sft": self._sft_loss, "dpo": self._dpo_loss, "syncdpo": self._syncdpo_loss}[cfg.method]
        if cfg.method == "syncdpo" and cfg.log_records:
            self.records_file = open(self.run_dir / "negatives.jsonl", "w")
        self.rows.append(self._eval_row(0, None))
        window: list[float] = []
        step = 0
        try:
            for step in range(1, cfg.steps + 1):
                if cfg.method == "syncdpo" and not cfg.negative_kind:
                    self.prob_hash.update(repr(sampling_probs(step, self.curriculum)).encode())
                t0 = time.perf_counter()
                self.model.train()
                loss = loss_fn(step)
                if not torch.isfinite(loss):
                    raise NumericalFault(f"non-finite loss at step {step}")
                self.optimizer.zero_grad(set_to_none=True)
                loss.backward()
                self.optimizer.step()
                self.scheduler.step()
                self.ema.update(self.model)
                self.step_times.append(time.perf_counter() - t0)
                value = float(loss.detach())
                if self.first_loss is None:
                    self.first_loss = value
                window.append(value)
                if step % cfg.eval_every == 0 or step == cfg.steps:
                    self.rows.append(self._eval_row(step, float(np.mean(window))))
                    window = []
                    self._write_metrics()
                if step % cfg.ckpt_every == 0 and step != cfg.steps:
                    self._checkpoint(step)
        except NumericalFault as exc:
            crash = self._checkpoint(step, "crash.ckpt")
            self._write_metrics()
            raise NumericalFault(f"{exc} (step {step}; crash checkpoint at {crash})") from exc
        finally:
            if self.records_file is not None:
                self.records_file.close()
        final = self._checkpoint(cfg.steps)
        self._write_metrics()
        manifest = self._manifest(final)
        (self.run_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
        self._write_timing()
        return RunResult(self.run_dir, final, manifest)

    def _write_timing(self) -> None:
        with open(self.run_dir / "timing.csv", "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(("step", "seconds"))
            for i, s in enumerate(self.step_times, 1):
                w.writerow((i, f"{s:.6f}"))

    def _manifest(self, final: Path) -> dict:
        cfg = self.cfg
        manifest = {
            "config": cfg.to_dict(),
            "versions": {"synclab": __version__, "torch": torch.__version__,
                         "checkpoint_format": CHECKPOINT_FORMAT_VERSION,
                         "dataset_format": DATASET_FORMAT_VERSION},
            "seed": cfg.seed,
            "method": cfg.method,
            "dataset_fingerprint": self.dataset.fingerprint(),
            "dataset_manifest": self.dataset.manifest,
            "init_checkpoint_digest": self.init_ckpt_digest,
            "curriculum": {"mode": cfg.curriculum_mode, "k_percent": self.curriculum.k_percent,
                           "negative_kind": cfg.negative_kind,
                           "probs_digest": self.prob_hash.hexdigest()[:16]
                           if cfg.method == "syncdpo" and not cfg.negative_kind else None},
            "negative_kind_counts": dict(sorted(self.kind_counts.items())),
            "negative_records": "negatives.jsonl" if self.records_file is not None else None,
            "sampler_calls": self.ref_sampler.calls if self.ref_sampler else 0,
            "skipped_pairs": self.skipped_pairs,
            "first_train_loss": self.first_loss,
            "steps": cfg.steps,
            "final_checkpoint": str(final.relative_to(self.run_dir)),
            "final_metrics": {k: v for k, v in self.rows[-1].items()},
            "wall_time_total": float(sum(self.step_times)),
            "wall_time_per_step": float(np.mean(self.step_times)) if self.step_times else 0.0,
        }
        if self.ref is not None:
            end = param_digest(self.ref)
            manifest["reference_digest"] = {"start": self.ref_digest_start, "end": end,
                                            "unchanged": end == self.ref_digest_start}
        return manifest


def _file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]


def train(cfg: TrainConfig) -> RunResult:
    return Trainer(cfg).run()


def train_sft(cfg: TrainConfig) -> RunResult:
    return train(cfg.replace(method="sft"))


def train_vanilla_dpo(cfg: TrainConfig) -> RunResult:
    return train(cfg.replace(method="dpo"))


def train_syncdpo(cfg: TrainConfig) -> RunResult:
    return train(cfg.replace(method="syncdpo"))
