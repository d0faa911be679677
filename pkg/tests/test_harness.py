import json
import math

import numpy as np
import pytest
import torch

from synclab.cli import EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, main
from synclab.flowcore import NumericalFault, VelocityField, load_checkpoint, model_from_checkpoint
from synclab.harness.config import ConfigError, TrainConfig, load_config
from synclab.harness.evaluate import evaluate, generation_metrics
from synclab.harness.report import compare, diag_gradnorm, load_run
from synclab.harness.train import Trainer, lr_factor, param_digest, train
from synclab.toyworld import make_pair, measure_offset

SMALL = dict(batch_size=8, hidden=32, time_dim=8, eval_n=8, val_n=16, sampling_steps=4,
             warmup_steps=2, eval_every=5, ckpt_every=5)


def small_cfg(tiny_dataset, out, **kw):
    return TrainConfig(**{**SMALL, "dataset": str(tiny_dataset), "output_dir": str(out), **kw})


@pytest.fixture(scope="module")
def base_ckpt(tiny_dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("base")
    return train(small_cfg(tiny_dataset, out, steps=30)).checkpoint


def state_of(ckpt, ema=False):
    return model_from_checkpoint(load_checkpoint(ckpt), use_ema=ema).state_dict()


class TestConfig:
    def test_key_value_file(self, tmp_path):
        p = tmp_path / "c.cfg"
        p.write_text("# comment\nmethod = syncdpo\nsteps=12\ncurriculum.k_percent = 0.01\n"
                     "curriculum.mode=uniform\ndataset=d.bin\ninit_checkpoint=base.ckpt\n")
        cfg = load_config(str(p))
        assert (cfg.method, cfg.steps, cfg.curriculum_mode) == ("syncdpo", 12, "uniform")
        assert cfg.curriculum().k == pytest.approx(1e-4)

    def test_json_and_overrides(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text(json.dumps({"steps": 7, "dataset": "d.bin", "beta": 0.5}))
        cfg = load_config(str(p), ["steps=9", "log_records=false"])
        assert (cfg.steps, cfg.beta, cfg.log_records) == (9, 0.5, False)

    def test_unknown_key_rejected(self, tmp_path):
        p = tmp_path / "c.cfg"
        p.write_text("dataset=d.bin\nlearnig_rate=0.1\n")
        with pytest.raises(ConfigError, match="learnig_rate"):
            load_config(str(p))

    @pytest.mark.parametrize("override", ["steps=-1", "batch_size=0", "method=ppo", "ema_decay=1.0",
                                          "curriculum.mode=random", "negative_kind=blur", "steps=ten"])
    def test_invalid_values(self, override):
        with pytest.raises(ConfigError):
            load_config(None, ["dataset=d.bin", override])

    def test_preference_methods_need_reference(self):
        with pytest.raises(ConfigError, match="init_checkpoint"):
            load_config(None, ["dataset=d.bin", "method=dpo"])

    def test_default_k_tracks_budget(self):
        cfg = TrainConfig(steps=1000, dataset="d")
        assert cfg.curriculum().k == pytest.approx(0.5 / 800)


def test_lr_schedule():
    assert lr_factor(0, 10, 100) == pytest.approx(0.1)
    assert lr_factor(9, 10, 100) == pytest.approx(1.0)
    assert lr_factor(10, 10, 100) == pytest.approx(1.0)
    assert lr_factor(55, 10, 100) == pytest.approx(0.5)
    assert lr_factor(100, 10, 100) == pytest.approx(0.0, abs=1e-12)


class TestSFT:
    def test_zero_steps_is_initialization(self, tiny_dataset, tmp_path):
        res = train(small_cfg(tiny_dataset, tmp_path, steps=0, seed=3))
        torch.manual_seed(3)
        init = VelocityField(hidden=32, time_dim=8).state_dict()
        for k, v in state_of(res.checkpoint).items():
            assert torch.equal(v, init[k]), k

    def test_same_seed_identical_metrics(self, tiny_dataset, tmp_path):
        a = train(small_cfg(tiny_dataset, tmp_path / "a", steps=10))
        b = train(small_cfg(tiny_dataset, tmp_path / "b", steps=10))
        assert (a.run_dir / "metrics.csv").read_bytes() == (b.run_dir / "metrics.csv").read_bytes()
        assert param_digest(state_of(a.checkpoint)) == param_digest(state_of(b.checkpoint))

    def test_outputs_and_manifest(self, tiny_dataset, tmp_path):
        res = train(small_cfg(tiny_dataset, tmp_path, steps=10))
        assert sorted(p.name for p in (tmp_path / "checkpoints").iterdir()) == [
            "step_000005.ckpt", "step_000010.ckpt"]
        m = res.manifest
        assert m["sampler_calls"] == 0 and m["steps"] == 10
        assert m["dataset_fingerprint"] and m["versions"]["checkpoint_format"] == 1
        steps = [int(line.split(",")[0]) for line in (tmp_path / "metrics.csv").read_text().splitlines()[1:]]
        assert steps == [0, 5, 10]

    def test_ema_matches_straight_line_recomputation(self, tiny_dataset, tmp_path):
        res = train(small_cfg(tiny_dataset, tmp_path, steps=4, ckpt_every=1, ema_decay=0.9, seed=5))
        init = train(small_cfg(tiny_dataset, tmp_path / "init", steps=0, seed=5)).checkpoint
        shadow = {k: v.double() for k, v in state_of(init).items()}
        for step in range(1, 5):
            theta = state_of(tmp_path / "checkpoints" / f"step_{step:06d}.ckpt")
            shadow = {k: 0.9 * shadow[k] + 0.1 * theta[k].double() for k in shadow}
        for k, v in state_of(res.checkpoint, ema=True).items():
            torch.testing.assert_close(v.double(), shadow[k], rtol=1e-5, atol=1e-6)

    def test_non_finite_loss_saves_crash_checkpoint(self, tiny_dataset, tmp_path, monkeypatch):
        original = Trainer._sft_loss

        def poisoned(self, step):
            loss = original(self, step)
            return loss * float("nan") if step == 3 else loss

        monkeypatch.setattr(Trainer, "_sft_loss", poisoned)
        with pytest.raises(NumericalFault, match="step 3"):
            train(small_cfg(tiny_dataset, tmp_path, steps=10))
        assert (tmp_path / "checkpoints" / "crash.ckpt").exists()


class TestPreferenceTrainers:
    def test_dpo_accounting(self, tiny_dataset, base_ckpt, tmp_path):
        res = train(small_cfg(tiny_dataset, tmp_path, method="dpo", steps=3, init_checkpoint=str(base_ckpt),
                              batch_size=4))
        m = res.manifest
        assert abs(m["first_train_loss"] - math.log(2)) < 1e-6
        assert m["sampler_calls"] == 3 * 4 * 3
        assert m["reference_digest"]["unchanged"]

    def test_syncdpo_zero_calls_and_frozen_reference(self, tiny_dataset, base_ckpt, tmp_path):
        res = train(small_cfg(tiny_dataset, tmp_path, method="syncdpo", steps=6,
                              init_checkpoint=str(base_ckpt)))
        m = res.manifest
        assert m["sampler_calls"] == 0
        assert abs(m["first_train_loss"] - math.log(2)) < 1e-6
        assert m["reference_digest"]["unchanged"]
        assert m["reference_digest"]["start"] == param_digest(state_of(base_ckpt, ema=True))
        assert set(m["negative_kind_counts"]) <= {"replace", "scale"}
        assert sum(m["negative_kind_counts"].values()) == 6 * 8
        records = (tmp_path / "negatives.jsonl").read_text().splitlines()
        assert len(records) == 48

    def test_syncdpo_deterministic(self, tiny_dataset, base_ckpt, tmp_path):
        runs = [train(small_cfg(tiny_dataset, tmp_path / n, method="syncdpo", steps=6,
                                init_checkpoint=str(base_ckpt))) for n in "ab"]
        for name in ("metrics.csv", "negatives.jsonl"):
            assert (runs[0].run_dir / name).read_bytes() == (runs[1].run_dir / name).read_bytes()

    def test_fixed_kind_ablation(self, tiny_dataset, base_ckpt, tmp_path):
        res = train(small_cfg(tiny_dataset, tmp_path, method="syncdpo", steps=2, negative_kind="synthesize",
                              init_checkpoint=str(base_ckpt)))
        assert res.manifest["negative_kind_counts"] == {"synthesize": 16}
        assert res.manifest["sampler_calls"] == 16

    def test_dpo_slower_per_step(self, tiny_dataset, base_ckpt, tmp_path):
        common = dict(steps=5, init_checkpoint=str(base_ckpt), batch_size=8, sampling_steps=30)
        dpo = train(small_cfg(tiny_dataset, tmp_path / "dpo", method="dpo", **common)).manifest
        sync = train(small_cfg(tiny_dataset, tmp_path / "sync", method="syncdpo", **common)).manifest
        assert dpo["wall_time_per_step"] > sync["wall_time_per_step"]
        assert dpo["sampler_calls"] > sync["sampler_calls"] == 0


class TestEvaluate:
    def test_rejects_empty(self, base_ckpt):
        with pytest.raises(ValueError):
            evaluate(base_ckpt, 0, 0)

    def test_ema_flag_switches_weights(self, base_ckpt, tmp_path):
        ema, ema_rows = evaluate(base_ckpt, 6, 1, use_ema=True, out_dir=tmp_path, steps=4)
        raw, raw_rows = evaluate(base_ckpt, 6, 1, use_ema=False, out_dir=tmp_path, steps=4)
        assert [r["offset"] for r in ema_rows] != [r["offset"] for r in raw_rows]
        assert len(list(tmp_path.glob("*.csv"))) == 2 and len(list(tmp_path.glob("*.json"))) == 2

    def test_missing_checkpoint(self, tmp_path):
        with pytest.raises(OSError):
            evaluate(tmp_path / "nope.ckpt", 4, 0)

    def test_untrained_matches_shuffled_pairs(self):
        torch.manual_seed(0)
        _, rows = generation_metrics(VelocityField(), 400, 0)
        gen = np.array([r["abs_offset"] for r in rows if not r["degenerate"]])
        rng = np.random.default_rng(0)
        pairs = [make_pair(rng) for _ in range(800)]
        shuffled = [measure_offset(pairs[2 * i].video, pairs[2 * i + 1].audio) for i in range(400)]
        base = np.array([abs(m.offset) for m in shuffled if not m.degenerate])
        # Welch t statistic
        t = (gen.mean() - base.mean()) / math.sqrt(gen.var(ddof=1) / len(gen) + base.var(ddof=1) / len(base))
        assert abs(t) < 3.0


@pytest.fixture(scope="module")
def runs(tiny_dataset, base_ckpt, tmp_path_factory):
    root = tmp_path_factory.mktemp("cmp")
    out = []
    for name, kw in [("sft_a", {}), ("sft_b", {}), ("sft_c", {"seed": 1}),
                     ("sync", {"method": "syncdpo", "init_checkpoint": str(base_ckpt)})]:
        out.append(train(small_cfg(tiny_dataset, root / name, steps=4, **kw)).run_dir)
    return out


class TestCompare:
    def test_needs_two(self, runs):
        with pytest.raises(ValueError):
            compare(runs[:1])

    def test_missing_files(self, runs, tmp_path):
        with pytest.raises(FileNotFoundError, match="manifest.json"):
            compare([runs[0], tmp_path])

    def test_identical_runs_identical_rows(self, runs):
        a, b = load_run(runs[0]), load_run(runs[1])
        skip = {"run", "wall_time_per_step"}
        assert {k: v for k, v in a.items() if k not in skip} == {k: v for k, v in b.items() if k not in skip}

    def test_table_and_medians(self, runs, tmp_path):
        rows, medians, text = compare(runs, tmp_path)
        assert "sampler_calls" in text and "wall_time_per_step" in text
        sft = [r for r in rows if r["method"] == "sft"]
        med = next(m for m in medians if m["method"] == "sft")
        assert med["val_fm_loss"] == pytest.approx(float(np.median([r["val_fm_loss"] for r in sft])))
        assert (tmp_path / "compare.csv").exists() and (tmp_path / "compare.txt").exists()


class TestDiagGradnorm:
    def test_summary_and_budget(self, tiny_dataset, tmp_path):
        import time
        from synclab.flowcore import save_checkpoint
        from synclab.toyworld import load_dataset

        torch.manual_seed(0)
        ckpt = save_checkpoint(tmp_path / "m.ckpt", VelocityField())
        t0 = time.perf_counter()
        summary, rows = diag_gradnorm(ckpt, 500, 0, dataset=load_dataset(tiny_dataset), out_dir=tmp_path)
        assert time.perf_counter() - t0 < 60
        assert summary["n_valid"] + summary["n_degenerate"] == 500
        assert 0.0 <= summary["fraction_gt_1"] <= 1.0
        assert sum(summary["histogram"]["counts"]) == summary["n_valid"]
        assert (tmp_path / "gradnorm.csv").exists()
        assert np.median([r["ratio"] for r in rows]) == pytest.approx(summary["median"])


class TestCLI:
    def test_gen_data_and_train(self, tmp_path, capsys):
        data = tmp_path / "d.bin"
        assert main(["gen-data", "--n", "16", "--seed", "2", "--out", str(data)]) == EXIT_OK
        cfg = tmp_path / "c.cfg"
        cfg.write_text(f"dataset={data}\noutput_dir={tmp_path / 'run'}\nsteps=3\nhidden=16\neval_n=4\n"
                       "val_n=8\nsampling_steps=2\nbatch_size=4\n")
        assert main(["train", "--method", "sft", "--config", str(cfg), "--override", "eval_every=3"]) == EXIT_OK
        ckpt = tmp_path / "run" / "checkpoints" / "step_000003.ckpt"
        assert main(["eval", "--ckpt", str(ckpt), "--n", "4", "--steps", "2"]) == EXIT_OK
        assert (tmp_path / "run" / "eval").is_dir()
        assert main(["diag-gradnorm", "--ckpt", str(ckpt), "--n", "5", "--dataset", str(data)]) == EXIT_OK
        assert (tmp_path / "run" / "diag" / "gradnorm_summary.json").exists()
        assert main(["compare", str(tmp_path / "run")]) == EXIT_USAGE

    def test_usage_errors(self, tmp_path):
        assert main([]) == EXIT_USAGE
        assert main(["gen-data", "--n", "3"]) == EXIT_USAGE
        assert main(["train", "--method", "sft", "--override", "dataset=x", "--override", "bogus=1"]) == EXIT_USAGE

    def test_runtime_faults(self, tmp_path):
        assert main(["eval", "--ckpt", str(tmp_path / "missing.ckpt"), "--n", "2"]) == EXIT_RUNTIME
        assert main(["gen-data", "--n", "0", "--seed", "1", "--out", str(tmp_path / "d.bin")]) == EXIT_RUNTIME
        assert main(["train", "--method", "sft", "--override", f"dataset={tmp_path / 'none.bin'}"]) == EXIT_RUNTIME

    def test_plot(self, tmp_path):
        pytest.importorskip("matplotlib")
        data = tmp_path / "d.bin"
        main(["gen-data", "--n", "8", "--seed", "2", "--out", str(data)])
        main(["train", "--method", "sft", "--override", f"dataset={data}", "--override",
              f"output_dir={tmp_path / 'run'}", "--override", "steps=2", "--override", "eval_every=1",
              "--override", "hidden=8", "--override", "eval_n=2", "--override", "sampling_steps=2"])
        assert main(["plot", "--run", str(tmp_path / "run")]) == EXIT_OK
        assert (tmp_path / "run" / "metrics.png").exists()
