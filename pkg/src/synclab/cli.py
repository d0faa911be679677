"""Command-line entry point: ``synclab <subcommand> ...``.

Exit codes: 0 success, 1 usage error (bad arguments or config), 2 runtime fault.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2

log = logging.getLogger("synclab")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit with status 2
        raise UsageError(f"{self.prog}: {message}")


def _cmd_gen_data(args) -> None:
    from .toyworld import load_dataset, make_dataset

    path = make_dataset(args.seed, args.n, args.out)
    ds = load_dataset(path)
    print(f"wrote {len(ds)} pairs to {path} (fingerprint {ds.fingerprint()})")


def _cmd_train(args) -> None:
    from .harness.config import load_config
    from .harness.train import train

    base = {"method": args.method} if args.method else {}
    cfg = load_config(args.config, args.override, **base)
    if args.method and cfg.method != args.method:
        raise UsageError(f"--method {args.method} conflicts with config method {cfg.method}")
    result = train(cfg)
    final = result.manifest["final_metrics"]
    print(f"run dir: {result.run_dir}")
    print(f"final checkpoint: {result.checkpoint}")
    print(json.dumps(final, indent=2, sort_keys=True))


def _cmd_eval(args) -> None:
    from .harness.evaluate import evaluate

    out_dir = args.out or Path(args.ckpt).resolve().parent.parent / "eval"
    metrics, _ = evaluate(args.ckpt, args.n, args.seed, use_ema=not args.raw, out_dir=out_dir,
                          steps=args.steps)
    print(f"eval written to {out_dir}")
    print(json.dumps(metrics.__dict__, indent=2, sort_keys=True))


def _cmd_compare(args) -> None:
    from .harness.report import compare

    if len(args.run_dirs) < 2:
        raise UsageError("compare needs at least two run directories")
    _, _, text = compare(args.run_dirs, args.out)
    print(text)


def _cmd_diag(args) -> None:
    from .harness.report import diag_gradnorm
    from .toyworld import load_dataset

    dataset = load_dataset(args.dataset) if args.dataset else None
    out_dir = args.out or Path(args.ckpt).resolve().parent.parent / "diag"
    summary, _ = diag_gradnorm(args.ckpt, args.n, args.seed, dataset=dataset,
                               ref_checkpoint=args.ref, out_dir=out_dir)
    summary = {k: v for k, v in summary.items() if k != "histogram"}
    print(f"gradnorm written to {out_dir}")
    print(json.dumps(summary, indent=2))


def _cmd_study(args) -> None:
    from .harness.experiments import StudyConfig, run_study

    study = StudyConfig()
    if args.pretrain_steps is not None:
        study.pretrain_steps = args.pretrain_steps
    if args.post_steps is not None:
        study.post_steps = args.post_steps
    report = run_study(args.seeds, args.workdir, study)
    print(json.dumps(report["medians"], indent=2, sort_keys=True))


def _cmd_plot(args) -> None:
    try:
        import matplotlib
    except ImportError:
        raise UsageError("plot needs matplotlib (pip install matplotlib)") from None
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    run = Path(args.run)
    metrics = run / "metrics.csv"
    if not metrics.exists():
        raise FileNotFoundError(f"no metrics.csv in {run}")
    with metrics.open() as f:
        rows = list(csv.DictReader(f))

    def column(name):
        pairs = [(int(r["step"]), float(r[name])) for r in rows if r.get(name) not in ("", None)]
        return [p[0] for p in pairs], [p[1] for p in pairs]

    fig, axes = plt.subplots(1, 3, figsize=(12, 3.5))
    for ax, name in zip(axes, ("train_loss", "val_fm_loss", "mean_abs_offset")):
        ax.plot(*column(name), marker="o", ms=3)
        ax.set_title(name)
        ax.set_xlabel("step")
    fig.tight_layout()
    out = run / "metrics.png"
    fig.savefig(out, dpi=120)
    written = [out]
    diag = run / "diag" / "gradnorm.csv"
    if diag.exists():
        with diag.open() as f:
            ratios = [float(r["ratio"]) for r in csv.DictReader(f)]
        fig, ax = plt.subplots(figsize=(5, 3.5))
        ax.hist(ratios, bins=30)
        ax.axvline(1.0, color="k", ls="--")
        ax.set_xlabel("gradient norm ratio")
        fig.tight_layout()
        written.append(run / "gradnorm.png")
        fig.savefig(written[-1], dpi=120)
    print("\n".join(str(p) for p in written))


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="synclab", description="Toy audio-video sync lab: data, training, evaluation.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    g = sub.add_parser("gen-data", help="generate a synchronized-pair dataset")
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--out", required=True)
    g.set_defaults(func=_cmd_gen_data)

    t = sub.add_parser("train", help="train with sft, dpo or syncdpo")
    t.add_argument("--method", choices=("sft", "dpo", "syncdpo"))
    t.add_argument("--config", help="key=value or JSON config file")
    t.add_argument("--override", action="append", default=[], metavar="KEY=VALUE")
    t.set_defaults(func=_cmd_train)

    e = sub.add_parser("eval", help="score generations of a checkpoint with the offset oracle")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--n", type=int, required=True)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--steps", type=int, default=30, help="Euler steps")
    e.add_argument("--raw", action="store_true", help="use raw weights instead of EMA")
    e.add_argument("--out", help="output directory (default: <run>/eval)")
    e.set_defaults(func=_cmd_eval)

    c = sub.add_parser("compare", help="tabulate final metrics of several runs")
    c.add_argument("run_dirs", nargs="*")
    c.add_argument("--out", help="directory for compare.csv / compare.txt")
    c.set_defaults(func=_cmd_compare)

    d = sub.add_parser("diag-gradnorm", help="gradient-norm ratio histogram")
    d.add_argument("--ckpt", required=True)
    d.add_argument("--n", type=int, default=500)
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--dataset", help="pool of positives (default: freshly generated)")
    d.add_argument("--ref", help="reference checkpoint (default: score without reference terms)")
    d.add_argument("--out", help="output directory (default: <run>/diag)")
    d.set_defaults(func=_cmd_diag)

    s = sub.add_parser("study", help="multi-seed comparison of post-training arms")
    s.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    s.add_argument("--workdir", required=True)
    s.add_argument("--pretrain-steps", type=int)
    s.add_argument("--post-steps", type=int)
    s.set_defaults(func=_cmd_study)

    pl = sub.add_parser("plot", help="render metrics (and gradnorm histogram) to PNG")
    pl.add_argument("--run", required=True)
    pl.set_defaults(func=_cmd_plot)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    from .harness.config import ConfigError

    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_usage().strip())
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001 - every other failure is a runtime fault
        print(f"fault: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
