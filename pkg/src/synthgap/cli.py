"""Command-line entry point.

    synthgap [--config PATH] [--seed U64] [--jobs N] [--force] generate [--fidelity F]
    synthgap run baseline | transfer-sweep | reduce-sweep | ablate
    synthgap report [--fit]
    synthgap replay RUN_DIR --out DIR

The workspace defaults to ``$SYNTHGAP_WORKSPACE`` (else ``./workspace``)
and is laid out as ``datasets/``, ``runs/``, ``reports/``.

Exit codes: 0 success, 1 replay mismatch, 2 validation error, 3 I/O error,
4 sweep finished with failed points.
"""

from __future__ import annotations

import argparse
import shutil
import sys
from pathlib import Path

from . import __version__
from .analysis import compute_gap
from .config import ExperimentConfig, load_config
from .data import Distribution, generate_dataset, open_dataset
from .errors import FormatError, NotFoundError, StorageError, SynthGapError, ValidationError
from .report import build_report
from .results import SweepResult
from .transfer import (
    ReductionArm,
    Study,
    replay_run,
    run_ablation,
    run_baselines,
    run_data_reduction_sweep,
    run_transfer_sweep,
)

EXIT_OK, EXIT_MISMATCH, EXIT_VALIDATION, EXIT_IO, EXIT_PARTIAL = 0, 1, 2, 3, 4


def _u64(text: str) -> int:
    value = int(text)
    if not 0 <= value < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return value


def parse_n_list(text: str) -> list[int]:
    """``"0..10"`` (inclusive) or ``"1,2,5"``."""
    text = text.strip()
    if ".." in text:
        lo, hi = text.split("..", 1)
        return list(range(int(lo), int(hi) + 1))
    return [int(t) for t in text.split(",") if t.strip()]


def parse_fractions(text: str) -> list[float]:
    out = []
    for tok in text.split(","):
        tok = tok.strip()
        if "/" in tok:
            num, den = tok.split("/", 1)
            out.append(float(num) / float(den))
        elif tok:
            out.append(float(tok))
    return out


ARM_CHOICES = {
    "both": [ReductionArm.SYNTHETIC_FROZEN_PREFIX, ReductionArm.NONE],
    "frozen": [ReductionArm.SYNTHETIC_FROZEN_PREFIX],
    "none": [ReductionArm.NONE],
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, default=argparse.SUPPRESS, help="TOML experiment config")
    common.add_argument("--seed", type=_u64, default=argparse.SUPPRESS, help="root seed for every random stream")
    common.add_argument("--jobs", type=int, default=argparse.SUPPRESS, help="parallel sweep points")
    common.add_argument("--force", action="store_true", default=argparse.SUPPRESS, help="overwrite generated datasets")
    common.add_argument("--workspace", type=Path, default=argparse.SUPPRESS, help="workspace root")
    common.add_argument("--epochs", type=int, default=argparse.SUPPRESS, help="override train.epochs")

    parser = argparse.ArgumentParser(prog="synthgap", parents=[common], description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("generate", parents=[common], help="generate the real and proxy datasets")
    gen.add_argument("--fidelity", type=float, help="proxy fidelity in [0, 1]")

    run = sub.add_parser("run", parents=[common], help="run a protocol")
    proto = run.add_subparsers(dest="protocol", required=True)
    proto.add_parser("baseline", parents=[common], help="real-only and synthetic-only training")
    ts = proto.add_parser("transfer-sweep", parents=[common], help="layer-transfer sweep over N")
    ts.add_argument("--direction", choices=["synth-to-real", "real-to-synth"])
    ts.add_argument("--n", dest="n_list", help="N values, e.g. 0..10 or 1,5,9")
    rs = proto.add_parser("reduce-sweep", parents=[common], help="data-reduction sweep")
    rs.add_argument("--fractions", help="descending fractions, e.g. 1,0.5,0.25,0.125")
    rs.add_argument("--arms", choices=sorted(ARM_CHOICES))
    ab = proto.add_parser("ablate", parents=[common], help="normalization/augmentation/texture/fidelity ablation")
    ab.add_argument("--kind", choices=["normalization", "augmentation", "texture", "fidelity"])

    rep = sub.add_parser("report", parents=[common], help="render CSV tables and plots from the registry")
    rep.add_argument("--fit", action="store_true", help="print the log-curve fit of the reduction sweep")

    rp = sub.add_parser("replay", parents=[common], help="re-execute a run from its run.toml")
    rp.add_argument("run_dir", type=Path)
    rp.add_argument("--out", type=Path, required=True)
    return parser


def resolve_config(args) -> ExperimentConfig:
    cfg = load_config(getattr(args, "config", None))
    if hasattr(args, "seed"):
        cfg.seeds.root = args.seed
    if hasattr(args, "workspace"):
        cfg.output.workspace = str(args.workspace)
    if hasattr(args, "epochs"):
        cfg.train.epochs = args.epochs
        cfg.train.warmup_epochs = min(cfg.train.warmup_epochs, max(0, args.epochs // 10))
    if getattr(args, "fidelity", None) is not None:
        cfg.dataset.fidelity = args.fidelity
    return cfg.materialize()


def dataset_dirs(cfg: ExperimentConfig) -> tuple[Path, Path]:
    root = cfg.workspace / "datasets"
    return root / "real", root / "proxy"


def cmd_generate(cfg: ExperimentConfig, force: bool) -> int:
    for path, dist in zip(dataset_dirs(cfg), (Distribution.REAL, Distribution.PROXY)):
        if path.exists():
            if not force:
                raise ValidationError(f"{path} already exists; pass --force to regenerate")
            shutil.rmtree(path)
        handle = generate_dataset(cfg.dataset_spec(dist), path)
        m = handle.manifest
        stats = m["channel_stats"]
        print(
            f"{dist.value:5s} {path}  train={m['counts']['train']} val={m['counts']['val']} "
            f"shape={tuple(m['shape'])} fidelity={m['spec']['fidelity']} "
            f"mean={tuple(round(v, 4) for v in stats['mean'])} std={tuple(round(v, 4) for v in stats['std'])}"
        )
    return EXIT_OK


def make_study(cfg: ExperimentConfig, jobs: int) -> Study:
    real, proxy = dataset_dirs(cfg)
    for path in (real, proxy):
        open_dataset(path)
    return Study(
        workspace=cfg.workspace,
        real=str(real.resolve()),
        proxy=str(proxy.resolve()),
        arch=cfg.arch(),
        train=cfg.train_config(),
        seed=cfg.seeds.root,
        jobs=jobs,
        scramble_patch=cfg.protocol.scramble_patch,
        echo=lambda msg: print(msg, flush=True),
    )


def print_sweep(result: SweepResult):
    print(f"{'protocol':34s} {'param':22s} {'top1':>16s} {'top5':>16s} status")
    for r in result.all_rows():
        if r.ok:
            s = r.stats
            t1 = f"{100 * s.top1_mean:6.2f} +- {100 * s.top1_std:4.2f}"
            t5 = f"{100 * s.top5_mean:6.2f} +- {100 * s.top5_std:4.2f}"
        else:
            t1 = t5 = "-"
        print(f"{r.protocol:34s} {r.param:22s} {t1:>16s} {t5:>16s} {r.status}")


def cmd_run(cfg: ExperimentConfig, args) -> int:
    study = make_study(cfg, getattr(args, "jobs", 1))
    proto = cfg.protocol
    sweep_dir = None
    if args.protocol == "baseline":
        result = run_baselines(study)
        sweep_dir = "baseline"
    elif args.protocol == "transfer-sweep":
        direction = args.direction or proto.direction
        n_text = args.n_list or proto.n or f"0..{cfg.arch().num_units}"
        result = run_transfer_sweep(study, direction, parse_n_list(n_text))
        sweep_dir = f"transfer-{direction}"
    elif args.protocol == "reduce-sweep":
        fractions = parse_fractions(args.fractions) if args.fractions else [float(f) for f in proto.fractions]
        arms = ARM_CHOICES.get(args.arms or proto.arms)
        if arms is None:
            raise ValidationError(f"unknown arms {proto.arms!r}")
        result = run_data_reduction_sweep(study, fractions, arms)
        sweep_dir = "reduce"
    else:
        result = run_ablation(study, args.kind or proto.ablation)
        sweep_dir = result.sweep_id
    (study.registry.root / sweep_dir / "experiment.toml").write_text(cfg.to_toml(), encoding="utf-8")
    print_sweep(result)
    try:
        real, synth = result.baseline("real"), result.baseline("synth")
        if real.ok and synth.ok:
            print(f"gap (real - synthetic, top-1): {compute_gap(real.stats, synth.stats):.2f} pp")
    except KeyError:
        pass
    if result.failed:
        for r in result.failed:
            print(f"failed: {r.protocol} {r.param}: {r.error}", file=sys.stderr)
        return EXIT_PARTIAL
    return EXIT_OK


def cmd_report(cfg: ExperimentConfig, fit: bool) -> int:
    summary = build_report(cfg.workspace)
    print(f"reports written to {cfg.workspace / 'reports'}")
    if "gap_pp" in summary:
        print(f"gap (real - synthetic, top-1): {summary['gap_pp']:.2f} pp")
    if fit:
        fits = summary.get("reduction_fit", {})
        if not fits:
            print("no reduction sweep to fit", file=sys.stderr)
        for arm, f in fits.items():
            print(f"fit {arm}: a={f['a']:.6g} b={f['b']:.6g} rms={f['rms']:.6g} n={f['n']}")
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "replay":
            same = replay_run(args.run_dir, args.out)
            print("metrics.csv identical" if same else "metrics.csv differs")
            return EXIT_OK if same else EXIT_MISMATCH
        cfg = resolve_config(args)
        if args.command == "generate":
            return cmd_generate(cfg, getattr(args, "force", False))
        if args.command == "run":
            return cmd_run(cfg, args)
        return cmd_report(cfg, args.fit)
    except (StorageError, FormatError, NotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except SynthGapError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
