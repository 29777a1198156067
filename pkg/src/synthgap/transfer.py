"""Layer-transfer, data-reduction and ablation protocols over a run registry.

Every training run is described by a :class:`RunSpec`, written to
``run.toml`` in its run directory before training starts. Replaying that
file reproduces the run exactly. The registry lives under
``<workspace>/runs``::

    runs/<sweep_id>/<point_id>/   run.toml, metrics.csv, summary.json, checkpoint/
    runs/<sweep_id>/sweep.csv     one row per point plus the two baselines
    runs/index.json               spec digest -> completed run directory

Seeding: all runs of a study share one training/initialization stream,
``derive_seed(seed, "train")``, so protocols differ only in what they
transfer, freeze or feed (paired comparisons). Data subsets and texture
scrambles take their own per-point streams.
"""

from __future__ import annotations

import enum
import hashlib
import json
import shutil
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from functools import lru_cache
from pathlib import Path
from typing import Callable

import numpy as np
import tomli
import tomli_w
import torch

from .analysis import emit_csv
from .data import (
    Augmentation,
    Distribution,
    _as_enum,
    generate_dataset,
    open_dataset,
    scramble_images,
    stratified_reduce,
)
from .errors import NotFoundError, StorageError, SynthGapError, ValidationError
from .model import (
    ArchitectureConfig,
    build_model,
    freeze_prefix,
    load_checkpoint,
    reinit_suffix,
)
from .results import SweepResult, SweepRow, sweep_from_dict, sweep_to_dict
from .seeding import derive_seed
from .trainer import (
    ArraySet,
    NormMode,
    SummaryStats,
    TrainConfig,
    aggregate_last_k,
    train,
)


class Direction(str, enum.Enum):
    REAL_TO_SYNTH = "real-to-synth"
    SYNTH_TO_REAL = "synth-to-real"


class ReductionArm(str, enum.Enum):
    SYNTHETIC_FROZEN_PREFIX = "synthetic-frozen-prefix"
    NONE = "none"


class AblationKind(str, enum.Enum):
    NORMALIZATION = "normalization"
    AUGMENTATION = "augmentation"
    TEXTURE = "texture"
    FIDELITY = "fidelity"


FIDELITY_GRID = (0.25, 0.5, 0.75, 1.0)


# ---------------------------------------------------------------------------
# run specs


@dataclass(frozen=True)
class DataRef:
    """A dataset split, optionally reduced and/or texture-scrambled."""

    path: str
    split: str = "train"
    fraction: float = 1.0
    reduce_seed: int = 0
    scramble_patch: int = 0
    scramble_seed: int = 0


@lru_cache(maxsize=16)
def load_data(ref: DataRef) -> ArraySet:
    handle = open_dataset(ref.path)
    if ref.split not in ("train", "val"):
        raise ValidationError(f"unknown split {ref.split!r}")
    if ref.fraction != 1.0:
        if ref.split != "train":
            raise ValidationError("only the train split can be reduced")
        view = stratified_reduce(handle, ref.fraction, ref.reduce_seed)
        images, labels = view.train_images(), view.train_labels()
    else:
        images, labels = np.asarray(handle.images(ref.split)), handle.labels(ref.split)
    if ref.scramble_patch:
        images = scramble_images(images, ref.scramble_patch, ref.scramble_seed)
    return ArraySet(np.ascontiguousarray(images), labels, handle.num_categories)


@dataclass(frozen=True)
class RunSpec:
    train_data: DataRef
    val_data: DataRef
    arch: ArchitectureConfig
    train: TrainConfig
    init_seed: int
    pretrained: str = ""
    freeze: int = 0

    def to_dict(self) -> dict:
        return {
            "train_data": asdict(self.train_data),
            "val_data": asdict(self.val_data),
            "arch": self.arch.to_dict(),
            "train": self.train.to_dict(),
            "init_seed": self.init_seed,
            "pretrained": self.pretrained,
            "freeze": self.freeze,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunSpec":
        return cls(
            train_data=DataRef(**d["train_data"]),
            val_data=DataRef(**d["val_data"]),
            arch=ArchitectureConfig(**d["arch"]),
            train=TrainConfig(**d["train"]),
            init_seed=d["init_seed"],
            pretrained=d.get("pretrained", ""),
            freeze=d.get("freeze", 0),
        )

    def to_toml(self) -> str:
        return tomli_w.dumps(self.to_dict())

    def digest(self) -> str:
        return hashlib.sha256(self.to_toml().encode("utf-8")).hexdigest()[:16]


def read_run_spec(run_dir) -> RunSpec:
    path = Path(run_dir) / "run.toml"
    if not path.is_file():
        raise NotFoundError(f"no run.toml in {run_dir}")
    return RunSpec.from_dict(tomli.loads(path.read_text(encoding="utf-8")))


def prepare_model(spec: RunSpec):
    if spec.pretrained:
        ckpt = Path(spec.pretrained)
        if not (ckpt / "manifest.json").is_file():
            raise NotFoundError(f"pretrained checkpoint {ckpt} not found")
        model = load_checkpoint(ckpt)
        if model.cfg != spec.arch:
            raise ValidationError(f"checkpoint architecture {model.cfg} does not match {spec.arch}")
        freeze_prefix(model, spec.freeze)
        reinit_suffix(model, spec.freeze, spec.init_seed)
    else:
        if spec.freeze:
            raise ValidationError("a fresh model cannot have a transferred prefix")
        model = build_model(spec.arch, spec.init_seed)
    return model


def execute_run(spec: RunSpec, run_dir, log_fn=None) -> SummaryStats | None:
    """Train ``spec`` into ``run_dir`` (which must not hold a completed run)."""
    run_dir = Path(run_dir)
    try:
        run_dir.mkdir(parents=True, exist_ok=True)
        (run_dir / "run.toml").write_text(spec.to_toml(), encoding="utf-8")
    except OSError as exc:
        raise StorageError(f"cannot create run directory {run_dir}: {exc}") from exc
    model = prepare_model(spec)
    log = train(model, load_data(spec.train_data), load_data(spec.val_data), spec.train, run_dir, log_fn=log_fn)
    if not len(log):
        return None
    return aggregate_last_k(log, min(spec.train.last_k, len(log)))


def read_summary(run_dir) -> SummaryStats | None:
    data = json.loads((Path(run_dir) / "summary.json").read_text(encoding="utf-8"))
    if "summary" not in data:
        return None
    return SummaryStats(**data["summary"])


def replay_run(run_dir, out_dir) -> bool:
    """Re-execute a run from its ``run.toml``; True if ``metrics.csv`` matches."""
    spec = read_run_spec(run_dir)
    execute_run(spec, out_dir)
    return (Path(run_dir) / "metrics.csv").read_bytes() == (Path(out_dir) / "metrics.csv").read_bytes()


# ---------------------------------------------------------------------------
# single transfer point


@dataclass(frozen=True)
class TransferPlan:
    direction: Direction
    n: int
    pretrained: str
    train_data: DataRef
    val_data: DataRef
    arch: ArchitectureConfig
    train: TrainConfig
    seed: int

    def __post_init__(self):
        object.__setattr__(self, "direction", _as_enum(Direction, self.direction))
        if self.val_data.split != "val":
            raise ValidationError("transfer points are evaluated on a validation split")
        if not 0 <= self.n <= self.arch.num_units:
            raise ValidationError(f"N must lie in [0, {self.arch.num_units}], got {self.n}")

    def run_spec(self) -> RunSpec:
        return RunSpec(
            train_data=self.train_data,
            val_data=self.val_data,
            arch=self.arch,
            train=replace(self.train, seed=self.seed),
            init_seed=self.seed,
            pretrained=self.pretrained,
            freeze=self.n,
        )


def run_transfer_point(plan: TransferPlan, run_dir, log_fn=None) -> SummaryStats | None:
    """Load the pretrained model, keep units 1..N, redraw the rest and retrain."""
    if not (Path(plan.pretrained) / "manifest.json").is_file():
        raise NotFoundError(f"pretrained checkpoint {plan.pretrained} not found")
    return execute_run(plan.run_spec(), run_dir, log_fn=log_fn)


# ---------------------------------------------------------------------------
# registry


def _run_job(spec: RunSpec, run_dir: str):
    torch.set_num_threads(1)
    return execute_run(spec, run_dir)


@dataclass
class PointJob:
    protocol: str
    param: str
    point_id: str
    spec: RunSpec


class Registry:
    def __init__(self, workspace, jobs: int = 1, echo: Callable[[str], None] | None = None):
        self.root = Path(workspace) / "runs"
        self.jobs = max(1, int(jobs))
        self.echo = echo or (lambda msg: None)

    def _index_path(self) -> Path:
        return self.root / "index.json"

    def _index(self) -> dict:
        path = self._index_path()
        if path.is_file():
            return json.loads(path.read_text(encoding="utf-8"))
        return {}

    def _record(self, spec: RunSpec, run_dir: Path):
        index = self._index()
        index[spec.digest()] = str(run_dir.relative_to(self.root))
        self.root.mkdir(parents=True, exist_ok=True)
        self._index_path().write_text(json.dumps(index, indent=2, sort_keys=True) + "\n", encoding="utf-8")

    def _completed(self, spec: RunSpec, run_dir: Path) -> bool:
        """True if ``run_dir`` already holds this exact run; error if another."""
        if not (run_dir / "summary.json").is_file():
            return False
        existing = (run_dir / "run.toml").read_text(encoding="utf-8") if (run_dir / "run.toml").is_file() else ""
        if existing != spec.to_toml():
            raise ValidationError(f"{run_dir} holds a completed run with a different config; use another workspace")
        return True

    def _reuse(self, spec: RunSpec, run_dir: Path) -> bool:
        """Copy an identical completed run from elsewhere in the registry."""
        source = self._index().get(spec.digest())
        if source is None:
            return False
        src = self.root / source
        if src == run_dir or not (src / "summary.json").is_file():
            return False
        if (src / "run.toml").read_text(encoding="utf-8") != spec.to_toml():
            return False
        if run_dir.exists():
            shutil.rmtree(run_dir)
        shutil.copytree(src, run_dir)
        return True

    def run(self, sweep_id: str, jobs: list[PointJob]) -> list[SweepRow]:
        """Execute (or reuse) every job; failures become rows with status ``failed``."""
        rows: list[SweepRow | None] = [None] * len(jobs)
        pending = []
        for i, job in enumerate(jobs):
            run_dir = self.root / sweep_id / job.point_id
            try:
                if self._completed(job.spec, run_dir) or self._reuse(job.spec, run_dir):
                    self.echo(f"[{sweep_id}/{job.point_id}] reused")
                    rows[i] = self._row(job, run_dir, read_summary(run_dir))
                    self._record(job.spec, run_dir)
                else:
                    pending.append((i, job, run_dir))
            except SynthGapError as exc:
                rows[i] = self._failed(job, run_dir, exc)

        if self.jobs > 1 and len(pending) > 1:
            with ProcessPoolExecutor(max_workers=self.jobs) as pool:
                futures = [(i, job, d, pool.submit(_run_job, job.spec, str(d))) for i, job, d in pending]
                for i, job, run_dir, fut in futures:
                    rows[i] = self._collect(job, run_dir, fut.result)
        else:
            for i, job, run_dir in pending:
                self.echo(f"[{sweep_id}/{job.point_id}] training")
                rows[i] = self._collect(job, run_dir, lambda: execute_run(job.spec, run_dir))
        return rows

    def _collect(self, job, run_dir, produce) -> SweepRow:
        try:
            stats = produce()
        except SynthGapError as exc:
            self.echo(f"[{run_dir.parent.name}/{job.point_id}] failed: {exc}")
            return self._failed(job, run_dir, exc)
        self._record(job.spec, run_dir)
        row = self._row(job, run_dir, stats)
        if stats is not None:
            self.echo(f"[{run_dir.parent.name}/{job.point_id}] top1 {stats.top1_mean:.4f} +- {stats.top1_std:.4f}")
        return row

    @staticmethod
    def _row(job: PointJob, run_dir: Path, stats) -> SweepRow:
        return SweepRow(job.protocol, job.param, job.spec.init_seed, stats, str(run_dir))

    @staticmethod
    def _failed(job: PointJob, run_dir: Path, exc: Exception) -> SweepRow:
        return SweepRow(job.protocol, job.param, job.spec.init_seed, None, str(run_dir), "failed", str(exc))

    def write_sweep(self, result: SweepResult) -> Path:
        path = self.root / result.sweep_id / "sweep.csv"
        path.parent.mkdir(parents=True, exist_ok=True)
        emit_csv(result, path)
        detail = json.dumps(sweep_to_dict(result), indent=2, sort_keys=True) + "\n"
        (path.parent / "sweep.json").write_text(detail, encoding="utf-8")
        return path


# ---------------------------------------------------------------------------
# studies


@dataclass
class Study:
    """Shared context of a set of protocols: datasets, recipe, seed, workspace."""

    workspace: Path
    real: str
    proxy: str
    arch: ArchitectureConfig
    train: TrainConfig
    seed: int = 0
    jobs: int = 1
    scramble_patch: int = 8
    echo: Callable[[str], None] | None = None
    registry: Registry = field(init=False)

    def __post_init__(self):
        self.workspace = Path(self.workspace)
        self.real, self.proxy = str(self.real), str(self.proxy)
        self.registry = Registry(self.workspace, self.jobs, self.echo)

    @property
    def run_seed(self) -> int:
        return derive_seed(self.seed, "train")

    @property
    def num_units(self) -> int:
        return self.arch.num_units

    def dataset_path(self, which: str) -> str:
        return self.real if which == "real" else self.proxy

    def spec(self, train_data: DataRef, train: TrainConfig | None = None, **kw) -> RunSpec:
        cfg = replace(train or self.train, seed=self.run_seed)
        return RunSpec(train_data, DataRef(self.real, "val"), self.arch, cfg, self.run_seed, **kw)


BASELINE_SWEEP = "baseline"


def _finish(study: Study, result: SweepResult) -> SweepResult:
    """Merge with rows written by earlier invocations of the same sweep, then save."""
    previous = study.registry.root / result.sweep_id / "sweep.json"
    if previous.is_file():
        fresh = {(r.protocol, r.param): r for r in result.rows}
        old = sweep_from_dict(json.loads(previous.read_text(encoding="utf-8")))
        merged = [fresh.pop((r.protocol, r.param), r) for r in old.rows]
        merged += [r for r in result.rows if (r.protocol, r.param) in fresh]
        result = SweepResult(result.sweep_id, merged, result.baselines)
    study.registry.write_sweep(result)
    return result


def run_baselines(study: Study) -> SweepResult:
    """Real-only and synthetic-only training, both evaluated on real validation data."""
    jobs = [
        PointJob(f"baseline-{which}", "-", which, study.spec(DataRef(study.dataset_path(which))))
        for which in ("real", "synth")
    ]
    rows = study.registry.run(BASELINE_SWEEP, jobs)
    return _finish(study, SweepResult(BASELINE_SWEEP, baselines=rows))


def baseline_checkpoint(study: Study, which: str) -> str:
    return str(study.registry.root / BASELINE_SWEEP / which / "checkpoint")


def _require_baselines(study: Study) -> SweepResult:
    result = run_baselines(study)
    if result.failed:
        raise ValidationError("baseline training failed: " + "; ".join(r.error for r in result.failed))
    return result


def run_transfer_sweep(study: Study, direction, n_list) -> SweepResult:
    """One retraining per N from a shared pretrained checkpoint, plus both baselines."""
    direction = _as_enum(Direction, direction)
    n_list = [int(n) for n in n_list]
    for n in n_list:
        if not 0 <= n <= study.num_units:
            raise ValidationError(f"N must lie in [0, {study.num_units}], got {n}")
    base = _require_baselines(study)
    source, target = ("synth", "real") if direction is Direction.SYNTH_TO_REAL else ("real", "synth")
    pretrained = baseline_checkpoint(study, source)
    jobs = []
    for n in n_list:
        plan = TransferPlan(
            direction,
            n,
            pretrained,
            DataRef(study.dataset_path(target)),
            DataRef(study.real, "val"),
            study.arch,
            study.train,
            study.run_seed,
        )
        jobs.append(PointJob(f"transfer-{direction.value}", str(n), f"n{n:02d}", plan.run_spec()))
    sweep_id = f"transfer-{direction.value}"
    rows = study.registry.run(sweep_id, jobs)
    return _finish(study, SweepResult(sweep_id, rows, base.baselines))


def fraction_label(fraction: float) -> str:
    return format(float(fraction), ".6g")


def run_data_reduction_sweep(study: Study, fractions, arms=(ReductionArm.SYNTHETIC_FROZEN_PREFIX, ReductionArm.NONE)) -> SweepResult:
    """Retrain on stratified subsets of the real train split.

    The frozen-prefix arm keeps units 1..U-2 of the synthetic baseline and
    retrains the last two; the other arm trains a fresh model end to end.
    Both arms see the same subset for a given fraction.
    """
    fractions = [float(f) for f in fractions]
    if not fractions or any(not 0 < f <= 1 for f in fractions):
        raise ValidationError(f"fractions must lie in (0, 1], got {fractions}")
    if fractions != sorted(fractions, reverse=True):
        raise ValidationError("fractions must be sorted in descending order")
    arms = [_as_enum(ReductionArm, a) for a in arms]
    base = _require_baselines(study)
    handle = open_dataset(study.real)
    jobs = []
    for arm in arms:
        for f in fractions:
            data = DataRef(study.real, fraction=f, reduce_seed=derive_seed(study.seed, "reduce", fraction_label(f)))
            stratified_reduce(handle, f, data.reduce_seed)  # validates non-empty categories up front
            if arm is ReductionArm.SYNTHETIC_FROZEN_PREFIX:
                spec = study.spec(data, pretrained=baseline_checkpoint(study, "synth"), freeze=study.num_units - 2)
            else:
                spec = study.spec(data)
            jobs.append(PointJob(f"reduce-{arm.value}", fraction_label(f), f"{arm.value}-f{fraction_label(f)}", spec))
    rows = study.registry.run("reduce", jobs)
    return _finish(study, SweepResult("reduce", rows, base.baselines))


def _fidelity_dataset(study: Study, fidelity: float) -> str:
    proxy_spec = open_dataset(study.proxy).spec
    path = study.workspace / "datasets" / f"proxy-phi{fraction_label(fidelity)}"
    if not (path / "manifest.json").is_file():
        generate_dataset(replace(proxy_spec, distribution=Distribution.PROXY, fidelity=fidelity), path)
    return str(path)


def run_ablation(study: Study, kind) -> SweepResult:
    """Ablation grid on both training distributions, evaluated on real validation data."""
    kind = _as_enum(AblationKind, kind)
    base = _require_baselines(study)
    jobs = []
    protocol = f"ablate-{kind.value}"

    def add(label: str, data: DataRef, cfg: TrainConfig | None = None):
        point_id = label.replace("/", "-").replace("+", "plus-")
        jobs.append(PointJob(protocol, label, point_id, study.spec(data, cfg)))

    if kind is AblationKind.NORMALIZATION:
        ladder = [
            ("default", NormMode.DEFAULT, False),
            ("+exact", NormMode.EXACT, False),
            ("+bn-eval-update", NormMode.EXACT, True),
        ]
        for which in ("real", "synth"):
            for label, norm, bn in ladder:
                add(f"{which}/{label}", DataRef(study.dataset_path(which)), replace(study.train, normalization=norm, bn_eval_update=bn))
    elif kind is AblationKind.AUGMENTATION:
        for which in ("real", "synth"):
            for aug in Augmentation:
                add(f"{which}/{aug.value}", DataRef(study.dataset_path(which)), replace(study.train, augmentation=aug))
    elif kind is AblationKind.TEXTURE:
        for which in ("real", "synth"):
            data = DataRef(
                study.dataset_path(which),
                scramble_patch=study.scramble_patch,
                scramble_seed=derive_seed(study.seed, "scramble", which),
            )
            add(f"{which}/scrambled", data)
    else:
        for phi in FIDELITY_GRID:
            add(f"synth/phi={fraction_label(phi)}", DataRef(_fidelity_dataset(study, phi)))
    rows = study.registry.run(protocol, jobs)
    return _finish(study, SweepResult(protocol, rows, base.baselines))
