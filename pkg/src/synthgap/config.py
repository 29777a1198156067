"""TOML experiment configuration.

Sections: ``[dataset]``, ``[model]``, ``[train]``, ``[protocol]``,
``[output]``, ``[seeds]``. Unknown sections or keys are rejected. Every
default is materialized by :meth:`ExperimentConfig.to_toml`, so the echoed
file fully determines a study. The dataset seed defaults to
``derive_seed(root, "dataset")``; training seeds are derived per study from
the root seed (see ``transfer``).
"""

from __future__ import annotations

import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import tomli
import tomli_w

from .data import DatasetSpec, Distribution
from .errors import StorageError, ValidationError
from .model import ArchitectureConfig
from .seeding import derive_seed
from .trainer import TrainConfig

WORKSPACE_ENV = "SYNTHGAP_WORKSPACE"


@dataclass
class DatasetSection:
    num_categories: int = 10
    per_category_train: int = 500
    per_category_val: int = 100
    image_size: int = 32
    fidelity: float = 0.5
    seed: int | None = None


@dataclass
class ModelSection:
    stage_widths: list = field(default_factory=lambda: [16, 32, 64, 128])
    blocks_per_stage: int = 2
    head_temperature: float = 0.1


@dataclass
class TrainSection:
    epochs: int = 30
    batch_size: int = 128
    base_lr: float = 0.1
    warmup_epochs: float = 3
    momentum: float = 0.9
    weight_decay: float = 1e-4
    augmentation: str = "basic"
    normalization: str = "default"
    bn_eval_update: bool = False
    last_k: int = 5


@dataclass
class ProtocolSection:
    direction: str = "synth-to-real"
    n: str = ""
    fractions: list = field(default_factory=lambda: [1.0, 0.5, 0.25, 0.125])
    arms: str = "both"
    ablation: str = "normalization"
    scramble_patch: int = 8


@dataclass
class OutputSection:
    workspace: str = ""


@dataclass
class SeedsSection:
    root: int = 0


SECTIONS = {
    "dataset": DatasetSection,
    "model": ModelSection,
    "train": TrainSection,
    "protocol": ProtocolSection,
    "output": OutputSection,
    "seeds": SeedsSection,
}


def _section(cls, raw: dict, name: str):
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ValidationError(f"unknown key(s) in [{name}]: {', '.join(unknown)}")
    return cls(**raw)


@dataclass
class ExperimentConfig:
    dataset: DatasetSection = field(default_factory=DatasetSection)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    protocol: ProtocolSection = field(default_factory=ProtocolSection)
    output: OutputSection = field(default_factory=OutputSection)
    seeds: SeedsSection = field(default_factory=SeedsSection)

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        unknown = sorted(set(raw) - set(SECTIONS))
        if unknown:
            raise ValidationError(f"unknown section(s): {', '.join(unknown)}")
        for name, value in raw.items():
            if not isinstance(value, dict):
                raise ValidationError(f"[{name}] must be a table")
        try:
            return cls(**{name: _section(SECTIONS[name], raw.get(name, {}), name) for name in SECTIONS})
        except TypeError as exc:
            raise ValidationError(str(exc)) from exc

    def materialize(self) -> "ExperimentConfig":
        """Fill derived values (dataset seed, workspace) in a copy."""
        cfg = ExperimentConfig(**{name: replace(getattr(self, name)) for name in SECTIONS})
        if cfg.dataset.seed is None:
            cfg.dataset.seed = derive_seed(cfg.seeds.root, "dataset")
        if not cfg.output.workspace:
            cfg.output.workspace = os.environ.get(WORKSPACE_ENV, "workspace")
        self.validate(cfg)
        return cfg

    @staticmethod
    def validate(cfg: "ExperimentConfig"):
        cfg.dataset_spec(Distribution.PROXY)
        cfg.arch()
        cfg.train_config()

    def to_dict(self) -> dict:
        out = {}
        for name in SECTIONS:
            section = {k: v for k, v in asdict(getattr(self, name)).items() if v is not None}
            out[name] = section
        return out

    def to_toml(self) -> str:
        return tomli_w.dumps(self.to_dict())

    def dataset_spec(self, distribution) -> DatasetSpec:
        d = self.dataset
        return DatasetSpec(
            num_categories=d.num_categories,
            per_category_train=d.per_category_train,
            per_category_val=d.per_category_val,
            image_size=d.image_size,
            distribution=distribution,
            fidelity=d.fidelity if Distribution(distribution) is Distribution.PROXY else 1.0,
            seed=d.seed if d.seed is not None else derive_seed(self.seeds.root, "dataset"),
        )

    def arch(self) -> ArchitectureConfig:
        m = self.model
        return ArchitectureConfig(tuple(m.stage_widths), m.blocks_per_stage, self.dataset.num_categories, m.head_temperature)

    def train_config(self) -> TrainConfig:
        return TrainConfig(**asdict(self.train))

    @property
    def workspace(self) -> Path:
        return Path(self.output.workspace or os.environ.get(WORKSPACE_ENV, "workspace"))


def load_config(path=None) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig()
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise StorageError(f"cannot read config {path}: {exc}") from exc
    try:
        raw = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        raise ValidationError(f"invalid TOML in {path}: {exc}") from exc
    return ExperimentConfig.from_dict(raw)
