"""Residual student network partitioned into ordered transfer units.

Unit 1 is the stem convolution, units 2..U-1 are the residual blocks in
forward order, and unit U is the pooling + cosine classifier head. Freezing
a prefix fixes both the parameters and the batch-norm running statistics of
those units: their BN layers always normalize with the stored statistics.

Checkpoint layout (a directory)::

    manifest.json   architecture, seeds, frozen flags, per-tensor shapes/offsets
    params.bin      little-endian float32 tensors concatenated in manifest order
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import FormatError, NotFoundError, StorageError, ValidationError
from .seeding import derive_seed

CHECKPOINT_FORMAT = "synthgap-checkpoint/1"
NORM_EPS = 1e-12


@dataclass(frozen=True)
class ArchitectureConfig:
    stage_widths: tuple[int, ...] = (16, 32, 64, 128)
    blocks_per_stage: int = 2
    num_categories: int = 10
    head_temperature: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "stage_widths", tuple(int(w) for w in self.stage_widths))
        widths = self.stage_widths
        if not widths or any(w <= 0 for w in widths):
            raise ValidationError(f"stage widths must be positive, got {widths}")
        if any(b < a for a, b in zip(widths, widths[1:])):
            raise ValidationError(f"stage widths must be non-decreasing, got {widths}")
        if self.blocks_per_stage < 1:
            raise ValidationError("blocks_per_stage must be >= 1")
        if self.num_categories < 2:
            raise ValidationError("num_categories must be >= 2")
        if not self.head_temperature > 0:
            raise ValidationError("head_temperature must be > 0")

    @property
    def num_units(self) -> int:
        return 2 + len(self.stage_widths) * self.blocks_per_stage

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stage_widths"] = list(self.stage_widths)
        return d


def cosine_head(features: torch.Tensor, weights: torch.Tensor, temperature: float) -> torch.Tensor:
    """Cosine similarity between features and class rows, divided by ``temperature``."""
    f = F.normalize(features, dim=-1, eps=NORM_EPS)
    w = F.normalize(weights, dim=-1, eps=NORM_EPS)
    return f @ w.t() / temperature


class Stem(nn.Module):
    def __init__(self, width):
        super().__init__()
        self.conv = nn.Conv2d(3, width, 3, padding=1, bias=False)
        self.bn = nn.BatchNorm2d(width)

    def forward(self, x):
        return F.relu(self.bn(self.conv(x)))


class BasicBlock(nn.Module):
    def __init__(self, in_ch, out_ch, stride):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, stride=stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(out_ch)
        self.shortcut = None
        if stride != 1 or in_ch != out_ch:
            self.shortcut = nn.Sequential(
                nn.Conv2d(in_ch, out_ch, 1, stride=stride, bias=False),
                nn.BatchNorm2d(out_ch),
            )

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        skip = x if self.shortcut is None else self.shortcut(x)
        return F.relu(out + skip)


class CosineHead(nn.Module):
    def __init__(self, in_features, num_categories, temperature):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(num_categories, in_features))
        self.temperature = temperature

    def forward(self, x):
        features = x.mean(dim=(2, 3))
        return cosine_head(features, self.weight, self.temperature)


class StudentNet(nn.Module):
    def __init__(self, cfg: ArchitectureConfig):
        super().__init__()
        self.cfg = cfg
        widths = cfg.stage_widths
        units = [Stem(widths[0])]
        in_ch = widths[0]
        for s, width in enumerate(widths):
            for b in range(cfg.blocks_per_stage):
                stride = 2 if (s > 0 and b == 0) else 1
                units.append(BasicBlock(in_ch, width, stride))
                in_ch = width
        units.append(CosineHead(in_ch, cfg.num_categories, cfg.head_temperature))
        self.units = nn.ModuleList(units)
        self.frozen = [False] * len(units)
        self.bn_eval_update = False
        self.seed = None
        for bn in self.modules():
            if isinstance(bn, nn.BatchNorm2d):
                bn.momentum = 0.1

    @property
    def num_units(self) -> int:
        return len(self.units)

    def unit_names(self) -> list[str]:
        names = ["stem"]
        for s in range(len(self.cfg.stage_widths)):
            names += [f"stage{s + 1}.block{b + 1}" for b in range(self.cfg.blocks_per_stage)]
        return names + ["head"]

    def train(self, mode: bool = True):
        super().train(mode)
        self._apply_bn_modes()
        return self

    def _apply_bn_modes(self):
        # Frozen units always normalize with their stored statistics. Trainable
        # units use batch statistics in training mode, and also in eval mode
        # while bn_eval_update is on.
        for unit, frozen in zip(self.units, self.frozen):
            batch_stats = not frozen and (self.training or self.bn_eval_update)
            for m in unit.modules():
                if isinstance(m, nn.BatchNorm2d):
                    m.train(batch_stats)

    def forward(self, x):
        if x.ndim != 4 or x.shape[1] != 3:
            raise ValidationError(f"expected a (B, 3, H, W) batch, got shape {tuple(x.shape)}")
        if min(x.shape[2], x.shape[3]) < 16:
            raise ValidationError(f"spatial size must be >= 16, got {tuple(x.shape[2:])}")
        for unit in self.units:
            x = unit(x)
        return x

    def trainable_parameters(self):
        for i, (unit, frozen) in enumerate(zip(self.units, self.frozen)):
            if not frozen:
                yield from unit.named_parameters(prefix=f"units.{i}")


def _unit_generator(seed: int, index: int) -> torch.Generator:
    gen = torch.Generator()
    gen.manual_seed(derive_seed(seed, "init", index) & (2**63 - 1))
    return gen


def _init_unit(unit: nn.Module, seed: int, index: int):
    gen = _unit_generator(seed, index)
    with torch.no_grad():
        for m in unit.modules():
            if isinstance(m, nn.Conv2d):
                fan_in = m.in_channels * m.kernel_size[0] * m.kernel_size[1]
                m.weight.normal_(0.0, math.sqrt(2.0 / fan_in), generator=gen)
            elif isinstance(m, nn.BatchNorm2d):
                m.weight.fill_(1.0)
                m.bias.fill_(0.0)
                m.reset_running_stats()
            elif isinstance(m, CosineHead):
                m.weight.normal_(0.0, math.sqrt(1.0 / m.weight.shape[1]), generator=gen)


def build_model(cfg: ArchitectureConfig, seed: int) -> StudentNet:
    """Fresh network; unit ``i`` is initialized from its own stream ``(seed, i)``."""
    model = StudentNet(cfg)
    model.seed = seed
    for i, unit in enumerate(model.units):
        _init_unit(unit, seed, i)
    return model


def _check_prefix(model: StudentNet, n: int):
    if not 0 <= n <= model.num_units:
        raise ValidationError(f"N must lie in [0, {model.num_units}], got {n}")


def freeze_prefix(model: StudentNet, n: int):
    """Freeze units 1..n and make the rest trainable."""
    _check_prefix(model, n)
    model.frozen = [i < n for i in range(model.num_units)]
    for unit, frozen in zip(model.units, model.frozen):
        for p in unit.parameters():
            p.requires_grad_(not frozen)
    model._apply_bn_modes()


def reinit_suffix(model: StudentNet, n: int, seed: int):
    """Redraw units n+1..U, BN statistics included, as ``build_model(cfg, seed)`` would."""
    _check_prefix(model, n)
    for i in range(n, model.num_units):
        _init_unit(model.units[i], seed, i)


def set_bn_eval_update(model: StudentNet, enabled: bool):
    model.bn_eval_update = bool(enabled)
    model._apply_bn_modes()


def forward(model: StudentNet, batch: torch.Tensor, mode: str = "eval") -> torch.Tensor:
    """Run ``model`` in ``"train"`` or ``"eval"`` mode; no-grad in eval."""
    if mode not in ("train", "eval"):
        raise ValidationError(f"mode must be 'train' or 'eval', got {mode!r}")
    model.train(mode == "train")
    if mode == "eval":
        with torch.no_grad():
            return model(batch)
    return model(batch)


# ---------------------------------------------------------------------------
# snapshots


def _state_entries(model: StudentNet):
    """(name, unit index, tensor) for every parameter and running statistic."""
    for name, tensor in model.state_dict(keep_vars=False).items():
        if name.endswith("num_batches_tracked"):
            continue
        yield name, int(name.split(".")[1]), tensor


@dataclass
class ParamSnapshot:
    names: list[str]
    units: list[int]
    arrays: list[np.ndarray]
    num_units: int = 0

    def unit_arrays(self, index: int) -> list[np.ndarray]:
        return [a for a, u in zip(self.arrays, self.units) if u == index]

    def unit_size(self, index: int) -> int:
        return sum(a.size for a in self.unit_arrays(index))

    def unit_equal(self, other: "ParamSnapshot", index: int) -> bool:
        mine, theirs = self.unit_arrays(index), other.unit_arrays(index)
        return len(mine) == len(theirs) and all(
            a.shape == b.shape and a.tobytes() == b.tobytes() for a, b in zip(mine, theirs)
        )

    def changed_units(self, other: "ParamSnapshot") -> list[int]:
        return [i for i in range(self.num_units) if not self.unit_equal(other, i)]

    def to_bytes(self) -> bytes:
        return b"".join(a.astype("<f4").tobytes() for a in self.arrays)

    def __eq__(self, other):
        return (
            isinstance(other, ParamSnapshot)
            and self.names == other.names
            and self.units == other.units
            and self.to_bytes() == other.to_bytes()
        )


def snapshot(model: StudentNet) -> ParamSnapshot:
    names, units, arrays = [], [], []
    for name, unit, tensor in _state_entries(model):
        names.append(name)
        units.append(unit)
        arrays.append(tensor.detach().cpu().numpy().copy())
    return ParamSnapshot(names, units, arrays, model.num_units)


def unit_parameter_counts(model: StudentNet) -> list[int]:
    counts = [0] * model.num_units
    for _, unit, tensor in _state_entries(model):
        counts[unit] += tensor.numel()
    return counts


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(model: StudentNet, path):
    path = Path(path)
    tensors, offset = [], 0
    blobs = []
    for name, unit, tensor in _state_entries(model):
        blob = tensor.detach().cpu().numpy().astype("<f4").tobytes()
        tensors.append({"name": name, "unit": unit, "shape": list(tensor.shape), "offset": offset, "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "architecture": model.cfg.to_dict(),
        "seeds": {"init": model.seed},
        "units": [
            {"index": i, "name": n, "frozen": f}
            for i, (n, f) in enumerate(zip(model.unit_names(), model.frozen))
        ],
        "bn_eval_update": model.bn_eval_update,
        "tensors": tensors,
        "total_bytes": offset,
    }
    try:
        path.mkdir(parents=True, exist_ok=True)
        (path / "params.bin").write_bytes(b"".join(blobs))
        (path / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    except OSError as exc:
        raise StorageError(f"cannot write checkpoint {path}: {exc}") from exc


def load_checkpoint(path, into: StudentNet | None = None) -> StudentNet:
    """Restore a checkpoint into a new model, or into ``into`` if given."""
    path = Path(path)
    manifest_path, params_path = path / "manifest.json", path / "params.bin"
    if not manifest_path.is_file() or not params_path.is_file():
        raise NotFoundError(f"no checkpoint at {path}")
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
        blob = params_path.read_bytes()
    except json.JSONDecodeError as exc:
        raise FormatError(f"corrupt checkpoint manifest {manifest_path}: {exc}") from exc
    except OSError as exc:
        raise StorageError(f"cannot read checkpoint {path}: {exc}") from exc
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise FormatError(f"{manifest_path}: unknown format {manifest.get('format')!r}")
    if len(blob) != manifest["total_bytes"]:
        raise FormatError(f"{params_path}: expected {manifest['total_bytes']} bytes, found {len(blob)}")

    cfg = ArchitectureConfig(**manifest["architecture"])
    if into is None:
        model = StudentNet(cfg)
    else:
        if into.cfg != cfg:
            raise ValidationError(f"checkpoint architecture {cfg} does not match model {into.cfg}")
        model = into
    model.seed = manifest["seeds"]["init"]

    state = model.state_dict()
    expected = [name for name, _, _ in _state_entries(model)]
    found = [t["name"] for t in manifest["tensors"]]
    if expected != found:
        raise FormatError(f"{manifest_path}: tensor list does not match the architecture")
    with torch.no_grad():
        for entry in manifest["tensors"]:
            raw = blob[entry["offset"] : entry["offset"] + entry["nbytes"]]
            arr = np.frombuffer(raw, dtype="<f4").reshape(entry["shape"])
            target = state[entry["name"]]
            if tuple(target.shape) != tuple(arr.shape):
                raise FormatError(f"{entry['name']}: shape {arr.shape} != {tuple(target.shape)}")
            target.copy_(torch.from_numpy(arr.astype(np.float32)))
    freeze_prefix(model, 0)
    model.frozen = [u["frozen"] for u in manifest["units"]]
    for unit, frozen in zip(model.units, model.frozen):
        for p in unit.parameters():
            p.requires_grad_(not frozen)
    set_bn_eval_update(model, manifest.get("bn_eval_update", False))
    return model


def frozen_prefix_length(model: StudentNet) -> int:
    n = 0
    while n < model.num_units and model.frozen[n]:
        n += 1
    return n
