"""Procedural paired datasets and the transforms applied to them.

A sample is a filled polygon whose vertex count encodes the category
(``3 + category``) carrying a sinusoidal grating whose base frequency also
encodes the category. The *real* sampler draws these directly. The *proxy*
sampler draws exactly the same random quantities and then, scaled by
``1 - fidelity``, shifts the grating frequency, shifts the global colour,
adds a smooth artifact field and jitters the polygon vertices. At
``fidelity == 1`` every perturbation is skipped so the two samplers agree
bit for bit.

On disk a dataset is a directory::

    manifest.json       spec echo, counts, shape, generator version, stats
    train_images.bin    uint8, record-major, CHW
    train_labels.bin    uint16 little-endian
    val_images.bin
    val_labels.bin
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .errors import FormatError, NotFoundError, StorageError, ValidationError
from .seeding import derive_seed, rng_for

GENERATOR_VERSION = "polygon-grating/1"
STD_EPS = 1e-6
SPLITS = ("train", "val")

# Systematic proxy colour shift at fidelity 0, in [0, 1] pixel units.
PROXY_COLOR_SHIFT = np.array([0.16, -0.10, 0.12])
# Relative grating-frequency shift of the proxy at fidelity 0.
PROXY_FREQ_SHIFT = 0.45
PROXY_ARTIFACT_AMPLITUDE = 0.30
PROXY_VERTEX_JITTER = 0.35


class Distribution(str, enum.Enum):
    REAL = "real"
    PROXY = "proxy"


class Augmentation(str, enum.Enum):
    NONE = "none"
    BASIC = "basic"
    MULTICROP = "multicrop"


@dataclass(frozen=True)
class DatasetSpec:
    num_categories: int = 10
    per_category_train: int = 500
    per_category_val: int = 100
    image_size: int = 32
    distribution: Distribution = Distribution.REAL
    fidelity: float = 1.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "distribution", _as_enum(Distribution, self.distribution))
        if self.num_categories < 2:
            raise ValidationError(f"num_categories must be >= 2, got {self.num_categories}")
        if self.per_category_train < 1 or self.per_category_val < 1:
            raise ValidationError("per-category counts must be >= 1")
        if self.image_size < 16:
            raise ValidationError(f"image_size must be >= 16, got {self.image_size}")
        if not 0.0 <= self.fidelity <= 1.0:
            raise ValidationError(f"fidelity must lie in [0, 1], got {self.fidelity}")
        if not 0 <= self.seed < 2**64:
            raise ValidationError("seed must be a 64-bit unsigned integer")

    def count(self, split: str) -> int:
        per = self.per_category_train if split == "train" else self.per_category_val
        return per * self.num_categories

    def to_dict(self) -> dict:
        d = asdict(self)
        d["distribution"] = self.distribution.value
        return d


@dataclass(frozen=True)
class ChannelStats:
    mean: tuple[float, float, float]
    std: tuple[float, float, float]

    def __post_init__(self):
        if len(self.mean) != 3 or len(self.std) != 3:
            raise ValidationError("channel stats need exactly 3 components")
        object.__setattr__(self, "mean", tuple(float(m) for m in self.mean))
        object.__setattr__(self, "std", tuple(max(float(s), STD_EPS) for s in self.std))

    def to_dict(self) -> dict:
        return {"mean": list(self.mean), "std": list(self.std)}


# The conventional ImageNet constants, used regardless of the dataset.
DEFAULT_STATS = ChannelStats(mean=(0.485, 0.456, 0.406), std=(0.229, 0.224, 0.225))


def _as_enum(cls, value):
    try:
        return cls(value)
    except ValueError:
        raise ValidationError(f"unknown {cls.__name__} {value!r}") from None


# ---------------------------------------------------------------------------
# rendering


def _polygon_mask(xs, ys, vx, vy):
    """Even-odd point-in-polygon test over a pixel grid."""
    inside = np.zeros(xs.shape, dtype=bool)
    n = len(vx)
    for i in range(n):
        x0, y0 = vx[i], vy[i]
        x1, y1 = vx[(i + 1) % n], vy[(i + 1) % n]
        if y0 == y1:
            continue
        crosses = (y0 > ys) != (y1 > ys)
        x_at = x0 + (ys - y0) * (x1 - x0) / (y1 - y0)
        inside ^= crosses & (xs < x_at)
    return inside


def render_sample(
    category: int,
    distribution: Distribution | str,
    fidelity: float,
    rng: np.random.Generator,
    image_size: int = 32,
    num_categories: int | None = None,
) -> np.ndarray:
    """Render one ``(H, W, 3)`` uint8 image.

    All random draws happen up front and in a fixed order, independent of
    ``distribution``, so the proxy sample differs from the real sample with
    the same ``rng`` only through the fidelity-scaled perturbations.
    """
    distribution = _as_enum(Distribution, distribution)
    if category < 0 or (num_categories is not None and category >= num_categories):
        raise ValidationError(f"category {category} out of range")
    if not 0.0 <= fidelity <= 1.0:
        raise ValidationError(f"fidelity must lie in [0, 1], got {fidelity}")

    size = image_size
    n_vertices = 3 + category

    bg = rng.uniform(0.05, 0.95, size=3)
    fg = rng.uniform(0.05, 0.95, size=3)
    rotation = rng.uniform(0.0, 2 * np.pi)
    diameter = rng.uniform(0.5, 0.8) * size
    center = size / 2 + rng.uniform(-0.08, 0.08, size=2) * size
    grating_angle = rng.uniform(0.0, np.pi)
    grating_phase = rng.uniform(0.0, 2 * np.pi)
    freq_noise = rng.uniform(-0.008, 0.008)
    # proxy-only draws, made unconditionally to keep the streams aligned
    proxy_freq_u = rng.uniform(0.0, 1.0)
    proxy_color_u = rng.normal(0.0, 1.0, size=3)
    artifact_freq = rng.uniform(0.3, 1.5, size=(2, 2)) / size
    artifact_phase = rng.uniform(0.0, 2 * np.pi, size=2)
    artifact_gain = rng.uniform(0.5, 1.0, size=3)
    vertex_r = rng.uniform(-1.0, 1.0, size=n_vertices)
    vertex_a = rng.uniform(-1.0, 1.0, size=n_vertices)

    shift = 1.0 - fidelity if distribution is Distribution.PROXY else 0.0

    radius = np.full(n_vertices, diameter / 2)
    angles = rotation + 2 * np.pi * np.arange(n_vertices) / n_vertices
    if shift > 0:
        radius = radius * (1 + shift * PROXY_VERTEX_JITTER * vertex_r)
        angles = angles + shift * 0.5 * (2 * np.pi / n_vertices) * vertex_a
    vx = center[0] + radius * np.cos(angles)
    vy = center[1] + radius * np.sin(angles)

    ys, xs = np.mgrid[0:size, 0:size] + 0.5
    mask = _polygon_mask(xs, ys, vx, vy)

    base_freq = 0.07 + 0.25 * category / max(num_categories or 10, 2)
    freq = base_freq + freq_noise
    if shift > 0:
        freq = freq * (1 + shift * PROXY_FREQ_SHIFT * (0.8 + 0.4 * proxy_freq_u))
    proj = xs * np.cos(grating_angle) + ys * np.sin(grating_angle)
    grating = 0.5 + 0.5 * np.sin(2 * np.pi * freq * proj + grating_phase)
    texture = fg[None, None, :] * (0.45 + 0.55 * grating[..., None])

    img = np.where(mask[..., None], texture, bg[None, None, :])

    if shift > 0:
        field = (
            np.cos(2 * np.pi * (artifact_freq[0, 0] * xs + artifact_freq[0, 1] * ys) + artifact_phase[0])
            + np.cos(2 * np.pi * (artifact_freq[1, 0] * xs - artifact_freq[1, 1] * ys) + artifact_phase[1])
        ) / 2
        img = img + shift * PROXY_ARTIFACT_AMPLITUDE * field[..., None] * artifact_gain[None, None, :]
        color = PROXY_COLOR_SHIFT + 0.03 * proxy_color_u
        img = img + shift * color[None, None, :]

    return np.rint(np.clip(img, 0.0, 1.0) * 255).astype(np.uint8)


def sample_label(index: int, num_categories: int) -> int:
    return index % num_categories


def render_split(spec: DatasetSpec, split: str) -> tuple[np.ndarray, np.ndarray]:
    """Render a whole split as ``(images[n, 3, H, W] uint8, labels[n])``."""
    n = spec.count(split)
    images = np.empty((n, 3, spec.image_size, spec.image_size), dtype=np.uint8)
    labels = np.empty(n, dtype=np.uint16)
    for i in range(n):
        label = sample_label(i, spec.num_categories)
        img = render_sample(
            label,
            spec.distribution,
            spec.fidelity,
            rng_for(spec.seed, "sample", split, i),
            image_size=spec.image_size,
            num_categories=spec.num_categories,
        )
        images[i] = img.transpose(2, 0, 1)
        labels[i] = label
    return images, labels


# ---------------------------------------------------------------------------
# container


@dataclass
class DatasetHandle:
    root: Path
    manifest: dict
    _cache: dict = field(default_factory=dict, repr=False)

    @property
    def spec(self) -> DatasetSpec:
        return DatasetSpec(**self.manifest["spec"])

    @property
    def num_categories(self) -> int:
        return self.manifest["spec"]["num_categories"]

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.manifest["shape"])

    def count(self, split: str) -> int:
        return self.manifest["counts"][split]

    def images(self, split: str = "train") -> np.ndarray:
        """Memory-mapped ``(n, 3, H, W)`` uint8 array."""
        key = ("images", split)
        if key not in self._cache:
            self._cache[key] = np.memmap(
                self.root / f"{split}_images.bin",
                dtype=np.uint8,
                mode="r",
                shape=(self.count(split), *self.shape),
            )
        return self._cache[key]

    def labels(self, split: str = "train") -> np.ndarray:
        key = ("labels", split)
        if key not in self._cache:
            self._cache[key] = np.fromfile(self.root / f"{split}_labels.bin", dtype="<u2").astype(np.int64)
        return self._cache[key]

    def image(self, split: str, index: int) -> np.ndarray:
        """One record as an ``(H, W, 3)`` image."""
        return np.asarray(self.images(split)[index]).transpose(1, 2, 0)

    @property
    def channel_stats(self) -> ChannelStats:
        return ChannelStats(**self.manifest["channel_stats"])

    # uniform interface with DatasetView
    def train_images(self) -> np.ndarray:
        return self.images("train")

    def train_labels(self) -> np.ndarray:
        return self.labels("train")


@dataclass(frozen=True)
class DatasetView:
    """A stratified subset of a dataset's train split."""

    base: DatasetHandle
    indices: dict[int, np.ndarray]
    fraction: float
    seed: int

    @property
    def num_categories(self) -> int:
        return self.base.num_categories

    def flat_indices(self) -> np.ndarray:
        return np.sort(np.concatenate(list(self.indices.values())))

    def train_images(self) -> np.ndarray:
        return np.asarray(self.base.images("train")[self.flat_indices()])

    def train_labels(self) -> np.ndarray:
        return self.base.labels("train")[self.flat_indices()]

    def __len__(self) -> int:
        return sum(len(v) for v in self.indices.values())


def _dump_json(obj, path: Path):
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def generate_dataset(spec: DatasetSpec, out_dir) -> DatasetHandle:
    """Render both splits of ``spec`` into ``out_dir``; returns the opened handle."""
    out = Path(out_dir)
    rendered = {split: render_split(spec, split) for split in SPLITS}
    stats = compute_channel_stats(rendered["train"][0])
    manifest = {
        "spec": spec.to_dict(),
        "counts": {split: len(rendered[split][1]) for split in SPLITS},
        "shape": [3, spec.image_size, spec.image_size],
        "generator_version": GENERATOR_VERSION,
        "channel_stats": stats.to_dict(),
    }
    try:
        out.mkdir(parents=True, exist_ok=True)
        for split, (images, labels) in rendered.items():
            images.tofile(out / f"{split}_images.bin")
            labels.astype("<u2").tofile(out / f"{split}_labels.bin")
        _dump_json(manifest, out / "manifest.json")
    except OSError as exc:
        raise StorageError(f"cannot write dataset to {out}: {exc}") from exc
    return open_dataset(out)


def open_dataset(root) -> DatasetHandle:
    root = Path(root)
    manifest_path = root / "manifest.json"
    if not manifest_path.is_file():
        raise NotFoundError(f"no dataset manifest at {manifest_path}")
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"unreadable dataset manifest {manifest_path}: {exc}") from exc
    handle = DatasetHandle(root, manifest)
    record = int(np.prod(handle.shape))
    for split in SPLITS:
        n = handle.count(split)
        for name, expected in ((f"{split}_images.bin", n * record), (f"{split}_labels.bin", 2 * n)):
            path = root / name
            if not path.is_file():
                raise NotFoundError(f"missing dataset file {path}")
            found = path.stat().st_size
            if found != expected:
                raise FormatError(f"{path}: expected {expected} bytes, found {found}")
        labels = handle.labels(split)
        if labels.size and labels.max() >= handle.num_categories:
            raise FormatError(f"{split} labels exceed num_categories")
    return handle


# ---------------------------------------------------------------------------
# statistics and subsets


def compute_channel_stats(data) -> ChannelStats:
    """Per-channel population mean/std in [0, 1] pixel units.

    ``data`` is a handle or view (its train split is used) or an
    ``(n, 3, H, W)`` array: uint8 arrays are scaled by 1/255, float arrays
    are taken as already scaled.
    """
    if isinstance(data, (DatasetHandle, DatasetView)):
        data = data.train_images()
    if isinstance(data, torch.Tensor):
        data = data.detach().cpu().numpy()
    arr = np.asarray(data)
    if arr.ndim != 4 or arr.shape[1] != 3:
        raise ValidationError(f"expected (n, 3, H, W) images, got shape {arr.shape}")
    if arr.shape[0] == 0:
        raise ValidationError("cannot compute channel stats of an empty dataset")
    scale = 255.0 if arr.dtype == np.uint8 else 1.0
    flat = arr.transpose(1, 0, 2, 3).reshape(3, -1).astype(np.float64) / scale
    mean = flat.mean(axis=1)
    std = np.sqrt(((flat - mean[:, None]) ** 2).mean(axis=1))
    return ChannelStats(mean=tuple(mean), std=tuple(std))


def reduced_count(fraction: float, count: int) -> int:
    # the epsilon absorbs representation error such as 0.29 * 100 = 28.999...
    return math.floor(fraction * count + 1e-9)


def stratified_reduce(data: DatasetHandle, fraction: float, seed: int) -> DatasetView:
    if not 0.0 < fraction <= 1.0:
        raise ValidationError(f"fraction must lie in (0, 1], got {fraction}")
    labels = data.labels("train")
    indices = {}
    for c in range(data.num_categories):
        members = np.flatnonzero(labels == c)
        keep = reduced_count(fraction, len(members))
        if keep < 1:
            raise ValidationError(
                f"fraction {fraction} leaves no samples of category {c} (count {len(members)})"
            )
        if keep == len(members):
            indices[c] = members
        else:
            rng = rng_for(seed, "reduce", repr(float(fraction)), c)
            indices[c] = np.sort(rng.choice(members, size=keep, replace=False))
    return DatasetView(data, indices, float(fraction), seed)


# ---------------------------------------------------------------------------
# transforms


def texture_scramble(img: np.ndarray, patch_size: int, seed: int) -> np.ndarray:
    """Permute pixels inside each ``patch_size`` square of an ``(H, W, C)`` image."""
    h, w, c = img.shape
    if patch_size < 1 or h % patch_size or w % patch_size:
        raise ValidationError(f"patch_size {patch_size} does not divide {h}x{w}")
    p = patch_size
    nh, nw = h // p, w // p
    patches = img.reshape(nh, p, nw, p, c).transpose(0, 2, 1, 3, 4).reshape(nh, nw, p * p, c)
    rng = np.random.default_rng(derive_seed(seed, "scramble"))
    order = np.argsort(rng.random((nh, nw, p * p)), axis=-1)
    shuffled = np.take_along_axis(patches, order[..., None], axis=2)
    return shuffled.reshape(nh, nw, p, p, c).transpose(0, 2, 1, 3, 4).reshape(h, w, c)


def scramble_images(images: np.ndarray, patch_size: int, seed: int) -> np.ndarray:
    """``texture_scramble`` over an ``(n, 3, H, W)`` array, one seed per record."""
    out = np.empty_like(images)
    for i in range(len(images)):
        hwc = np.asarray(images[i]).transpose(1, 2, 0)
        out[i] = texture_scramble(hwc, patch_size, derive_seed(seed, i)).transpose(2, 0, 1)
    return out


@dataclass(frozen=True)
class CropSpec:
    count: int
    size: int
    scale: tuple[float, float]


def crop_plan(pipeline: Augmentation | str, image_size: int) -> list[CropSpec]:
    pipeline = _as_enum(Augmentation, pipeline)
    if pipeline is Augmentation.NONE:
        return []
    if pipeline is Augmentation.BASIC:
        return [CropSpec(1, image_size, (0.4, 1.0))]
    return [CropSpec(1, image_size, (0.4, 1.0)), CropSpec(8, image_size // 2, (0.05, 0.4))]


def _crop_boxes(rng: np.random.Generator, n: int, scale: tuple[float, float]):
    """Random-resized-crop boxes in normalized [-1, 1] coordinates."""
    area = rng.uniform(scale[0], scale[1], size=n)
    log_ratio = rng.uniform(math.log(3 / 4), math.log(4 / 3), size=n)
    ratio = np.exp(log_ratio)
    w = np.minimum(np.sqrt(area * ratio), 1.0)
    h = np.minimum(np.sqrt(area / ratio), 1.0)
    cx = rng.uniform(-1.0, 1.0, size=n) * (1.0 - w)
    cy = rng.uniform(-1.0, 1.0, size=n) * (1.0 - h)
    flip = rng.random(n) < 0.5
    return w, h, cx, cy, flip


def _resized_crops(x: torch.Tensor, boxes, out_size: int) -> torch.Tensor:
    w, h, cx, cy, flip = boxes
    sx = np.where(flip, -w, w)
    theta = np.zeros((len(w), 2, 3), dtype=np.float32)
    theta[:, 0, 0] = sx
    theta[:, 0, 2] = cx
    theta[:, 1, 1] = h
    theta[:, 1, 2] = cy
    theta = torch.from_numpy(theta)
    grid = F.affine_grid(theta, [x.shape[0], 3, out_size, out_size], align_corners=False)
    return F.grid_sample(x, grid, mode="bilinear", padding_mode="border", align_corners=False)


def augment_batch(images, pipeline: Augmentation | str, rng: np.random.Generator) -> list[torch.Tensor]:
    """Augmented views of a uint8 ``(B, 3, H, W)`` batch.

    Returns one float tensor per view slot, each ``(B, 3, h, w)`` in [0, 1].
    ``None`` gives the full image, ``Basic`` one random resized crop with a
    horizontal flip, ``MultiCrop`` one global crop followed by eight local
    crops at half resolution.
    """
    x = torch.as_tensor(np.asarray(images)).float().div_(255.0)
    plan = crop_plan(pipeline, x.shape[-1])
    if not plan:
        return [x]
    views = []
    for crop in plan:
        for _ in range(crop.count):
            views.append(_resized_crops(x, _crop_boxes(rng, len(x), crop.scale), crop.size))
    return views


def apply_augmentation(img: np.ndarray, pipeline: Augmentation | str, rng: np.random.Generator) -> list[torch.Tensor]:
    """Views of a single ``(H, W, 3)`` image as ``(3, h, w)`` float tensors."""
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValidationError(f"expected an (H, W, 3) image, got shape {img.shape}")
    views = augment_batch(img.transpose(2, 0, 1)[None], pipeline, rng)
    return [v[0] for v in views]


def normalize(view: torch.Tensor, stats: ChannelStats) -> torch.Tensor:
    """Per-channel ``(x - mean) / std`` on a ``(..., 3, h, w)`` tensor."""
    if view.shape[-3] != 3:
        raise ValidationError(f"expected 3 channels, got shape {tuple(view.shape)}")
    mean = torch.tensor(stats.mean, dtype=view.dtype).view(3, 1, 1)
    std = torch.tensor(stats.std, dtype=view.dtype).view(3, 1, 1)
    return (view - mean) / std
