"""Dataset model: samples, the procedural toy corpus, splits, patching, disk I/O.

Images are grayscale float32 arrays in [0, 1] snapped to the 8-bit grid so
that PNG round trips are lossless. Masks are uint8 arrays with values {0, 1}.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ConfigError, ContractError, DatasetLoadError
from .util import dump_json, load_json

REAL = "real"
SYNTHETIC = "synthetic"
GROUND_TRUTH = "ground_truth"

CLASSIFICATION = "classification"
SEGMENTATION = "segmentation"

_TASKS = (CLASSIFICATION, SEGMENTATION)
_PROVENANCES = (REAL, SYNTHETIC)


def pseudo_origin(round_index: int) -> str:
    """Mask origin tag for a pseudo-labeling round."""
    return f"pseudo:{int(round_index)}"


def quantize(pixels: np.ndarray) -> np.ndarray:
    """Clip to [0, 1] and snap intensities to the 8-bit storage grid.

    Uses the same float32 division the PNG loader uses, so a saved dataset
    reloads to bit-identical pixel arrays.
    """
    arr = np.clip(np.asarray(pixels, dtype=np.float64), 0.0, 1.0)
    return np.round(arr * 255.0).astype(np.float32) / np.float32(255.0)


@dataclass(eq=False)
class ImageSample:
    """One grayscale image with its label and optional binary mask."""

    pixels: np.ndarray
    id: str
    provenance: str = REAL
    class_label: int | None = None
    mask: np.ndarray | None = None
    mask_origin: str | None = None

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float32)
        if self.pixels.ndim != 2:
            raise ContractError(f"sample {self.id!r}: pixels must be 2-D, got shape {self.pixels.shape}")
        if self.provenance not in _PROVENANCES:
            raise ContractError(f"sample {self.id!r}: unknown provenance {self.provenance!r}")
        if self.mask is not None:
            self.mask = np.asarray(self.mask, dtype=np.uint8)
            if self.mask.shape != self.pixels.shape:
                raise ContractError(
                    f"sample {self.id!r}: mask shape {self.mask.shape} != image shape {self.pixels.shape}"
                )
            if not np.isin(self.mask, (0, 1)).all():
                raise ContractError(f"sample {self.id!r}: mask values must be 0 or 1")

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


def samples_equal(a: ImageSample, b: ImageSample) -> bool:
    if (a.id, a.provenance, a.class_label, a.mask_origin) != (b.id, b.provenance, b.class_label, b.mask_origin):
        return False
    if not np.array_equal(a.pixels, b.pixels):
        return False
    if (a.mask is None) != (b.mask is None):
        return False
    return a.mask is None or np.array_equal(a.mask, b.mask)


@dataclass(eq=False)
class LabeledDataset:
    """Ordered collection of samples for one task."""

    samples: list[ImageSample]
    class_count: int
    task: str

    def __post_init__(self):
        if self.task not in _TASKS:
            raise ContractError(f"unknown task {self.task!r}")
        if self.class_count < 1:
            raise ContractError("class_count must be >= 1")
        seen = set()
        for s in self.samples:
            if s.id in seen:
                raise ContractError(f"duplicate sample id {s.id!r}")
            seen.add(s.id)
            if s.class_label is None or not (0 <= s.class_label < self.class_count):
                raise ContractError(f"sample {s.id!r}: class_label {s.class_label} outside [0, {self.class_count})")
            if self.task == SEGMENTATION and s.mask is None:
                raise ContractError(f"sample {s.id!r}: segmentation datasets require a mask on every sample")

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def class_counts(self) -> list[int]:
        counts = [0] * self.class_count
        for s in self.samples:
            counts[s.class_label] += 1
        return counts

    def of_class(self, class_id: int) -> list[ImageSample]:
        return [s for s in self.samples if s.class_label == class_id]

    def with_task(self, task: str) -> "LabeledDataset":
        return LabeledDataset(list(self.samples), self.class_count, task)


def datasets_equal(a: LabeledDataset, b: LabeledDataset) -> bool:
    if (a.class_count, a.task, len(a)) != (b.class_count, b.task, len(b)):
        return False
    return all(samples_equal(x, y) for x, y in zip(a.samples, b.samples))


# --------------------------------------------------------------------------
# Procedural toy corpus
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class ToyCorpusSpec:
    """Recipe for the deterministic two-class blob corpus.

    Class 0 images are background texture only (all-zero mask); class 1
    images contain exactly one bright axis-aligned elliptical blob whose
    analytic pixel support is the mask. Noise is added after the mask is
    fixed, so it never changes mask membership.
    """

    image_size: int = 64
    samples_per_class: int | tuple[int, ...] = 50
    class_count: int = 2
    radius_range: tuple[float, float] = (4.0, 10.0)
    intensity_range: tuple[float, float] = (0.25, 0.5)
    background_range: tuple[float, float] = (0.2, 0.45)
    noise_level: float = 0.08
    seed: int = 0

    def counts(self) -> tuple[int, ...]:
        if isinstance(self.samples_per_class, int):
            return (self.samples_per_class,) * self.class_count
        return tuple(self.samples_per_class)

    def validate(self) -> None:
        if self.image_size < 8:
            raise ConfigError(f"image_size must be >= 8, got {self.image_size}")
        if self.class_count != 2:
            raise ConfigError("the toy corpus supports exactly 2 classes")
        counts = self.counts()
        if len(counts) != self.class_count:
            raise ConfigError(f"samples_per_class has {len(counts)} entries for {self.class_count} classes")
        if any(c < 1 for c in counts):
            raise ConfigError("samples_per_class entries must be >= 1")
        lo, hi = self.radius_range
        if not (0.5 <= lo <= hi):
            raise ConfigError(f"invalid radius_range {self.radius_range}")
        if 2 * hi > self.image_size - 2:
            raise ConfigError(f"radius_range {self.radius_range} too large for image_size {self.image_size}")
        for name, (a, b) in (("intensity_range", self.intensity_range),
                             ("background_range", self.background_range)):
            if not (0.0 <= a <= b <= 1.0):
                raise ConfigError(f"invalid {name} ({a}, {b})")
        if self.noise_level < 0:
            raise ConfigError("noise_level must be >= 0")

    def to_dict(self) -> dict:
        return {
            "image_size": self.image_size,
            "samples_per_class": list(self.counts()),
            "class_count": self.class_count,
            "radius_range": list(self.radius_range),
            "intensity_range": list(self.intensity_range),
            "background_range": list(self.background_range),
            "noise_level": self.noise_level,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ToyCorpusSpec":
        known = {
            "image_size", "samples_per_class", "class_count", "radius_range",
            "intensity_range", "background_range", "noise_level", "seed",
        }
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown toy corpus keys: {sorted(unknown)}")
        kwargs = dict(d)
        for key in ("samples_per_class", "radius_range", "intensity_range", "background_range"):
            if key in kwargs and isinstance(kwargs[key], list):
                kwargs[key] = tuple(kwargs[key])
        return cls(**kwargs)


@dataclass(frozen=True)
class BlobParams:
    """Analytic description of one toy blob (pixel-center membership test)."""

    center_y: float
    center_x: float
    radius_y: float
    radius_x: float
    intensity: float

    def contains(self, y: float, x: float) -> bool:
        return ((y - self.center_y) / self.radius_y) ** 2 + ((x - self.center_x) / self.radius_x) ** 2 <= 1.0


def _sample_rng(spec: ToyCorpusSpec, class_id: int, index: int) -> np.random.Generator:
    # Per-sample stream so corpus generation is order-independent.
    return np.random.default_rng([spec.seed, class_id, index])


def _draw_sample(spec: ToyCorpusSpec, class_id: int, index: int):
    """Draw (background level, blob params, rng-continuation) for one sample."""
    rng = _sample_rng(spec, class_id, index)
    background = rng.uniform(*spec.background_range)
    blob = None
    if class_id == 1:
        ry = rng.uniform(*spec.radius_range)
        rx = rng.uniform(*spec.radius_range)
        cy = rng.uniform(ry, spec.image_size - 1 - ry)
        cx = rng.uniform(rx, spec.image_size - 1 - rx)
        intensity = rng.uniform(*spec.intensity_range)
        blob = BlobParams(cy, cx, ry, rx, intensity)
    return background, blob, rng


def toy_blob_params(spec: ToyCorpusSpec, class_id: int, index: int) -> BlobParams | None:
    """Blob parameters for sample `index` of `class_id` (None for class 0)."""
    spec.validate()
    _, blob, _ = _draw_sample(spec, class_id, index)
    return blob


def rasterize_blob(blob: BlobParams, size: int) -> np.ndarray:
    """Binary mask of the blob's exact pixel support on a size x size grid."""
    yy = np.arange(size, dtype=np.float64)[:, None]
    xx = np.arange(size, dtype=np.float64)[None, :]
    inside = ((yy - blob.center_y) / blob.radius_y) ** 2 + ((xx - blob.center_x) / blob.radius_x) ** 2 <= 1.0
    return inside.astype(np.uint8)


def make_toy_sample(spec: ToyCorpusSpec, class_id: int, index: int) -> ImageSample:
    background, blob, rng = _draw_sample(spec, class_id, index)
    size = spec.image_size
    img = np.full((size, size), background, dtype=np.float64)
    if blob is None:
        mask = np.zeros((size, size), dtype=np.uint8)
    else:
        mask = rasterize_blob(blob, size)
        img[mask.astype(bool)] += blob.intensity
    if spec.noise_level > 0:
        img += rng.normal(0.0, spec.noise_level, size=(size, size))
    return ImageSample(
        pixels=quantize(img),
        id=f"toy-c{class_id}-{index:04d}",
        provenance=REAL,
        class_label=class_id,
        mask=mask,
        mask_origin=GROUND_TRUTH,
    )


def make_toy_corpus(spec: ToyCorpusSpec, task: str = SEGMENTATION) -> LabeledDataset:
    """Build the deterministic toy corpus described by `spec`."""
    spec.validate()
    samples = []
    for class_id, count in enumerate(spec.counts()):
        for index in range(count):
            samples.append(make_toy_sample(spec, class_id, index))
    return LabeledDataset(samples, class_count=spec.class_count, task=task)


# --------------------------------------------------------------------------
# Splitting and patching
# --------------------------------------------------------------------------

def _split_counts(n: int, ratios: tuple[float, ...]) -> list[int]:
    """Largest-remainder apportionment of n items to the given ratios."""
    exact = [r * n for r in ratios]
    base = [int(np.floor(e)) for e in exact]
    remainder = n - sum(base)
    fractions = sorted(range(len(ratios)), key=lambda i: (-(exact[i] - base[i]), i))
    for i in fractions[:remainder]:
        base[i] += 1
    return base


def split_dataset(
    d: LabeledDataset,
    ratios: tuple[float, float, float],
    seed: int,
) -> tuple[LabeledDataset, LabeledDataset, LabeledDataset]:
    """Stratified (train, val, test) split, deterministic under `seed`."""
    if len(ratios) != 3:
        raise ConfigError("ratios must be a (train, val, test) triple")
    if any(r < 0 for r in ratios):
        raise ConfigError("ratios must be nonnegative")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigError(f"ratios must sum to 1, got {sum(ratios)}")
    rng = np.random.default_rng(seed)
    assignment: list[list[int]] = [[], [], []]
    for class_id in range(d.class_count):
        idx = [i for i, s in enumerate(d.samples) if s.class_label == class_id]
        perm = rng.permutation(len(idx))
        idx = [idx[p] for p in perm]
        counts = _split_counts(len(idx), tuple(ratios))
        offset = 0
        for part in range(3):
            assignment[part].extend(idx[offset:offset + counts[part]])
            offset += counts[part]
        for part, name in enumerate(("train", "val", "test")):
            if counts[part] == 0 and len(idx) > 0:
                warnings.warn(f"class {class_id} has no samples in the {name} split")
    splits = []
    for part in range(3):
        samples = [d.samples[i] for i in sorted(assignment[part])]
        splits.append(LabeledDataset(samples, d.class_count, d.task))
    return tuple(splits)


def patchify(d: LabeledDataset, patch_size: int, stride: int) -> LabeledDataset:
    """Tile every sample into patches; patch label is 1 iff its mask region
    contains any foreground pixel."""
    if stride <= 0:
        raise ConfigError(f"stride must be positive, got {stride}")
    if patch_size < 1:
        raise ConfigError(f"patch_size must be positive, got {patch_size}")
    patches = []
    for s in d.samples:
        if s.mask is None:
            raise ContractError(f"sample {s.id!r}: patchify requires a mask on every sample")
        h, w = s.pixels.shape
        if patch_size > h or patch_size > w:
            raise ConfigError(f"patch_size {patch_size} exceeds image size {h}x{w} (sample {s.id!r})")
        for y in range(0, h - patch_size + 1, stride):
            for x in range(0, w - patch_size + 1, stride):
                mask_crop = s.mask[y:y + patch_size, x:x + patch_size]
                patches.append(ImageSample(
                    pixels=s.pixels[y:y + patch_size, x:x + patch_size].copy(),
                    id=f"{s.id}-y{y}-x{x}",
                    provenance=s.provenance,
                    class_label=int(mask_crop.any()),
                    mask=mask_crop.copy(),
                    mask_origin=s.mask_origin,
                ))
    return LabeledDataset(patches, class_count=max(d.class_count, 2), task=d.task)


# --------------------------------------------------------------------------
# Disk I/O
# --------------------------------------------------------------------------

MANIFEST_NAME = "manifest.json"


def _write_png(path: Path, values: np.ndarray) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(values.astype(np.uint8), mode="L").save(path)


def save_dataset(d: LabeledDataset, directory: str | Path) -> Path:
    """Persist a dataset as manifest.json + images/*.png (+ masks/*.png)."""
    directory = Path(directory)
    entries = []
    for s in d.samples:
        image_rel = f"images/{s.id}.png"
        _write_png(directory / image_rel, np.round(np.clip(s.pixels, 0.0, 1.0) * 255.0))
        mask_rel = None
        if s.mask is not None:
            mask_rel = f"masks/{s.id}.png"
            _write_png(directory / mask_rel, s.mask * 255)
        entries.append({
            "id": s.id,
            "class_label": s.class_label,
            "provenance": s.provenance,
            "mask_origin": s.mask_origin,
            "image": image_rel,
            "mask": mask_rel,
        })
    dump_json(directory / MANIFEST_NAME, {
        "version": 1,
        "task": d.task,
        "class_count": d.class_count,
        "samples": entries,
    })
    return directory


def _read_png(path: Path, sample_id: str) -> np.ndarray:
    if not path.is_file():
        raise DatasetLoadError(f"sample {sample_id!r}: missing file {path}")
    with Image.open(path) as im:
        return np.asarray(im.convert("L"), dtype=np.uint8)


def load_dataset(directory: str | Path) -> LabeledDataset:
    directory = Path(directory)
    manifest_path = directory / MANIFEST_NAME
    if not manifest_path.is_file():
        raise DatasetLoadError(f"no {MANIFEST_NAME} in {directory}")
    try:
        manifest = load_json(manifest_path)
    except ValueError as exc:
        raise DatasetLoadError(f"corrupt manifest {manifest_path}: {exc}") from exc
    for key in ("version", "task", "class_count", "samples"):
        if key not in manifest:
            raise DatasetLoadError(f"manifest {manifest_path} missing key {key!r}")
    samples = []
    for i, entry in enumerate(manifest["samples"]):
        sample_id = entry.get("id")
        if not sample_id:
            raise DatasetLoadError(f"manifest entry {i} has no id")
        for key in ("class_label", "provenance", "image"):
            if key not in entry:
                raise DatasetLoadError(f"sample {sample_id!r}: manifest entry missing key {key!r}")
        pixels = _read_png(directory / entry["image"], sample_id).astype(np.float32) / np.float32(255.0)
        mask = None
        if entry.get("mask"):
            raw = _read_png(directory / entry["mask"], sample_id)
            if not np.isin(raw, (0, 255)).all():
                raise DatasetLoadError(f"sample {sample_id!r}: mask PNG has values other than 0/255")
            mask = (raw == 255).astype(np.uint8)
        samples.append(ImageSample(
            pixels=pixels,
            id=sample_id,
            provenance=entry["provenance"],
            class_label=entry["class_label"],
            mask=mask,
            mask_origin=entry.get("mask_origin"),
        ))
    return LabeledDataset(samples, class_count=manifest["class_count"], task=manifest["task"])
