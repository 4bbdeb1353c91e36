"""Evaluation metrics: confusion-count based segmentation scores,
classification reports, and Fréchet distance between feature embeddings."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .data import ImageSample, LabeledDataset
from .errors import ConfigError, ContractError

MIOU_TWO_CLASS = "two_class"
MIOU_FOREGROUND = "foreground"


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    def __post_init__(self):
        if min(self.tp, self.fp, self.fn, self.tn) < 0:
            raise ContractError("confusion counts must be nonnegative")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp,
                               self.fn + other.fn, self.tn + other.tn)


def confusion_counts(pred, target) -> ConfusionCounts:
    """Element-wise TP/FP/FN/TN between two binary arrays."""
    p = np.asarray(pred)
    t = np.asarray(target)
    if p.shape != t.shape:
        raise ContractError(f"prediction shape {p.shape} != target shape {t.shape}")
    for name, arr in (("prediction", p), ("target", t)):
        if not np.isin(arr, (0, 1, True, False)).all():
            raise ContractError(f"{name} must be binary")
    p = p.astype(bool)
    t = t.astype(bool)
    return ConfusionCounts(
        tp=int((p & t).sum()),
        fp=int((p & ~t).sum()),
        fn=int((~p & t).sum()),
        tn=int((~p & ~t).sum()),
    )


def _ratio(num: float, den: float, empty: float) -> float:
    return num / den if den > 0 else empty


def segmentation_metrics(c: ConfusionCounts, miou_mode: str = MIOU_TWO_CLASS) -> dict[str, float]:
    """Overlap and accuracy metrics from confusion counts.

    Any 0/0 ratio is defined as 1 (a perfectly predicted absent class).
    """
    if c.total <= 0:
        raise ContractError("confusion counts are empty")
    if miou_mode not in (MIOU_TWO_CLASS, MIOU_FOREGROUND):
        raise ConfigError(f"unknown miou_mode {miou_mode!r}")
    iou_fg = _ratio(c.tp, c.tp + c.fp + c.fn, empty=1.0)
    iou_bg = _ratio(c.tn, c.tn + c.fp + c.fn, empty=1.0)
    miou = iou_fg if miou_mode == MIOU_FOREGROUND else (iou_fg + iou_bg) / 2.0
    return {
        "iou_foreground": iou_fg,
        "iou_background": iou_bg,
        "miou": miou,
        "dice": _ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn, empty=1.0),
        "accuracy": (c.tp + c.tn) / c.total,
        "specificity": _ratio(c.tn, c.tn + c.fp, empty=1.0),
        "sensitivity": _ratio(c.tp, c.tp + c.fn, empty=1.0),
    }


def classification_report(preds, targets, class_count: int) -> dict:
    """Per-class precision/recall/F1 plus accuracy and macro-F1.

    0/0 ratios are defined as 0 for precision, recall, and F1.
    """
    p = np.asarray(preds, dtype=np.int64).reshape(-1)
    t = np.asarray(targets, dtype=np.int64).reshape(-1)
    if p.shape != t.shape:
        raise ContractError(f"got {p.size} predictions for {t.size} targets")
    if p.size == 0:
        raise ContractError("empty prediction list")
    for name, arr in (("predictions", p), ("targets", t)):
        if arr.min() < 0 or arr.max() >= class_count:
            raise ContractError(f"{name} contain labels outside [0, {class_count})")
    per_class = []
    for k in range(class_count):
        tp = int(((p == k) & (t == k)).sum())
        fp = int(((p == k) & (t != k)).sum())
        fn = int(((p != k) & (t == k)).sum())
        precision = _ratio(tp, tp + fp, empty=0.0)
        recall = _ratio(tp, tp + fn, empty=0.0)
        f1 = _ratio(2 * precision * recall, precision + recall, empty=0.0)
        per_class.append({
            "class": k,
            "precision": precision,
            "recall": recall,
            "f1": f1,
            "support": int((t == k).sum()),
        })
    return {
        "accuracy": float((p == t).mean()),
        "macro_f1": float(np.mean([row["f1"] for row in per_class])),
        "per_class": per_class,
    }


# --------------------------------------------------------------------------
# Fréchet distance between Gaussian feature statistics
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class GaussianStats:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "mean", np.asarray(self.mean, dtype=np.float64).reshape(-1))
        cov = np.asarray(self.cov, dtype=np.float64)
        if cov.shape != (self.mean.size, self.mean.size):
            raise ContractError(f"covariance shape {cov.shape} does not match mean size {self.mean.size}")
        object.__setattr__(self, "cov", cov)

    @property
    def dim(self) -> int:
        return self.mean.size


def gaussian_stats(features) -> GaussianStats:
    """Sample mean and unbiased, symmetrized sample covariance."""
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2:
        raise ContractError(f"features must be a 2-D (samples, dim) array, got shape {x.shape}")
    if x.shape[0] < 2:
        raise ConfigError(f"need at least 2 samples for covariance, got {x.shape[0]}")
    mean = x.mean(axis=0)
    centered = x - mean
    cov = centered.T @ centered / (x.shape[0] - 1)
    cov = (cov + cov.T) / 2.0
    return GaussianStats(mean=mean, cov=cov)


def _sqrtm_psd(mat: np.ndarray) -> np.ndarray:
    """Symmetric square root with negative eigenvalues clamped to 0."""
    sym = (mat + mat.T) / 2.0
    eigvals, eigvecs = np.linalg.eigh(sym)
    eigvals = np.clip(eigvals, 0.0, None)
    return (eigvecs * np.sqrt(eigvals)) @ eigvecs.T


def frechet_distance(a: GaussianStats, b: GaussianStats) -> float:
    """Squared Fréchet distance between two Gaussians, clamped to >= 0."""
    if a.dim != b.dim:
        raise ContractError(f"dimension mismatch: {a.dim} vs {b.dim}")
    a_half = _sqrtm_psd(a.cov)
    cross = _sqrtm_psd(a_half @ b.cov @ a_half)
    mean_term = float(np.sum((a.mean - b.mean) ** 2))
    trace_term = float(np.trace(a.cov) + np.trace(b.cov) - 2.0 * np.trace(cross))
    return max(mean_term + trace_term, 0.0)


# --------------------------------------------------------------------------
# Frozen random-projection embedder + FID over datasets
# --------------------------------------------------------------------------

class RandomConvFeatures:
    """Deterministic image embedder: three frozen random conv layers with
    stride 2 followed by global average pooling."""

    def __init__(self, feature_dim: int = 64, seed: int = 0):
        if feature_dim < 1:
            raise ConfigError("feature_dim must be positive")
        self.feature_dim = feature_dim
        self.seed = seed
        channels = [1, max(feature_dim // 4, 4), max(feature_dim // 2, 8), feature_dim]
        layers = []
        for c_in, c_out in zip(channels[:-1], channels[1:]):
            layers.append(nn.Conv2d(c_in, c_out, kernel_size=3, stride=2, padding=1))
            layers.append(nn.LeakyReLU(0.2))
        self._net = nn.Sequential(*layers)
        # Re-initialize from a private generator so construction never
        # disturbs torch's global RNG stream.
        gen = torch.Generator().manual_seed(int(seed))
        with torch.no_grad():
            for layer in self._net:
                if isinstance(layer, nn.Conv2d):
                    fan_in = layer.in_channels * layer.kernel_size[0] * layer.kernel_size[1]
                    layer.weight.normal_(0.0, (2.0 / fan_in) ** 0.5, generator=gen)
                    layer.bias.zero_()
        self._net.eval()
        for param in self._net.parameters():
            param.requires_grad_(False)

    @property
    def identifier(self) -> str:
        return f"randconv{self.feature_dim}-seed{self.seed}"

    def extract(self, samples) -> np.ndarray:
        """(n, feature_dim) float32 features; same image always maps to the
        same feature vector."""
        if isinstance(samples, LabeledDataset):
            samples = samples.samples
        images = [s.pixels if isinstance(s, ImageSample) else np.asarray(s) for s in samples]
        if not images:
            raise ContractError("no samples to embed")
        out = []
        with torch.no_grad():
            for start in range(0, len(images), 256):
                chunk = images[start:start + 256]
                batch = torch.from_numpy(np.stack(chunk).astype(np.float32)).unsqueeze(1)
                feats = self._net(batch).mean(dim=(2, 3))
                out.append(feats.numpy())
        return np.concatenate(out, axis=0)


@dataclass(frozen=True)
class FidResult:
    value: float
    extractor_id: str
    real_count: int
    synthetic_count: int

    def to_dict(self) -> dict:
        return {
            "value": self.value,
            "extractor_id": self.extractor_id,
            "real_count": self.real_count,
            "synthetic_count": self.synthetic_count,
        }


def fid_score(real: LabeledDataset, synthetic: LabeledDataset,
              extractor: RandomConvFeatures) -> FidResult:
    """Fréchet distance between Gaussian fits of embedded image sets."""
    if len(real) < 2 or len(synthetic) < 2:
        raise ConfigError(f"FID needs >= 2 samples per set, got {len(real)} real / {len(synthetic)} synthetic")
    stats_real = gaussian_stats(extractor.extract(real))
    stats_synth = gaussian_stats(extractor.extract(synthetic))
    return FidResult(
        value=frechet_distance(stats_real, stats_synth),
        extractor_id=extractor.identifier,
        real_count=len(real),
        synthetic_count=len(synthetic),
    )
