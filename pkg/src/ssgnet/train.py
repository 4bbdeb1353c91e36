"""Desk-scale model training: a small CNN classifier and a small U-shaped
segmenter, with a decaying learning rate, early stopping on validation loss,
and best-snapshot selection."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from . import losses
from .data import CLASSIFICATION, SEGMENTATION, LabeledDataset
from .errors import ConfigError, ContractError, TrainingDiverged
from .metrics import (MIOU_TWO_CLASS, ConfusionCounts, classification_report,
                      confusion_counts, segmentation_metrics)
from .util import append_jsonl, seed_torch

ARCH_CLASSIFIER = "small_cnn_classifier"
ARCH_SEGMENTER = "small_unet_segmenter"

MODEL_FORMAT = "ssgnet-model"
MODEL_VERSION = 1

LOSS_IDS = ("bce", "bce_dice", "tvmf_dice")
DECAY_IDS = ("cosine", "exponential", "step", "constant")

IMPROVEMENT_DELTA = 1e-6


@dataclass(frozen=True)
class TrainConfig:
    task: str
    epochs: int = 20
    batch_size: int = 16
    learning_rate: float = 1e-3
    decay: str = "cosine"
    final_lr_fraction: float = 0.01
    patience: int | None = None
    loss: str = "bce"
    base_channels: int = 16
    kappa_scale: float = 32.0
    kappa_max: float = 128.0
    seed: int = 0

    def __post_init__(self):
        if self.task not in (CLASSIFICATION, SEGMENTATION):
            raise ConfigError(f"unknown task {self.task!r}")
        # epochs == 0 is allowed as an explicit no-op training probe.
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.decay not in DECAY_IDS:
            raise ConfigError(f"unknown decay schedule {self.decay!r}")
        if not (0 < self.final_lr_fraction <= 1):
            raise ConfigError("final_lr_fraction must lie in (0, 1]")
        if self.loss not in LOSS_IDS:
            raise ConfigError(f"unknown loss {self.loss!r}")
        if self.task == CLASSIFICATION and self.loss != "bce":
            raise ConfigError(f"classification training uses the bce loss, got {self.loss!r}")
        if self.patience is not None and self.patience < 1:
            raise ConfigError("patience must be >= 1 when set")

    def to_dict(self) -> dict:
        return {
            "task": self.task,
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "learning_rate": self.learning_rate,
            "decay": self.decay,
            "final_lr_fraction": self.final_lr_fraction,
            "patience": self.patience,
            "loss": self.loss,
            "base_channels": self.base_channels,
            "kappa_scale": self.kappa_scale,
            "kappa_max": self.kappa_max,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


def lr_at(cfg: TrainConfig, epoch: int) -> float:
    """Learning rate for the given epoch; decays from the initial rate to
    initial * final_lr_fraction over the configured epochs."""
    if epoch < 0:
        raise ContractError("epoch must be >= 0")
    lr0 = cfg.learning_rate
    final = lr0 * cfg.final_lr_fraction
    span = cfg.epochs - 1
    if span <= 0:
        return lr0 if epoch == 0 else final
    e = min(epoch, span)
    if cfg.decay == "constant":
        return lr0
    if cfg.decay == "cosine":
        return final + 0.5 * (lr0 - final) * (1.0 + math.cos(math.pi * e / span))
    if cfg.decay == "exponential":
        return lr0 * cfg.final_lr_fraction ** (e / span)
    # step: four equal stages, geometric from lr0 down to final
    stage = min(3, (4 * e) // cfg.epochs)
    return lr0 * cfg.final_lr_fraction ** (stage / 3.0)


def early_stop(history: list[dict], patience: int, key: str = "val_loss") -> bool:
    """True iff the tracked loss has not improved by >= 1e-6 for `patience`
    consecutive epochs."""
    if not history:
        raise ContractError("history is empty")
    values = [row[key] for row in history]
    best = values[0]
    stale = 0
    for v in values[1:]:
        if best - v >= IMPROVEMENT_DELTA:
            best = v
            stale = 0
        else:
            stale += 1
    return stale >= patience


# --------------------------------------------------------------------------
# Backbones
# --------------------------------------------------------------------------

class SmallCnnClassifier(nn.Module):
    """Four stride-2 conv blocks, global average pooling, linear head."""

    def __init__(self, class_count: int, base_channels: int = 16):
        super().__init__()
        b = base_channels
        chans = [1, b, 2 * b, 4 * b, 4 * b]
        blocks = []
        for c_in, c_out in zip(chans[:-1], chans[1:]):
            blocks.append(nn.Conv2d(c_in, c_out, 3, stride=2, padding=1))
            blocks.append(nn.LeakyReLU(0.2))
        self.features = nn.Sequential(*blocks)
        self.head = nn.Linear(4 * b, class_count)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.features(x).mean(dim=(2, 3))
        return self.head(h)


class _ConvPair(nn.Module):
    def __init__(self, c_in: int, c_out: int):
        super().__init__()
        self.block = nn.Sequential(
            nn.Conv2d(c_in, c_out, 3, padding=1), nn.LeakyReLU(0.2),
            nn.Conv2d(c_out, c_out, 3, padding=1), nn.LeakyReLU(0.2),
        )

    def forward(self, x):
        return self.block(x)


class SmallUnetSegmenter(nn.Module):
    """Three-level U-shaped encoder-decoder with skip connections.

    Input spatial dims must be divisible by 4; the output logit map has the
    input's spatial shape.
    """

    def __init__(self, base_channels: int = 16):
        super().__init__()
        b = base_channels
        self.enc1 = _ConvPair(1, b)
        self.enc2 = _ConvPair(b, 2 * b)
        self.bottleneck = _ConvPair(2 * b, 4 * b)
        self.pool = nn.MaxPool2d(2)
        self.up2 = nn.ConvTranspose2d(4 * b, 2 * b, 2, stride=2)
        self.dec2 = _ConvPair(4 * b, 2 * b)
        self.up1 = nn.ConvTranspose2d(2 * b, b, 2, stride=2)
        self.dec1 = _ConvPair(2 * b, b)
        self.out = nn.Conv2d(b, 1, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        e1 = self.enc1(x)
        e2 = self.enc2(self.pool(e1))
        btm = self.bottleneck(self.pool(e2))
        d2 = self.dec2(torch.cat([self.up2(btm), e2], dim=1))
        d1 = self.dec1(torch.cat([self.up1(d2), e1], dim=1))
        return self.out(d1)


# --------------------------------------------------------------------------
# Model handle: inference + checkpointing
# --------------------------------------------------------------------------

@dataclass
class ModelHandle:
    arch: str
    net: nn.Module
    input_size: int
    base_channels: int
    class_count: int | None = None

    def snapshot(self) -> dict:
        return {k: v.detach().clone() for k, v in self.net.state_dict().items()}

    def load_snapshot(self, state: dict) -> None:
        self.net.load_state_dict(state)

    def predict_proba(self, pixels: np.ndarray) -> np.ndarray:
        """Probabilities for a stack of images shaped (n, h, w).

        Classifier handles return (n, class_count) softmax rows; segmenter
        handles return (n, h, w) per-pixel foreground probabilities.
        """
        arr = np.asarray(pixels, dtype=np.float32)
        if arr.ndim == 2:
            arr = arr[None]
        if arr.ndim != 3:
            raise ContractError(f"expected (n, h, w) images, got shape {arr.shape}")
        if arr.shape[1] != self.input_size or arr.shape[2] != self.input_size:
            raise ContractError(
                f"model expects {self.input_size}x{self.input_size} images, got {arr.shape[1]}x{arr.shape[2]}")
        self.net.eval()
        outputs = []
        with torch.no_grad():
            for start in range(0, arr.shape[0], 128):
                batch = torch.from_numpy(arr[start:start + 128]).unsqueeze(1)
                logits = self.net(batch)
                if self.arch == ARCH_CLASSIFIER:
                    outputs.append(torch.softmax(logits, dim=1).numpy())
                else:
                    outputs.append(torch.sigmoid(logits.squeeze(1)).numpy())
        return np.concatenate(outputs, axis=0)


def new_model(arch: str, input_size: int, base_channels: int = 16,
              class_count: int | None = None) -> ModelHandle:
    if arch == ARCH_CLASSIFIER:
        if class_count is None or class_count < 2:
            raise ConfigError("classifier needs class_count >= 2")
        net = SmallCnnClassifier(class_count, base_channels)
    elif arch == ARCH_SEGMENTER:
        if input_size % 4 != 0:
            raise ConfigError(f"segmenter input size must be divisible by 4, got {input_size}")
        net = SmallUnetSegmenter(base_channels)
    else:
        raise ConfigError(f"unknown architecture {arch!r}")
    return ModelHandle(arch=arch, net=net, input_size=input_size,
                       base_channels=base_channels, class_count=class_count)


def save_model(model: ModelHandle, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({
        "format": MODEL_FORMAT,
        "version": MODEL_VERSION,
        "arch": model.arch,
        "input_size": model.input_size,
        "base_channels": model.base_channels,
        "class_count": model.class_count,
        "state": model.net.state_dict(),
    }, path)
    return path


def load_model(path: str | Path) -> ModelHandle:
    blob = torch.load(Path(path), weights_only=True)
    if not isinstance(blob, dict) or blob.get("format") != MODEL_FORMAT:
        raise ConfigError(f"{path} is not a model checkpoint")
    if blob.get("version") != MODEL_VERSION:
        raise ConfigError(f"unsupported model checkpoint version {blob.get('version')}")
    model = new_model(blob["arch"], blob["input_size"], blob["base_channels"], blob["class_count"])
    model.net.load_state_dict(blob["state"])
    return model


# --------------------------------------------------------------------------
# Evaluation helpers
# --------------------------------------------------------------------------

def _image_stack(d: LabeledDataset) -> np.ndarray:
    return np.stack([s.pixels for s in d.samples]).astype(np.float32)


def _mask_stack(d: LabeledDataset) -> np.ndarray:
    return np.stack([s.mask for s in d.samples]).astype(np.float32)


def _labels(d: LabeledDataset) -> np.ndarray:
    return np.array([s.class_label for s in d.samples], dtype=np.int64)


def _onehot(labels: np.ndarray, class_count: int) -> np.ndarray:
    return np.eye(class_count, dtype=np.float32)[labels]


def evaluate_classifier(model: ModelHandle, d: LabeledDataset) -> dict:
    probs = model.predict_proba(_image_stack(d))
    labels = _labels(d)
    loss = float(losses.bce_loss(probs, _onehot(labels, d.class_count)))
    report = classification_report(probs.argmax(axis=1), labels, d.class_count)
    return {"loss": loss, **report}


def aggregate_confusion(model: ModelHandle, d: LabeledDataset,
                        threshold: float = 0.5) -> ConfusionCounts:
    probs = model.predict_proba(_image_stack(d))
    preds = (probs >= threshold).astype(np.uint8)
    return confusion_counts(preds, _mask_stack(d).astype(np.uint8))


def evaluate_segmenter(model: ModelHandle, d: LabeledDataset, threshold: float = 0.5,
                       miou_mode: str = MIOU_TWO_CLASS) -> dict:
    probs = model.predict_proba(_image_stack(d))
    masks = _mask_stack(d)
    loss = float(losses.bce_dice_loss(probs, masks))
    counts = confusion_counts((probs >= threshold).astype(np.uint8), masks.astype(np.uint8))
    return {"loss": loss, **segmentation_metrics(counts, miou_mode=miou_mode)}


def per_class_dice(counts: ConfusionCounts) -> tuple[float, float]:
    """(background dice, foreground dice) from one confusion table."""
    fg = 2 * counts.tp / (2 * counts.tp + counts.fp + counts.fn) if (2 * counts.tp + counts.fp + counts.fn) > 0 else 1.0
    bg = 2 * counts.tn / (2 * counts.tn + counts.fp + counts.fn) if (2 * counts.tn + counts.fp + counts.fn) > 0 else 1.0
    return bg, fg


# --------------------------------------------------------------------------
# Training loops
# --------------------------------------------------------------------------

def _segmentation_loss(cfg: TrainConfig, probs: torch.Tensor, targets: torch.Tensor,
                       kappa: losses.KappaState | None) -> torch.Tensor:
    if cfg.loss == "bce":
        return losses.bce_loss(probs, targets)
    if cfg.loss == "bce_dice":
        return losses.bce_dice_loss(probs, targets)
    return losses.tvmf_dice_loss(probs, targets, kappa)


def _check_finite(loss: torch.Tensor, epoch: int) -> None:
    if not bool(torch.isfinite(loss)):
        raise TrainingDiverged(f"non-finite training loss at epoch {epoch}")


def train_classifier(d_train: LabeledDataset, d_val: LabeledDataset, cfg: TrainConfig,
                     log_path: str | Path | None = None) -> tuple[ModelHandle, list[dict]]:
    """Train the small CNN classifier; returns the best-validation-loss
    snapshot and the per-epoch history."""
    if cfg.task != CLASSIFICATION:
        raise ConfigError("train_classifier requires a classification config")
    if len(d_train) == 0 or len(d_val) == 0:
        raise ConfigError("train and validation sets must be nonempty")
    seed_torch(cfg.seed)
    size = d_train.samples[0].pixels.shape[0]
    model = new_model(ARCH_CLASSIFIER, size, cfg.base_channels, d_train.class_count)

    x = torch.from_numpy(_image_stack(d_train)).unsqueeze(1)
    y = torch.from_numpy(_onehot(_labels(d_train), d_train.class_count))
    rng = np.random.default_rng(cfg.seed)
    opt = torch.optim.Adam(model.net.parameters(), lr=cfg.learning_rate)

    history: list[dict] = []
    best_state = model.snapshot()
    best_val = math.inf
    for epoch in range(cfg.epochs):
        lr = lr_at(cfg, epoch)
        for group in opt.param_groups:
            group["lr"] = lr
        model.net.train()
        perm = rng.permutation(len(d_train))
        batch_losses = []
        for start in range(0, len(d_train), cfg.batch_size):
            idx = perm[start:start + cfg.batch_size]
            probs = torch.softmax(model.net(x[idx]), dim=1)
            loss = losses.bce_loss(probs, y[idx])
            _check_finite(loss, epoch)
            opt.zero_grad()
            loss.backward()
            opt.step()
            batch_losses.append(float(loss.detach()))
        val = evaluate_classifier(model, d_val)
        row = {
            "epoch": epoch,
            "train_loss": float(np.mean(batch_losses)),
            "val_loss": val["loss"],
            "val_metric": val["accuracy"],
            "lr": lr,
        }
        history.append(row)
        if log_path is not None:
            append_jsonl(log_path, row)
        if val["loss"] < best_val:
            best_val = val["loss"]
            best_state = model.snapshot()
        if cfg.patience is not None and early_stop(history, cfg.patience):
            break
    model.load_snapshot(best_state)
    return model, history


def train_segmenter(d_train: LabeledDataset, d_val: LabeledDataset, cfg: TrainConfig,
                    init_state: dict | None = None,
                    log_path: str | Path | None = None) -> tuple[ModelHandle, list[dict]]:
    """Train the small U-shaped segmenter; returns the best-validation-loss
    snapshot and the per-epoch history.

    With the adaptive angular loss, the per-class sharpness parameters are
    refreshed from training-set Dice at the end of every epoch and recorded
    in the history rows.
    """
    if cfg.task != SEGMENTATION:
        raise ConfigError("train_segmenter requires a segmentation config")
    if len(d_train) == 0 or len(d_val) == 0:
        raise ConfigError("train and validation sets must be nonempty")
    if d_train.task != SEGMENTATION:
        raise ContractError("train_segmenter needs a segmentation dataset (masks on every sample)")
    seed_torch(cfg.seed)
    size = d_train.samples[0].pixels.shape[0]
    model = new_model(ARCH_SEGMENTER, size, cfg.base_channels)
    if init_state is not None:
        model.load_snapshot(init_state)

    x = torch.from_numpy(_image_stack(d_train)).unsqueeze(1)
    y = torch.from_numpy(_mask_stack(d_train))
    rng = np.random.default_rng(cfg.seed)
    opt = torch.optim.Adam(model.net.parameters(), lr=cfg.learning_rate)
    kappa = losses.KappaState.initial(2, scale=cfg.kappa_scale, max_kappa=cfg.kappa_max) \
        if cfg.loss == "tvmf_dice" else None

    history: list[dict] = []
    best_state = model.snapshot()
    best_val = math.inf
    for epoch in range(cfg.epochs):
        lr = lr_at(cfg, epoch)
        for group in opt.param_groups:
            group["lr"] = lr
        model.net.train()
        perm = rng.permutation(len(d_train))
        batch_losses = []
        for start in range(0, len(d_train), cfg.batch_size):
            idx = perm[start:start + cfg.batch_size]
            probs = torch.sigmoid(model.net(x[idx]).squeeze(1))
            loss = _segmentation_loss(cfg, probs, y[idx], kappa)
            _check_finite(loss, epoch)
            opt.zero_grad()
            loss.backward()
            opt.step()
            batch_losses.append(float(loss.detach()))
        val = evaluate_segmenter(model, d_val)
        row = {
            "epoch": epoch,
            "train_loss": float(np.mean(batch_losses)),
            "val_loss": val["loss"],
            "val_metric": val["dice"],
            "lr": lr,
        }
        if kappa is not None:
            train_counts = aggregate_confusion(model, d_train)
            kappa = losses.update_kappa(kappa, per_class_dice(train_counts))
            row["kappa"] = list(kappa.kappas)
        history.append(row)
        if log_path is not None:
            append_jsonl(log_path, row)
        if val["loss"] < best_val:
            best_val = val["loss"]
            best_state = model.snapshot()
        if cfg.patience is not None and early_stop(history, cfg.patience):
            break
    model.load_snapshot(best_state)
    return model, history


class SegmenterTrainer:
    """Round-oriented wrapper used by the pseudo-labeling loop: retrains a
    segmenter (optionally warm-started) and evaluates it on a held-out
    validation set."""

    def __init__(self, cfg: TrainConfig, d_val: LabeledDataset,
                 miou_mode: str = MIOU_TWO_CLASS):
        if cfg.task != SEGMENTATION:
            raise ConfigError("SegmenterTrainer requires a segmentation config")
        self.cfg = cfg
        self.d_val = d_val
        self.miou_mode = miou_mode

    def train(self, d: LabeledDataset, init_state: dict | None = None,
              seed: int | None = None, epochs: int | None = None,
              log_path: str | Path | None = None) -> tuple[ModelHandle, list[dict]]:
        cfg = self.cfg
        if seed is not None:
            cfg = replace(cfg, seed=seed)
        if epochs is not None:
            cfg = replace(cfg, epochs=epochs)
        return train_segmenter(d, self.d_val, cfg, init_state=init_state, log_path=log_path)

    def evaluate(self, model: ModelHandle) -> dict:
        return evaluate_segmenter(model, self.d_val, miou_mode=self.miou_mode)
