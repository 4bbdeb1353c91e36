"""Iterative pseudo-labeling for segmentation.

Round 0 trains on the real labeled set and infers masks for the synthetic
set; every later round retrains on real + pseudo-labeled synthetic data and
re-infers the synthetic masks with the updated model. Synthetic images never
change across rounds, only their masks do.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from PIL import Image

from .augment import merge
from .data import SEGMENTATION, ImageSample, LabeledDataset, pseudo_origin
from .errors import ConfigError, ContractError, TrainingDiverged
from .util import derive_seed, dump_json, write_jsonl


@dataclass(frozen=True)
class SslConfig:
    rounds: int = 2
    threshold: float = 0.5
    min_confidence: float | None = None
    epochs_per_round: int | None = None
    retrain_from_scratch: bool = False
    stop_on_plateau: bool = False
    plateau_min_gain: float = 0.1  # Dice percentage points
    seed: int = 0

    def __post_init__(self):
        if self.rounds < 1:
            raise ConfigError("rounds must be >= 1")
        if not (0.0 < self.threshold < 1.0):
            raise ConfigError("threshold must lie in (0, 1)")
        if self.min_confidence is not None and not (0.0 <= self.min_confidence <= 1.0):
            raise ConfigError("min_confidence must lie in [0, 1]")
        if self.epochs_per_round is not None and self.epochs_per_round < 1:
            raise ConfigError("epochs_per_round must be >= 1 when set")

    def to_dict(self) -> dict:
        return {
            "rounds": self.rounds,
            "threshold": self.threshold,
            "min_confidence": self.min_confidence,
            "epochs_per_round": self.epochs_per_round,
            "retrain_from_scratch": self.retrain_from_scratch,
            "stop_on_plateau": self.stop_on_plateau,
            "plateau_min_gain": self.plateau_min_gain,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SslConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown ssl config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class PseudoLabelRound:
    """Bookkeeping for one pseudo-labeling round."""

    index: int
    model: object
    pseudo: LabeledDataset
    val_metrics: dict
    history: list[dict]
    checkpoint_path: Path | None = None


def infer_pseudo_masks(model, d_gen: LabeledDataset, threshold: float = 0.5,
                       round_index: int = 0,
                       min_confidence: float | None = None) -> LabeledDataset:
    """Attach model-inferred binary masks to every synthetic image.

    `model` is anything with ``predict_proba((n, h, w)) -> (n, h, w)``
    per-pixel probabilities. Masks are probability >= threshold; the origin
    tag records the round. With `min_confidence` set, samples whose mean
    per-pixel confidence max(p, 1-p) falls below it are dropped.
    """
    images = np.stack([s.pixels for s in d_gen.samples])
    probs = np.asarray(model.predict_proba(images))
    if probs.shape != images.shape:
        raise ContractError(
            f"model produced probabilities of shape {probs.shape} for images of shape {images.shape}")
    labeled: list[ImageSample] = []
    origin = pseudo_origin(round_index)
    for sample, prob in zip(d_gen.samples, probs):
        if min_confidence is not None:
            confidence = float(np.maximum(prob, 1.0 - prob).mean())
            if confidence < min_confidence:
                continue
        labeled.append(replace(sample, mask=(prob >= threshold).astype(np.uint8),
                               mask_origin=origin))
    return LabeledDataset(labeled, d_gen.class_count, SEGMENTATION)


def build_round_dataset(d_train: LabeledDataset, d_pseudo: LabeledDataset) -> LabeledDataset:
    """Union of the real training set and one round's pseudo-labeled set."""
    return merge(d_train, d_pseudo)


def run_ssl(d_train: LabeledDataset, d_gen: LabeledDataset, trainer, cfg: SslConfig,
            run_dir: str | Path | None = None) -> list[PseudoLabelRound]:
    """Run initial training plus `cfg.rounds` refinement rounds.

    Returns cfg.rounds + 1 round records (indices 0..rounds). When `run_dir`
    is given, each round persists its pseudo masks, metrics, and model
    checkpoint under that directory.
    """
    if d_train.task != SEGMENTATION:
        raise ConfigError("pseudo-labeling applies to segmentation training sets")
    if any(s.mask is not None for s in d_gen.samples):
        raise ContractError("d_gen must be maskless; masks are inferred per round")
    run_dir = Path(run_dir) if run_dir is not None else None

    rounds: list[PseudoLabelRound] = []
    current_train = d_train
    warm_state = None
    for t in range(cfg.rounds + 1):
        try:
            model, history = trainer.train(
                current_train,
                init_state=None if cfg.retrain_from_scratch else warm_state,
                seed=derive_seed(cfg.seed, "round", t),
                epochs=cfg.epochs_per_round,
                log_path=(run_dir / "logs" / f"seg_round_{t}.jsonl") if run_dir else None,
            )
        except TrainingDiverged as exc:
            raise TrainingDiverged(f"round {t}: {exc}") from exc
        pseudo = infer_pseudo_masks(model, d_gen, threshold=cfg.threshold,
                                    round_index=t, min_confidence=cfg.min_confidence)
        val_metrics = trainer.evaluate(model)
        record = PseudoLabelRound(index=t, model=model, pseudo=pseudo,
                                  val_metrics=val_metrics, history=history)
        if run_dir is not None:
            record.checkpoint_path = _persist_round(run_dir, record)
        rounds.append(record)

        warm_state = model.snapshot()
        current_train = build_round_dataset(d_train, pseudo)
        if cfg.stop_on_plateau and t >= 1:
            gain = (rounds[-1].val_metrics["dice"] - rounds[-2].val_metrics["dice"]) * 100.0
            if gain < cfg.plateau_min_gain:
                break
    return rounds


def load_round_masks(run_dir: str | Path, round_index: int) -> dict[str, np.ndarray]:
    """Stored pseudo masks of one round, keyed by sample id."""
    masks_dir = Path(run_dir) / "pseudo" / f"round_{round_index}" / "masks"
    if not masks_dir.is_dir():
        raise ConfigError(f"no persisted masks for round {round_index} under {run_dir}")
    out = {}
    for path in sorted(masks_dir.glob("*.png")):
        raw = np.asarray(Image.open(path).convert("L"), dtype=np.uint8)
        out[path.stem] = (raw == 255).astype(np.uint8)
    return out


def _persist_round(run_dir: Path, record: PseudoLabelRound) -> Path:
    from .train import save_model  # local import to avoid a cycle

    round_dir = run_dir / "pseudo" / f"round_{record.index}"
    masks_dir = round_dir / "masks"
    masks_dir.mkdir(parents=True, exist_ok=True)
    for s in record.pseudo.samples:
        Image.fromarray((s.mask * 255).astype(np.uint8), mode="L").save(masks_dir / f"{s.id}.png")
    dump_json(round_dir / "metrics.json", {
        "round": record.index,
        "pseudo_count": len(record.pseudo),
        "val_metrics": record.val_metrics,
    })
    write_jsonl(round_dir / "history.jsonl", record.history)
    ckpt = run_dir / "checkpoints" / f"seg_round_{record.index}.ckpt"
    save_model(record.model, ckpt)
    return ckpt
