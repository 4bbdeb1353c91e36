"""Training objectives: pixel-wise BCE, soft overlap (Dice), their sum, and a
sharpness-tunable angular overlap loss with an adaptive per-class parameter.

All loss functions take a batch of predicted probabilities and a matching
batch of binary targets, accept numpy arrays or torch tensors, and return a
scalar torch tensor so gradients flow when the inputs require them.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .errors import ContractError

BCE_CLAMP = 1e-7
DICE_EPS = 1e-5
NORM_EPS = 1e-8


def _as_batch(probs, targets) -> tuple[torch.Tensor, torch.Tensor]:
    p = torch.as_tensor(probs)
    t = torch.as_tensor(targets)
    if not p.dtype.is_floating_point:
        p = p.double()
    if p.shape != t.shape:
        raise ContractError(f"prediction shape {tuple(p.shape)} != target shape {tuple(t.shape)}")
    if p.ndim < 1:
        raise ContractError("loss inputs must have at least a batch dimension")
    return p, t.to(p.dtype)


def bce_loss(probs, targets) -> torch.Tensor:
    """Mean binary cross-entropy over all elements.

    Probabilities are clamped away from 0/1 for numerical safety.
    """
    p, t = _as_batch(probs, targets)
    p = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP)
    return -(t * torch.log(p) + (1.0 - t) * torch.log(1.0 - p)).mean()


def dice_loss(probs, targets, eps: float = DICE_EPS) -> torch.Tensor:
    """Soft Dice loss, computed per sample and averaged over the batch."""
    p, t = _as_batch(probs, targets)
    if p.ndim == 1:
        p = p.unsqueeze(0)
        t = t.unsqueeze(0)
    p = p.reshape(p.shape[0], -1)
    t = t.reshape(t.shape[0], -1)
    intersection = (p * t).sum(dim=1)
    ratio = (2.0 * intersection + eps) / (p.sum(dim=1) + t.sum(dim=1) + eps)
    return 1.0 - ratio.mean()


def bce_dice_loss(probs, targets, eps: float = DICE_EPS) -> torch.Tensor:
    """Composite objective: BCE plus Dice."""
    return bce_loss(probs, targets) + dice_loss(probs, targets, eps=eps)


def tvmf_similarity(cos_theta, kappa):
    """Sharpened angular similarity on [-1, 1].

    Equals plain cosine similarity at kappa=0 and maps perfect alignment
    (cos_theta=1) to 1 for any kappa; larger kappa pulls everything below
    perfect alignment toward -1.
    """
    return (1.0 + cos_theta) / (1.0 + kappa * (1.0 - cos_theta)) - 1.0


@dataclass(frozen=True)
class KappaState:
    """Per-class sharpness parameters with their update rule constants."""

    kappas: tuple[float, ...]
    scale: float = 32.0
    min_kappa: float = 0.0
    max_kappa: float = 128.0

    def __post_init__(self):
        if self.scale <= 0:
            raise ContractError("kappa scale must be positive")
        if not (self.min_kappa <= self.max_kappa):
            raise ContractError("min_kappa must not exceed max_kappa")
        for k in self.kappas:
            if not (self.min_kappa <= k <= self.max_kappa):
                raise ContractError(f"kappa {k} outside [{self.min_kappa}, {self.max_kappa}]")

    @classmethod
    def initial(cls, class_count: int, scale: float = 32.0,
                min_kappa: float = 0.0, max_kappa: float = 128.0) -> "KappaState":
        return cls(kappas=(min_kappa,) * class_count, scale=scale,
                   min_kappa=min_kappa, max_kappa=max_kappa)

    @property
    def class_count(self) -> int:
        return len(self.kappas)


def update_kappa(state: KappaState, per_class_dice) -> KappaState:
    """New state with kappa_c = clamp(scale * dice_c); monotone in dice_c."""
    dice = np.asarray(per_class_dice, dtype=np.float64)
    if dice.shape != (state.class_count,):
        raise ContractError(f"expected {state.class_count} dice scores, got shape {dice.shape}")
    if ((dice < 0) | (dice > 1)).any():
        raise ContractError("dice scores must lie in [0, 1]")
    kappas = np.clip(state.scale * dice, state.min_kappa, state.max_kappa)
    return KappaState(kappas=tuple(float(k) for k in kappas), scale=state.scale,
                      min_kappa=state.min_kappa, max_kappa=state.max_kappa)


def tvmf_dice_loss(probs, targets, kappa: KappaState) -> torch.Tensor:
    """Mean over classes of the squared angular-similarity deficit.

    For single-channel binary maps the two classes are foreground
    (probabilities as given) and background (their complement). Classes
    whose flattened prediction or target vector has zero norm are skipped.
    """
    p, t = _as_batch(probs, targets)
    if kappa.class_count != 2:
        raise ContractError("single-channel inputs imply exactly 2 classes")
    p = p.reshape(-1)
    t = t.reshape(-1)
    terms = []
    for class_id, k in enumerate(kappa.kappas):
        pc = p if class_id == 1 else 1.0 - p
        tc = t if class_id == 1 else 1.0 - t
        p_norm = torch.linalg.vector_norm(pc)
        t_norm = torch.linalg.vector_norm(tc)
        if float(p_norm) == 0.0 or float(t_norm) == 0.0:
            continue
        cos_theta = (pc * tc).sum() / (p_norm * t_norm + NORM_EPS)
        terms.append((1.0 - tvmf_similarity(cos_theta, k)) ** 2)
    if not terms:
        return torch.zeros((), dtype=p.dtype)
    return torch.stack(terms).mean()
