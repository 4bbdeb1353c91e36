"""Synthetic-augmentation planning and materialization.

Strategies (string mini-language, also used by the CLI and config files):
  - "balance"    top every class up to the largest class size
  - "frac:F"     balance, then add F * (balanced size) more per class
  - "fixed:M"    M synthetic images total, split equally across classes
                 (remainder goes to the lowest class ids)
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

from .data import CLASSIFICATION, LabeledDataset
from .errors import ConfigError, ContractError
from .generator import GeneratorBundle, generate, sample_latents
from .util import dump_json, load_json


def parse_strategy(strategy: str) -> tuple[str, float | int | None]:
    """Parse a strategy string into (kind, parameter)."""
    if strategy == "balance":
        return "balance", None
    if strategy.startswith("frac:"):
        try:
            f = float(strategy[len("frac:"):])
        except ValueError:
            raise ConfigError(f"bad strategy {strategy!r}: fraction is not a number") from None
        if f < 0:
            raise ConfigError(f"bad strategy {strategy!r}: fraction must be >= 0")
        return "frac", f
    if strategy.startswith("fixed:"):
        try:
            m = int(strategy[len("fixed:"):])
        except ValueError:
            raise ConfigError(f"bad strategy {strategy!r}: count is not an integer") from None
        if m < 0:
            raise ConfigError(f"bad strategy {strategy!r}: count must be >= 0")
        return "fixed", m
    raise ConfigError(f"unknown augmentation strategy {strategy!r}")


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


@dataclass(frozen=True)
class AugmentationPlan:
    strategy: str
    source_counts: tuple[int, ...]
    synthetic_counts: tuple[int, ...]

    @property
    def class_count(self) -> int:
        return len(self.source_counts)

    @property
    def total_synthetic(self) -> int:
        return sum(self.synthetic_counts)

    def to_dict(self) -> dict:
        return {
            "strategy": self.strategy,
            "source_counts": list(self.source_counts),
            "synthetic_counts": list(self.synthetic_counts),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AugmentationPlan":
        unknown = set(d) - {"strategy", "source_counts", "synthetic_counts"}
        if unknown:
            raise ConfigError(f"unknown plan keys: {sorted(unknown)}")
        return cls(d["strategy"], tuple(d["source_counts"]), tuple(d["synthetic_counts"]))

    def save(self, path: str | Path) -> None:
        dump_json(path, self.to_dict())

    @classmethod
    def load(cls, path: str | Path) -> "AugmentationPlan":
        return cls.from_dict(load_json(path))


def plan_counts(source_counts, strategy: str) -> tuple[int, ...]:
    """Per-class synthetic counts for the given strategy."""
    counts = tuple(int(c) for c in source_counts)
    if not counts or sum(counts) == 0:
        raise ConfigError("cannot plan augmentation for an empty dataset")
    kind, param = parse_strategy(strategy)
    n_max = max(counts)
    if kind == "balance":
        return tuple(n_max - c for c in counts)
    if kind == "frac":
        target = _round_half_up((1.0 + param) * n_max)
        return tuple(target - c for c in counts)
    # fixed:M
    total = int(param)
    c = len(counts)
    if total < c:
        warnings.warn(f"fixed:{total} is below the class count {c}; "
                      f"all synthetic samples go to classes 0..{max(total - 1, 0)}")
    return tuple(total // c + (1 if k < total % c else 0) for k in range(c))


def plan_augmentation(d: LabeledDataset, strategy: str) -> AugmentationPlan:
    source = tuple(d.class_counts())
    return AugmentationPlan(
        strategy=strategy,
        source_counts=source,
        synthetic_counts=plan_counts(source, strategy),
    )


def materialize_plan(plan: AugmentationPlan, generators: Mapping[int, GeneratorBundle],
                     seed: int) -> LabeledDataset:
    """Generate exactly the planned number of synthetic samples per class.

    The result carries class labels but no masks, so it is a classification
    dataset until pseudo-masks are attached.
    """
    for class_id, m in enumerate(plan.synthetic_counts):
        if m > 0 and class_id not in generators:
            raise ConfigError(f"no trained generator for class {class_id} (plan needs {m} samples)")
    samples = []
    for class_id, m in enumerate(plan.synthetic_counts):
        if m == 0:
            continue
        bundle = generators[class_id]
        latents = sample_latents(m, seed=[seed, class_id], dim=bundle.latent_dim)
        samples.extend(generate(bundle, latents, id_prefix=f"syn-c{class_id}"))
    return LabeledDataset(samples, class_count=plan.class_count, task=CLASSIFICATION)


def merge(a: LabeledDataset, b: LabeledDataset) -> LabeledDataset:
    """Disjoint-id union; never mutates its inputs."""
    if a.task != b.task:
        raise ContractError(f"cannot merge tasks {a.task!r} and {b.task!r}")
    if a.class_count != b.class_count:
        raise ContractError(f"cannot merge class counts {a.class_count} and {b.class_count}")
    ids_a = {s.id for s in a.samples}
    collisions = [s.id for s in b.samples if s.id in ids_a]
    if collisions:
        raise ContractError(f"id collision on merge: {collisions[:5]}")
    return LabeledDataset(list(a.samples) + list(b.samples), a.class_count, a.task)
