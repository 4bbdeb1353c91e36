"""Config-driven orchestration of the full pipeline.

A run directory is the unit of reproducibility: nothing is written outside
it, every stage persists a JSON artifact under ``stages/``, and completed
stages are reused on rerun. The final report cites only numbers that exist
in those stage artifacts.
"""

from __future__ import annotations

import csv
import datetime
import os
import warnings
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import torch

from . import __version__, plots
from .augment import AugmentationPlan, merge, materialize_plan, parse_strategy, plan_augmentation
from .data import (CLASSIFICATION, SEGMENTATION, LabeledDataset, ToyCorpusSpec,
                   load_dataset, make_toy_corpus, save_dataset, split_dataset)
from .errors import ConfigError, ContractError, SsgnetError, StageError
from .generator import GanTrainConfig, load_generator, save_generator, train_generator
from .metrics import MIOU_FOREGROUND, MIOU_TWO_CLASS, RandomConvFeatures, fid_score
from .selftrain import SslConfig, run_ssl
from .train import (SegmenterTrainer, TrainConfig, evaluate_classifier,
                    evaluate_segmenter, load_model, save_model, train_classifier)
from .util import config_hash, derive_seed, dump_json, load_json

RUNS_ROOT_ENV = "SSGNET_RUNS_ROOT"

CONFIG_VERSION = 1


# --------------------------------------------------------------------------
# Configuration
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class DatasetConfig:
    source: str
    toy: ToyCorpusSpec | None = None
    path: str | None = None

    def to_dict(self) -> dict:
        if self.source == "toy":
            return {"source": "toy", **self.toy.to_dict()}
        return {"source": "directory", "path": self.path}


@dataclass(frozen=True)
class SplitConfig:
    ratios: tuple[float, float, float] = (0.6, 0.2, 0.2)
    seed: int = 0

    def to_dict(self) -> dict:
        return {"ratios": list(self.ratios), "seed": self.seed}


@dataclass(frozen=True)
class AugmentConfig:
    strategy: str = "balance"
    seed: int = 0

    def to_dict(self) -> dict:
        return {"strategy": self.strategy, "seed": self.seed}


@dataclass(frozen=True)
class EvalConfig:
    fid: bool = True
    feature_dim: int = 64
    extractor_seed: int = 0
    fid_max_samples: int = 128
    miou_mode: str = MIOU_TWO_CLASS
    threshold: float = 0.5

    def __post_init__(self):
        if self.miou_mode not in (MIOU_TWO_CLASS, MIOU_FOREGROUND):
            raise ConfigError(f"unknown miou_mode {self.miou_mode!r}")
        if not (0.0 < self.threshold < 1.0):
            raise ConfigError("threshold must lie in (0, 1)")
        if self.fid_max_samples < 2:
            raise ConfigError("fid_max_samples must be >= 2")

    def to_dict(self) -> dict:
        return {
            "fid": self.fid,
            "feature_dim": self.feature_dim,
            "extractor_seed": self.extractor_seed,
            "fid_max_samples": self.fid_max_samples,
            "miou_mode": self.miou_mode,
            "threshold": self.threshold,
        }


def _strict(d: dict, known: set[str], where: str) -> dict:
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")
    return dict(d)


@dataclass(frozen=True)
class ExperimentConfig:
    run_id: str
    seed: int
    task: str
    dataset: DatasetConfig
    split: SplitConfig
    augment: AugmentConfig
    gan: GanTrainConfig
    train: TrainConfig
    ssl: SslConfig | None
    evaluation: EvalConfig

    def __post_init__(self):
        if not self.run_id or any(c in self.run_id for c in "/\\"):
            raise ConfigError(f"run_id must be a plain directory name, got {self.run_id!r}")
        if self.task not in (CLASSIFICATION, SEGMENTATION):
            raise ConfigError(f"unknown task {self.task!r}")
        if self.task == CLASSIFICATION and self.ssl is not None:
            raise ConfigError("pseudo-labeling rounds require the segmentation task")
        if self.task == SEGMENTATION and self.ssl is None:
            raise ConfigError("segmentation experiments need an ssl section")
        if self.train.task != self.task:
            raise ConfigError("train config task does not match the experiment task")

    def to_dict(self) -> dict:
        out = {
            "version": CONFIG_VERSION,
            "run_id": self.run_id,
            "seed": self.seed,
            "task": self.task,
            "dataset": self.dataset.to_dict(),
            "split": self.split.to_dict(),
            "augment": self.augment.to_dict(),
            "gan": self.gan.to_dict(),
            "train": self.train.to_dict(),
            "evaluation": self.evaluation.to_dict(),
        }
        if self.ssl is not None:
            out["ssl"] = self.ssl.to_dict()
        return out

    @property
    def hash(self) -> str:
        return config_hash(self.to_dict())

    def seeds(self) -> dict:
        """Resolved per-stage seeds (explicit config values win)."""
        out = {
            "master": self.seed,
            "dataset": self.dataset.toy.seed if self.dataset.toy else None,
            "split": self.split.seed,
            "synthesize": self.augment.seed,
            "gan": self.gan.seed,
            "train": self.train.seed,
        }
        if self.ssl is not None:
            out["ssl"] = self.ssl.seed
        return out


def parse_config(raw: dict, seed_override: int | None = None) -> ExperimentConfig:
    """Build a validated config from a JSON document.

    Unknown keys anywhere are rejected. Stage seeds omitted from the
    document are derived from the master seed, so a --seed override reseeds
    the whole pipeline.
    """
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    raw = _strict(raw, {"version", "run_id", "seed", "task", "dataset", "split",
                        "augment", "gan", "train", "ssl", "evaluation"}, "config")
    if raw.get("version") != CONFIG_VERSION:
        raise ConfigError(f"config version must be {CONFIG_VERSION}, got {raw.get('version')!r}")
    if "run_id" not in raw or "task" not in raw or "dataset" not in raw:
        raise ConfigError("config needs at least run_id, task, and dataset")
    master = int(seed_override if seed_override is not None else raw.get("seed", 0))
    task = raw["task"]

    def stage_dict(name: str, defaults_seed: int) -> dict:
        d = dict(raw.get(name, {}))
        d.setdefault("seed", defaults_seed)
        return d

    ds_raw = dict(raw["dataset"])
    source = ds_raw.pop("source", None)
    if source == "toy":
        ds_raw.setdefault("seed", derive_seed(master, "dataset"))
        dataset = DatasetConfig(source="toy", toy=ToyCorpusSpec.from_dict(ds_raw))
        dataset.toy.validate()
    elif source == "directory":
        ds_raw = _strict(ds_raw, {"path"}, "dataset")
        if not ds_raw.get("path"):
            raise ConfigError("dataset.source=directory needs a path")
        dataset = DatasetConfig(source="directory", path=ds_raw["path"])
    else:
        raise ConfigError(f"dataset.source must be 'toy' or 'directory', got {source!r}")

    split_raw = _strict(stage_dict("split", derive_seed(master, "split")),
                        {"ratios", "seed"}, "split")
    split = SplitConfig(ratios=tuple(split_raw.get("ratios", (0.6, 0.2, 0.2))),
                        seed=split_raw["seed"])
    if len(split.ratios) != 3 or abs(sum(split.ratios) - 1.0) > 1e-9:
        raise ConfigError(f"split.ratios must be 3 values summing to 1, got {split.ratios}")

    aug_raw = _strict(stage_dict("augment", derive_seed(master, "synthesize")),
                      {"strategy", "seed"}, "augment")
    strategy = aug_raw.get("strategy", "balance")
    parse_strategy(strategy)
    aug = AugmentConfig(strategy=strategy, seed=aug_raw["seed"])

    gan = GanTrainConfig.from_dict(stage_dict("gan", derive_seed(master, "gan")))

    train_raw = stage_dict("train", derive_seed(master, "train"))
    train_raw.setdefault("task", task)
    train_cfg = TrainConfig.from_dict(train_raw)

    ssl_cfg = None
    if "ssl" in raw:
        ssl_cfg = SslConfig.from_dict(stage_dict("ssl", derive_seed(master, "ssl")))
    elif task == SEGMENTATION:
        ssl_cfg = SslConfig(seed=derive_seed(master, "ssl"))

    eval_raw = _strict(dict(raw.get("evaluation", {})),
                       {"fid", "feature_dim", "extractor_seed", "fid_max_samples",
                        "miou_mode", "threshold"}, "evaluation")
    evaluation = EvalConfig(**eval_raw)

    return ExperimentConfig(
        run_id=raw["run_id"], seed=master, task=task, dataset=dataset, split=split,
        augment=aug, gan=gan, train=train_cfg, ssl=ssl_cfg, evaluation=evaluation,
    )


def load_config(path: str | Path, seed_override: int | None = None) -> ExperimentConfig:
    return parse_config(load_json(path), seed_override=seed_override)


def resolve_runs_root(explicit: str | Path | None = None) -> Path:
    if explicit is not None:
        return Path(explicit)
    return Path(os.environ.get(RUNS_ROOT_ENV, "runs"))


# --------------------------------------------------------------------------
# Run context and stage framework
# --------------------------------------------------------------------------

class RunContext:
    """Binds a config to its run directory and caches loaded artifacts."""

    def __init__(self, cfg: ExperimentConfig, run_dir: str | Path):
        self.cfg = cfg
        self.run_dir = Path(run_dir)
        self._datasets: dict[str, LabeledDataset] = {}
        self.run_dir.mkdir(parents=True, exist_ok=True)
        config_path = self.run_dir / "config.json"
        if config_path.is_file():
            stored = load_json(config_path)
            if config_hash(stored) != cfg.hash:
                raise ConfigError(
                    f"run dir {self.run_dir} was created with a different config; use a fresh run dir")
        else:
            dump_json(config_path, cfg.to_dict())

    def stage_path(self, name: str) -> Path:
        return self.run_dir / "stages" / f"{name}.json"

    def dataset(self, name: str) -> LabeledDataset:
        if name not in self._datasets:
            self._datasets[name] = load_dataset(self.run_dir / "data" / name)
        return self._datasets[name]


_STAGES: dict[str, tuple] = {}


def _stage(name: str, deps: tuple[str, ...] = ()):
    def wrap(fn):
        _STAGES[name] = (fn, deps)
        return fn
    return wrap


def ensure_stage(ctx: RunContext, name: str) -> dict:
    """Run the named stage (and its prerequisites), reusing persisted results."""
    if name not in _STAGES:
        raise ConfigError(f"unknown stage {name!r}")
    fn, deps = _STAGES[name]
    path = ctx.stage_path(name)
    if path.is_file():
        return load_json(path)
    for dep in deps:
        ensure_stage(ctx, dep)
    try:
        payload = fn(ctx)
    except StageError:
        raise
    except SsgnetError as exc:
        raise StageError(name, str(exc)) from exc
    payload = {
        "stage": name,
        "config_hash": ctx.cfg.hash,
        "completed_at": datetime.datetime.now(datetime.timezone.utc).isoformat(),
        **payload,
    }
    dump_json(path, payload)
    return payload


# --------------------------------------------------------------------------
# Stages
# --------------------------------------------------------------------------

@_stage("dataset")
def stage_dataset(ctx: RunContext) -> dict:
    cfg = ctx.cfg
    if cfg.dataset.source == "toy":
        full = make_toy_corpus(cfg.dataset.toy, task=cfg.task)
    else:
        full = load_dataset(cfg.dataset.path)
        if full.task != cfg.task:
            full = full.with_task(cfg.task)
    train, val, test = split_dataset(full, cfg.split.ratios, cfg.split.seed)
    for name, part in (("full", full), ("train", train), ("val", val), ("test", test)):
        save_dataset(part, ctx.run_dir / "data" / name)
        ctx._datasets[name] = part
    return {
        "class_count": full.class_count,
        "sizes": {"full": len(full), "train": len(train), "val": len(val), "test": len(test)},
        "train_class_counts": train.class_counts(),
        "val_class_counts": val.class_counts(),
        "test_class_counts": test.class_counts(),
    }


@_stage("plan", deps=("dataset",))
def stage_plan(ctx: RunContext) -> dict:
    plan = plan_augmentation(ctx.dataset("train"), ctx.cfg.augment.strategy)
    plan.save(ctx.run_dir / "plans" / "augment.json")
    return {"plan": plan.to_dict()}


def _gen_ckpt(ctx: RunContext, class_id: int) -> Path:
    return ctx.run_dir / "checkpoints" / f"gen_class_{class_id}.ckpt"


def train_one_generator(ctx: RunContext, class_id: int) -> Path:
    """Train (or reuse) the generator for one class; returns its checkpoint."""
    ckpt = _gen_ckpt(ctx, class_id)
    if ckpt.is_file():
        return ckpt
    cfg = ctx.cfg
    gan_cfg = replace(cfg.gan, seed=derive_seed(cfg.gan.seed, "class", class_id))
    bundle = train_generator(ctx.dataset("train"), class_id, gan_cfg,
                             log_path=ctx.run_dir / "logs" / f"gan_class_{class_id}.jsonl")
    save_generator(bundle, ckpt)
    return ckpt


@_stage("generators", deps=("dataset", "plan"))
def stage_generators(ctx: RunContext) -> dict:
    plan = AugmentationPlan.load(ctx.run_dir / "plans" / "augment.json")
    rows = {}
    for class_id, m in enumerate(plan.synthetic_counts):
        if m == 0:
            continue
        ckpt = train_one_generator(ctx, class_id)
        rows[str(class_id)] = {"checkpoint": str(ckpt.relative_to(ctx.run_dir))}
    return {"classes": rows}


@_stage("synthesize", deps=("generators",))
def stage_synthesize(ctx: RunContext) -> dict:
    plan = AugmentationPlan.load(ctx.run_dir / "plans" / "augment.json")
    generators = {
        class_id: load_generator(_gen_ckpt(ctx, class_id))
        for class_id, m in enumerate(plan.synthetic_counts) if m > 0
    }
    d_gen = materialize_plan(plan, generators, seed=ctx.cfg.augment.seed)
    save_dataset(d_gen, ctx.run_dir / "data" / "synthetic")
    ctx._datasets["synthetic"] = d_gen
    return {"size": len(d_gen), "class_counts": d_gen.class_counts()}


@_stage("train_baseline", deps=("dataset",))
def stage_train_baseline(ctx: RunContext) -> dict:
    cfg = ctx.cfg
    if cfg.task == CLASSIFICATION:
        model, history = train_classifier(
            ctx.dataset("train").with_task(CLASSIFICATION), ctx.dataset("val").with_task(CLASSIFICATION),
            cfg.train, log_path=ctx.run_dir / "logs" / "train_baseline.jsonl")
        ckpt = save_model(model, ctx.run_dir / "checkpoints" / "cls_baseline.ckpt")
    else:
        trainer = SegmenterTrainer(cfg.train, ctx.dataset("val"), miou_mode=cfg.evaluation.miou_mode)
        model, history = trainer.train(ctx.dataset("train"),
                                       log_path=ctx.run_dir / "logs" / "train_baseline.jsonl")
        ckpt = save_model(model, ctx.run_dir / "checkpoints" / "seg_baseline.ckpt")
    return {"checkpoint": str(ckpt.relative_to(ctx.run_dir)), "history": history}


@_stage("train_augmented", deps=("dataset", "synthesize", "train_baseline"))
def stage_train_augmented(ctx: RunContext) -> dict:
    cfg = ctx.cfg
    if cfg.task != CLASSIFICATION:
        raise ConfigError("train_augmented applies to classification runs; segmentation uses ssl")
    d_aug = merge(ctx.dataset("train").with_task(CLASSIFICATION),
                  ctx.dataset("synthetic"))
    train_cfg = replace(cfg.train, seed=derive_seed(cfg.train.seed, "augmented"))
    model, history = train_classifier(
        d_aug, ctx.dataset("val").with_task(CLASSIFICATION), train_cfg,
        log_path=ctx.run_dir / "logs" / "train_augmented.jsonl")
    ckpt = save_model(model, ctx.run_dir / "checkpoints" / "cls_augmented.ckpt")
    return {"checkpoint": str(ckpt.relative_to(ctx.run_dir)), "history": history,
            "train_size": len(d_aug)}


def round_label(index: int) -> str:
    if index == 0:
        return "initial training"
    return f"pseudo-labeling round {index}"


@_stage("ssl", deps=("dataset", "synthesize"))
def stage_ssl(ctx: RunContext) -> dict:
    cfg = ctx.cfg
    if cfg.task != SEGMENTATION:
        raise ConfigError("ssl applies to segmentation runs")
    trainer = SegmenterTrainer(cfg.train, ctx.dataset("val"), miou_mode=cfg.evaluation.miou_mode)
    rounds = run_ssl(ctx.dataset("train"), ctx.dataset("synthetic"), trainer, cfg.ssl,
                     run_dir=ctx.run_dir)
    rows = []
    for record in rounds:
        rows.append({
            "round": record.index,
            "label": round_label(record.index),
            "metrics": record.val_metrics,
            "pseudo_count": len(record.pseudo),
            "checkpoint": str(record.checkpoint_path.relative_to(ctx.run_dir)),
            "history": record.history,
        })
    return {"rounds": rows}


@_stage("evaluate", deps=("train_baseline", "train_augmented"))
def stage_evaluate_classification(ctx: RunContext) -> dict:
    test = ctx.dataset("test").with_task(CLASSIFICATION)
    out = {}
    for setting, ckpt in (("baseline", "cls_baseline.ckpt"), ("augmented", "cls_augmented.ckpt")):
        model = load_model(ctx.run_dir / "checkpoints" / ckpt)
        out[setting] = evaluate_classifier(model, test)
    return {"test": out, "conventions": {"zero_division": "zero"}}


@_stage("evaluate_seg", deps=("ssl",))
def stage_evaluate_segmentation(ctx: RunContext) -> dict:
    ssl_payload = ensure_stage(ctx, "ssl")
    final = ssl_payload["rounds"][-1]
    model = load_model(ctx.run_dir / final["checkpoint"])
    test_metrics = evaluate_segmenter(model, ctx.dataset("test"),
                                      threshold=ctx.cfg.evaluation.threshold,
                                      miou_mode=ctx.cfg.evaluation.miou_mode)
    return {
        "final_round": final["round"],
        "test": test_metrics,
        "conventions": {
            "miou_mode": ctx.cfg.evaluation.miou_mode,
            "threshold": ctx.cfg.evaluation.threshold,
            "zero_division": "one_for_empty",
        },
    }


@_stage("fid", deps=("dataset", "synthesize"))
def stage_fid(ctx: RunContext) -> dict:
    cfg = ctx.cfg
    if not cfg.evaluation.fid:
        return {"rows": [], "enabled": False}
    extractor = RandomConvFeatures(cfg.evaluation.feature_dim, seed=cfg.evaluation.extractor_seed)
    real = ctx.dataset("train")
    synth = ctx.dataset("synthetic")
    rows = []
    cap = cfg.evaluation.fid_max_samples
    for class_id in range(real.class_count):
        real_k = real.of_class(class_id)[:cap]
        synth_k = synth.of_class(class_id)[:cap]
        if len(real_k) < 2 or len(synth_k) < 2:
            continue
        result = fid_score(LabeledDataset(real_k, real.class_count, real.task),
                           LabeledDataset(synth_k, synth.class_count, synth.task),
                           extractor)
        rows.append({"class_id": class_id, **result.to_dict()})
    return {"rows": rows, "enabled": True, "extractor_id": extractor.identifier}


# --------------------------------------------------------------------------
# Report
# --------------------------------------------------------------------------

@dataclass
class MetricsReport:
    run_id: str
    task: str
    config_hash: str
    seeds: dict
    versions: dict
    dataset_summary: dict
    plan: dict | None
    classification: dict | None
    rounds: list[dict] | None
    test_metrics: dict | None
    fid: list[dict]
    histories: dict[str, list[dict]]
    conventions: dict

    def to_dict(self) -> dict:
        return {
            "run_id": self.run_id,
            "task": self.task,
            "config_hash": self.config_hash,
            "seeds": self.seeds,
            "versions": self.versions,
            "dataset_summary": self.dataset_summary,
            "plan": self.plan,
            "classification": self.classification,
            "rounds": self.rounds,
            "test_metrics": self.test_metrics,
            "fid": self.fid,
            "histories": self.histories,
            "conventions": self.conventions,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        return cls(**{k: d[k] for k in cls.__dataclass_fields__})

    @classmethod
    def load(cls, path: str | Path) -> "MetricsReport":
        return cls.from_dict(load_json(path))


def build_report(ctx: RunContext) -> MetricsReport:
    cfg = ctx.cfg
    dataset_payload = ensure_stage(ctx, "dataset")
    plan_payload = ensure_stage(ctx, "plan")
    fid_payload = ensure_stage(ctx, "fid")
    histories: dict[str, list[dict]] = {}
    classification = None
    rounds = None
    test_metrics = None
    conventions: dict = {}
    if cfg.task == CLASSIFICATION:
        baseline = ensure_stage(ctx, "train_baseline")
        augmented = ensure_stage(ctx, "train_augmented")
        evaluated = ensure_stage(ctx, "evaluate")
        classification = evaluated["test"]
        conventions = evaluated["conventions"]
        histories["baseline"] = baseline["history"]
        histories["augmented"] = augmented["history"]
    else:
        ssl_payload = ensure_stage(ctx, "ssl")
        evaluated = ensure_stage(ctx, "evaluate_seg")
        rounds = [{k: row[k] for k in ("round", "label", "metrics", "pseudo_count")}
                  for row in ssl_payload["rounds"]]
        test_metrics = evaluated["test"]
        conventions = evaluated["conventions"]
        for row in ssl_payload["rounds"]:
            histories[f"round {row['round']}"] = row["history"]
    if fid_payload.get("enabled"):
        conventions = {**conventions, "fid_extractor": fid_payload.get("extractor_id")}
    return MetricsReport(
        run_id=cfg.run_id,
        task=cfg.task,
        config_hash=cfg.hash,
        seeds=cfg.seeds(),
        versions={"ssgnet": __version__, "numpy": np.__version__, "torch": torch.__version__},
        dataset_summary={k: dataset_payload[k] for k in
                         ("class_count", "sizes", "train_class_counts", "val_class_counts",
                          "test_class_counts")},
        plan=plan_payload["plan"],
        classification=classification,
        rounds=rounds,
        test_metrics=test_metrics,
        fid=fid_payload["rows"],
        histories=histories,
        conventions=conventions,
    )


def _pct(x: float) -> str:
    return f"{100.0 * x:.2f}%"


def render_report_md(report: MetricsReport) -> str:
    lines = [f"# Run report: {report.run_id}", ""]
    lines += [
        f"- task: {report.task}",
        f"- config hash: `{report.config_hash}`",
        f"- seeds: `{report.seeds}`",
        f"- versions: `{report.versions}`",
        "",
    ]
    sizes = report.dataset_summary["sizes"]
    lines += ["## Dataset", "",
              "| split | size | per-class |", "|---|---|---|"]
    for split in ("full", "train", "val", "test"):
        per_class = report.dataset_summary.get(f"{split}_class_counts", "")
        lines.append(f"| {split} | {sizes[split]} | {per_class} |")
    lines.append("")
    if report.plan:
        lines += ["## Augmentation plan", "",
                  f"strategy: `{report.plan['strategy']}`", "",
                  "| class | real | synthetic |", "|---|---|---|"]
        for k, (n, m) in enumerate(zip(report.plan["source_counts"],
                                       report.plan["synthetic_counts"])):
            lines.append(f"| {k} | {n} | {m} |")
        lines.append("")
    if report.rounds is not None:
        lines += ["## Validation metrics per round", "",
                  "| stage | mIoU | Dice | Accuracy | Specificity | Sensitivity |",
                  "|---|---|---|---|---|---|"]
        for row in report.rounds:
            m = row["metrics"]
            lines.append("| {label} | {miou} | {dice} | {acc} | {spe} | {sen} |".format(
                label=row["label"], miou=_pct(m["miou"]), dice=_pct(m["dice"]),
                acc=_pct(m["accuracy"]), spe=_pct(m["specificity"]), sen=_pct(m["sensitivity"])))
        lines.append("")
    if report.test_metrics is not None:
        m = report.test_metrics
        lines += ["## Test metrics (final model)", "",
                  "| mIoU | Dice | Accuracy | Specificity | Sensitivity |",
                  "|---|---|---|---|---|",
                  f"| {_pct(m['miou'])} | {_pct(m['dice'])} | {_pct(m['accuracy'])} "
                  f"| {_pct(m['specificity'])} | {_pct(m['sensitivity'])} |", ""]
    if report.classification is not None:
        lines += ["## Test metrics (classification)", "",
                  "| setting | Accuracy | Macro F1 |", "|---|---|---|"]
        for setting in ("baseline", "augmented"):
            row = report.classification[setting]
            lines.append(f"| {setting} | {_pct(row['accuracy'])} | {_pct(row['macro_f1'])} |")
        lines.append("")
    if report.fid:
        lines += ["## Synthetic image fidelity (FID)", "",
                  "| class | FID | extractor | real n | synthetic n |",
                  "|---|---|---|---|---|"]
        for row in report.fid:
            lines.append(f"| {row['class_id']} | {row['value']:.4f} | {row['extractor_id']} "
                         f"| {row['real_count']} | {row['synthetic_count']} |")
        lines.append("")
    return "\n".join(lines) + "\n"


def report_rows(report: MetricsReport) -> list[tuple[str, str, str, float]]:
    """Flat (section, row, metric, value) tuples for the delimited output."""
    rows: list[tuple[str, str, str, float]] = []
    if report.rounds is not None:
        for row in report.rounds:
            for metric, value in row["metrics"].items():
                rows.append(("rounds", row["label"], metric, value))
    if report.test_metrics is not None:
        for metric, value in report.test_metrics.items():
            rows.append(("test", "final", metric, value))
    if report.classification is not None:
        for setting in ("baseline", "augmented"):
            for metric in ("accuracy", "macro_f1", "loss"):
                rows.append(("classification", setting, metric,
                             report.classification[setting][metric]))
    for row in report.fid:
        rows.append(("fid", f"class_{row['class_id']}", "fid", row["value"]))
    return rows


def write_report_files(report: MetricsReport, run_dir: str | Path) -> dict[str, Path]:
    run_dir = Path(run_dir)
    json_path = run_dir / "report.json"
    dump_json(json_path, report.to_dict())
    md_path = run_dir / "report.md"
    md_path.write_text(render_report_md(report), encoding="utf-8")
    csv_path = run_dir / "report.csv"
    with csv_path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["section", "row", "metric", "value"])
        for section, row, metric, value in report_rows(report):
            writer.writerow([section, row, metric, repr(float(value))])
    plot_paths = emit_plots(report, run_dir / "plots")
    return {"json": json_path, "md": md_path, "csv": csv_path,
            "plots": [str(p) for p in plot_paths]}


def emit_plots(report: MetricsReport, directory: str | Path) -> list[Path]:
    """Render the report's figures; missing series are skipped with a note."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []
    if report.histories:
        written.append(plots.render_loss_curves(report.histories, directory / "loss_curves.png"))
    else:
        warnings.warn("no training histories in report; skipping loss curve plot")
    if report.rounds:
        written.append(plots.render_round_dice(report.rounds, directory / "round_dice.png"))
    if report.fid:
        written.append(plots.render_fid_bars(report.fid, directory / "fid.png"))
    else:
        warnings.warn("no FID rows in report; skipping FID plot")
    return written


# --------------------------------------------------------------------------
# Entry points
# --------------------------------------------------------------------------

FINAL_STAGES = {
    CLASSIFICATION: ("dataset", "plan", "generators", "synthesize",
                     "train_baseline", "train_augmented", "evaluate", "fid"),
    SEGMENTATION: ("dataset", "plan", "generators", "synthesize", "ssl",
                   "evaluate_seg", "fid"),
}


def run_experiment(cfg: ExperimentConfig, runs_root: str | Path | None = None,
                   run_dir: str | Path | None = None) -> MetricsReport:
    """Execute the full pipeline and write report + plots into the run dir."""
    if run_dir is None:
        run_dir = resolve_runs_root(runs_root) / cfg.run_id
    ctx = RunContext(cfg, run_dir)
    for name in FINAL_STAGES[cfg.task]:
        ensure_stage(ctx, name)
    report = build_report(ctx)
    write_report_files(report, ctx.run_dir)
    return report


# --------------------------------------------------------------------------
# Run comparison
# --------------------------------------------------------------------------

_LOWER_IS_BETTER = ("fid", "loss")


def headline_metrics(report: MetricsReport) -> dict[str, float]:
    out: dict[str, float] = {}
    if report.test_metrics is not None:
        for metric in ("miou", "dice", "accuracy", "specificity", "sensitivity"):
            out[metric] = report.test_metrics[metric]
    if report.classification is not None:
        row = report.classification["augmented" if "augmented" in report.classification
                                    else "baseline"]
        out["accuracy"] = row["accuracy"]
        out["macro_f1"] = row["macro_f1"]
    if report.fid:
        out["fid_mean"] = float(np.mean([row["value"] for row in report.fid]))
    return out


def compare_runs(baseline: MetricsReport, treatment: MetricsReport) -> dict:
    """Per-metric deltas with the better run marked on every row."""
    base = headline_metrics(baseline)
    treat = headline_metrics(treatment)
    if set(base) != set(treat):
        raise ContractError(
            f"reports expose different metrics: {sorted(set(base) ^ set(treat))}")
    table = {}
    for metric in sorted(base):
        lower_better = any(metric.startswith(prefix) for prefix in _LOWER_IS_BETTER)
        delta = treat[metric] - base[metric]
        if delta == 0:
            best = "tie"
        elif (delta < 0) == lower_better:
            best = "treatment"
        else:
            best = "baseline"
        table[metric] = {
            "baseline": base[metric],
            "treatment": treat[metric],
            "delta": delta,
            "best": best,
        }
    return {
        "baseline_run": baseline.run_id,
        "treatment_run": treatment.run_id,
        "metrics": table,
    }


def render_compare_md(delta: dict) -> str:
    lines = [f"# {delta['treatment_run']} vs {delta['baseline_run']}", "",
             "| metric | baseline | treatment | delta | best |",
             "|---|---|---|---|---|"]
    for metric, row in delta["metrics"].items():
        lines.append(f"| {metric} | {row['baseline']:.4f} | {row['treatment']:.4f} "
                     f"| {row['delta']:+.4f} | {row['best']} |")
    return "\n".join(lines) + "\n"
