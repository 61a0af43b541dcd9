"""Experiment runners behind the CLI: train, evaluate, compare, probe, stats."""

from __future__ import annotations

import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

from . import pooling as pl
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import ExperimentConfig
from .data import DatasetError, Sample, CorpusStats, LABEL_NAMES, corpus_stats, length_controlled_eval_set, read_jsonl
from .metrics import Metrics, compute_metrics
from .numerics import ConfigError
from .probe import LengthBaseline
from .train import TrainResult, predict_samples, train_model

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1


def dump_json(payload: dict, path) -> None:
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _load_split(path: str | None, role: str) -> list[Sample]:
    if path is None:
        raise ConfigError(f"config needs {role}_path")
    samples = read_jsonl(path)
    if not samples:
        raise DatasetError(f"{role} dataset {path} is empty")
    return samples


def evaluate(model, vocab, samples: Sequence[Sample], max_seq_len: int) -> Metrics:
    preds, _ = predict_samples(model, vocab, samples, max_seq_len)
    return compute_metrics(preds, [s.label for s in samples])


@dataclass
class RunReport:
    config: dict
    seed: int
    pooling: str
    parameter_counts: dict
    epoch_losses: list[float]
    step_losses: list[float]
    train_metrics: dict
    eval_metrics: dict | None
    wall_time: float
    extra: dict = field(default_factory=dict)

    def metrics_payload(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "pooling": self.pooling,
            "seed": self.seed,
            "epoch_losses": self.epoch_losses,
            "train": self.train_metrics,
            "eval": self.eval_metrics,
        }

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "report": "train",
            "config": self.config,
            "seed": self.seed,
            "pooling": self.pooling,
            "parameter_counts": self.parameter_counts,
            "epoch_losses": self.epoch_losses,
            "step_losses": self.step_losses,
            "train_metrics": self.train_metrics,
            "eval_metrics": self.eval_metrics,
            "wall_time_seconds": self.wall_time,
            **self.extra,
        }


def run_training(
    cfg: ExperimentConfig,
    resume: Checkpoint | None = None,
    checkpoint_path=None,
) -> tuple[TrainResult, RunReport]:
    """Train per ``cfg``; if ``checkpoint_path`` is set, checkpoint after every epoch."""
    train = _load_split(cfg.train_path, "train")
    held = read_jsonl(cfg.eval_path) if cfg.eval_path else None
    if resume is not None and resume.model.kind != cfg.train.pooling:
        raise ConfigError(f"checkpoint pooling {resume.model.kind!r} differs from config {cfg.train.pooling!r}")

    def on_epoch(epoch: int, loss: float, result: TrainResult) -> None:
        log.info("[%s] epoch %d/%d loss %.5f", cfg.train.pooling, epoch, cfg.train.epochs, loss)
        if checkpoint_path is not None:
            save_checkpoint(checkpoint_path, cfg, result)

    start = time.perf_counter()
    result = train_model(
        cfg.train,
        cfg.encoder,
        train,
        resume=resume.to_result() if resume else None,
        on_epoch=on_epoch,
    )
    tm = evaluate(result.model, result.vocab, train, cfg.train.max_seq_len)
    em = evaluate(result.model, result.vocab, held, cfg.train.max_seq_len) if held else None
    report = RunReport(
        config=cfg.to_flat(),
        seed=cfg.train.seed,
        pooling=cfg.train.pooling,
        parameter_counts=result.model.parameter_counts(),
        epoch_losses=result.epoch_losses,
        step_losses=result.step_losses,
        train_metrics=tm.to_dict(),
        eval_metrics=em.to_dict() if em else None,
        wall_time=time.perf_counter() - start,
        extra={"total_steps": cfg.train.total_steps(len(train)), "train_size": len(train)},
    )
    return result, report


def cmd_train(cfg: ExperimentConfig, out_dir, resume_path=None) -> RunReport:
    """Train, then write ``model.ckpt``, ``report.json`` and ``metrics.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    resume = load_checkpoint(resume_path) if resume_path else None
    result, report = run_training(cfg, resume, checkpoint_path=out / "model.ckpt")
    save_checkpoint(out / "model.ckpt", cfg, result)
    dump_json(report.to_dict(), out / "report.json")
    dump_json(report.metrics_payload(), out / "metrics.json")
    return report


def cmd_evaluate(checkpoint_path, dataset_path) -> dict:
    ckpt = load_checkpoint(checkpoint_path)
    samples = _load_split(str(dataset_path), "eval")
    m = evaluate(ckpt.model, ckpt.vocab, samples, ckpt.config.train.max_seq_len)
    return {
        "schema_version": SCHEMA_VERSION,
        "report": "evaluate",
        "checkpoint": str(checkpoint_path),
        "dataset": str(dataset_path),
        "pooling": ckpt.model.kind,
        "metrics": m.to_dict(),
    }


def _compare_one(args) -> dict:
    cfg, kind = args
    _, report = run_training(cfg.replace(pooling=kind))
    return {
        "kind": kind,
        "label": pl.LABELS[kind],
        "f1": report.eval_metrics["f1"],
        "macro_f1": report.eval_metrics["macro_f1"],
        "accuracy": report.eval_metrics["accuracy"],
        "train_accuracy": report.train_metrics["accuracy"],
        "pooling_params": report.parameter_counts["pooling"],
        "total_params": report.parameter_counts["total"],
        "wall_time_seconds": report.wall_time,
    }


def cmd_compare(cfg: ExperimentConfig, jobs: int = 1) -> dict:
    """Train every pooling kind on identical data and seed; one row per kind."""
    if cfg.eval_path is None:
        raise ConfigError("compare needs eval_path for held-out F1")
    tasks = [(cfg, kind) for kind in pl.KINDS]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(_compare_one, tasks))
    else:
        rows = [_compare_one(t) for t in tasks]
    return {
        "schema_version": SCHEMA_VERSION,
        "report": "compare",
        "config": cfg.to_flat(),
        "seed": cfg.train.seed,
        "rows": rows,
    }


def compare_table(report: dict) -> str:
    rows = report["rows"]
    width = max(len(r["label"]) for r in rows)
    lines = [f"{'Pooling Strategy':<{width}}  {'Test F1':>7}  {'Pooling Params':>14}  {'Total Params':>12}"]
    lines.append("-" * len(lines[0]))
    for r in rows:
        lines.append(f"{r['label']:<{width}}  {r['f1']:>7.4f}  {r['pooling_params']:>14d}  {r['total_params']:>12d}")
    return "\n".join(lines)


def cmd_probe_length(checkpoint_path, dataset_path, band, fit_path=None) -> dict:
    """Model and length-only baseline F1 on the full set vs a length band."""
    ckpt = load_checkpoint(checkpoint_path)
    samples = _load_split(str(dataset_path), "eval")
    subset = length_controlled_eval_set(samples, band)
    fit_samples = read_jsonl(fit_path) if fit_path else samples
    baseline = LengthBaseline.fit(fit_samples)
    max_len = ckpt.config.train.max_seq_len

    full = evaluate(ckpt.model, ckpt.vocab, samples, max_len)
    controlled = evaluate(ckpt.model, ckpt.vocab, subset, max_len)
    base_full = compute_metrics(baseline.predict(samples), [s.label for s in samples])
    base_controlled = compute_metrics(baseline.predict(subset), [s.label for s in subset])
    lo, hi = band
    return {
        "schema_version": SCHEMA_VERSION,
        "report": "probe_length",
        "band": [lo, hi if math.isfinite(hi) else None],
        "sizes": {"full": len(samples), "controlled": len(subset)},
        "model": {
            "full": full.to_dict(),
            "controlled": controlled.to_dict(),
            "f1_delta": controlled.f1 - full.f1,
        },
        "length_baseline": {
            "threshold_words": baseline.threshold_words(),
            "full": base_full.to_dict(),
            "controlled": base_controlled.to_dict(),
            "f1_delta": base_controlled.f1 - base_full.f1,
        },
    }


def stats_payload(stats: CorpusStats) -> dict:
    return {"schema_version": SCHEMA_VERSION, "report": "stats", "classes": stats.to_dict()}


def cmd_stats(dataset_path) -> CorpusStats:
    samples = read_jsonl(dataset_path)
    if not samples:
        raise DatasetError(f"dataset {dataset_path} is empty")
    stats = corpus_stats(samples)
    for label, name in LABEL_NAMES.items():
        if stats.by_label(label).count == 0:
            raise DatasetError(f"dataset {dataset_path} has no {name} samples")
    return stats


def stats_table(stats: CorpusStats) -> str:
    h, m = stats.human, stats.machine
    rows = [
        ("Samples", f"{h.count:,}", f"{m.count:,}"),
        ("Avg. Words", f"{h.avg_words:,.1f}", f"{m.avg_words:,.1f}"),
        ("Avg. Characters", f"{h.avg_chars:,.1f}", f"{m.avg_chars:,.1f}"),
        ("Max Words", f"{h.max_words:,}", f"{m.max_words:,}"),
    ]
    lines = [f"{'Statistic':<16}  {'Human':>10}  {'Machine':>10}"]
    lines += [f"{a:<16}  {b:>10}  {c:>10}" for a, b, c in rows]
    return "\n".join(lines)
