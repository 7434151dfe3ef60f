"""Evaluation harness: stratified splits, the with/without-RAG model
matrix, confusion-matrix metrics, and report emission.

Positive class is phishing throughout, so FPR is the fraction of
legitimate emails wrongly flagged. The reference grid at the bottom
pins the balanced-250/250 benchmark cells used by the arithmetic
consistency check: each row's confusion matrix is back-solved from
(recall, fpr) and all five metrics are recomputed from it.
"""
from __future__ import annotations

import hashlib
import json
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

from .emailcore import CleanEmail, LABEL_LEGITIMATE, LABEL_PHISHING
from .errors import DegenerateCorpus
from .gateway import ModelSpec
from .pipeline import (BatchError, ClassificationResult, ClassifyOptions,
                       Engine, classify_batch, index_corpus)
from .threatintel import ReputationClient

MODE_RAG = "rag"
MODE_NORAG = "norag"

METRIC_NAMES = ("accuracy", "recall", "precision", "f1", "fpr")


@dataclass(frozen=True)
class SplitSpec:
    train_fraction: float = 0.8
    seed: int = 42
    stratify_on: str = "label"


@dataclass
class ConfusionMatrix:
    tp: int = 0
    fn: int = 0
    fp: int = 0
    tn: int = 0

    @property
    def total(self) -> int:
        return self.tp + self.fn + self.fp + self.tn

    def to_dict(self) -> dict:
        return {"tp": self.tp, "fn": self.fn, "fp": self.fp, "tn": self.tn}


def stratified_split(corpus: list[CleanEmail], spec: SplitSpec
                     ) -> tuple[list[CleanEmail], list[CleanEmail]]:
    """Deterministic per-class split preserving proportions within one
    item; both portions keep the corpus order of their members."""
    by_label: dict[str, list[CleanEmail]] = {}
    for e in corpus:
        if e.label is None:
            raise DegenerateCorpus(f"email {e.id!r} has no label")
        by_label.setdefault(e.label, []).append(e)
    for label in (LABEL_LEGITIMATE, LABEL_PHISHING):
        if not by_label.get(label):
            raise DegenerateCorpus(f"class {label!r} has 0 items")

    rng = random.Random(spec.seed)
    train_ids: set[str] = set()
    for label in sorted(by_label):
        members = by_label[label]
        picks = list(range(len(members)))
        rng.shuffle(picks)
        n_train = int(round(spec.train_fraction * len(members)))
        if len(members) >= 2:
            n_train = min(max(n_train, 1), len(members) - 1)
        train_ids.update(members[i].id for i in picks[:n_train])

    train = [e for e in corpus if e.id in train_ids]
    test = [e for e in corpus if e.id not in train_ids]
    return train, test


def compute_metrics(m: ConfusionMatrix) -> dict[str, Optional[float]]:
    """Accuracy, recall, precision, F1, FPR; undefined ratios are None."""
    metrics: dict[str, Optional[float]] = {}
    n = m.total
    metrics["accuracy"] = (m.tp + m.tn) / n if n else None
    metrics["recall"] = m.tp / (m.tp + m.fn) if (m.tp + m.fn) else None
    metrics["precision"] = m.tp / (m.tp + m.fp) if (m.tp + m.fp) else None
    p, r = metrics["precision"], metrics["recall"]
    metrics["f1"] = (2 * p * r / (p + r)) if p is not None and r is not None \
        and (p + r) > 0 else None
    metrics["fpr"] = m.fp / (m.fp + m.tn) if (m.fp + m.tn) else None
    return metrics


def back_solve_matrix(recall: float, fpr: float, n_pos: int = 250,
                      n_neg: int = 250) -> ConfusionMatrix:
    """Recover the confusion matrix from (recall, fpr) under known class
    sizes; inverts compute_metrics for a balanced benchmark."""
    tp = int(round(recall * n_pos))
    fp = int(round(fpr * n_neg))
    return ConfusionMatrix(tp=tp, fn=n_pos - tp, fp=fp, tn=n_neg - fp)


@dataclass
class CellResult:
    model_key: str
    mode: str
    matrix: ConfusionMatrix
    metrics: dict[str, Optional[float]]
    n: int
    fallback_count: int = 0
    error_count: int = 0
    complete: bool = True

    def to_dict(self) -> dict:
        return {"model_key": self.model_key, "mode": self.mode,
                "matrix": self.matrix.to_dict(), "metrics": dict(self.metrics),
                "n": self.n, "fallback_count": self.fallback_count,
                "error_count": self.error_count, "complete": self.complete}


@dataclass
class EvalReport:
    cells: dict[tuple[str, str], CellResult] = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)
    index_manifest: list[str] = field(default_factory=list)

    def cell(self, model_key: str, mode: str) -> Optional[CellResult]:
        return self.cells.get((model_key, mode))

    def to_dict(self) -> dict:
        return {
            "cells": [c.to_dict() for _, c in sorted(self.cells.items())],
            "metadata": dict(self.metadata),
            "index_manifest": list(self.index_manifest),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)


@dataclass
class EvalConfig:
    k: int = 5
    exclude_self: bool = True
    threat: bool = True
    include_fallbacks: bool = True
    eval_on: str = "test"  # "test" or "all" (full corpus, index still train-only)
    parallelism: int = 1
    only_label: Optional[str] = LABEL_LEGITIMATE
    fixtures: dict = field(default_factory=dict)  # name -> sha256, recorded
    audit_path: Optional[str] = None  # one result JSON per line when set


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _tally(results, emails, include_fallbacks: bool) -> CellResult:
    matrix = ConfusionMatrix()
    fallback_count = 0
    error_count = 0
    counted = 0
    for e, res in zip(emails, results):
        if isinstance(res, BatchError):
            error_count += 1
            continue
        assert isinstance(res, ClassificationResult)
        if res.fallback_used:
            fallback_count += 1
            if not include_fallbacks:
                continue
        counted += 1
        predicted_phish = res.verdict.classification_decision == LABEL_PHISHING
        actual_phish = e.label == LABEL_PHISHING
        if actual_phish and predicted_phish:
            matrix.tp += 1
        elif actual_phish:
            matrix.fn += 1
        elif predicted_phish:
            matrix.fp += 1
        else:
            matrix.tn += 1
    return CellResult(model_key="", mode="", matrix=matrix,
                      metrics=compute_metrics(matrix), n=counted,
                      fallback_count=fallback_count, error_count=error_count,
                      complete=error_count == 0)


def run_matrix(corpus: list[CleanEmail],
               models: list[ModelSpec],
               modes: list[str],
               split: SplitSpec,
               provider,
               backend_factory: Callable[[ModelSpec], object],
               threat_client: Optional[ReputationClient] = None,
               config: Optional[EvalConfig] = None) -> EvalReport:
    """Classify every evaluation email under each (model, mode) cell.

    The index is built once per run from the training portion's
    legitimate emails only; the manifest is checked against test ids so
    leakage is impossible by construction.
    """
    config = config or EvalConfig()
    train, test = stratified_split(corpus, split)
    idx, store = index_corpus(provider, train, only_label=config.only_label)
    manifest = idx.ids()

    test_ids = {e.id for e in test}
    leaked = test_ids.intersection(manifest)
    if leaked:
        raise RuntimeError(f"leakage: test ids in index: {sorted(leaked)[:5]}")

    eval_set = corpus if config.eval_on == "all" else test
    report = EvalReport(index_manifest=manifest)
    report.metadata = {
        "seed": split.seed,
        "train_fraction": split.train_fraction,
        "k": config.k,
        "models": [m.key for m in models],
        "modes": list(modes),
        "eval_on": config.eval_on,
        "n_train": len(train),
        "n_eval": len(eval_set),
        "index_size": len(idx),
        "threat_enabled": config.threat and threat_client is not None,
        "include_fallbacks": config.include_fallbacks,
        "fixtures": dict(config.fixtures),
        "embedding_provider": getattr(provider, "name", "unknown"),
    }

    audit = open(config.audit_path, "w", encoding="utf-8") \
        if config.audit_path else None
    try:
        for spec in models:
            backend = backend_factory(spec)
            engine = Engine(provider=provider, index=idx, context_store=store,
                            backend=backend, model_spec=spec,
                            threat_client=threat_client)
            for mode in modes:
                options = ClassifyOptions(rag=(mode == MODE_RAG),
                                          threat=config.threat,
                                          k=config.k,
                                          exclude_self=config.exclude_self)
                results = classify_batch(engine, eval_set, options,
                                         parallelism=config.parallelism)
                if audit:
                    for res in results:
                        line = res.to_json() \
                            if isinstance(res, ClassificationResult) \
                            else json.dumps(res.to_dict(), sort_keys=True)
                        audit.write(line + "\n")
                cell = _tally(results, eval_set, config.include_fallbacks)
                cell.model_key = spec.key
                cell.mode = mode
                report.cells[(spec.key, mode)] = cell
    finally:
        if audit:
            audit.close()
    return report


# --- report emission ---------------------------------------------------------

def _fmt(value: Optional[float]) -> str:
    return "—" if value is None else f"{value:.4f}"


def render_markdown(report: EvalReport) -> str:
    """Paired w/o-vs-w/ table, one row per model, five metric pairs."""
    models = report.metadata.get("models", [])
    header = ["Model"]
    for metric in METRIC_NAMES:
        header.append(f"{metric} w/o")
        header.append(f"{metric} w/")
    lines = ["| " + " | ".join(header) + " |",
             "|" + "---|" * len(header)]
    for key in models:
        row = [key]
        for metric in METRIC_NAMES:
            for mode in (MODE_NORAG, MODE_RAG):
                cell = report.cell(key, mode)
                row.append(_fmt(cell.metrics.get(metric)) if cell else "—")
        lines.append("| " + " | ".join(row) + " |")
    meta = report.metadata
    lines.append("")
    lines.append(f"seed={meta.get('seed')} k={meta.get('k')} "
                 f"n_eval={meta.get('n_eval')} index_size={meta.get('index_size')}")
    return "\n".join(lines) + "\n"


def render_csv(report: EvalReport) -> str:
    """Long-form model,mode,metric,value rows for bar-chart plotting."""
    lines = ["model,mode,metric,value"]
    for (key, mode), cell in sorted(report.cells.items()):
        for metric in METRIC_NAMES:
            value = cell.metrics.get(metric)
            rendered = "" if value is None else f"{value:.4f}"
            lines.append(f"{key},{mode},{metric},{rendered}")
    return "\n".join(lines) + "\n"


def emit_report(report: EvalReport, out_dir) -> dict[str, Path]:
    """Write report.md, report.csv, report.json and index-manifest.json."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "md": out / "report.md",
        "csv": out / "report.csv",
        "json": out / "report.json",
        "manifest": out / "index-manifest.json",
    }
    paths["md"].write_text(render_markdown(report), encoding="utf-8")
    paths["csv"].write_text(render_csv(report), encoding="utf-8")
    paths["json"].write_text(report.to_json(), encoding="utf-8")
    paths["manifest"].write_text(
        json.dumps({"index_manifest": report.index_manifest}, indent=2),
        encoding="utf-8")
    return paths


# --- reference benchmark grid -------------------------------------------------
# Balanced 250/250 protocol; every row must be arithmetically consistent:
# back-solving (recall, fpr) and recomputing reproduces all five columns.

REFERENCE_GRID = [
    {"model": "llama4-scout", "mode": MODE_NORAG, "accuracy": 0.9300,
     "recall": 0.9800, "precision": 0.8909, "f1": 0.9333, "fpr": 0.1200},
    {"model": "llama4-scout", "mode": MODE_RAG, "accuracy": 0.9700,
     "recall": 0.9800, "precision": 0.9608, "f1": 0.9703, "fpr": 0.0400},
    {"model": "deepseek-r1", "mode": MODE_NORAG, "accuracy": 0.8900,
     "recall": 1.0000, "precision": 0.8197, "f1": 0.9009, "fpr": 0.2200},
    {"model": "deepseek-r1", "mode": MODE_RAG, "accuracy": 0.9600,
     "recall": 0.9800, "precision": 0.9423, "f1": 0.9608, "fpr": 0.0600},
    {"model": "mistral-saba", "mode": MODE_NORAG, "accuracy": 0.8220,
     "recall": 1.0000, "precision": 0.7375, "f1": 0.8489, "fpr": 0.3560},
    {"model": "mistral-saba", "mode": MODE_RAG, "accuracy": 0.9500,
     "recall": 1.0000, "precision": 0.9091, "f1": 0.9524, "fpr": 0.1000},
    {"model": "gemma2-9b", "mode": MODE_NORAG, "accuracy": 0.8000,
     "recall": 1.0000, "precision": 0.7143, "f1": 0.8333, "fpr": 0.4000},
    {"model": "gemma2-9b", "mode": MODE_RAG, "accuracy": 0.8400,
     "recall": 1.0000, "precision": 0.7576, "f1": 0.8621, "fpr": 0.3200},
]


def verify_reference_grid(n_pos: int = 250, n_neg: int = 250) -> list[dict]:
    """Back-solve each reference row and recompute its metrics.

    Returns one record per row with the recomputed values rounded to
    4 decimals plus a 'consistent' flag against the pinned cells.
    """
    records = []
    for row in REFERENCE_GRID:
        matrix = back_solve_matrix(row["recall"], row["fpr"], n_pos, n_neg)
        recomputed = compute_metrics(matrix)
        rounded = {name: round(recomputed[name], 4) for name in METRIC_NAMES}
        consistent = all(abs(rounded[name] - row[name]) < 5e-5
                         for name in METRIC_NAMES)
        records.append({"model": row["model"], "mode": row["mode"],
                        "matrix": matrix.to_dict(), "recomputed": rounded,
                        "consistent": consistent})
    return records
