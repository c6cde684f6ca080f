"""Render cross-validation results to delimited files plus figures.

A report is three CSVs (per-class scores, per-fold summaries, confusion
counts) and two PNGs rendered next to them, so the numbers stay greppable
while the figures give the quick visual read.
"""

from __future__ import annotations

import logging
import os

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .ml import ClassScore, CVResult

__all__ = [
    "pooled_confusion",
    "scores_from_confusion",
    "write_report",
    "write_importance",
]

log = logging.getLogger(__name__)


def pooled_confusion(result: CVResult) -> tuple[tuple[str, ...], np.ndarray]:
    """Sum per-fold confusion matrices over the union of their classes."""
    classes: list[str] = sorted({c for f in result.folds for c in f.scores.classes})
    index = {c: i for i, c in enumerate(classes)}
    conf = np.zeros((len(classes), len(classes)), dtype=np.int64)
    for fold in result.folds:
        for i, ci in enumerate(fold.scores.classes):
            for j, cj in enumerate(fold.scores.classes):
                conf[index[ci], index[cj]] += fold.scores.confusion[i, j]
    return tuple(classes), conf


def scores_from_confusion(
    classes: tuple[str, ...], conf: np.ndarray
) -> dict[str, ClassScore]:
    """Per-class precision/recall/F recomputed from pooled counts."""
    out: dict[str, ClassScore] = {}
    for i, c in enumerate(classes):
        tp = int(conf[i, i])
        support = int(conf[i].sum())
        predicted = int(conf[:, i].sum())
        if support == 0:
            continue  # class never appeared as a true label in any fold
        precision = tp / predicted if predicted else 0.0
        recall = tp / support
        f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
        out[c] = ClassScore(precision=precision, recall=recall, f1=f1, support=support)
    return out


def _fmt(x: float) -> str:
    return f"{x:.6f}"


def _write_class_rows(path: str, results: dict[str, CVResult]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("order,fold,class,precision,recall,f1,support\n")
        for order, res in results.items():
            for fold in res.folds:
                for c in fold.scores.classes:
                    s = fold.scores.per_class.get(c)
                    if s is None:
                        continue
                    fh.write(
                        f"{order},{fold.fold},{c},{_fmt(s.precision)},"
                        f"{_fmt(s.recall)},{_fmt(s.f1)},{s.support}\n"
                    )
            classes, conf = pooled_confusion(res)
            for c, s in scores_from_confusion(classes, conf).items():
                fh.write(
                    f"{order},all,{c},{_fmt(s.precision)},{_fmt(s.recall)},"
                    f"{_fmt(s.f1)},{s.support}\n"
                )


def _write_summary_rows(path: str, results: dict[str, CVResult]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("order,fold,test_size,macro_f,weighted_f,accuracy\n")
        for order, res in results.items():
            for fold in res.folds:
                s = fold.scores
                fh.write(
                    f"{order},{fold.fold},{fold.test_size},{_fmt(s.macro_f)},"
                    f"{_fmt(s.weighted_f)},{_fmt(s.accuracy)}\n"
                )
            total = sum(f.test_size for f in res.folds)
            fh.write(
                f"{order},all,{total},{_fmt(res.macro_f)},"
                f"{_fmt(res.weighted_f)},{_fmt(res.accuracy)}\n"
            )


def _write_confusion_rows(path: str, results: dict[str, CVResult]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("order,true_class,predicted_class,count\n")
        for order, res in results.items():
            classes, conf = pooled_confusion(res)
            for i, ci in enumerate(classes):
                for j, cj in enumerate(classes):
                    fh.write(f"{order},{ci},{cj},{int(conf[i, j])}\n")


def write_report(out_dir: str | os.PathLike, results: dict[str, CVResult]) -> dict[str, str]:
    """Write report CSVs and figures into out_dir; returns name -> path."""
    if not results:
        raise ValueError("no results to report")
    out = str(out_dir)
    os.makedirs(out, exist_ok=True)
    paths = {
        "classes": os.path.join(out, "report_classes.csv"),
        "summary": os.path.join(out, "report_summary.csv"),
        "confusion": os.path.join(out, "report_confusion.csv"),
        "fscores_png": os.path.join(out, "report_fscores.png"),
        "confusion_png": os.path.join(out, "report_confusion.png"),
    }
    _write_class_rows(paths["classes"], results)
    _write_summary_rows(paths["summary"], results)
    _write_confusion_rows(paths["confusion"], results)
    _render_fscores(paths["fscores_png"], results)
    _render_confusion(paths["confusion_png"], results)
    log.info("report written to %s", out)
    return paths


def _render_fscores(path: str, results: dict[str, CVResult]) -> None:
    orders = list(results)
    pooled = {o: scores_from_confusion(*pooled_confusion(r)) for o, r in results.items()}
    classes = sorted({c for per in pooled.values() for c in per})
    x = np.arange(len(classes))
    width = 0.8 / max(1, len(orders))
    fig, ax = plt.subplots(figsize=(max(6.0, 1.0 + 0.9 * len(classes)), 4.0))
    for k, order in enumerate(orders):
        vals = [pooled[order][c].f1 if c in pooled[order] else 0.0 for c in classes]
        bars = ax.bar(x + (k - (len(orders) - 1) / 2) * width, vals, width,
                      label=f"{order} (macro {results[order].macro_f:.3f})")
        ax.bar_label(bars, fmt="%.2f", fontsize=7, padding=1)
    ax.set_xticks(x)
    ax.set_xticklabels(classes, rotation=30, ha="right")
    ax.set_ylim(0.0, 1.12)
    ax.set_ylabel("F-score (pooled over folds)")
    ax.set_title("Per-class F-score by fold ordering")
    ax.legend(loc="lower right", fontsize=8)
    ax.grid(axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def _render_confusion(path: str, results: dict[str, CVResult]) -> None:
    orders = list(results)
    fig, axes = plt.subplots(
        1, len(orders), figsize=(5.2 * len(orders), 4.6), squeeze=False
    )
    for ax, order in zip(axes[0], orders):
        classes, conf = pooled_confusion(results[order])
        # row-normalize the colors so rare classes stay visible
        denom = np.maximum(conf.sum(axis=1, keepdims=True), 1)
        ax.imshow(conf / denom, cmap="Blues", vmin=0.0, vmax=1.0)
        n = len(classes)
        for i in range(n):
            for j in range(n):
                if conf[i, j]:
                    shade = conf[i, j] / denom[i, 0]
                    ax.text(j, i, str(int(conf[i, j])), ha="center", va="center",
                            fontsize=7, color="white" if shade > 0.5 else "black")
        ax.set_xticks(range(n))
        ax.set_yticks(range(n))
        ax.set_xticklabels(classes, rotation=45, ha="right", fontsize=7)
        ax.set_yticklabels(classes, fontsize=7)
        ax.set_xlabel("predicted")
        ax.set_ylabel("true")
        ax.set_title(f"{order} ordering")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def write_importance(
    out_dir: str | os.PathLike,
    feature_names: list[str] | tuple[str, ...],
    importances: np.ndarray,
    top_k: int = 20,
) -> dict[str, str]:
    """Write a ranked feature-importance CSV plus a bar figure."""
    if len(feature_names) != len(importances):
        raise ValueError("feature_names and importances length mismatch")
    out = str(out_dir)
    os.makedirs(out, exist_ok=True)
    order = np.argsort(importances)[::-1]
    paths = {
        "importance": os.path.join(out, "report_importance.csv"),
        "importance_png": os.path.join(out, "report_importance.png"),
    }
    with open(paths["importance"], "w", encoding="utf-8") as fh:
        fh.write("rank,feature,importance\n")
        for rank, idx in enumerate(order, start=1):
            fh.write(f"{rank},{feature_names[idx]},{_fmt(float(importances[idx]))}\n")
    k = min(top_k, len(order))
    top = order[:k][::-1]  # horizontal bars read bottom-up
    fig, ax = plt.subplots(figsize=(7.0, max(3.0, 0.3 * k + 1.2)))
    ax.barh(range(k), [float(importances[i]) for i in top], color="#2f6f9f")
    ax.set_yticks(range(k))
    ax.set_yticklabels([feature_names[i] for i in top], fontsize=7)
    ax.set_xlabel("importance (normalized Gini decrease)")
    ax.set_title(f"Top {k} features")
    fig.tight_layout()
    fig.savefig(paths["importance_png"], dpi=110)
    plt.close(fig)
    return paths
