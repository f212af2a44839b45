"""Confusion-matrix metrics and the all-subsets evaluation protocol."""

from __future__ import annotations

import csv
import io
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch

from .data import ModalitySample, Registry, restrict
from .model import MagicNet

METRICS = ("iou", "f1", "acc")


class EmptyReportError(ValueError):
    """Nothing was evaluated, so no metric is defined."""


def new_confusion(classes: int) -> np.ndarray:
    return np.zeros((classes, classes), dtype=np.int64)


def accumulate(cm: np.ndarray, pred, label) -> np.ndarray:
    """Add one image to ``cm``; ``cm[true, pred]`` counts pixels."""
    pred = np.asarray(pred).astype(np.int64)
    label = np.asarray(label).astype(np.int64)
    if pred.shape != label.shape:
        raise ValueError(f"prediction {pred.shape} and label {label.shape} differ in shape")
    K = cm.shape[0]
    if pred.size and (pred.min() < 0 or pred.max() >= K or label.min() < 0 or label.max() >= K):
        raise ValueError(f"class ids outside [0, {K})")
    return cm + np.bincount(label.ravel() * K + pred.ravel(), minlength=K * K).reshape(K, K)


@dataclass
class Metrics:
    iou: np.ndarray
    f1: np.ndarray
    acc: np.ndarray
    defined: np.ndarray  # classes present in prediction or ground truth
    pixel_acc: float
    miou: float
    mf1: float
    macc: float

    def mean(self, metric: str) -> float:
        return {"iou": self.miou, "f1": self.mf1, "acc": self.macc}[metric]


def metrics(cm: np.ndarray) -> Metrics:
    cm = np.asarray(cm, dtype=np.int64)
    total = cm.sum()
    if total == 0:
        raise EmptyReportError("confusion matrix is empty")
    tp = np.diag(cm).astype(np.float64)
    fp = cm.sum(axis=0) - tp
    fn = cm.sum(axis=1) - tp
    union = tp + fp + fn
    defined = union > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        iou = np.where(defined, tp / union, np.nan)
        precision = np.where(tp + fp > 0, tp / (tp + fp), 0.0)
        recall = np.where(tp + fn > 0, tp / (tp + fn), 0.0)
        pr = precision + recall
        f1 = np.where(defined, np.where(pr > 0, 2 * precision * recall / np.where(pr > 0, pr, 1), 0.0), np.nan)
        # per-class accuracy is recall; a class predicted but absent from GT counts as 0
        acc = np.where(defined, recall, np.nan)
    return Metrics(iou, f1, acc, defined, float(tp.sum() / total),
                   float(np.mean(iou[defined])), float(np.mean(f1[defined])), float(np.mean(acc[defined])))


# --------------------------------------------------------------------------- subset protocol


@dataclass
class SubsetRow:
    subset: tuple[str, ...]
    label: str
    confusion: np.ndarray
    metrics: Metrics


@dataclass
class SubsetReport:
    classes: int
    registry: Registry
    rows: list[SubsetRow] = field(default_factory=list)

    def mean_over_subsets(self, metric: str = "iou") -> float:
        if not self.rows:
            raise EmptyReportError("report has no rows")
        return float(np.mean([r.metrics.mean(metric) for r in self.rows]))

    def row(self, label: str) -> SubsetRow:
        for r in self.rows:
            if r.label == label:
                return r
        raise KeyError(label)


def _threads() -> int:
    raw = os.environ.get("MAGIC_THREADS")
    if raw:
        try:
            return max(1, int(raw))
        except ValueError:
            pass
    return os.cpu_count() or 1


def confusion_for(model: MagicNet, dataset: Sequence[ModalitySample], subset: Sequence[str]) -> np.ndarray:
    cm = new_confusion(model.config.classes)
    for sample in dataset:
        part = restrict(sample, subset, model.registry)
        pred = model.predict(part.modalities)
        cm = accumulate(cm, pred.numpy(), sample.label)
    return cm


def evaluate(model: MagicNet, dataset: Sequence[ModalitySample], subset: Sequence[str] | None = None) -> Metrics:
    """Plain evaluation on one modality combination (all modalities by default)."""
    subset = model.registry.names if subset is None else subset
    return metrics(confusion_for(model, dataset, subset))


def evaluate_subsets(model: MagicNet, dataset: Sequence[ModalitySample],
                     subsets: Iterable[Sequence[str]] | None = None) -> SubsetReport:
    reg = model.registry
    if subsets is None:
        subsets = reg.all_subsets()
    resolved = []
    for s in subsets:
        s = tuple(s)
        if not s:
            raise ValueError("empty modality subset")
        try:
            resolved.append(reg.ordered(s))
        except KeyError as exc:
            raise ValueError(f"subset {s} is not within the training modalities {reg.names}") from exc
    if not dataset:
        raise EmptyReportError("dataset is empty")
    model.eval()
    workers = min(_threads(), len(resolved))
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            cms = list(pool.map(lambda s: confusion_for(model, dataset, s), resolved))
    else:
        cms = [confusion_for(model, dataset, s) for s in resolved]
    report = SubsetReport(model.config.classes, reg)
    for s, cm in zip(resolved, cms):
        report.rows.append(SubsetRow(s, reg.subset_string(s), cm, metrics(cm)))
    return report


# --------------------------------------------------------------------------- report files


def report_columns(classes: int) -> list[str]:
    cols = ["subset"]
    for m in METRICS:
        cols += [f"{m}_{k}" for k in range(classes)]
    cols += ["mIoU", "mF1", "mAcc", "pixel_acc", "undefined_classes"]
    return cols


def _num(x: float) -> str:
    return "nan" if np.isnan(x) else f"{x:.9g}"


def report_csv(report: SubsetReport) -> str:
    buf = io.StringIO()
    buf.write("# per-class acc = TP/(TP+FN); undefined classes (absent in GT and prediction) excluded from means\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(report_columns(report.classes))
    for r in report.rows:
        m = r.metrics
        vals = [r.label]
        for name in METRICS:
            vals += [_num(v) for v in getattr(m, name)]
        vals += [_num(m.miou), _num(m.mf1), _num(m.macc), _num(m.pixel_acc)]
        vals.append(";".join(str(k) for k in np.flatnonzero(~m.defined)))
        w.writerow(vals)
    return buf.getvalue()


def report_text(report: SubsetReport) -> str:
    """Table with one column per subset plus the mean, metrics as rows, in percent."""
    labels = [r.label for r in report.rows] + ["Mean"]
    width = max(7, *(len(l) for l in labels)) + 1
    lines = ["Metric".ljust(8) + "".join(l.rjust(width) for l in labels)]
    for metric, title in (("iou", "mIoU"), ("f1", "mF1"), ("acc", "mAcc")):
        vals = [r.metrics.mean(metric) for r in report.rows] + [report.mean_over_subsets(metric)]
        lines.append(title.ljust(8) + "".join(f"{100 * v:.2f}".rjust(width) for v in vals))
    return "\n".join(lines) + "\n"


def emit_report(report: SubsetReport, path: str | Path) -> tuple[Path, Path]:
    """Write ``path`` (CSV) and a sibling ``.txt`` summary table."""
    if not report.rows:
        raise EmptyReportError("report has no rows")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(report_csv(report), encoding="utf-8")
    txt = path.with_suffix(".txt")
    txt.write_text(report_text(report), encoding="utf-8")
    return path, txt


@dataclass
class ParsedRow:
    subset: str
    values: dict[str, float]
    undefined: tuple[int, ...]


def parse_report_csv(path: str | Path) -> list[ParsedRow]:
    lines = [l for l in Path(path).read_text(encoding="utf-8").splitlines() if not l.startswith("#")]
    rows = []
    for rec in csv.DictReader(lines):
        und = tuple(int(k) for k in rec.pop("undefined_classes").split(";") if k)
        subset = rec.pop("subset")
        rows.append(ParsedRow(subset, {k: float(v) for k, v in rec.items()}, und))
    return rows
