"""Confusion matrix and the three evaluation measures: OA, AA, Kappa."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, LabelError, MetricError


@dataclass
class ConfusionMatrix:
    """counts[truth][prediction] over 0-based class indices."""

    counts: np.ndarray

    @property
    def num_classes(self) -> int:
        return self.counts.shape[0]


def confusion(preds, truths, num_classes: int) -> ConfusionMatrix:
    preds = np.asarray(preds, dtype=np.int64)
    truths = np.asarray(truths, dtype=np.int64)
    if preds.shape != truths.shape or preds.ndim != 1:
        raise ContractError(f"preds and truths must be equal-length vectors, got {preds.shape} and {truths.shape}")
    for name, values in (("preds", preds), ("truths", truths)):
        if values.size and (values.min() < 0 or values.max() >= num_classes):
            raise LabelError(f"{name} must lie in [0, {num_classes})")
    counts = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(counts, (truths, preds), 1)
    return ConfusionMatrix(counts=counts)


@dataclass(frozen=True)
class MetricsResult:
    oa: float
    aa: float
    kappa: float
    skipped_classes: int  # classes with no truth samples, excluded from AA
    per_class: tuple[float, ...]  # recall per class, nan where unpopulated


def metrics(cm: ConfusionMatrix) -> MetricsResult:
    counts = cm.counts.astype(np.float64)
    total = counts.sum()
    if total <= 0:
        raise MetricError("empty confusion matrix")
    oa = np.trace(counts) / total
    truth_pop = counts.sum(axis=1)
    populated = truth_pop > 0
    recalls = np.full(cm.num_classes, np.nan)
    recalls[populated] = np.diag(counts)[populated] / truth_pop[populated]
    aa = float(recalls[populated].mean())
    pred_pop = counts.sum(axis=0)
    p_expected = float((truth_pop * pred_pop).sum() / (total * total))
    if p_expected == 1.0:
        if oa == 1.0:
            kappa = 1.0
        else:
            raise MetricError("chance agreement is 1 but observed agreement is not")
    else:
        kappa = float((oa - p_expected) / (1.0 - p_expected))
    return MetricsResult(
        oa=float(oa),
        aa=aa,
        kappa=kappa,
        skipped_classes=int((~populated).sum()),
        per_class=tuple(recalls),
    )


def format_report(cm: ConfusionMatrix, result: MetricsResult) -> str:
    """Plain-text table of per-class accuracy plus the three summary scores."""
    lines = ["class  correct    total  accuracy"]
    diag = np.diag(cm.counts)
    pop = cm.counts.sum(axis=1)
    for c in range(cm.num_classes):
        accuracy = "   --" if pop[c] == 0 else f"{diag[c] / pop[c]:8.4f}"
        lines.append(f"{c + 1:5d}  {diag[c]:7d}  {pop[c]:7d}  {accuracy}")
    lines.append("")
    lines.append(f"OA    {result.oa:.6f}")
    lines.append(f"AA    {result.aa:.6f}  (skipped {result.skipped_classes} empty classes)")
    lines.append(f"Kappa {result.kappa:.6f}")
    return "\n".join(lines) + "\n"


def write_confusion_csv(cm: ConfusionMatrix, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["truth\\pred"] + [str(c + 1) for c in range(cm.num_classes)])
        for c in range(cm.num_classes):
            writer.writerow([str(c + 1)] + [str(int(v)) for v in cm.counts[c]])
