"""Confusion matrix, overall accuracy, per-class P/R/F1, mean F1, and reports.

Matrix orientation: rows are ground truth, columns are predictions, so FP for
class c is its column sum minus the diagonal and FN its row sum minus the
diagonal. Ratio conventions: any 0/0 becomes 0 so reports stay finite.
"""

from __future__ import annotations

import io
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import ContractError, DegenerateInputError, ValidationError
from .geodata import CLASS_NAMES

MEAN_F1_DEFAULT_CLASSES = (0, 1, 2, 3, 4)   # the five named classes, clutter excluded


def confusion_matrix(pred: np.ndarray, gt: np.ndarray, k: int,
                     mask: Optional[np.ndarray] = None) -> np.ndarray:
    """K x K counts over unmasked pixels; ``mask`` True means ignored."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ContractError(f"pred shape {pred.shape} != gt shape {gt.shape}")
    keep = np.ones(pred.shape, dtype=bool)
    if mask is not None:
        if mask.shape != pred.shape:
            raise ContractError(f"mask shape {mask.shape} != map shape {pred.shape}")
        keep = ~mask
    p = pred[keep].astype(np.int64)
    g = gt[keep].astype(np.int64)
    bad = ((p < 0) | (p >= k) | (g < 0) | (g >= k))
    if bad.any():
        raise ValidationError(f"class values outside [0,{k}) among evaluated pixels")
    return np.bincount(g * k + p, minlength=k * k).reshape(k, k)


def overall_accuracy(cm: np.ndarray) -> float:
    total = int(cm.sum())
    if total == 0:
        raise DegenerateInputError("overall_accuracy of an empty confusion matrix")
    return float(np.trace(cm)) / total


def class_prf(cm: np.ndarray, c: int) -> tuple[float, float, float]:
    """(precision, recall, F1) for class ``c``; 0/0 ratios are 0."""
    k = cm.shape[0]
    if not 0 <= c < k:
        raise ContractError(f"class {c} out of range [0,{k})")
    tp = float(cm[c, c])
    fp = float(cm[:, c].sum()) - tp
    fn = float(cm[c, :].sum()) - tp
    precision = tp / (tp + fp) if tp + fp > 0 else 0.0
    recall = tp / (tp + fn) if tp + fn > 0 else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return precision, recall, f1


def mean_f1_scores(f1_values: Sequence[float]) -> float:
    values = list(f1_values)
    if not values:
        raise ContractError("mean_f1 over an empty class subset")
    return float(sum(values)) / len(values)


def mean_f1(cm: np.ndarray, classes: Sequence[int] = MEAN_F1_DEFAULT_CLASSES) -> float:
    return mean_f1_scores([class_prf(cm, c)[2] for c in classes])


def boundary_ignore_mask(gt: np.ndarray, radius: int) -> np.ndarray:
    """True where a different class lies within Chebyshev distance ``radius``.

    Radius 0 ignores nothing; a two-region split with radius 1 yields a
    band one pixel wide on each side of the inter-class edge.
    """
    if radius < 0:
        raise ContractError(f"radius must be >= 0, got {radius}")
    gt = np.asarray(gt)
    mask = np.zeros(gt.shape, dtype=bool)
    if radius == 0:
        return mask
    h, w = gt.shape
    for dy in range(-radius, radius + 1):
        for dx in range(-radius, radius + 1):
            if dy == 0 and dx == 0:
                continue
            ys0, ys1 = max(0, dy), min(h, h + dy)
            yt0, yt1 = max(0, -dy), min(h, h - dy)
            xs0, xs1 = max(0, dx), min(w, w + dx)
            xt0, xt1 = max(0, -dx), min(w, w - dx)
            mask[yt0:yt1, xt0:xt1] |= gt[yt0:yt1, xt0:xt1] != gt[ys0:ys1, xs0:xs1]
    return mask


@dataclass
class TileMetrics:
    scope: str
    oa: float
    precision: list
    recall: list
    f1: list
    mean_f1: float


@dataclass
class Report:
    tiles: list                    # TileMetrics per tile, aggregate last
    class_names: tuple
    mean_f1_classes: tuple

    @property
    def aggregate(self) -> TileMetrics:
        return self.tiles[-1]


def _tile_metrics(scope: str, cm: np.ndarray, mean_classes) -> TileMetrics:
    k = cm.shape[0]
    prf = [class_prf(cm, c) for c in range(k)]
    return TileMetrics(
        scope=scope,
        oa=overall_accuracy(cm),
        precision=[p for p, _, _ in prf],
        recall=[r for _, r, _ in prf],
        f1=[f for _, _, f in prf],
        mean_f1=mean_f1(cm, mean_classes),
    )


def build_report(per_tile_cms: dict, class_names: Optional[Sequence[str]] = None,
                 mean_f1_classes: Optional[Sequence[int]] = None) -> Report:
    """Per-tile metrics plus the aggregate over the summed confusion matrix.

    Defaults adapt to the class count: the six-class problem gets the named
    palette classes and the five-class mean F1 (clutter excluded); other
    sizes fall back to generic names and the full class set.
    """
    if not per_tile_cms:
        raise ContractError("build_report with no tiles")
    k = next(iter(per_tile_cms.values())).shape[0]
    if class_names is None:
        class_names = CLASS_NAMES if k == len(CLASS_NAMES) else tuple(
            f"class{i}" for i in range(k))
    if mean_f1_classes is None:
        mean_f1_classes = MEAN_F1_DEFAULT_CLASSES if k == len(CLASS_NAMES) else tuple(range(k))
    mean_classes = tuple(mean_f1_classes)
    tiles = [_tile_metrics(f"tile:{tid}", cm, mean_classes)
             for tid, cm in sorted(per_tile_cms.items())]
    total = sum(per_tile_cms.values())
    tiles.append(_tile_metrics("aggregate", total, mean_classes))
    return Report(tiles=tiles, class_names=tuple(class_names),
                  mean_f1_classes=mean_classes)


def render_text(report: Report) -> str:
    """Aligned table: one row per scope, per-class F1 columns, OA, mean F1."""
    names = [n[:9] for n in report.class_names]
    header = ["scope".ljust(16)] + [f"F1:{n}".rjust(12) for n in names]
    header += ["OA".rjust(10), "meanF1".rjust(10)]
    lines = ["".join(header)]
    for t in report.tiles:
        row = [t.scope.ljust(16)]
        row += [f"{100 * v:.2f}".rjust(12) for v in t.f1]
        row += [f"{100 * t.oa:.2f}".rjust(10), f"{100 * t.mean_f1:.2f}".rjust(10)]
        lines.append("".join(row))
    subset = ", ".join(report.class_names[c] for c in report.mean_f1_classes)
    lines.append(f"mean F1 averages: {subset}")
    return "\n".join(lines) + "\n"


def render_csv(report: Report) -> str:
    """Schema: scope,class,precision,recall,f1,oa with a mean_f1 summary row."""
    out = io.StringIO()
    out.write("scope,class,precision,recall,f1,oa\n")
    for t in report.tiles:
        for c, name in enumerate(report.class_names):
            out.write(f"{t.scope},{name},{t.precision[c]:.6f},{t.recall[c]:.6f},"
                      f"{t.f1[c]:.6f},{t.oa:.6f}\n")
        out.write(f"{t.scope},mean_f1,,,{t.mean_f1:.6f},{t.oa:.6f}\n")
    return out.getvalue()


def parse_csv(text: str) -> dict:
    """Re-parse render_csv output: {(scope, class): (precision, recall, f1, oa)}."""
    rows = {}
    lines = text.strip().splitlines()
    if lines[0] != "scope,class,precision,recall,f1,oa":
        raise ContractError(f"unexpected CSV header {lines[0]!r}")
    for line in lines[1:]:
        scope, cls, p, r, f1, oa = line.split(",")
        rows[(scope, cls)] = (float(p) if p else None, float(r) if r else None,
                              float(f1), float(oa))
    return rows
