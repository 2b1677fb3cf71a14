"""Segmentation and classification statistics.

Distances are between pixel centres of 4-connected inner boundaries and are
reported in millimetres. Percent-valued quantities (DSC, ACC, precision,
recall) are on a 0-100 scale in reports; the low-level classification
scores are fractions.
"""

from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
from scipy import ndimage, stats
from scipy.spatial import cKDTree

_CROSS = ndimage.generate_binary_structure(2, 1)


class UndefinedMetricError(ValueError):
    pass


class UndefinedMetricWarning(UserWarning):
    pass


def _as_mask(m) -> np.ndarray:
    return np.asarray(m).astype(bool)


def dice(a, m) -> float:
    """Dice similarity coefficient in percent."""
    a, m = _as_mask(a), _as_mask(m)
    if a.shape != m.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {m.shape}")
    total = int(a.sum()) + int(m.sum())
    if total == 0:
        raise UndefinedMetricError("DSC is undefined for two empty masks")
    return 200.0 * int(np.logical_and(a, m).sum()) / total


def plaque_area(mask, spacing: float) -> float:
    return float(_as_mask(mask).sum()) * spacing**2


def area_diff(a, m, spacing: float) -> float:
    """|PA_alg - PA_man| in mm^2."""
    return abs(int(_as_mask(a).sum()) - int(_as_mask(m).sum())) * spacing**2


@dataclass
class Contour:
    points: np.ndarray  # (N, 2) integer (row, col), row-major order
    spacing: float

    def __len__(self):
        return len(self.points)

    @property
    def coords_mm(self) -> np.ndarray:
        return self.points * self.spacing


def contour_of(mask, spacing: float = 1.0) -> Contour:
    """Mask pixels with at least one 4-neighbour outside the mask (the image
    border counts as outside)."""
    mask = _as_mask(mask)
    inner = ndimage.binary_erosion(mask, structure=_CROSS, border_value=0)
    edge = mask & ~inner
    return Contour(points=np.argwhere(edge), spacing=float(spacing))


def _directed_distances(src: Contour, dst: Contour) -> np.ndarray:
    """Distance (mm) from every point of ``src`` to the nearest point of ``dst``."""
    _, idx = cKDTree(dst.points).query(src.points, k=1)
    diff = src.points - dst.points[idx]
    # integer squared distances keep this bit-identical to any exact pairwise search
    return np.sqrt((diff * diff).sum(axis=1).astype(np.float64)) * src.spacing


def _contours(a, m, spacing) -> tuple[Contour, Contour]:
    a, m = _as_mask(a), _as_mask(m)
    if a.shape != m.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {m.shape}")
    ca, cm = contour_of(a, spacing), contour_of(m, spacing)
    if len(ca) == 0 or len(cm) == 0:
        raise UndefinedMetricError("surface distances need two non-empty contours")
    return ca, cm


def assd(a, m, spacing: float = 1.0) -> float:
    """Average symmetric surface distance in mm."""
    ca, cm = _contours(a, m, spacing)
    return 0.5 * (_mean_distance(_directed_distances(ca, cm)) + _mean_distance(_directed_distances(cm, ca)))


def _mean_distance(d: np.ndarray) -> float:
    # fsum is correctly rounded, so the result does not depend on point order;
    # the min() stops the division from rounding one ulp above the maximum,
    # which would otherwise let ASSD exceed HD when all distances are equal
    return min(math.fsum(d) / len(d), float(d.max()))


def hausdorff(a, m, spacing: float = 1.0) -> float:
    """Symmetric Hausdorff distance (strict max) in mm."""
    ca, cm = _contours(a, m, spacing)
    return float(max(_directed_distances(ca, cm).max(), _directed_distances(cm, ca).max()))


def pearson(x, y) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1 or len(x) < 2:
        raise ValueError("pearson needs two 1-D sequences of equal length >= 2")
    dx = x - x.mean()
    dy = y - y.mean()
    sxx = (dx * dx).sum()
    syy = (dy * dy).sum()
    if sxx == 0 or syy == 0:
        raise UndefinedMetricError("pearson correlation is undefined for zero variance")
    r = (dx * dy).sum() / math.sqrt(sxx * syy)
    return float(min(1.0, max(-1.0, r)))


def pearson_pvalue(r: float, n: int) -> float:
    """Two-sided p-value of r under the null of no correlation."""
    if n < 3:
        return float("nan")
    if abs(r) >= 1.0:
        return 0.0
    t = r * math.sqrt((n - 2) / (1 - r * r))
    return float(2 * stats.t.sf(abs(t), n - 2))


def f1_score(precision: float, recall: float) -> float:
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def confusion_matrix(truth, pred, num_classes: int = 3) -> np.ndarray:
    truth = np.asarray(truth, dtype=np.int64)
    pred = np.asarray(pred, dtype=np.int64)
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (truth, pred), 1)
    return cm


@dataclass
class ClassificationScores:
    matrix: np.ndarray  # rows = truth, cols = prediction
    acc: float
    precision: float
    recall: float
    f1: float
    kappa: float
    per_class_precision: np.ndarray
    per_class_recall: np.ndarray
    per_class_f1: np.ndarray


def cohen_kappa(matrix: np.ndarray) -> float:
    n = matrix.sum()
    p_o = np.trace(matrix) / n
    p_e = float((matrix.sum(axis=1) * matrix.sum(axis=0)).sum()) / n**2
    if p_e == 1.0:
        # a single class on both sides: agreement is total or absent
        return 1.0 if p_o == 1.0 else 0.0
    return float((p_o - p_e) / (1 - p_e))


def confusion_and_scores(truth, pred, num_classes: int = 3, average: str = "macro") -> ClassificationScores:
    if len(truth) != len(pred) or len(truth) == 0:
        raise ValueError("truth and pred must be non-empty and of equal length")
    if average not in ("macro", "micro"):
        raise ValueError("average must be 'macro' or 'micro'")
    cm = confusion_matrix(truth, pred, num_classes)
    tp = np.diag(cm).astype(np.float64)
    predicted = cm.sum(axis=0).astype(np.float64)
    actual = cm.sum(axis=1).astype(np.float64)
    if (predicted == 0).any():
        warnings.warn(
            f"classes {np.flatnonzero(predicted == 0).tolist()} were never predicted; their precision is set to 0",
            UndefinedMetricWarning,
            stacklevel=2,
        )
    with np.errstate(divide="ignore", invalid="ignore"):
        prec = np.where(predicted > 0, tp / predicted, 0.0)
        rec = np.where(actual > 0, tp / actual, 0.0)
    f1 = np.array([f1_score(p, r) for p, r in zip(prec, rec)])
    acc = float(tp.sum() / cm.sum())
    if average == "macro":
        precision, recall, f1_avg = float(prec.mean()), float(rec.mean()), float(f1.mean())
    else:
        # micro averages all collapse to accuracy for single-label problems
        precision = recall = f1_avg = acc
    return ClassificationScores(cm, acc, precision, recall, f1_avg, cohen_kappa(cm), prec, rec, f1)


def bland_altman(x, y) -> tuple[float, float, float]:
    """(bias, lower, upper) limits of agreement with the sample SD."""
    d = np.asarray(x, dtype=np.float64) - np.asarray(y, dtype=np.float64)
    if d.ndim != 1 or len(d) < 2:
        raise ValueError("bland_altman needs two 1-D sequences of equal length >= 2")
    bias = float(d.mean())
    sd = float(d.std(ddof=1))
    return bias, bias - 1.96 * sd, bias + 1.96 * sd


def mean_sd(values) -> dict[str, float | None]:
    v = np.asarray([x for x in values if x is not None], dtype=np.float64)
    if len(v) == 0:
        return {"mean": None, "sd": None}
    return {"mean": float(v.mean()), "sd": float(v.std(ddof=1)) if len(v) > 1 else 0.0}


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

PER_SAMPLE_FIELDS = (
    "id",
    "dsc",
    "assd_mm",
    "hd_mm",
    "d_pa_mm2",
    "pa_alg_mm2",
    "pa_man_mm2",
    "true_class",
    "pred_class",
)
SEG_KEYS = ("dsc", "assd_mm", "hd_mm", "d_pa_mm2")


@dataclass
class MetricsReport:
    per_sample: list[dict]
    aggregate: dict[str, dict[str, float | None]]
    pcc: float | None
    pcc_p: float | None
    bland_altman: dict[str, float] | None
    confusion_matrix: list[list[int]]
    acc: float
    precision_macro: float
    recall_macro: float
    f1_macro: float
    kappa: float
    n_samples: int
    n_distance_excluded: int = 0
    notes: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def write(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_json())

    def write_per_sample_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=PER_SAMPLE_FIELDS, lineterminator="\n")
            writer.writeheader()
            for row in self.per_sample:
                writer.writerow({k: ("" if row[k] is None else row[k]) for k in PER_SAMPLE_FIELDS})

    def summary(self) -> str:
        agg = self.aggregate
        return (
            f"DSC {agg['dsc']['mean']:.2f}% ASSD {_fmt(agg['assd_mm']['mean'])} mm "
            f"HD {_fmt(agg['hd_mm']['mean'])} mm |dPA| {agg['d_pa_mm2']['mean']:.3f} mm2 "
            f"ACC {self.acc:.2f}% F1 {self.f1_macro:.3f} kappa {self.kappa:.3f}"
        )


def _fmt(v) -> str:
    return "n/a" if v is None else f"{v:.3f}"


def segmentation_row(sample_id: str, pred_mask, true_mask, spacing: float) -> dict:
    """Per-sample segmentation metrics; an empty prediction gets DSC 0 and
    undefined surface distances."""
    pred_mask, true_mask = _as_mask(pred_mask), _as_mask(true_mask)
    pa_alg = plaque_area(pred_mask, spacing)
    pa_man = plaque_area(true_mask, spacing)
    row = {
        "id": sample_id,
        "dsc": dice(pred_mask, true_mask) if (pred_mask.any() or true_mask.any()) else 100.0,
        "assd_mm": None,
        "hd_mm": None,
        "d_pa_mm2": area_diff(pred_mask, true_mask, spacing),
        "pa_alg_mm2": pa_alg,
        "pa_man_mm2": pa_man,
    }
    if pred_mask.any() and true_mask.any():
        row["assd_mm"] = assd(pred_mask, true_mask, spacing)
        row["hd_mm"] = hausdorff(pred_mask, true_mask, spacing)
    return row


def build_report(
    ids: Sequence[str],
    pred_masks,
    true_masks,
    spacings: Sequence[float],
    pred_labels,
    true_labels,
    average: str = "macro",
) -> MetricsReport:
    n = len(ids)
    if n == 0:
        raise ValueError("cannot build a report from zero samples")
    if not (len(pred_masks) == len(true_masks) == len(spacings) == len(pred_labels) == len(true_labels) == n):
        raise ValueError("report inputs differ in length")
    rows = []
    for sid, pm, tm, sp, pl, tl in zip(ids, pred_masks, true_masks, spacings, pred_labels, true_labels):
        row = segmentation_row(sid, pm, tm, sp)
        row["true_class"] = int(tl)
        row["pred_class"] = int(pl)
        rows.append(row)
    rows.sort(key=lambda r: r["id"])
    excluded = sum(r["assd_mm"] is None for r in rows)
    aggregate = {k: mean_sd(r[k] for r in rows) for k in SEG_KEYS}

    pa_alg = [r["pa_alg_mm2"] for r in rows]
    pa_man = [r["pa_man_mm2"] for r in rows]
    notes = []
    try:
        pcc = pearson(pa_alg, pa_man)
        pcc_p = pearson_pvalue(pcc, n)
    except (ValueError, UndefinedMetricError) as exc:
        pcc = pcc_p = None
        notes.append(f"pcc undefined: {exc}")
    ba = None
    if n >= 2:
        bias, lo, hi = bland_altman(pa_alg, pa_man)
        ba = {"bias": bias, "lo": lo, "hi": hi}
    if excluded:
        notes.append(f"{excluded} samples with empty predictions excluded from ASSD/HD")

    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", UndefinedMetricWarning)
        scores = confusion_and_scores([r["true_class"] for r in rows], [r["pred_class"] for r in rows], average=average)
    notes.extend(str(w.message) for w in caught)
    return MetricsReport(
        per_sample=rows,
        aggregate=aggregate,
        pcc=pcc,
        pcc_p=pcc_p,
        bland_altman=ba,
        confusion_matrix=scores.matrix.tolist(),
        acc=100.0 * scores.acc,
        precision_macro=100.0 * scores.precision,
        recall_macro=100.0 * scores.recall,
        f1_macro=scores.f1,
        kappa=scores.kappa,
        n_samples=n,
        n_distance_excluded=excluded,
        notes=notes,
    )
