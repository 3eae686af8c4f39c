"""Segmentation evaluation: overlap and surface-distance metrics per class.

Surfaces are the class voxels with at least one six-neighbor outside the
class (the volume border counts as outside); distances are measured between
surface voxel centers in millimeters. The Hausdorff distance is the exact
maximum of the two directed maxima, and the average surface distance is the
mean of the two directed means.
"""
from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .errors import UndefinedMetricError
from .volume import CLASS_NAMES, LabelVolume, ProbabilityVolume, require_same_geometry

FOREGROUND_CLASSES = (1, 2, 3)


def dice(pred: LabelVolume, gt: LabelVolume, class_id: int) -> float:
    """2|P∩G| / (|P|+|G|); 1.0 when both sets are empty, 0.0 when one is."""
    require_same_geometry(pred, gt)
    p = pred.data == class_id
    g = gt.data == class_id
    np_, ng = int(p.sum()), int(g.sum())
    if np_ == 0 and ng == 0:
        return 1.0
    return 2.0 * int((p & g).sum()) / (np_ + ng)


def jaccard(pred: LabelVolume, gt: LabelVolume, class_id: int) -> float:
    """|P∩G| / |P∪G|; empty-set conventions as dice."""
    require_same_geometry(pred, gt)
    p = pred.data == class_id
    g = gt.data == class_id
    union = int((p | g).sum())
    if union == 0:
        return 1.0
    return int((p & g).sum()) / union


def soft_dice_loss(prob: ProbabilityVolume, target: LabelVolume,
                   class_id: int | None = None) -> float:
    """1 - 2*sum(y*yhat) / (sum(y^2) + sum(yhat^2)) with one-hot targets.

    `class_id` selects one channel; None averages the loss over the
    foreground channels (1..C-1).
    """
    require_same_geometry(prob, target)
    if class_id is None:
        classes = range(1, prob.num_classes)
        return float(np.mean([soft_dice_loss(prob, target, c) for c in classes]))
    y = prob.channels[class_id].astype(np.float64)
    yhat = (target.data == class_id).astype(np.float64)
    denom = (y ** 2).sum() + (yhat ** 2).sum()
    if denom == 0:
        return 0.0
    return float(1.0 - 2.0 * (y * yhat).sum() / denom)


def _surface_points(mask: np.ndarray, spacing) -> np.ndarray:
    """Surface voxel centers (mm): class voxels with a 6-neighbor outside."""
    structure = ndimage.generate_binary_structure(3, 1)
    eroded = ndimage.binary_erosion(mask, structure=structure, border_value=0)
    surf = mask & ~eroded
    return np.argwhere(surf) * np.asarray(spacing)


def surface_distances(pred: LabelVolume, gt: LabelVolume,
                      class_id: int) -> tuple[float, float]:
    """(average surface distance, Hausdorff distance) in mm for one class."""
    require_same_geometry(pred, gt)
    p_pts = _surface_points(pred.data == class_id, pred.spacing)
    g_pts = _surface_points(gt.data == class_id, gt.spacing)
    if len(p_pts) == 0 or len(g_pts) == 0:
        raise UndefinedMetricError(
            f"class {class_id} is empty in {'prediction' if len(p_pts) == 0 else 'ground truth'}"
        )
    d_pg = cKDTree(g_pts).query(p_pts)[0]
    d_gp = cKDTree(p_pts).query(g_pts)[0]
    asd = (float(d_pg.mean()) + float(d_gp.mean())) / 2.0
    hausdorff = max(float(d_pg.max()), float(d_gp.max()))
    return asd, hausdorff


@dataclass(frozen=True)
class ClassMetrics:
    dice: float
    jaccard: float
    asd_mm: float | None
    hausdorff_mm: float | None


@dataclass(frozen=True)
class EvaluationReport:
    per_class: dict[int, ClassMetrics]

    def average(self, name: str) -> float | None:
        vals = [getattr(m, name) for m in self.per_class.values()]
        if any(v is None for v in vals):
            return None
        return float(np.mean(vals))

    def to_csv(self) -> str:
        def fmt(v):
            return "NA" if v is None else f"{v:.6f}"

        buf = io.StringIO()
        buf.write("class,dice,jaccard,asd_mm,hd_mm\n")
        for cls in FOREGROUND_CLASSES:
            m = self.per_class[cls]
            buf.write(f"{CLASS_NAMES[cls]},{fmt(m.dice)},{fmt(m.jaccard)},"
                      f"{fmt(m.asd_mm)},{fmt(m.hausdorff_mm)}\n")
        buf.write(f"average,{fmt(self.average('dice'))},{fmt(self.average('jaccard'))},"
                  f"{fmt(self.average('asd_mm'))},{fmt(self.average('hausdorff_mm'))}\n")
        return buf.getvalue()

    def to_table(self) -> str:
        def fmt(v, prec):
            return "NA" if v is None else f"{v:.{prec}f}"

        rows = [
            ("Metric", "LV Cavity", "LV Myocardium", "RV Cavity", "Average"),
            ("Dice", *(fmt(self.per_class[c].dice, 3) for c in FOREGROUND_CLASSES),
             fmt(self.average("dice"), 3)),
            ("Jaccard", *(fmt(self.per_class[c].jaccard, 3) for c in FOREGROUND_CLASSES),
             fmt(self.average("jaccard"), 3)),
            ("Surface distance [mm]",
             *(fmt(self.per_class[c].asd_mm, 2) for c in FOREGROUND_CLASSES),
             fmt(self.average("asd_mm"), 2)),
            ("Hausdorff distance [mm]",
             *(fmt(self.per_class[c].hausdorff_mm, 2) for c in FOREGROUND_CLASSES),
             fmt(self.average("hausdorff_mm"), 2)),
        ]
        widths = [max(len(r[i]) for r in rows) for i in range(5)]
        lines = []
        for r in rows:
            lines.append(" | ".join(c.ljust(w) for c, w in zip(r, widths)))
        lines.insert(1, "-+-".join("-" * w for w in widths))
        return "\n".join(lines)


def evaluate(pred: LabelVolume, gt: LabelVolume) -> EvaluationReport:
    """All four metrics for the three foreground classes plus averages.

    Undefined surface distances (a class empty on either side) are reported
    as missing entries, not as zeros.
    """
    require_same_geometry(pred, gt)
    per_class = {}
    for cls in FOREGROUND_CLASSES:
        try:
            asd, hd = surface_distances(pred, gt, cls)
        except UndefinedMetricError:
            asd = hd = None
        per_class[cls] = ClassMetrics(
            dice=dice(pred, gt, cls),
            jaccard=jaccard(pred, gt, cls),
            asd_mm=asd,
            hausdorff_mm=hd,
        )
    return EvaluationReport(per_class)
