"""Overlap, surface distance, folding and landmark metrics."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Dict, Optional, Sequence, Tuple

import numpy as np
from scipy.spatial import cKDTree

from .errors import EmptyStructure, GeometryMismatch, LengthMismatch
from .grid import DisplacementField, LabelMap, LandmarkSet, interpolate, jacobian_det


def _check(a, b):
    if a.geom.dims != b.geom.dims:
        raise GeometryMismatch(f"{a.geom} vs {b.geom}")


def dice(a: LabelMap, b: LabelMap) -> Tuple[float, Dict[int, float]]:
    """Mean and per-label Dice over nonzero labels present in either map.
    Returns ``(nan, {})`` when neither map has a foreground label."""
    _check(a, b)
    la, lb = a.labels.ravel(), b.labels.ravel()
    labels = np.union1d(np.unique(la), np.unique(lb))
    per = {}
    for lab in labels[labels != 0]:
        ma, mb = la == lab, lb == lab
        per[int(lab)] = 2.0 * np.count_nonzero(ma & mb) / (np.count_nonzero(ma) + np.count_nonzero(mb))
    mean = float(np.mean(list(per.values()))) if per else float("nan")
    return mean, per


def boundary_mask(mask: np.ndarray) -> np.ndarray:
    """Voxels of ``mask`` with a face neighbour outside it (4-/6-connectivity);
    the grid edge counts as outside."""
    padded = np.pad(mask, 1, constant_values=False)
    inner = np.ones_like(mask)
    for axis in range(mask.ndim):
        for shift in (-1, 1):
            nb = np.roll(padded, shift, axis=axis)[tuple(slice(1, -1) for _ in range(mask.ndim))]
            inner &= nb
    return mask & ~inner


def _surface_points(mask, spacing):
    return np.argwhere(boundary_mask(mask)) * np.asarray(spacing, dtype=np.float64)


def nearest_rank(values: np.ndarray, q: float) -> float:
    """Smallest value with at least ``q`` percent of the sample at or below it."""
    v = np.sort(np.asarray(values, dtype=np.float64))
    k = int(np.ceil(q / 100.0 * v.size))
    return float(v[max(k, 1) - 1])


def hd95_label(a: LabelMap, b: LabelMap, label: int, spacing: Optional[Sequence[float]] = None) -> float:
    _check(a, b)
    spacing = a.geom.spacing if spacing is None else spacing
    pa = _surface_points(a.labels == label, spacing)
    pb = _surface_points(b.labels == label, spacing)
    if len(pa) == 0 or len(pb) == 0:
        raise EmptyStructure(f"label {label} is empty on one side")
    d_ab = cKDTree(pb).query(pa)[0]
    d_ba = cKDTree(pa).query(pb)[0]
    return nearest_rank(np.concatenate([d_ab, d_ba]), 95)


def hd95(a: LabelMap, b: LabelMap, spacing: Optional[Sequence[float]] = None,
         skipped: Optional[list] = None) -> float:
    """Mean over nonzero labels of the 95th percentile surface distance (mm).

    Labels present on only one side are skipped and appended to ``skipped``
    when a list is given; if no label is usable ``EmptyStructure`` is raised.
    """
    _check(a, b)
    labels = np.union1d(np.unique(a.labels), np.unique(b.labels))
    values = []
    for lab in labels[labels != 0]:
        try:
            values.append(hd95_label(a, b, int(lab), spacing))
        except EmptyStructure:
            if skipped is not None:
                skipped.append(int(lab))
    if not values:
        raise EmptyStructure("no label present in both maps")
    return float(np.mean(values))


def pct_neg_jac(u: DisplacementField, mask: Optional[np.ndarray] = None) -> float:
    """Percentage of voxels whose Jacobian determinant is <= 0."""
    det = jacobian_det(u).values
    if mask is not None:
        det = det[mask]
    return 100.0 * np.count_nonzero(det <= 0) / det.size


def tre(lm_fixed: LandmarkSet, lm_moving: LandmarkSet, u: DisplacementField,
        spacing: Optional[Sequence[float]] = None) -> float:
    """Mean distance (mm) between ``p_f + u(p_f)`` and the moving landmarks."""
    if len(lm_fixed) != len(lm_moving):
        raise LengthMismatch(f"{len(lm_fixed)} vs {len(lm_moving)} landmarks")
    if len(lm_fixed) == 0:
        return float("nan")
    spacing = np.asarray(u.geom.spacing if spacing is None else spacing, dtype=np.float64)
    pts = lm_fixed.points.T
    mapped = pts + interpolate(u.vectors.astype(np.float64), pts)
    diff = (mapped.T - lm_moving.points) * spacing
    return float(np.mean(np.sqrt((diff ** 2).sum(axis=1))))


def endpoint_error(u: DisplacementField, gt: DisplacementField) -> float:
    _check(u, gt)
    d = u.vectors.astype(np.float64) - gt.vectors.astype(np.float64)
    return float(np.mean(np.sqrt((d ** 2).sum(axis=0))))


REPORT_HEADER = ("dice_mean", "hd95_mm", "pct_nonpos_jac", "tre_mm", "endpoint_err_vox",
                 "dice_per_label")


@dataclass
class MetricsReport:
    """``pct_neg_jac`` counts determinants <= 0."""
    dice_mean: float
    dice_per_label: Dict[int, float]
    hd95_mm: float
    pct_neg_jac: float
    tre_mm: Optional[float] = None
    endpoint_err_vox: Optional[float] = None
    skipped_labels: list = field(default_factory=list)

    def __post_init__(self):
        for v in self.dice_per_label.values():
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"dice {v} outside [0, 1]")
        if not 0.0 <= self.pct_neg_jac <= 100.0:
            raise ValueError("percentage outside [0, 100]")

    def row(self) -> list:
        def fmt(x):
            return "" if x is None else repr(float(x))
        per = ";".join(f"{k}:{v!r}" for k, v in sorted(self.dice_per_label.items()))
        return [fmt(self.dice_mean), fmt(self.hd95_mm), fmt(self.pct_neg_jac), fmt(self.tre_mm),
                fmt(self.endpoint_err_vox), per]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(REPORT_HEADER)
        w.writerow(self.row())
        return buf.getvalue()


def evaluate(u: DisplacementField, labels_fixed: LabelMap, labels_moving: LabelMap,
             lm_fixed: Optional[LandmarkSet] = None, lm_moving: Optional[LandmarkSet] = None,
             gt: Optional[DisplacementField] = None) -> MetricsReport:
    """Metrics of a forward displacement that pulls the moving domain onto
    the fixed one."""
    from .grid import warp_labels
    warped = warp_labels(labels_moving, u)
    mean, per = dice(warped, labels_fixed)
    skipped: list = []
    try:
        hd = hd95(warped, labels_fixed, skipped=skipped)
    except EmptyStructure:
        hd = float("nan")
    t = tre(lm_fixed, lm_moving, u) if lm_fixed is not None and lm_moving is not None else None
    e = endpoint_error(u, gt) if gt is not None else None
    return MetricsReport(mean, per, hd, pct_neg_jac(u), t, e, skipped)
