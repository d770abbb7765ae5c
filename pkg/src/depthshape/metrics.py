"""Depth evaluation metrics: AbsRel, delta1, WHDR, LSIV, DBE and PE."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from typing import NamedTuple

import numpy as np
from scipy import ndimage

from .errors import DegenerateInputError, DomainError, EmptyInputError
from .geometry import CameraIntrinsics, DepthMap, unproject_grid
from .losses import EPS, align_scale_shift, ordinal_labels
from .sampling import PointPairSet, detect_edges

__all__ = [
    "MetricReport",
    "DepthBoundaryError",
    "PlanarityError",
    "absrel",
    "delta1",
    "whdr",
    "lsiv",
    "dbe",
    "pe",
    "fit_plane",
    "evaluate",
]

DBE_CAP = 10.0


@dataclass
class MetricReport:
    """Metric values for one image; ``None`` means the metric is absent."""

    absrel: float | None = None
    delta1: float | None = None
    whdr: float | None = None
    lsiv: float | None = None
    dbe_acc: float | None = None
    dbe_comp: float | None = None
    pe_plan: float | None = None
    pe_orie: float | None = None

    def present(self) -> dict[str, bool]:
        return {f.name: getattr(self, f.name) is not None for f in fields(self)}

    def to_record(self) -> dict[str, float | None]:
        return asdict(self)


class DepthBoundaryError(NamedTuple):
    acc: float | None
    comp: float | None


class PlanarityError(NamedTuple):
    plan: float | None
    orie: float | None
    skipped: int


def _eval_pixels(pred: DepthMap, gt: DepthMap, prealign: bool, scale_only: bool = False) -> tuple[np.ndarray, np.ndarray]:
    if pred.shape != gt.shape:
        raise DomainError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    mask = pred.mask & gt.mask & (gt.values > 0)
    if not mask.any():
        raise EmptyInputError("no common valid pixels with positive ground truth")
    d, g = pred.values[mask], gt.values[mask]
    if scale_only:
        dd = np.dot(d, d)
        if dd == 0.0:
            raise DegenerateInputError("cannot scale-align an all-zero prediction")
        d = d * (np.dot(d, g) / dd)
    elif prealign:
        a = align_scale_shift(pred.with_mask(mask), gt.with_mask(mask))
        d = a.scale * d + a.shift
    return d, g


def absrel(pred: DepthMap, gt: DepthMap, prealign: bool = True, *, scale_only: bool = False) -> float:
    """Mean ``|d - g| / g`` after scale-and-shift alignment (or scale only, or none)."""
    d, g = _eval_pixels(pred, gt, prealign, scale_only)
    return float(np.mean(np.abs(d - g) / g))


def delta1(pred: DepthMap, gt: DepthMap, prealign: bool = True, threshold: float = 1.25) -> float:
    d, g = _eval_pixels(pred, gt, prealign)
    d = np.maximum(d, EPS)
    return float(np.mean(np.maximum(d / g, g / d) < threshold))


def whdr(pred: DepthMap, gt: DepthMap, pairs: PointPairSet, tau: float = 0.02) -> float:
    """Fraction of ordinal pairs whose predicted ordering disagrees with ground truth.

    Ground-truth relations come from depth ratios with tolerance ``tau``;
    pairs the ground truth deems equal are not scored. The predicted relation
    is the plain ordering of the two predicted values, which keeps the metric
    invariant to any strictly increasing transform of the prediction.
    """
    if len(pairs) == 0:
        raise EmptyInputError("pair set is empty")
    if tau <= 0:
        raise DomainError("tau must be positive")
    pairs.check_bounds(gt.shape, pred.mask & gt.mask)
    va, ua, vb, ub = pairs.rows_cols()
    ga, gb = gt.values[va, ua], gt.values[vb, ub]
    usable = (ga > 0) & (gb > 0)
    label = np.where(usable, ordinal_labels(np.where(usable, ga, 1.0), np.where(usable, gb, 1.0), tau), 0)
    scored = label != 0
    if not scored.any():
        raise EmptyInputError("no pair has a strict ground-truth ordering")
    pred_order = np.sign(pred.values[va, ua] - pred.values[vb, ub])
    return float(np.mean(pred_order[scored] != label[scored]))


def lsiv(pred: DepthMap, gt: DepthMap, regions: list[np.ndarray] | None = None, *, return_skipped: bool = False):
    """Mean over regions of the RMSE after a per-region least-squares scale fit.

    ``regions`` defaults to the whole image. Regions where the prediction is
    identically zero cannot be scaled and are skipped.
    """
    if pred.shape != gt.shape:
        raise DomainError("shape mismatch")
    base = pred.mask & gt.mask
    if regions is None:
        regions = [np.ones(pred.shape, dtype=bool)]
    errors, skipped = [], 0
    for region in regions:
        m = base & np.asarray(region, dtype=bool)
        if not m.any():
            raise EmptyInputError("LSIV region has no valid pixels")
        d, g = pred.values[m], gt.values[m]
        dd = np.dot(d, d)
        if dd == 0.0:
            skipped += 1
            continue
        s = np.dot(d, g) / dd
        errors.append(math.sqrt(np.mean((s * d - g) ** 2)))
    if not errors:
        raise EmptyInputError("every LSIV region was skipped")
    value = float(np.mean(errors))
    return (value, skipped) if return_skipped else value


def dbe(
    pred: DepthMap,
    gt: DepthMap,
    *,
    cap: float = DBE_CAP,
    threshold: float = 0.05,
    prealign: bool = False,
) -> DepthBoundaryError:
    """Truncated chamfer distances between predicted and ground-truth depth edges.

    ``acc`` averages, over predicted edge pixels, the distance to the nearest
    ground-truth edge; ``comp`` the reverse. Distances are capped at ``cap``
    pixels. Both are None when the ground truth has no edges; ``acc`` is None
    when the prediction has none.
    """
    if pred.shape != gt.shape:
        raise DomainError("shape mismatch")
    if prealign:
        pred = align_scale_shift(pred, gt).apply(pred)
    e_gt = detect_edges(gt, threshold)
    e_pred = detect_edges(pred, threshold)
    if not e_gt.any():
        return DepthBoundaryError(None, None)
    dist_to_gt = np.minimum(ndimage.distance_transform_edt(~e_gt), cap)
    acc = float(dist_to_gt[e_pred].mean()) if e_pred.any() else None
    if e_pred.any():
        dist_to_pred = np.minimum(ndimage.distance_transform_edt(~e_pred), cap)
        comp = float(dist_to_pred[e_gt].mean())
    else:
        comp = float(cap)
    return DepthBoundaryError(acc, comp)


def fit_plane(points: np.ndarray) -> tuple[np.ndarray, float]:
    """Total-least-squares plane through ``points``: (unit normal, RMS distance)."""
    centered = points - points.mean(axis=0)
    _, s, vt = np.linalg.svd(centered, full_matrices=False)
    normal = vt[-1]
    rms = s[-1] / math.sqrt(len(points)) if len(s) == 3 else 0.0
    return normal, float(rms)


def pe(
    pred: DepthMap,
    gt: DepthMap,
    cam: CameraIntrinsics,
    plane_masks: list[np.ndarray],
    *,
    prealign: bool = True,
) -> PlanarityError:
    """Flatness (RMS distance to the fitted plane) and orientation error in degrees.

    Each mask selects a region that is planar in the ground truth. The
    prediction (scale-and-shift aligned unless ``prealign`` is False) is
    unprojected, a plane is fitted per mask, and both errors are averaged over
    masks. Masks with fewer than three usable points are skipped.
    """
    if pred.shape != gt.shape:
        raise DomainError("shape mismatch")
    if prealign:
        pred = align_scale_shift(pred, gt).apply(pred)
    p_pts, g_pts = unproject_grid(pred, cam), unproject_grid(gt, cam)
    base = pred.mask & gt.mask
    plan, orie, skipped = [], [], 0
    for mask in plane_masks:
        m = base & np.asarray(mask, dtype=bool)
        if m.sum() < 3:
            skipped += 1
            continue
        n_pred, rms = fit_plane(p_pts[m])
        n_gt, _ = fit_plane(g_pts[m])
        cos = min(abs(float(np.dot(n_pred, n_gt))), 1.0)
        plan.append(rms)
        orie.append(math.degrees(math.acos(cos)))
    if not plan:
        return PlanarityError(None, None, skipped)
    return PlanarityError(float(np.mean(plan)), float(np.mean(orie)), skipped)


ALL_METRICS = ("absrel", "delta1", "whdr", "lsiv", "dbe", "pe")


def evaluate(
    pred: DepthMap,
    gt: DepthMap,
    metrics=ALL_METRICS,
    *,
    pairs: PointPairSet | None = None,
    cam: CameraIntrinsics | None = None,
    plane_masks: list[np.ndarray] | None = None,
    regions: list[np.ndarray] | None = None,
) -> MetricReport:
    """Compute the selected metrics into one report.

    WHDR needs ``pairs``; PE needs ``cam`` and ``plane_masks``. Metrics whose
    inputs are missing are left absent.
    """
    unknown = set(metrics) - set(ALL_METRICS)
    if unknown:
        raise DomainError(f"unknown metrics: {sorted(unknown)}")
    report = MetricReport()
    if "absrel" in metrics:
        report.absrel = absrel(pred, gt)
    if "delta1" in metrics:
        report.delta1 = delta1(pred, gt)
    if "whdr" in metrics and pairs is not None and len(pairs):
        report.whdr = whdr(pred, gt, pairs)
    if "lsiv" in metrics:
        report.lsiv = lsiv(pred, gt, regions)
    if "dbe" in metrics:
        report.dbe_acc, report.dbe_comp = dbe(pred, gt)
    if "pe" in metrics and cam is not None and plane_masks:
        res = pe(pred, gt, cam, plane_masks)
        report.pe_plan, report.pe_orie = res.plan, res.orie
    return report
