"""Depth training losses as plain numerical routines.

Includes the image-level normalised regression loss (trimmed z-score plus a
tanh-compressed term), the pair-wise normal loss, the multi-scale gradient
loss, the ordinal ranking loss, their weighted combination, and the rival
normalisations (min-max, z-score, MAD) used for comparison.

All two-map operations combine validity masks by intersection.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import DegenerateInputError, DomainError, EmptyInputError
from .geometry import CameraIntrinsics, DepthMap, NormalMap, estimate_normals
from .sampling import PointPairSet

__all__ = [
    "EPS",
    "TrimmedStats",
    "AlignmentParams",
    "LossWeights",
    "trimmed_stats",
    "ilnr_normalize",
    "normalize_minmax",
    "normalize_zscore",
    "normalize_mad",
    "ilnr_loss",
    "align_scale_shift",
    "pwn_loss",
    "msg_loss",
    "ranking_terms",
    "ranking_loss",
    "ordinal_labels",
    "overall_loss",
]

EPS = 1e-6
TRIM_FRACTION = 0.1


@dataclass(frozen=True)
class TrimmedStats:
    mu_trim: float
    sigma_trim: float
    kept_count: int


@dataclass(frozen=True)
class AlignmentParams:
    scale: float
    shift: float

    def apply(self, depth: DepthMap) -> DepthMap:
        return depth.with_values(self.scale * depth.values + self.shift)


@dataclass(frozen=True)
class LossWeights:
    """Weights of the combined loss; the normal term always has unit weight by default."""

    lambda_a: float = 1.0
    lambda_g: float = 0.5
    lambda_pwn: float = 1.0


def _common_mask(a: DepthMap, b: DepthMap) -> np.ndarray:
    if a.shape != b.shape:
        raise DomainError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a.mask & b.mask


def trimmed_stats(depth: DepthMap, fraction: float = TRIM_FRACTION) -> TrimmedStats:
    """Mean and standard deviation after dropping floor(fraction * N) values from each end."""
    vals = np.sort(depth.valid_values())
    n = vals.size
    if n == 0:
        raise EmptyInputError("depth map has no valid pixels")
    k = int(np.floor(fraction * n))
    kept = vals[k : n - k]
    return TrimmedStats(float(kept.mean()), float(kept.std()), int(kept.size))


def ilnr_normalize(depth_gt: DepthMap) -> DepthMap:
    st = trimmed_stats(depth_gt)
    return depth_gt.with_values((depth_gt.values - st.mu_trim) / max(st.sigma_trim, EPS))


def normalize_minmax(depth: DepthMap) -> DepthMap:
    vals = depth.valid_values()
    if vals.size == 0:
        raise EmptyInputError("depth map has no valid pixels")
    lo, hi = vals.min(), vals.max()
    if hi <= lo:
        raise DegenerateInputError("min-max normalisation of a constant map")
    return depth.with_values((depth.values - lo) / (hi - lo))


def normalize_zscore(depth: DepthMap) -> DepthMap:
    vals = depth.valid_values()
    if vals.size == 0:
        raise EmptyInputError("depth map has no valid pixels")
    return depth.with_values((depth.values - vals.mean()) / max(vals.std(), EPS))


def normalize_mad(depth: DepthMap) -> DepthMap:
    """Centre on the median and divide by the (unscaled) median absolute deviation."""
    vals = depth.valid_values()
    if vals.size == 0:
        raise EmptyInputError("depth map has no valid pixels")
    med = np.median(vals)
    mad = np.median(np.abs(vals - med))
    return depth.with_values((depth.values - med) / max(mad, EPS))


NORMALIZERS: dict[str, Callable[[DepthMap], DepthMap]] = {
    "trimmed": ilnr_normalize,
    "minmax": normalize_minmax,
    "zscore": normalize_zscore,
    "mad": normalize_mad,
}


def ilnr_loss(pred: DepthMap, gt: DepthMap, normalizer: str = "trimmed") -> float:
    """Mean of ``|d - g| + |tanh(d/100) - tanh(g/100)|`` with ``g`` the normalised ground truth.

    The ground truth is normalised with its own statistics (all of its valid
    pixels); the average runs over the pixels valid in both maps.
    ``normalizer`` selects the ablation variants: "trimmed" (default),
    "minmax", "zscore" or "mad".
    """
    mask = _common_mask(pred, gt)
    if not mask.any():
        raise EmptyInputError("prediction and ground truth share no valid pixels")
    g = NORMALIZERS[normalizer](gt).values[mask]
    d = pred.values[mask]
    terms = np.abs(d - g) + np.abs(np.tanh(d / 100.0) - np.tanh(g / 100.0))
    return float(terms.mean())


def align_scale_shift(pred: DepthMap, gt: DepthMap) -> AlignmentParams:
    """Least-squares (scale, shift) minimising sum((scale * pred + shift - gt)^2)."""
    mask = _common_mask(pred, gt)
    d, g = pred.values[mask], gt.values[mask]
    if d.size < 2:
        raise EmptyInputError("alignment needs at least two common valid pixels")
    dm, gm = d.mean(), g.mean()
    dc = d - dm
    var = np.dot(dc, dc)
    if var <= 0.0 or np.ptp(d) == 0.0:
        raise DegenerateInputError("cannot align a constant prediction")
    scale = float(np.dot(dc, g - gm) / var)
    return AlignmentParams(scale, float(gm - scale * dm))


def pwn_loss(pred_normals: NormalMap, gt_normals: NormalMap, pairs: PointPairSet) -> float:
    """Mean over pairs of ``|nA . nB - nA* . nB*|``."""
    if len(pairs) == 0:
        raise EmptyInputError("pair set is empty")
    if pred_normals.shape != gt_normals.shape:
        raise DomainError("normal maps differ in shape")
    pairs.check_bounds(gt_normals.shape, pred_normals.mask & gt_normals.mask)
    va, ua, vb, ub = pairs.rows_cols()
    n, g = pred_normals.normals, gt_normals.normals
    dp = np.einsum("ij,ij->i", n[va, ua], n[vb, ub])
    dg = np.einsum("ij,ij->i", g[va, ua], g[vb, ub])
    return float(np.abs(dp - dg).mean())


def _mean_abs_diff(a: np.ndarray, b: np.ndarray, valid: np.ndarray) -> tuple[float, int]:
    count = int(valid.sum())
    if count == 0:
        return 0.0, 0
    return float(np.abs(a - b)[valid].mean()), count


def msg_loss(pred: DepthMap, gt_normalized: DepthMap, scales: int = 4) -> float:
    """Multi-scale gradient matching loss.

    At scale k (1-based) both maps are subsampled with stride 2**(k-1) and
    forward differences are taken along x and y. Each scale contributes the
    mean absolute x-gradient difference plus the mean absolute y-gradient
    difference over the samples whose endpoints are valid in both maps; the
    contributions are summed over scales.
    """
    if scales < 1:
        raise DomainError("scales must be >= 1")
    mask = _common_mask(pred, gt_normalized)
    total, samples = 0.0, 0
    for k in range(scales):
        s = 2**k
        d, g, m = pred.values[::s, ::s], gt_normalized.values[::s, ::s], mask[::s, ::s]
        vx = m[:, 1:] & m[:, :-1]
        vy = m[1:, :] & m[:-1, :]
        ex, nx = _mean_abs_diff(np.diff(d, axis=1), np.diff(g, axis=1), vx)
        ey, ny = _mean_abs_diff(np.diff(d, axis=0), np.diff(g, axis=0), vy)
        total += ex + ey
        samples += nx + ny
    if samples == 0:
        raise EmptyInputError("no valid gradient samples at any scale")
    return total


def ordinal_labels(a: np.ndarray, b: np.ndarray, tau: float) -> np.ndarray:
    """+1 where a/b > 1 + tau, -1 where a/b < 1/(1 + tau), else 0. Inputs must be positive."""
    ratio = a / b
    return np.where(ratio > 1.0 + tau, 1, np.where(ratio < 1.0 / (1.0 + tau), -1, 0))


def ranking_terms(
    pred: DepthMap, gt: DepthMap, pairs: PointPairSet, tau: float = 0.02, margin: float = 0.0
) -> np.ndarray:
    """Per-pair ranking loss; NaN marks pairs skipped for non-positive ground truth.

    Unequal pairs use ``log(1 + exp(-l * (dA - dB)))``; pairs labelled equal
    use ``max(0, |dA - dB| - margin)**2``, which is ``(dA - dB)**2`` at the
    default zero margin.
    """
    if tau <= 0:
        raise DomainError("tau must be positive")
    mask = _common_mask(pred, gt)
    pairs.check_bounds(gt.shape, mask)
    va, ua, vb, ub = pairs.rows_cols()
    ga, gb = gt.values[va, ua], gt.values[vb, ub]
    da, db = pred.values[va, ua], pred.values[vb, ub]
    usable = (ga > 0) & (gb > 0)
    label = ordinal_labels(np.where(usable, ga, 1.0), np.where(usable, gb, 1.0), tau)
    diff = da - db
    ordered = np.logaddexp(0.0, -label * diff)
    equal = np.maximum(np.abs(diff) - margin, 0.0) ** 2
    terms = np.where(label != 0, ordered, equal)
    return np.where(usable, terms, np.nan)


def ranking_loss(
    pred: DepthMap,
    gt: DepthMap,
    pairs: PointPairSet,
    tau: float = 0.02,
    margin: float = 0.0,
    *,
    return_skipped: bool = False,
):
    """Mean of :func:`ranking_terms` over usable pairs.

    With ``return_skipped`` the result is ``(loss, skipped)`` where
    ``skipped`` counts pairs dropped for non-positive ground truth.
    """
    terms = ranking_terms(pred, gt, pairs, tau, margin)
    used = ~np.isnan(terms)
    if not used.any():
        raise EmptyInputError("no usable ranking pairs")
    value = float(terms[used].mean())
    return (value, int((~used).sum())) if return_skipped else value


def overall_loss(
    pred: DepthMap,
    gt: DepthMap,
    pairs: PointPairSet,
    weights: LossWeights = LossWeights(),
    cam: CameraIntrinsics | None = None,
    *,
    normal_window: int = 5,
    msg_scales: int = 4,
) -> float:
    """``lambda_pwn * PWN + lambda_a * ILNR + lambda_g * MSG``.

    For the normal term the prediction is first scale-and-shift aligned to
    the ground truth, then normals of both maps are estimated with ``cam``
    (default: 60 degree horizontal field of view).
    """
    total = 0.0
    if weights.lambda_pwn:
        cam = cam or CameraIntrinsics.from_fov(gt.width, gt.height, 60.0)
        aligned = align_scale_shift(pred, gt).apply(pred)
        pred_n = estimate_normals(aligned.with_mask(aligned.mask & gt.mask), cam, normal_window)
        gt_n = estimate_normals(gt, cam, normal_window)
        total += weights.lambda_pwn * pwn_loss(pred_n, gt_n, pairs)
    if weights.lambda_a:
        total += weights.lambda_a * ilnr_loss(pred, gt)
    if weights.lambda_g:
        total += weights.lambda_g * msg_loss(pred, ilnr_normalize(gt), msg_scales)
    return total
