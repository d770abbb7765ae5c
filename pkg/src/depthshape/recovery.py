"""Recovery of the unknown depth shift and focal scale from scene geometry.

A wrong shift bends planes (points move along their rays by an amount that
depends on depth), while a wrong focal length keeps planes flat but changes
the angles between them. The distortion objective therefore combines a
flatness term over planar segments with a Manhattan term that prefers
segment normals to be parallel or perpendicular. The estimator searches a
coarse grid over (shift, focal scale) and refines the best cell by
alternating one-dimensional pattern searches.

Sign convention: a recovered ``(delta_d_hat, alpha_f_hat)`` is an estimate of
the perturbation that was applied, so callers correct with
``d - delta_d_hat`` and ``f / alpha_f_hat`` (see :func:`correct`).
"""

from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Protocol

import numpy as np
from scipy import ndimage

from .errors import DomainError, EmptyInputError, ObjectiveUndefinedError, RecoveryFailedError
from .geometry import CameraIntrinsics, DepthMap, NormalMap, apply_shift, estimate_normals, scale_focal
from .metrics import absrel
from .sampling import PlaneSegmentation, detect_edges, segment_planes
from .scenes import SceneSpec, synth_scene

logger = logging.getLogger(__name__)

__all__ = [
    "DELTA_RANGE",
    "ALPHA_RANGE",
    "Perturbation",
    "RecoveryConfig",
    "RecoveryResult",
    "ShiftFocalEstimator",
    "GridDescentEstimator",
    "sample_perturbation",
    "perturb",
    "correct",
    "planar_segments",
    "distortion_objective",
    "objective_terms",
    "recover",
    "recovery_benchmark",
]

DELTA_RANGE = (-0.25, 0.8)
ALPHA_RANGE = (0.6, 1.25)


@dataclass(frozen=True)
class Perturbation:
    delta_d: float = 0.0
    alpha_f: float = 1.0


@dataclass(frozen=True)
class RecoveryConfig:
    delta_range: tuple[float, float] = DELTA_RANGE
    alpha_range: tuple[float, float] = ALPHA_RANGE
    grid_shape: tuple[int, int] = (22, 14)
    # Refinement may leave the coarse alpha range (bad initial focal guesses).
    alpha_limits: tuple[float, float] = (0.2, 5.0)
    step_tol: float = 1e-3
    max_rounds: int = 2
    normal_window: int = 5
    angle_tol: float = 5.0
    min_region: int = 200
    edge_threshold: float = 0.05
    max_curvature: float = 1e-4
    manhattan_weight: float = 1.0
    flat_tol: float = 1e-10


@dataclass
class RecoveryResult:
    delta_d_hat: float
    alpha_f_hat: float
    objective_value: float
    trace: list[tuple[Perturbation, float]] = field(default_factory=list, repr=False)
    status: str = "ok"
    segment_count: int = 0

    @property
    def estimate(self) -> Perturbation:
        return Perturbation(self.delta_d_hat, self.alpha_f_hat)

    def to_record(self) -> dict:
        return {
            "delta_d_hat": self.delta_d_hat,
            "alpha_f_hat": self.alpha_f_hat,
            "objective_value": self.objective_value,
            "status": self.status,
            "segment_count": self.segment_count,
            "evaluations": len(self.trace),
        }


class ShiftFocalEstimator(Protocol):
    """Anything that maps a depth map and an initial camera to a shift/focal estimate."""

    def estimate(self, depth: DepthMap, cam_init: CameraIntrinsics) -> RecoveryResult: ...


def sample_perturbation(rng: np.random.Generator, depth: DepthMap | None = None, margin: float = 0.02) -> Perturbation:
    """Draw a perturbation uniformly from the training ranges.

    With ``depth`` given, shifts that would leave a valid pixel at or below
    ``margin`` are rejected and redrawn.
    """
    lo = None if depth is None else float(depth.valid_values().min())
    for _ in range(10000):
        delta = float(rng.uniform(*DELTA_RANGE))
        alpha = float(rng.uniform(*ALPHA_RANGE))
        if lo is None or lo + delta > margin:
            return Perturbation(delta, alpha)
    raise DomainError("could not draw a shift keeping the depth positive")


def perturb(depth_gt: DepthMap, cam_gt: CameraIntrinsics, p: Perturbation) -> tuple[DepthMap, CameraIntrinsics]:
    """Apply a shift to the depth and a scale to the focal length."""
    if not DELTA_RANGE[0] <= p.delta_d <= DELTA_RANGE[1]:
        raise DomainError(f"delta_d={p.delta_d} outside {DELTA_RANGE}")
    if not ALPHA_RANGE[0] <= p.alpha_f <= ALPHA_RANGE[1]:
        raise DomainError(f"alpha_f={p.alpha_f} outside {ALPHA_RANGE}")
    lo = float(depth_gt.valid_values().min())
    if lo + p.delta_d <= 0:
        raise DomainError(f"shift {p.delta_d} makes depth non-positive (minimum would be {lo + p.delta_d:.6g})")
    return apply_shift(depth_gt, p.delta_d), scale_focal(cam_gt, p.alpha_f)


def correct(depth: DepthMap, cam: CameraIntrinsics, estimate: Perturbation) -> tuple[DepthMap, CameraIntrinsics]:
    """Undo an estimated perturbation: ``d - delta_d`` and ``f / alpha_f``."""
    if not estimate.alpha_f > 0:
        raise DomainError("focal scale must be positive")
    corrected = apply_shift(depth, -estimate.delta_d)
    return corrected, CameraIntrinsics(cam.u0, cam.v0, cam.f / estimate.alpha_f)


def planar_segments(depth: DepthMap, cam: CameraIntrinsics, config: RecoveryConfig = RecoveryConfig()) -> PlaneSegmentation:
    """Smooth surface patches usable by the distortion objective.

    Normals are estimated; pixels whose window touches a depth discontinuity
    or straddles a crease (surface variation above ``max_curvature``) are
    dropped. Regions are grown on adjacent-normal agreement, so surfaces bent
    by a wrong shift stay whole, and each region is eroded by the window
    radius so that no pixel near a crease is kept.
    """
    r = config.normal_window // 2
    square = np.ones((3, 3), dtype=bool)
    normals = estimate_normals(depth, cam, config.normal_window)
    near_edge = ndimage.binary_dilation(detect_edges(depth, config.edge_threshold), square, iterations=r + 1)
    flat = normals.curvature <= config.max_curvature
    usable = NormalMap(normals.normals, normals.mask & ~near_edge & flat)
    seg = segment_planes(usable, config.angle_tol, config.min_region, smooth=True)
    if seg.plane_count == 0:
        return seg
    labels = np.zeros_like(seg.labels)
    for k in range(1, seg.plane_count + 1):
        labels[ndimage.binary_erosion(seg.labels == k, square, iterations=r)] = k
    flat = labels.ravel()
    sizes = np.bincount(flat, minlength=seg.plane_count + 1)
    kept = [k for k in range(1, seg.plane_count + 1) if sizes[k] >= 3]
    lut = np.zeros(seg.plane_count + 1, dtype=np.int64)
    lut[kept] = np.arange(1, len(kept) + 1)
    return PlaneSegmentation(lut[labels], len(kept), seg.plane_normals[np.array(kept, dtype=int) - 1].reshape(-1, 3))


def _segment_fits(points: np.ndarray, labels: np.ndarray, k: int):
    """Per-label TLS plane fit: (counts, mean squared residual, unit normals)."""
    counts = np.bincount(labels, minlength=k + 1)[1:].astype(float)
    means = np.stack([np.bincount(labels, weights=points[:, i], minlength=k + 1)[1:] for i in range(3)], axis=1)
    means /= counts[:, None]
    c = points - means[labels - 1]
    cov = np.empty((k, 3, 3))
    for i in range(3):
        for j in range(i, 3):
            s = np.bincount(labels, weights=c[:, i] * c[:, j], minlength=k + 1)[1:] / counts
            cov[:, i, j] = cov[:, j, i] = s
    evals, evecs = np.linalg.eigh(cov)
    return counts, np.maximum(evals[:, 0], 0.0), evecs[:, :, 0]


def objective_terms(
    depth: DepthMap,
    cam: CameraIntrinsics,
    candidate: Perturbation,
    *,
    segmentation: PlaneSegmentation | None = None,
    config: RecoveryConfig = RecoveryConfig(),
) -> tuple[float, float]:
    """(flatness, orthogonality) terms of the distortion objective.

    Flatness is the sum over planar segments of the mean squared
    point-to-plane residual divided by the squared scene diameter.
    Orthogonality is the size-weighted mean over segment pairs of
    ``min(c^2, 1 - c^2)`` with ``c`` the cosine between segment normals
    (0 with fewer than two segments). Both are invariant to a global
    rescaling of the depth. A uniform focal change keeps planes planar, so
    only the orthogonality term depends on ``alpha_f`` for clean planes.
    """
    if not candidate.alpha_f > 0:
        raise DomainError("focal scale must be positive")
    d = depth.values - candidate.delta_d
    if np.any(d[depth.mask] <= 0):
        raise DomainError("candidate shift makes depth non-positive")
    f = cam.f / candidate.alpha_f
    if segmentation is None:
        segmentation = planar_segments(depth.with_values(d), CameraIntrinsics(cam.u0, cam.v0, f), config)
    labels = np.where(depth.mask, segmentation.labels, 0)
    k = segmentation.plane_count
    if k == 0 or not labels.any():
        raise ObjectiveUndefinedError("no planar segments found; not enough geometric cues")

    v, u = np.nonzero(depth.mask)
    dv = d[v, u]
    pts = np.column_stack([(u - cam.u0) * dv / f, (v - cam.v0) * dv / f, dv])
    diam2 = float(np.sum(np.ptp(pts, axis=0) ** 2))
    lab = labels[v, u]
    sel = lab > 0
    counts, residual, normals = _segment_fits(pts[sel], lab[sel], k)
    present = counts > 0
    flat = float(np.sum(residual[present])) / diam2

    ortho = 0.0
    if present.sum() >= 2:
        n, w = normals[present], counts[present] / counts[present].sum()
        c2 = np.clip((n @ n.T) ** 2, 0.0, 1.0)
        pen = np.minimum(c2, 1.0 - c2)
        ww = np.outer(w, w)
        iu = np.triu_indices(len(w), 1)
        ortho = float(np.sum(ww[iu] * pen[iu]) / np.sum(ww[iu]))
    return flat, ortho


def distortion_objective(
    depth: DepthMap,
    cam: CameraIntrinsics,
    candidate: Perturbation,
    *,
    segmentation: PlaneSegmentation | None = None,
    config: RecoveryConfig = RecoveryConfig(),
) -> float:
    """Shape distortion of the scene corrected by ``candidate``.

    The depth is corrected to ``d - delta_d`` and the focal length to
    ``f / alpha_f`` before unprojection. The value is the flatness term plus
    ``config.manhattan_weight`` times the orthogonality term, see
    :func:`objective_terms`.

    ``segmentation`` fixes which pixels form each segment; by default it is
    recomputed from the corrected scene.
    """
    flat, ortho = objective_terms(depth, cam, candidate, segmentation=segmentation, config=config)
    return flat + config.manhattan_weight * ortho


class GridDescentEstimator:
    """Coarse grid search followed by decoupled 1D pattern searches.

    The grid locates the basin of the full objective. The shift is then
    refined on the flatness term alone, which does not depend on the focal
    scale for clean planes, and the focal scale is refined on the full
    objective with the shift held fixed. Refining both jointly is badly
    conditioned: shift and focal errors trade off along a narrow valley of
    the orthogonality term.
    """

    def __init__(self, config: RecoveryConfig | None = None):
        self.config = config or RecoveryConfig()

    def estimate(self, depth: DepthMap, cam_init: CameraIntrinsics) -> RecoveryResult:
        cfg = self.config
        if depth.valid_count == 0:
            raise EmptyInputError("depth map has no valid pixels")
        d_min = float(depth.valid_values().min())
        seg = planar_segments(depth, cam_init, cfg)
        if seg.plane_count == 0:
            raise RecoveryFailedError("no planar structure found in the input")

        trace: list[tuple[Perturbation, float]] = []
        cache: dict[tuple[float, float], tuple[float, float]] = {}
        undefined = (math.inf, math.inf)

        def terms(delta: float, alpha: float) -> tuple[float, float]:
            key = (delta, alpha)
            if key not in cache:
                if d_min - delta <= 0 or alpha <= 0:
                    cache[key] = undefined
                else:
                    try:
                        cache[key] = objective_terms(
                            depth, cam_init, Perturbation(delta, alpha), segmentation=seg, config=cfg
                        )
                    except ObjectiveUndefinedError:
                        cache[key] = undefined
                trace.append((Perturbation(delta, alpha), total(cache[key])))
            return cache[key]

        def total(t: tuple[float, float]) -> float:
            return t[0] + cfg.manhattan_weight * t[1] if math.isfinite(t[0]) else math.inf

        def objective(delta: float, alpha: float) -> float:
            return total(terms(delta, alpha))

        deltas = np.linspace(*cfg.delta_range, cfg.grid_shape[0])
        alphas = np.linspace(*cfg.alpha_range, cfg.grid_shape[1])
        grid = np.array([[objective(float(dd), float(aa)) for aa in alphas] for dd in deltas])
        if not np.isfinite(grid).any():
            raise RecoveryFailedError("objective undefined on the whole search grid")
        # Row-major argmin keeps the first minimum: lowest delta, then lowest alpha.
        i, j = np.unravel_index(int(np.argmin(grid)), grid.shape)
        grid_best = (float(deltas[i]), float(alphas[j]), float(grid[i, j]))
        best_d, best_a = grid_best[0], grid_best[1]

        step_d = float(deltas[1] - deltas[0]) if len(deltas) > 1 else 0.05
        step_a = float(alphas[1] - alphas[0]) if len(alphas) > 1 else 0.05
        lo_d, hi_d = cfg.delta_range
        lo_a, hi_a = cfg.alpha_limits

        def line_search(x: float, step: float, lo: float, hi: float, f) -> tuple[float, bool]:
            fx, moved = f(x), False
            while step >= cfg.step_tol:
                improved = False
                for cand in (x - step, x + step):
                    if lo <= cand <= hi:
                        fc = f(cand)
                        if fc < fx:
                            x, fx, improved, moved = cand, fc, True, True
                            break
                if not improved:
                    step /= 2.0
            return x, moved

        def flatness(delta: float, alpha: float) -> float:
            return terms(delta, alpha)[0]

        for round_ in range(cfg.max_rounds):
            best_d, moved_d = line_search(best_d, step_d, lo_d, hi_d, lambda x: flatness(x, best_a))
            best_a, moved_a = line_search(best_a, step_a, lo_a, hi_a, lambda x: objective(best_d, x))
            if round_ >= 1 and not (moved_d or moved_a):
                break
            # Later rounds start from finer steps; the basin is already located.
            step_d, step_a = max(step_d / 2.0, 4 * cfg.step_tol), max(step_a / 2.0, 4 * cfg.step_tol)

        best = objective(best_d, best_a)
        if not best <= grid_best[2]:
            # Noisy planes can bias the decoupled search; never return worse than the grid.
            best_d, best_a, best = grid_best

        row, col = grid[i, :], grid[:, j]
        flat_alpha = np.ptp(row[np.isfinite(row)]) <= cfg.flat_tol
        flat_delta = np.ptp(col[np.isfinite(col)]) <= cfg.flat_tol
        status = "low_confidence" if (flat_alpha or flat_delta) else "ok"
        return RecoveryResult(best_d, best_a, best, trace, status, seg.plane_count)


def recover(depth: DepthMap, cam_init: CameraIntrinsics, config: RecoveryConfig | None = None) -> RecoveryResult:
    """Estimate (shift, focal scale) for a depth map normalised to unit scale."""
    return GridDescentEstimator(config).estimate(depth, cam_init)


BENCH_KINDS = ("two-wall", "room", "box", "staircase")


def _bench_scene(index: int, seed_seq: np.random.SeedSequence, size: int, kinds, config) -> dict:
    kind = kinds[index % len(kinds)]
    scene_seed, pert_seed = seed_seq.spawn(2)
    row: dict = {"index": index, "kind": kind}
    try:
        scene = synth_scene(SceneSpec(kind=kind, width=size, height=size), scene_seed)
        d_true = scene.depth.with_values(scene.depth.values / scene.depth.valid_values().max())
        p = sample_perturbation(np.random.default_rng(pert_seed), d_true)
        d_in, cam_in = perturb(d_true, scene.cam, p)
        res = recover(d_in, cam_in, config)
        corrected, cam_out = correct(d_in, cam_in, res.estimate)
        row.update(
            status=res.status,
            delta_d=p.delta_d,
            alpha_f=p.alpha_f,
            delta_d_hat=res.delta_d_hat,
            alpha_f_hat=res.alpha_f_hat,
            focal_rel_error=abs(cam_out.f - scene.cam.f) / scene.cam.f,
            absrel_before=absrel(d_in, d_true, scale_only=True),
            absrel_after=absrel(corrected, d_true, scale_only=True),
        )
    except Exception as exc:  # noqa: BLE001 - one failed scene must not stop the batch
        logger.warning("scene %d failed: %s", index, exc)
        row.update(status="failed", error=f"{type(exc).__name__}: {exc}")
    return row


def recovery_benchmark(
    n_scenes: int = 100,
    rng_seed=0,
    *,
    size: int = 128,
    kinds=BENCH_KINDS,
    config: RecoveryConfig | None = None,
    jobs: int = 1,
) -> dict:
    """Perturb, recover and score ``n_scenes`` seeded synthetic scenes.

    AbsRel is computed after a scale-only alignment to the ground truth, for
    the perturbed depth (before) and the shift-corrected depth (after).
    Scenes are independent, so ``jobs > 1`` evaluates them in parallel; the
    summary is identical for any ``jobs``.
    """
    if n_scenes < 1:
        raise DomainError("n_scenes must be >= 1")
    seqs = np.random.SeedSequence(rng_seed).spawn(n_scenes)
    args = [(i, seqs[i], size, tuple(kinds), config) for i in range(n_scenes)]
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(lambda a: _bench_scene(*a), args))
    else:
        rows = [_bench_scene(*a) for a in args]

    ok = [r for r in rows if r["status"] != "failed"]
    summary = {
        "n_scenes": n_scenes,
        "seed": rng_seed if isinstance(rng_seed, int) else None,
        "size": size,
        "n_failed": n_scenes - len(ok),
        "n_low_confidence": sum(r["status"] == "low_confidence" for r in ok),
    }
    if ok:
        before = np.array([r["absrel_before"] for r in ok])
        after = np.array([r["absrel_after"] for r in ok])
        d_err = np.abs([r["delta_d_hat"] - r["delta_d"] for r in ok])
        f_err = np.array([r["focal_rel_error"] for r in ok])
        summary.update(
            mean_absrel_before=float(before.mean()),
            mean_absrel_after=float(after.mean()),
            mean_abs_delta_error=float(d_err.mean()),
            max_abs_delta_error=float(d_err.max()),
            mean_focal_rel_error=float(f_err.mean()),
            max_focal_rel_error=float(f_err.max()),
        )
    summary["scenes"] = rows
    return summary


def summary_json(summary: dict) -> str:
    return json.dumps(summary, indent=2, sort_keys=True)
