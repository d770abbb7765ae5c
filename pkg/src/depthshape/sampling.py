"""Point-pair samplers for the pair-wise normal and ranking losses.

Three pair families are produced:

* ``edge`` pairs straddle a depth edge along its dominant gradient axis and are
  kept when the ground-truth normals either disagree sharply (dot < 0.3,
  positive samples) or agree closely (dot > 0.95, negative samples);
* ``plane`` pairs are drawn inside planar regions found by region growing on
  the normal map;
* ``global`` pairs are uniform over the valid pixels.

Every sampler takes an explicit seed and is a pure function of its inputs.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import sparse
from scipy.sparse.csgraph import connected_components

from .errors import DomainError, EmptyInputError
from .geometry import CameraIntrinsics, DepthMap, NormalMap, estimate_normals

logger = logging.getLogger(__name__)

__all__ = [
    "PointPairSet",
    "PlaneSegmentation",
    "SamplingWarning",
    "detect_edges",
    "sample_edge_pairs",
    "segment_planes",
    "sample_plane_pairs",
    "sample_global_pairs",
    "sample_training_pairs",
]

CATEGORIES = ("edge", "plane", "global")


class SamplingWarning(UserWarning):
    """A sampler produced an empty pair set."""


@dataclass(frozen=True, eq=False)
class PointPairSet:
    """Pixel pairs, ``pairs[i] = ((uA, vA), (uB, vB))``.

    ``negative`` marks edge pairs kept because their normals agree (the
    balancing samples); it is False for every other pair.
    """

    pairs: np.ndarray
    category: np.ndarray
    negative: np.ndarray | None = None

    def __post_init__(self):
        pairs = np.asarray(self.pairs, dtype=np.int64).reshape(-1, 2, 2)
        category = np.asarray(self.category, dtype="<U6").reshape(-1)
        if len(category) != len(pairs):
            raise DomainError("category length does not match pairs")
        bad = set(np.unique(category)) - set(CATEGORIES)
        if bad:
            raise DomainError(f"unknown pair categories: {sorted(bad)}")
        if self.negative is None:
            negative = np.zeros(len(pairs), dtype=bool)
        else:
            negative = np.asarray(self.negative, dtype=bool).reshape(-1)
        if np.any(np.all(pairs[:, 0] == pairs[:, 1], axis=1)):
            raise DomainError("pair endpoints must differ")
        object.__setattr__(self, "pairs", pairs)
        object.__setattr__(self, "category", category)
        object.__setattr__(self, "negative", negative)

    @classmethod
    def empty(cls) -> "PointPairSet":
        return cls(np.zeros((0, 2, 2), dtype=np.int64), np.zeros(0, dtype="<U6"))

    @classmethod
    def concat(cls, *sets: "PointPairSet") -> "PointPairSet":
        if not sets:
            return cls.empty()
        return cls(
            np.concatenate([s.pairs for s in sets]),
            np.concatenate([s.category for s in sets]),
            np.concatenate([s.negative for s in sets]),
        )

    def __len__(self) -> int:
        return len(self.pairs)

    def rows_cols(self) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """(vA, uA, vB, uB) index arrays, ready for ``array[v, u]`` lookups."""
        p = self.pairs
        return p[:, 0, 1], p[:, 0, 0], p[:, 1, 1], p[:, 1, 0]

    def select(self, category: str) -> "PointPairSet":
        keep = self.category == category
        return PointPairSet(self.pairs[keep], self.category[keep], self.negative[keep])

    def within(self, mask: np.ndarray) -> "PointPairSet":
        """Pairs whose two endpoints are both set in ``mask``."""
        va, ua, vb, ub = self.rows_cols()
        keep = mask[va, ua] & mask[vb, ub]
        return PointPairSet(self.pairs[keep], self.category[keep], self.negative[keep])

    def check_bounds(self, shape: tuple[int, int], mask: np.ndarray | None = None) -> None:
        H, W = shape
        va, ua, vb, ub = self.rows_cols()
        inside = (ua >= 0) & (ua < W) & (ub >= 0) & (ub < W) & (va >= 0) & (va < H) & (vb >= 0) & (vb < H)
        if not np.all(inside):
            raise DomainError("pair index outside image bounds")
        if mask is not None and not np.all(mask[va, ua] & mask[vb, ub]):
            raise DomainError("pair index references an invalid pixel")


@dataclass(frozen=True, eq=False)
class PlaneSegmentation:
    """Per-pixel plane ids (0 = not planar); ``plane_normals[k - 1]`` belongs to id k."""

    labels: np.ndarray
    plane_count: int
    plane_normals: np.ndarray

    def normal(self, plane_id: int) -> np.ndarray:
        return self.plane_normals[plane_id - 1]

    def masks(self) -> list[np.ndarray]:
        return [self.labels == k for k in range(1, self.plane_count + 1)]


def detect_edges(depth: DepthMap, threshold: float = 0.05) -> np.ndarray:
    """Flag pixels whose forward neighbour differs by more than ``threshold`` relatively.

    For each horizontally or vertically adjacent valid pair (A, B), with A the
    left/top pixel, A is flagged when ``|dA - dB| / min(|dA|, |dB|) > threshold``.
    """
    d, m = depth.values, depth.mask
    edges = np.zeros(depth.shape, dtype=bool)
    for axis in (0, 1):
        a = d[:-1, :] if axis == 0 else d[:, :-1]
        b = d[1:, :] if axis == 0 else d[:, 1:]
        both = (m[:-1, :] & m[1:, :]) if axis == 0 else (m[:, :-1] & m[:, 1:])
        denom = np.maximum(np.minimum(np.abs(a), np.abs(b)), 1e-12)
        hit = both & (np.abs(a - b) / denom > threshold)
        if axis == 0:
            edges[:-1, :] |= hit
        else:
            edges[:, :-1] |= hit
    return edges


def _dominant_axis(edges_v, edges_u, depth: DepthMap | None, normals: NormalMap, offset: int) -> np.ndarray:
    """True where the local change is dominant along x (columns), False for y."""
    H, W = normals.shape
    if depth is not None:
        d, m = depth.values, depth.mask
        u1 = np.minimum(edges_u + 1, W - 1)
        v1 = np.minimum(edges_v + 1, H - 1)
        gx = np.where(m[edges_v, u1] & m[edges_v, edges_u], np.abs(d[edges_v, u1] - d[edges_v, edges_u]), 0.0)
        gy = np.where(m[v1, edges_u] & m[edges_v, edges_u], np.abs(d[v1, edges_u] - d[edges_v, edges_u]), 0.0)
        return gx >= gy
    n, m = normals.normals, normals.mask

    def change(dv, du):
        va = np.clip(edges_v - dv, 0, H - 1)
        ua = np.clip(edges_u - du, 0, W - 1)
        vb = np.clip(edges_v + dv, 0, H - 1)
        ub = np.clip(edges_u + du, 0, W - 1)
        dot = np.einsum("ij,ij->i", n[va, ua], n[vb, ub])
        return np.where(m[va, ua] & m[vb, ub], 1.0 - dot, 0.0)

    return change(0, offset) >= change(offset, 0)


def sample_edge_pairs(
    edges: np.ndarray,
    gt_normals: NormalMap,
    count: int = 50000,
    rng_seed=0,
    *,
    depth: DepthMap | None = None,
    offset: int = 2,
    positive_below: float = 0.3,
    negative_above: float = 0.95,
) -> PointPairSet:
    """Sample ``count`` pairs straddling edge pixels.

    Each edge pixel proposes one pair, its endpoints ``offset`` pixels either
    side along the dominant gradient axis (from ``depth`` when given, else from
    the normal map). Proposals whose ground-truth normal dot product is below
    ``positive_below`` or above ``negative_above`` qualify; ``count`` pairs are
    drawn uniformly, with replacement, from the qualifying proposals.
    """
    edges = np.asarray(edges, dtype=bool)
    if edges.shape != gt_normals.shape:
        raise DomainError("edge mask and normal map shapes differ")
    H, W = edges.shape
    ev, eu = np.nonzero(edges)
    if count <= 0:
        return PointPairSet.empty()
    if ev.size == 0:
        warnings.warn("no edge pixels to sample from", SamplingWarning, stacklevel=2)
        return PointPairSet.empty()

    along_x = _dominant_axis(ev, eu, depth, gt_normals, offset)
    du = np.where(along_x, offset, 0)
    dv = np.where(along_x, 0, offset)
    ua, va, ub, vb = eu - du, ev - dv, eu + du, ev + dv
    inside = (ua >= 0) & (va >= 0) & (ub < W) & (vb < H)
    ua, va, ub, vb = ua[inside], va[inside], ub[inside], vb[inside]
    n, m = gt_normals.normals, gt_normals.mask
    ok = m[va, ua] & m[vb, ub]
    ua, va, ub, vb = ua[ok], va[ok], ub[ok], vb[ok]
    dot = np.einsum("ij,ij->i", n[va, ua], n[vb, ub])
    positive = dot < positive_below
    negative = dot > negative_above
    qualifying = np.flatnonzero(positive | negative)
    if qualifying.size == 0:
        warnings.warn("no edge proposal passed the normal-angle test", SamplingWarning, stacklevel=2)
        return PointPairSet.empty()

    rng = np.random.default_rng(rng_seed)
    pick = qualifying[rng.integers(qualifying.size, size=count)]
    pairs = np.stack(
        [np.column_stack([ua[pick], va[pick]]), np.column_stack([ub[pick], vb[pick]])], axis=1
    )
    return PointPairSet(pairs, np.full(count, "edge"), negative[pick])


def _components(active: np.ndarray, link_h: np.ndarray, link_v: np.ndarray) -> np.ndarray:
    """Connected-component ids over active pixels (-1 for inactive)."""
    H, W = active.shape
    idx = np.arange(H * W).reshape(H, W)
    lh = link_h & active[:, :-1] & active[:, 1:]
    lv = link_v & active[:-1, :] & active[1:, :]
    rows = np.concatenate([idx[:, :-1][lh], idx[:-1, :][lv]])
    cols = np.concatenate([idx[:, 1:][lh], idx[1:, :][lv]])
    graph = sparse.coo_matrix((np.ones(rows.size, dtype=np.int8), (rows, cols)), shape=(H * W, H * W))
    _, comp = connected_components(graph, directed=False)
    comp = comp.reshape(H, W)
    return np.where(active, comp, -1)


def _mean_normals(labels: np.ndarray, normals: np.ndarray, n_labels: int) -> np.ndarray:
    flat = labels.ravel()
    keep = flat >= 0
    sums = np.stack(
        [np.bincount(flat[keep], weights=normals.reshape(-1, 3)[keep, i], minlength=n_labels) for i in range(3)],
        axis=1,
    )
    norm = np.linalg.norm(sums, axis=1, keepdims=True)
    return sums / np.where(norm > 0, norm, 1.0)


def segment_planes(
    normals: NormalMap,
    angle_tol: float = 5.0,
    min_region: int = 200,
    *,
    smooth: bool = False,
    max_iter: int = 20,
    max_curvature: float | None = 1e-2,
) -> PlaneSegmentation:
    """Group 4-connected pixels with matching normals into planes.

    Adjacent pixels are joined when their normals differ by less than
    ``angle_tol`` degrees. Unless ``smooth`` is set, members deviating from
    their region's mean normal by ``angle_tol`` or more are then peeled off and
    connectivity is recomputed until stable, so every member of a returned
    plane lies within ``angle_tol`` of the plane normal. ``smooth=True`` skips
    that step and lets gently curving surfaces stay in one region. Regions
    with fewer than ``min_region`` pixels are labelled 0.

    Pixels whose fit window straddles a crease (surface variation above
    ``max_curvature``, when the normal map carries it) are left out before
    growing; otherwise oblique creases let regions leak into each other.
    ``None`` keeps every valid pixel, which suits noisy depth.
    """
    n, m = normals.normals, normals.mask
    if max_curvature is not None and normals.curvature is not None:
        m = m & (normals.curvature <= max_curvature)
    H, W = m.shape
    cos_tol = math.cos(math.radians(angle_tol))
    link_h = np.einsum("ijk,ijk->ij", n[:, :-1], n[:, 1:]) > cos_tol
    link_v = np.einsum("ijk,ijk->ij", n[:-1, :], n[1:, :]) > cos_tol

    active = m.copy()
    comp = _components(active, link_h, link_v)
    if not smooth:
        for _ in range(max_iter):
            n_comp = comp.max() + 1
            means = _mean_normals(comp, n, n_comp)
            member_dot = np.einsum("ijk,ijk->ij", n, means[np.maximum(comp, 0)])
            peel = active & (member_dot <= cos_tol)
            if not peel.any():
                break
            active &= ~peel
            comp = _components(active, link_h, link_v)
        else:
            logger.warning("plane segmentation did not converge in %d iterations", max_iter)

    flat = comp.ravel()
    sizes = np.bincount(flat[flat >= 0], minlength=comp.max() + 1) if comp.max() >= 0 else np.zeros(0, int)
    big = sizes >= max(min_region, 1)
    # Relabel kept regions 1..K in raster order of their first pixel.
    kept = np.flatnonzero((flat >= 0) & big[np.maximum(flat, 0)]) if sizes.size else np.zeros(0, int)
    ids, first = np.unique(flat[kept], return_index=True)
    ids = ids[np.argsort(first)]
    lut = np.zeros(len(sizes) + 1, dtype=np.int64)
    lut[ids + 1] = np.arange(1, len(ids) + 1)
    labels = lut[comp + 1]
    K = len(ids)
    plane_normals = _mean_normals(labels - 1, n, K) if K else np.zeros((0, 3))
    return PlaneSegmentation(labels, K, plane_normals)


def sample_plane_pairs(seg: PlaneSegmentation, per_plane: int = 5000, rng_seed=0) -> PointPairSet:
    """Draw ``per_plane`` same-plane pairs for every plane id.

    Pixels are drawn without replacement within a plane until it is
    exhausted, after which a fresh permutation is started.
    """
    if per_plane <= 0:
        return PointPairSet.empty()
    if seg.plane_count == 0:
        warnings.warn("segmentation has no planes", SamplingWarning, stacklevel=2)
        return PointPairSet.empty()
    rng = np.random.default_rng(rng_seed)
    flat = seg.labels.ravel()
    W = seg.labels.shape[1]
    chunks = []
    for k in range(1, seg.plane_count + 1):
        members = np.flatnonzero(flat == k)
        n = members.size
        if n < 2:
            continue
        need = 2 * per_plane
        pos = np.concatenate([rng.permutation(n) for _ in range(-(-need // n))])[:need]
        pa, pb = pos[0::2], pos[1::2].copy()
        same = pa == pb
        pb[same] = (pb[same] + 1) % n
        a, b = members[pa], members[pb]
        chunks.append(np.stack([np.column_stack([a % W, a // W]), np.column_stack([b % W, b // W])], axis=1))
    if not chunks:
        warnings.warn("no plane has two or more pixels", SamplingWarning, stacklevel=2)
        return PointPairSet.empty()
    pairs = np.concatenate(chunks)
    return PointPairSet(pairs, np.full(len(pairs), "plane"))


def sample_global_pairs(mask: np.ndarray, count: int, rng_seed=0) -> PointPairSet:
    """``count`` uniformly random pairs of distinct valid pixels."""
    mask = np.asarray(mask, dtype=bool)
    if count <= 0:
        return PointPairSet.empty()
    valid = np.flatnonzero(mask.ravel())
    if valid.size < 2:
        raise EmptyInputError("need at least two valid pixels for global pairs")
    rng = np.random.default_rng(rng_seed)
    pa = rng.integers(valid.size, size=count)
    pb = rng.integers(valid.size - 1, size=count)
    pb += pb >= pa
    W = mask.shape[1]
    a, b = valid[pa], valid[pb]
    pairs = np.stack([np.column_stack([a % W, a // W]), np.column_stack([b % W, b // W])], axis=1)
    return PointPairSet(pairs, np.full(count, "global"))


def sample_training_pairs(
    depth_gt: DepthMap,
    cam: CameraIntrinsics,
    rng_seed=0,
    *,
    edge_count: int = 50000,
    per_plane: int = 5000,
    global_count: int = 30000,
    edge_threshold: float = 0.05,
    normal_window: int = 5,
    angle_tol: float = 5.0,
    min_region: int = 200,
) -> PointPairSet:
    """Edge, plane and global pairs for one ground-truth depth map, concatenated."""
    normals = estimate_normals(depth_gt, cam, normal_window)
    edges = detect_edges(depth_gt, edge_threshold)
    seg = segment_planes(normals, angle_tol, min_region)
    s_edge, s_plane, s_global = np.random.SeedSequence(rng_seed).spawn(3)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", SamplingWarning)
        edge = sample_edge_pairs(edges, normals, edge_count, s_edge, depth=depth_gt)
        plane = sample_plane_pairs(seg, per_plane, s_plane)
    glob = sample_global_pairs(depth_gt.mask, global_count, s_global)
    return PointPairSet.concat(edge, plane, glob)
