"""Pinhole camera model, depth unprojection and surface-normal estimation.

Pixel coordinates follow the image convention: ``u`` is the column index and
``v`` the row index, with ``v`` growing downwards. Camera-frame points use
x to the right, y down and z along the optical axis, so a pixel ``(u, v)``
with depth ``d`` maps to ``((u - u0) d / f, (v - v0) d / f, d)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DegenerateInputError, DomainError, EmptyInputError

__all__ = [
    "DepthMap",
    "CameraIntrinsics",
    "PointCloud",
    "NormalMap",
    "unproject",
    "unproject_grid",
    "apply_shift",
    "scale_focal",
    "estimate_normals",
    "normalize_unit_range",
]


def _frozen(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class DepthMap:
    """Per-pixel depth raster with a validity mask.

    Invalid pixels are stored as 0 so that every stored value is finite.
    When ``mask`` is omitted, every finite value is considered valid.
    """

    values: np.ndarray
    mask: np.ndarray | None = None

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64)
        if values.ndim != 2 or values.shape[0] == 0 or values.shape[1] == 0:
            raise DomainError(f"depth must be a non-empty 2D array, got shape {values.shape}")
        finite = np.isfinite(values)
        if self.mask is None:
            mask = finite
        else:
            mask = np.array(self.mask, dtype=bool)
            if mask.shape != values.shape:
                raise DomainError(f"mask shape {mask.shape} != depth shape {values.shape}")
            mask = mask & finite
        values[~mask] = 0.0
        object.__setattr__(self, "values", _frozen(values))
        object.__setattr__(self, "mask", _frozen(mask))

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    @property
    def valid_count(self) -> int:
        return int(self.mask.sum())

    def valid_values(self) -> np.ndarray:
        return self.values[self.mask]

    def with_values(self, values: np.ndarray) -> "DepthMap":
        """Same mask, new values."""
        return DepthMap(values, self.mask)

    def with_mask(self, mask: np.ndarray) -> "DepthMap":
        return DepthMap(self.values, mask)


@dataclass(frozen=True)
class CameraIntrinsics:
    u0: float
    v0: float
    f: float

    def __post_init__(self):
        if not (self.f > 0 and math.isfinite(self.f)):
            raise DomainError(f"focal length must be positive and finite, got {self.f}")

    @classmethod
    def from_fov(cls, width: int, height: int, fov_deg: float = 60.0) -> "CameraIntrinsics":
        """Camera centred on the image with horizontal field of view ``fov_deg``."""
        if not 0.0 < fov_deg < 180.0:
            raise DomainError(f"field of view must be in (0, 180) degrees, got {fov_deg}")
        f = (width / 2.0) / math.tan(math.radians(fov_deg) / 2.0)
        return cls(u0=(width - 1) / 2.0, v0=(height - 1) / 2.0, f=f)

    def fov(self, width: int) -> float:
        """Horizontal field of view in degrees for an image ``width`` pixels wide."""
        return math.degrees(2.0 * math.atan((width / 2.0) / self.f))


@dataclass(frozen=True, eq=False)
class PointCloud:
    points: np.ndarray
    source_pixel: np.ndarray | None = None
    normals: np.ndarray | None = None

    def __post_init__(self):
        points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        object.__setattr__(self, "points", points)
        n = len(points)
        if self.source_pixel is not None:
            sp = np.asarray(self.source_pixel, dtype=np.int64).reshape(-1, 2)
            if len(sp) != n:
                raise DomainError("source_pixel length does not match points")
            object.__setattr__(self, "source_pixel", sp)
        if self.normals is not None:
            nr = np.asarray(self.normals, dtype=np.float64).reshape(-1, 3)
            if len(nr) != n:
                raise DomainError("normals length does not match points")
            if n and np.max(np.abs(np.linalg.norm(nr, axis=1) - 1.0)) > 1e-9:
                raise DomainError("normals must be unit length")
            object.__setattr__(self, "normals", nr)

    def __len__(self) -> int:
        return len(self.points)


@dataclass(frozen=True, eq=False)
class NormalMap:
    """Per-pixel unit normals, shape (H, W, 3), oriented towards the camera.

    ``curvature`` optionally holds the surface variation of each fit, the
    smallest covariance eigenvalue over their sum (0 for a perfect plane).
    """

    normals: np.ndarray
    mask: np.ndarray = field(default=None)
    curvature: np.ndarray | None = None

    def __post_init__(self):
        normals = np.array(self.normals, dtype=np.float64)
        if normals.ndim != 3 or normals.shape[2] != 3:
            raise DomainError(f"normals must have shape (H, W, 3), got {normals.shape}")
        if self.mask is None:
            mask = np.all(np.isfinite(normals), axis=2)
        else:
            mask = np.array(self.mask, dtype=bool) & np.all(np.isfinite(normals), axis=2)
        normals[~mask] = 0.0
        object.__setattr__(self, "normals", _frozen(normals))
        object.__setattr__(self, "mask", _frozen(mask))
        if self.curvature is not None:
            object.__setattr__(self, "curvature", _frozen(np.array(self.curvature, dtype=np.float64)))

    @property
    def height(self) -> int:
        return self.normals.shape[0]

    @property
    def width(self) -> int:
        return self.normals.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.normals.shape[:2]


def unproject_grid(depth: DepthMap, cam: CameraIntrinsics) -> np.ndarray:
    """Camera-frame points as an (H, W, 3) array; invalid pixels are NaN."""
    v, u = np.mgrid[0 : depth.height, 0 : depth.width]
    d = np.where(depth.mask, depth.values, np.nan)
    return np.stack([(u - cam.u0) * d / cam.f, (v - cam.v0) * d / cam.f, d], axis=-1)


def unproject(depth: DepthMap, cam: CameraIntrinsics) -> PointCloud:
    """Lift every valid pixel to 3D with the pinhole model, in raster order."""
    if depth.valid_count == 0:
        raise EmptyInputError("depth map has no valid pixels")
    v, u = np.nonzero(depth.mask)
    d = depth.values[v, u]
    points = np.column_stack([(u - cam.u0) * d / cam.f, (v - cam.v0) * d / cam.f, d])
    return PointCloud(points, source_pixel=np.column_stack([u, v]))


def apply_shift(depth: DepthMap, delta: float) -> DepthMap:
    return depth.with_values(np.where(depth.mask, depth.values + delta, 0.0))


def scale_focal(cam: CameraIntrinsics, alpha: float) -> CameraIntrinsics:
    if not alpha > 0:
        raise DomainError(f"focal scale must be positive, got {alpha}")
    return CameraIntrinsics(cam.u0, cam.v0, cam.f * alpha)


def normalize_unit_range(depth: DepthMap) -> DepthMap:
    """Affinely map valid values onto [0, 1]."""
    vals = depth.valid_values()
    if vals.size == 0:
        raise EmptyInputError("depth map has no valid pixels")
    lo, hi = vals.min(), vals.max()
    if hi <= lo:
        raise DegenerateInputError("depth map has zero range")
    return depth.with_values((depth.values - lo) / (hi - lo))


def estimate_normals(
    depth: DepthMap,
    cam: CameraIntrinsics,
    window: int = 5,
    *,
    degenerate_tol: float = 1e-10,
    chunk_rows: int = 64,
) -> NormalMap:
    """Per-pixel normals from total-least-squares plane fits.

    Each valid pixel gets the smallest-variance direction of the unprojected
    valid points in its ``window`` x ``window`` neighbourhood. Pixels with
    fewer than three valid neighbours, or with (near-)collinear neighbours,
    are marked invalid. Normals are flipped to have a non-positive z
    component, i.e. to face the camera.
    """
    if window < 3 or window % 2 == 0:
        raise DomainError(f"window must be odd and >= 3, got {window}")
    r = window // 2
    grid = unproject_grid(depth, cam)
    padded = np.pad(grid, ((r, r), (r, r), (0, 0)), constant_values=np.nan)
    H, W = depth.shape
    normals = np.zeros((H, W, 3))
    out_mask = np.zeros((H, W), dtype=bool)
    curvature = np.zeros((H, W))

    for top in range(0, H, chunk_rows):
        bottom = min(H, top + chunk_rows)
        block = padded[top : bottom + 2 * r]
        # (rows, W, 3, window, window) -> (rows, W, 3, k)
        win = sliding_window_view(block, (window, window), axis=(0, 1))
        win = win.reshape(bottom - top, W, 3, window * window)
        valid = ~np.isnan(win[:, :, 2, :])
        count = valid.sum(axis=-1)
        safe = np.where(valid[:, :, None, :], win, 0.0)
        mean = safe.sum(axis=-1) / np.maximum(count, 1)[..., None]
        centered = np.where(valid[:, :, None, :], win - mean[..., None], 0.0)
        cov = np.einsum("hwik,hwjk->hwij", centered, centered) / np.maximum(count, 1)[..., None, None]

        evals, evecs = np.linalg.eigh(cov)
        n = evecs[..., :, 0]
        ok = depth.mask[top:bottom] & (count >= 3)
        ok &= evals[..., 2] > 0
        ok &= evals[..., 1] > degenerate_tol * evals[..., 2]
        n = n / np.linalg.norm(n, axis=-1, keepdims=True)
        n = np.where(n[..., 2:3] > 0, -n, n)
        normals[top:bottom] = np.where(ok[..., None], n, 0.0)
        out_mask[top:bottom] = ok
        total = evals.sum(axis=-1)
        curvature[top:bottom] = np.where(ok, np.maximum(evals[..., 0], 0.0) / np.where(total > 0, total, 1.0), 0.0)

    return NormalMap(normals, out_mask, curvature)
