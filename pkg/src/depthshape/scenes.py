"""Analytic synthetic scenes rendered by ray casting against planes and boxes.

The world frame has y pointing up; the camera frame has x right, y down and z
forward. Scenes are Manhattan-aligned: every surface is parallel to one of the
world axes planes, which is what makes focal length recoverable from shape.

Scene kinds:

``single-plane``  one fronto-parallel wall filling the view.
``two-wall``      a room corner: the floor and two perpendicular walls.
``room``          floor, back wall and both side walls plus one box.
``box``           a room corner with two boxes standing on the floor.
``staircase``     a room corner with a flight of steps against one wall.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .errors import DomainError
from .geometry import CameraIntrinsics, DepthMap
from .sampling import PlaneSegmentation

__all__ = ["SceneSpec", "Scene", "SCENE_KINDS", "synth_scene"]

SCENE_KINDS = ("single-plane", "two-wall", "room", "box", "staircase")


@dataclass(frozen=True)
class SceneSpec:
    kind: str = "room"
    width: int = 128
    height: int = 128
    fov: float = 60.0
    jitter: bool = True

    def __post_init__(self):
        if self.kind not in SCENE_KINDS:
            raise DomainError(f"unknown scene kind {self.kind!r}; expected one of {SCENE_KINDS}")
        if self.width < 8 or self.height < 8:
            raise DomainError("scene resolution must be at least 8x8")

    @classmethod
    def from_dict(cls, data: dict) -> "SceneSpec":
        return cls(**data)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True, eq=False)
class Scene:
    depth: DepthMap
    cam: CameraIntrinsics
    planes: PlaneSegmentation


@dataclass
class _Box:
    lo: np.ndarray
    hi: np.ndarray


def _camera_axes(yaw: float, pitch: float) -> np.ndarray:
    """Rotation whose columns are the camera x, y, z axes in world coordinates."""
    forward = np.array([math.sin(yaw) * math.cos(pitch), -math.sin(pitch), math.cos(yaw) * math.cos(pitch)])
    right = np.array([math.cos(yaw), 0.0, -math.sin(yaw)])
    down = np.cross(right, forward)
    return np.column_stack([right, down, forward])


class _Renderer:
    """Nearest-hit ray caster; surface ids are assigned in order of creation."""

    def __init__(self, origin: np.ndarray, rays: np.ndarray):
        self.origin = origin
        self.rays = rays  # (N, 3) world directions with camera-z component 1
        self.t = np.full(len(rays), np.inf)
        self.ids = np.zeros(len(rays), dtype=np.int64)
        self.normals: dict[int, np.ndarray] = {}
        self._next = 1

    def _new_id(self, normal_w) -> int:
        sid = self._next
        self._next += 1
        self.normals[sid] = np.asarray(normal_w, dtype=float)
        return sid

    def enclosing(self, planes: list[tuple[np.ndarray, float]]):
        """Interior of a convex region {X : n . X >= h}; rays hit its boundary from inside."""
        for n, h in planes:
            sid = self._new_id(n)
            denom = self.rays @ n
            with np.errstate(divide="ignore", invalid="ignore"):
                t = (h - n @ self.origin) / denom
            hit = (denom < 0) & (t > 0) & (t < self.t)
            self.t[hit] = t[hit]
            self.ids[hit] = sid

    def box(self, box: _Box):
        """Axis-aligned solid box seen from outside (slab method)."""
        face_ids = {}
        for axis in range(3):
            for sign in (-1, 1):
                n = np.zeros(3)
                n[axis] = sign
                face_ids[(axis, sign)] = self._new_id(n)
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / self.rays
            t0 = (box.lo - self.origin) * inv
            t1 = (box.hi - self.origin) * inv
        t_near = np.minimum(t0, t1)
        t_far = np.maximum(t0, t1)
        entry_axis = np.argmax(t_near, axis=1)
        t_enter = t_near[np.arange(len(self.rays)), entry_axis]
        t_exit = np.min(t_far, axis=1)
        hit = (t_enter <= t_exit) & (t_enter > 0) & (t_enter < self.t)
        for axis in range(3):
            for sign in (-1, 1):
                # Entering through the face whose outward normal opposes the ray.
                sel = hit & (entry_axis == axis) & (np.sign(self.rays[:, axis]) == -sign)
                self.t[sel] = t_enter[sel]
                self.ids[sel] = face_ids[(axis, sign)]


def _layout(kind: str, rng: np.random.Generator | None):
    def j(lo, hi, default):
        return default if rng is None else float(rng.uniform(lo, hi))

    floor = (np.array([0.0, 1.0, 0.0]), 0.0)
    boxes: list[_Box] = []
    if kind == "single-plane":
        dist = j(2.0, 6.0, 4.0)
        return dict(eye=np.array([0.0, 1.5, 0.0]), yaw=0.0, pitch=0.0,
                    planes=[(np.array([0.0, 0.0, -1.0]), -dist)], boxes=boxes)

    eye = np.array([0.0, j(1.2, 1.8, 1.5), 0.0])
    pitch = math.radians(j(8.0, 22.0, 15.0))
    if kind == "room":
        yaw = math.radians(j(-30.0, 30.0, 20.0))
        xl, xr, zb = j(2.0, 3.5, 2.5), j(2.0, 3.5, 3.0), j(4.0, 6.5, 5.0)
        planes = [
            floor,
            (np.array([1.0, 0.0, 0.0]), -xl),
            (np.array([-1.0, 0.0, 0.0]), -xr),
            (np.array([0.0, 0.0, -1.0]), -zb),
            (np.array([0.0, 0.0, 1.0]), -2.0),
        ]
        bx, bz = j(-0.8, 0.8, 0.3), j(2.6, 3.6, 3.0)
        w, h = j(0.5, 0.9, 0.7), j(0.4, 0.9, 0.6)
        boxes.append(_Box(np.array([bx - w / 2, 0.0, bz - w / 2]), np.array([bx + w / 2, h, bz + w / 2])))
        return dict(eye=eye, yaw=yaw, pitch=pitch, planes=planes, boxes=boxes)

    # Corner-based scenes: walls at x = X and z = Z, camera looking into the corner.
    yaw = math.radians(j(30.0, 60.0, 45.0))
    X, Z = j(2.5, 4.5, 3.5), j(2.5, 4.5, 3.5)
    planes = [floor, (np.array([-1.0, 0.0, 0.0]), -X), (np.array([0.0, 0.0, -1.0]), -Z)]
    if kind == "box":
        for cx, cz, w, h in [(j(0.6, 1.4, 1.0), j(1.8, 2.6, 2.2), j(0.5, 0.8, 0.6), j(0.4, 0.9, 0.6)),
                             (j(1.8, 2.6, 2.2), j(0.6, 1.4, 1.0), j(0.5, 0.8, 0.6), j(0.4, 0.9, 0.8))]:
            boxes.append(_Box(np.array([cx - w / 2, 0.0, cz - w / 2]), np.array([cx + w / 2, h, cz + w / 2])))
    elif kind == "staircase":
        n_steps = 4
        depth_step, rise = j(0.25, 0.4, 0.3), j(0.15, 0.25, 0.2)
        x0, x1 = j(0.8, 1.4, 1.0), X
        for i in range(n_steps):
            z_front = Z - (n_steps - i) * depth_step
            boxes.append(_Box(np.array([x0, 0.0, z_front]), np.array([x1, (i + 1) * rise, Z])))
    return dict(eye=eye, yaw=yaw, pitch=pitch, planes=planes, boxes=boxes)


def synth_scene(spec: SceneSpec | str = "room", rng_seed=None) -> Scene:
    """Render a synthetic scene with exact depth, camera and plane labels.

    ``rng_seed=None`` gives the canonical layout without jitter; any seed
    (with ``spec.jitter``) perturbs the layout reproducibly. Plane ids are
    numbered 1..K in raster order of first appearance and their normals are
    given in the camera frame with non-positive z.
    """
    if isinstance(spec, str):
        spec = SceneSpec(kind=spec)
    rng = np.random.default_rng(rng_seed) if (rng_seed is not None and spec.jitter) else None
    lay = _layout(spec.kind, rng)
    cam = CameraIntrinsics.from_fov(spec.width, spec.height, spec.fov)
    R = _camera_axes(lay["yaw"], lay["pitch"])

    v, u = np.mgrid[0 : spec.height, 0 : spec.width]
    rays_c = np.stack([(u - cam.u0) / cam.f, (v - cam.v0) / cam.f, np.ones(u.shape)], axis=-1).reshape(-1, 3)
    renderer = _Renderer(lay["eye"], rays_c @ R.T)
    renderer.enclosing(lay["planes"])
    for box in lay["boxes"]:
        renderer.box(box)

    t = renderer.t.reshape(spec.height, spec.width)
    ids = renderer.ids.reshape(spec.height, spec.width)
    valid = np.isfinite(t)
    if not valid.any():
        raise DomainError("scene rendered no surfaces")

    flat = ids.ravel()
    seen, first = np.unique(flat[valid.ravel()], return_index=True)
    order = seen[np.argsort(first)]
    lut = np.zeros(renderer._next, dtype=np.int64)
    lut[order] = np.arange(1, len(order) + 1)
    labels = np.where(valid, lut[ids], 0)
    normals = []
    for sid in order:
        n_c = R.T @ renderer.normals[sid]
        normals.append(-n_c if n_c[2] > 0 else n_c)
    planes = PlaneSegmentation(labels, len(order), np.array(normals).reshape(-1, 3))
    depth = DepthMap(np.where(valid, t, 0.0), valid)
    return Scene(depth, cam, planes)
