import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from conftest import plane_depth, random_depth
from depthshape.errors import DegenerateInputError, DomainError, EmptyInputError
from depthshape.geometry import (
    CameraIntrinsics,
    DepthMap,
    NormalMap,
    PointCloud,
    apply_shift,
    estimate_normals,
    normalize_unit_range,
    scale_focal,
    unproject,
    unproject_grid,
)
from depthshape.scenes import synth_scene


# --- types -------------------------------------------------------------------

def test_depthmap_masks_non_finite_values():
    d = DepthMap(np.array([[1.0, np.nan], [np.inf, 2.0]]))
    assert d.mask.tolist() == [[True, False], [False, True]]
    assert np.all(np.isfinite(d.values))
    assert d.valid_count == 2


def test_depthmap_is_read_only():
    d = DepthMap(np.ones((2, 2)))
    with pytest.raises(ValueError):
        d.values[0, 0] = 5


@pytest.mark.parametrize("bad", [np.zeros((0, 3)), np.zeros(4), np.zeros((2, 2, 2))])
def test_depthmap_rejects_bad_shapes(bad):
    with pytest.raises(DomainError):
        DepthMap(bad)


def test_depthmap_mask_shape_checked():
    with pytest.raises(DomainError):
        DepthMap(np.ones((2, 2)), np.ones((3, 2), bool))


@pytest.mark.parametrize("f", [0.0, -1.0, math.inf, math.nan])
def test_camera_requires_positive_focal(f):
    with pytest.raises(DomainError):
        CameraIntrinsics(0, 0, f)


def test_camera_from_fov():
    cam = CameraIntrinsics.from_fov(128, 96, 60.0)
    assert cam.f == pytest.approx(64 / math.tan(math.radians(30)), abs=1e-12)
    assert (cam.u0, cam.v0) == (63.5, 47.5)
    assert cam.fov(128) == pytest.approx(60.0, abs=1e-12)
    for bad in (0.0, 180.0, -5.0):
        with pytest.raises(DomainError):
            CameraIntrinsics.from_fov(10, 10, bad)


def test_pointcloud_invariants():
    with pytest.raises(DomainError):
        PointCloud(np.zeros((2, 3)), normals=np.array([[0, 0, 1.0], [0, 0, 2.0]]))
    with pytest.raises(DomainError):
        PointCloud(np.zeros((2, 3)), source_pixel=np.zeros((3, 2)))
    pc = PointCloud(np.zeros((2, 3)), normals=np.array([[0, 0, 1.0], [1.0, 0, 0]]))
    assert len(pc) == 2


# --- unprojection -------------------------------------------------------------

def test_unproject_optical_centre():
    cam = CameraIntrinsics(1, 1, 2)
    pc = unproject(DepthMap(np.full((3, 3), 2.0)), cam)
    i = list(map(tuple, pc.source_pixel)).index((1, 1))
    assert np.allclose(pc.points[i], (0, 0, 2))


def test_unproject_45_degree_ray():
    cam = CameraIntrinsics(u0=1.0, v0=0.0, f=3.0)
    d = np.zeros((1, 5))
    d[0, 4] = 1.0
    pc = unproject(DepthMap(d, d > 0), cam)
    assert np.allclose(pc.points, [[1, 0, 1]])


def test_unproject_3x3_against_scalar_oracle():
    cam = CameraIntrinsics(1, 1, 2)
    pc = unproject(DepthMap(np.full((3, 3), 4.0)), cam)
    assert np.allclose(pc.points[0], (-2, -2, 4))
    for (u, v), p in zip(pc.source_pixel, pc.points):
        assert np.allclose(p, oracles.unproject_pixel(u, v, 4.0, 1, 1, 2), atol=1e-12)


def test_unproject_raster_order_and_oracle(rng):
    d = random_depth(rng)
    cam = CameraIntrinsics(7.3, 5.1, 11.0)
    pc = unproject(d, cam)
    assert len(pc) == d.valid_count
    expected = [
        oracles.unproject_pixel(u, v, d.values[v, u], cam.u0, cam.v0, cam.f)
        for v in range(d.height)
        for u in range(d.width)
        if d.mask[v, u]
    ]
    assert np.allclose(pc.points, expected, atol=1e-12)
    grid = unproject_grid(d, cam)
    assert np.all(np.isnan(grid[~d.mask]))


def test_unproject_empty_raises():
    with pytest.raises(EmptyInputError):
        unproject(DepthMap(np.zeros((2, 2)), np.zeros((2, 2), bool)), CameraIntrinsics(0, 0, 1))


@settings(max_examples=40, deadline=None)
@given(s=st.floats(1e-3, 1e3), seed=st.integers(0, 2**16))
def test_unproject_linear_in_depth(s, seed):
    d = random_depth(np.random.default_rng(seed), (6, 7))
    cam = CameraIntrinsics(3.0, 2.5, 9.0)
    a = unproject(d.with_values(s * d.values), cam).points
    b = s * unproject(d, cam).points
    assert np.max(np.abs(a - b)) <= 1e-12 * max(1.0, np.max(np.abs(b)))


def test_shift_is_not_a_uniform_scaling():
    scene = synth_scene("two-wall")
    cam = scene.cam
    a = unproject(scene.depth, cam).points
    b = unproject(apply_shift(scene.depth, 0.5), cam).points
    idx = np.random.default_rng(0).choice(len(a), size=(200, 2))
    da = np.linalg.norm(a[idx[:, 0]] - a[idx[:, 1]], axis=1)
    db = np.linalg.norm(b[idx[:, 0]] - b[idx[:, 1]], axis=1)
    ok = da > 1e-9
    ratio = db[ok] / da[ok]
    assert ratio.max() - ratio.min() > 1e-6


# --- shift / focal ------------------------------------------------------------

def test_apply_shift_examples():
    d = DepthMap(np.array([[1.0, 2.0]]))
    assert apply_shift(d, 0).values.tolist() == [[1.0, 2.0]]
    assert apply_shift(d, 0.5).values.tolist() == [[1.5, 2.5]]


def test_apply_shift_round_trip_and_mask(rng):
    d = random_depth(rng)
    back = apply_shift(apply_shift(d, 0.37), -0.37)
    assert np.max(np.abs(back.values - d.values)) < 1e-12
    assert np.array_equal(back.mask, d.mask)
    assert np.all(apply_shift(d, 3.0).values[~d.mask] == 0)


def test_scale_focal():
    cam = CameraIntrinsics(5, 6, 100)
    assert scale_focal(cam, 1).f == 100
    assert scale_focal(cam, 0.6).f == pytest.approx(60)
    assert (scale_focal(cam, 0.6).u0, scale_focal(cam, 0.6).v0) == (5, 6)
    for bad in (0, -1):
        with pytest.raises(DomainError):
            scale_focal(cam, bad)


def test_scale_focal_only_changes_xy(rng):
    d = random_depth(rng)
    cam = CameraIntrinsics(9.5, 7.5, 20.0)
    alpha = 1.7
    a = unproject(d, cam).points
    b = unproject(d, scale_focal(cam, alpha)).points
    assert np.max(np.abs(a[:, 2] - b[:, 2])) <= 1e-12
    assert np.allclose(b[:, :2], a[:, :2] / alpha, rtol=1e-12, atol=1e-12)


# --- normalisation --------------------------------------------------------------

def test_normalize_unit_range():
    assert normalize_unit_range(DepthMap(np.array([[2.0, 4.0, 6.0]]))).values.tolist() == [[0, 0.5, 1]]
    x = DepthMap(np.array([[0.0, 0.25, 1.0]]))
    assert np.allclose(normalize_unit_range(x).values, x.values)
    with pytest.raises(DegenerateInputError):
        normalize_unit_range(DepthMap(np.array([[5.0, 5.0, 5.0]])))


# --- normals ----------------------------------------------------------------

def test_normals_fronto_parallel():
    cam = CameraIntrinsics.from_fov(24, 20, 60)
    nm = estimate_normals(DepthMap(np.full((20, 24), 3.0)), cam)
    assert nm.mask.all()
    assert np.max(np.abs(nm.normals - [0, 0, -1])) < 1e-6


def test_normals_slanted_plane_z_5_plus_0p1x():
    # z = 5 + 0.1 x  <=>  -0.1 x + z = 5
    cam = CameraIntrinsics.from_fov(32, 32, 60)
    depth = DepthMap(plane_depth(cam, (32, 32), (-0.1, 0.0, 1.0), 5.0))
    nm = estimate_normals(depth, cam)
    expected = np.array([0.1, 0.0, -1.0]) / math.sqrt(1.01)
    inner = nm.normals[2:-2, 2:-2]
    assert np.max(np.abs(inner - expected)) < 1e-4


@pytest.mark.parametrize("window", [3, 5, 7, 9])
def test_normals_exact_on_planes_any_window(window):
    cam = CameraIntrinsics.from_fov(30, 26, 55)
    n = np.array([0.3, -0.4, 0.8])
    depth = DepthMap(plane_depth(cam, (26, 30), n, 4.0))
    nm = estimate_normals(depth, cam, window)
    expected = n / np.linalg.norm(n)
    expected = -expected if expected[2] > 0 else expected
    assert nm.mask.all()
    assert np.max(np.abs(nm.normals - expected)) < 1e-6


def test_normals_match_pixel_oracle(rng):
    cam = CameraIntrinsics(6.0, 5.0, 9.0)
    d = random_depth(rng, (11, 13), 1.0, 2.0, holes=0.2)
    nm = estimate_normals(d, cam)
    grid = unproject_grid(d, cam)
    checked = 0
    for i in range(d.height):
        for j in range(d.width):
            if nm.mask[i, j]:
                ref = oracles.pixel_normal(grid, d.mask, i, j)
                assert abs(abs(np.dot(ref, nm.normals[i, j])) - 1) < 1e-9
                assert nm.normals[i, j, 2] <= 0
                checked += 1
    assert checked > 50


def test_normals_invalid_when_too_few_or_collinear():
    cam = CameraIntrinsics(3, 3, 5)
    values = np.zeros((7, 7))
    values[3, 2:5] = [2.0, 2.0, 2.0]  # three collinear points
    values[0, 0] = values[0, 1] = 1.0  # only two points in any window around these
    d = DepthMap(values, values > 0)
    nm = estimate_normals(d, cam)
    assert not nm.mask.any()


def test_normals_window_validation():
    d = DepthMap(np.ones((5, 5)))
    cam = CameraIntrinsics(2, 2, 3)
    for w in (1, 2, 4):
        with pytest.raises(DomainError):
            estimate_normals(d, cam, w)


def test_normals_unit_and_oriented(rng):
    d = random_depth(rng, (20, 20))
    nm = estimate_normals(d, CameraIntrinsics(10, 10, 15))
    n = nm.normals[nm.mask]
    assert np.max(np.abs(np.linalg.norm(n, axis=1) - 1)) < 1e-9
    assert np.all(n[:, 2] <= 0)


def test_normals_chunking_does_not_change_result(rng):
    d = random_depth(rng, (23, 9))
    cam = CameraIntrinsics(4, 11, 10)
    a = estimate_normals(d, cam, chunk_rows=64)
    b = estimate_normals(d, cam, chunk_rows=4)
    assert np.array_equal(a.mask, b.mask)
    assert np.array_equal(a.normals, b.normals)


def test_normalmap_validates_shape():
    with pytest.raises(DomainError):
        NormalMap(np.zeros((3, 3)))
