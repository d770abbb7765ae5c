import numpy as np
import pytest

from depthshape.geometry import CameraIntrinsics, DepthMap


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_depth(rng, shape=(16, 20), lo=0.5, hi=5.0, holes=0.1):
    values = rng.uniform(lo, hi, size=shape)
    mask = rng.random(shape) >= holes
    return DepthMap(values, mask)


def plane_depth(cam: CameraIntrinsics, shape, normal, offset):
    """Depth of the plane n . X = offset seen through ``cam`` (ray z = 1)."""
    H, W = shape
    v, u = np.mgrid[0:H, 0:W]
    rx, ry = (u - cam.u0) / cam.f, (v - cam.v0) / cam.f
    n = np.asarray(normal, dtype=float)
    return offset / (n[0] * rx + n[1] * ry + n[2])
