import os
import struct

import numpy as np
import pytest
from plyfile import PlyData

from conftest import random_depth
from depthshape.errors import DomainError, EmptyInputError, FormatError
from depthshape.geometry import CameraIntrinsics, DepthMap, PointCloud, estimate_normals, unproject
from depthshape.io import guess_format, read_depth, write_depth, write_ply
from depthshape.scenes import synth_scene


def pgm(width, height, values, maxval=65535):
    return f"P5\n{width} {height}\n{maxval}\n".encode() + np.asarray(values, ">u2").tobytes()


# --- depth rasters -------------------------------------------------------------

def test_u16_two_by_two(tmp_path):
    path = tmp_path / "d.pgm"
    path.write_bytes(pgm(2, 2, [1000, 2000, 0, 3000]))
    d = read_depth(path)
    assert d.values.tolist() == [[1.0, 2.0], [0.0, 3.0]]
    assert d.mask.tolist() == [[True, True], [False, True]]


def test_u16_header_comments_and_divisor(tmp_path):
    path = tmp_path / "d.pgm"
    path.write_bytes(b"P5 # depth\n# more\n2 1\n65535\n" + np.array([500, 4000], ">u2").tobytes())
    d = read_depth(path, divisor=100)
    assert d.values.tolist() == [[5.0, 40.0]]


def test_f32_nan_is_invalid(tmp_path):
    path = tmp_path / "d.pfm"
    rows = np.array([[1.5, np.nan], [np.inf, 0.25]], "<f4")
    # PFM stores rows bottom-up; a negative scale means little-endian.
    path.write_bytes(b"Pf\n2 2\n-1.0\n" + rows[::-1].tobytes())
    d = read_depth(path)
    assert d.mask.tolist() == [[True, False], [False, True]]
    assert d.values[0, 0] == 1.5 and d.values[1, 1] == 0.25
    assert np.all(np.isfinite(d.values))


def test_f32_big_endian(tmp_path):
    path = tmp_path / "d.pfm"
    path.write_bytes(b"Pf\n1 2\n1.0\n" + np.array([2.0, 3.0], ">f4").tobytes())
    assert read_depth(path).values[:, 0].tolist() == [3.0, 2.0]


def test_txt_reader(tmp_path):
    path = tmp_path / "d.txt"
    path.write_text("# comment\n1 2.5\n\nnan 4\n")
    d = read_depth(path)
    assert d.values.tolist() == [[1.0, 2.5], [0.0, 4.0]]
    assert not d.mask[1, 0]


@pytest.mark.parametrize("fmt, suffix", [("u16", ".pgm"), ("f32", ".pfm"), ("txt", ".txt")])
def test_round_trip(tmp_path, rng, fmt, suffix):
    d = random_depth(rng, (7, 9), 0.5, 6.0, holes=0.2)
    if fmt == "u16":
        d = d.with_values(np.round(d.values * 1000) / 1000)
    path = tmp_path / f"d{suffix}"
    write_depth(d, path, fmt)
    back = read_depth(path)
    assert np.array_equal(back.mask, d.mask)
    tol = {"u16": 1e-12, "f32": 1e-6, "txt": 0.0}[fmt]
    assert np.max(np.abs(back.values - d.values) / np.maximum(d.values, 1)) <= tol


def test_u16_writer_range_checks(tmp_path):
    with pytest.raises(DomainError):
        write_depth(DepthMap(np.array([[70.0]])), tmp_path / "a.pgm")
    with pytest.raises(DomainError, match="rounds to 0"):
        write_depth(DepthMap(np.array([[1e-4]])), tmp_path / "b.pgm")
    assert not list(tmp_path.iterdir())


@pytest.mark.parametrize(
    "data, offset, match",
    [
        (b"P2\n1 1\n65535\n\x00\x01", 0, "magic"),
        (b"P5\n2 2\n65535\n" + b"\x00" * 6, 19, "truncated"),
        (b"P5\n1 1\n65535\n" + b"\x00" * 4, 15, "dimension mismatch"),
        (b"P5\n1 1\n255\n\x00\x01", 2, "maxval"),
        (b"P5\n1 x\n65535\n\x00\x01", None, "invalid"),
    ],
)
def test_pgm_format_errors(tmp_path, data, offset, match):
    path = tmp_path / "bad.pgm"
    path.write_bytes(data)
    with pytest.raises(FormatError, match=match) as info:
        read_depth(path)
    if offset is not None:
        assert info.value.offset == offset
        assert f"offset {offset}" in str(info.value)


def test_pfm_format_errors(tmp_path):
    path = tmp_path / "bad.pfm"
    path.write_bytes(b"PF\n1 1\n-1.0\n" + b"\x00" * 12)
    with pytest.raises(FormatError, match="colour"):
        read_depth(path)
    path.write_bytes(b"Pf\n1 1\n0\n" + b"\x00" * 4)
    with pytest.raises(FormatError, match="scale"):
        read_depth(path)
    path.write_bytes(b"Pf\n2 1\n-1.0\n" + b"\x00" * 4)
    with pytest.raises(FormatError, match="truncated"):
        read_depth(path)


def test_txt_format_errors(tmp_path):
    path = tmp_path / "bad.txt"
    path.write_text("1 2\n3\n")
    with pytest.raises(FormatError, match="dimension mismatch") as info:
        read_depth(path)
    assert info.value.offset == 4
    path.write_text("1 x\n")
    with pytest.raises(FormatError, match="non-numeric"):
        read_depth(path)
    path.write_text("")
    with pytest.raises(FormatError, match="empty"):
        read_depth(path)


def test_format_selection(tmp_path):
    assert guess_format("a/b.PFM") == "f32"
    with pytest.raises(DomainError):
        guess_format("depth.png")
    with pytest.raises(DomainError):
        read_depth(tmp_path / "x.bin", format="png")
    with pytest.raises(FileNotFoundError):
        read_depth(tmp_path / "missing.pgm")


# --- PLY --------------------------------------------------------------------------

@pytest.fixture(scope="module")
def cloud_with_normals():
    scene = synth_scene("box", 1)
    cloud = unproject(scene.depth, scene.cam)
    nm = estimate_normals(scene.depth, scene.cam)
    u, v = cloud.source_pixel[:, 0], cloud.source_pixel[:, 1]
    keep = nm.mask[v, u]
    u, v = u[keep], v[keep]
    return PointCloud(cloud.points[keep], cloud.source_pixel[keep], nm.normals[v, u])


def test_ply_ascii_header(tmp_path):
    cloud = PointCloud(np.array([[0.0, 0.5, 1.0], [1.0, 2.0, 3.0]]))
    path = tmp_path / "p.ply"
    write_ply(cloud, path)
    lines = path.read_text().splitlines()
    assert lines[:6] == [
        "ply",
        "format ascii 1.0",
        "element vertex 2",
        "property float x",
        "property float y",
        "property float z",
    ]
    assert lines[6] == "end_header" and lines[7].split() == ["0", "0.5", "1"]


@pytest.mark.parametrize("binary", [False, True])
def test_ply_matches_reference_reader(tmp_path, cloud_with_normals, binary):
    path = tmp_path / "p.ply"
    write_ply(cloud_with_normals, path, binary=binary)
    ply = PlyData.read(str(path))
    vert = ply["vertex"]
    assert [p.name for p in vert.properties] == ["x", "y", "z", "nx", "ny", "nz"]
    assert vert.count == len(cloud_with_normals)
    xyz = np.column_stack([vert[k] for k in "xyz"])
    nrm = np.column_stack([vert[k] for k in ("nx", "ny", "nz")])
    assert np.max(np.abs(xyz - cloud_with_normals.points)) <= 1e-6 * np.abs(cloud_with_normals.points).max()
    assert np.max(np.abs(nrm - cloud_with_normals.normals)) <= 1e-6
    assert ply.text is (not binary)


def test_ply_binary_layout(tmp_path):
    path = tmp_path / "p.ply"
    write_ply(PointCloud(np.array([[1.0, 2.0, 3.0]])), path, binary=True)
    data = path.read_bytes()
    head, body = data.split(b"end_header\n")
    assert b"binary_little_endian" in head
    assert struct.unpack("<3f", body) == (1.0, 2.0, 3.0)


def test_ply_empty_and_unwritable(tmp_path):
    with pytest.raises(EmptyInputError):
        write_ply(PointCloud(np.zeros((0, 3))), tmp_path / "e.ply")
    with pytest.raises(OSError, match="cannot write PLY"):
        write_ply(PointCloud(np.ones((1, 3))), tmp_path / "no" / "dir" / "p.ply")


def test_atomic_write_leaves_no_temp_files(tmp_path):
    cam = CameraIntrinsics.from_fov(4, 3)
    d = DepthMap(np.full((3, 4), 2.0))
    write_depth(d, tmp_path / "d.pfm")
    write_ply(unproject(d, cam), tmp_path / "p.ply")
    assert sorted(os.listdir(tmp_path)) == ["d.pfm", "p.ply"]
