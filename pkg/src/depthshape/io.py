"""Depth raster files, PLY export and atomic file writes.

Supported depth formats:

``u16``  binary PGM (``P5``) with 16-bit big-endian samples; depth is the
         stored integer divided by ``divisor``. 0 marks a missing pixel.
``f32``  grayscale PFM (``Pf``); rows are stored bottom-up and the sign of
         the scale field gives the byte order. NaN/inf/0 mark missing pixels.
``txt``  whitespace-separated rows of numbers; ``nan`` marks missing pixels.
"""

from __future__ import annotations

import contextlib
import os
import re
import tempfile
from pathlib import Path

import numpy as np

from .errors import DomainError, EmptyInputError, FormatError
from .geometry import DepthMap, PointCloud

__all__ = ["DEPTH_FORMATS", "read_depth", "write_depth", "write_ply", "atomic_write", "guess_format"]

DEPTH_FORMATS = ("u16", "f32", "txt")
DEFAULT_DIVISOR = 1000.0

_SUFFIX = {".pgm": "u16", ".pfm": "f32", ".txt": "txt"}


@contextlib.contextmanager
def atomic_write(path, mode: str = "wb"):
    """Write to a temporary file next to ``path`` and rename it into place on success."""
    path = Path(path)
    directory = path.parent if str(path.parent) else Path(".")
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=directory)
    try:
        with os.fdopen(fd, mode) as fh:
            yield fh
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        with contextlib.suppress(FileNotFoundError):
            os.unlink(tmp)
        raise


def guess_format(path) -> str:
    fmt = _SUFFIX.get(Path(path).suffix.lower())
    if fmt is None:
        raise DomainError(f"cannot infer depth format from {path!s}; pass one of {DEPTH_FORMATS}")
    return fmt


# Netpbm-style header: tokens separated by whitespace, '#' comments to end of line.
_TOKEN = re.compile(rb"(?:\s|#[^\n]*\n?)*([^\s#]+)")


def _header_tokens(data: bytes, count: int) -> tuple[list[bytes], int]:
    tokens, pos = [], 0
    for _ in range(count):
        m = _TOKEN.match(data, pos)
        if m is None:
            raise FormatError("truncated header", pos)
        tokens.append(m.group(1))
        pos = m.end()
    if pos >= len(data) or data[pos : pos + 1] not in (b" ", b"\t", b"\n", b"\r"):
        raise FormatError("header must end with a single whitespace byte", pos)
    return tokens, pos + 1


def _positive_int(token: bytes, offset: int, what: str) -> int:
    try:
        value = int(token)
    except ValueError:
        raise FormatError(f"invalid {what} {token!r}", offset) from None
    if value <= 0:
        raise FormatError(f"{what} must be positive, got {value}", offset)
    return value


def _read_pgm16(data: bytes, divisor: float) -> DepthMap:
    if data[:2] != b"P5":
        raise FormatError(f"unknown magic {data[:2]!r}, expected b'P5'", 0)
    (w, h, maxval), start = _header_tokens(data[2:], 3)
    start += 2
    width = _positive_int(w, 2, "width")
    height = _positive_int(h, 2, "height")
    maxv = _positive_int(maxval, 2, "maxval")
    if maxv < 256 or maxv > 65535:
        raise FormatError(f"u16 depth needs a maxval in [256, 65535], got {maxv}", 2)
    need = width * height * 2
    body = data[start:]
    if len(body) < need:
        raise FormatError(f"truncated pixel data: expected {need} bytes, found {len(body)}", len(data))
    if len(body) > need:
        raise FormatError(f"dimension mismatch: {len(body) - need} trailing bytes", start + need)
    raw = np.frombuffer(body, dtype=">u2").reshape(height, width).astype(np.float64)
    return DepthMap(raw / divisor, raw > 0)


def _read_pfm(data: bytes) -> DepthMap:
    if data[:2] != b"Pf":
        if data[:2] == b"PF":
            raise FormatError("colour PFM is not a depth raster; expected b'Pf'", 0)
        raise FormatError(f"unknown magic {data[:2]!r}, expected b'Pf'", 0)
    (w, h, s), start = _header_tokens(data[2:], 3)
    start += 2
    width = _positive_int(w, 2, "width")
    height = _positive_int(h, 2, "height")
    try:
        scale = float(s)
    except ValueError:
        raise FormatError(f"invalid scale {s!r}", 2) from None
    if scale == 0 or not np.isfinite(scale):
        raise FormatError("scale must be finite and non-zero", 2)
    need = width * height * 4
    body = data[start:]
    if len(body) < need:
        raise FormatError(f"truncated pixel data: expected {need} bytes, found {len(body)}", len(data))
    if len(body) > need:
        raise FormatError(f"dimension mismatch: {len(body) - need} trailing bytes", start + need)
    dtype = "<f4" if scale < 0 else ">f4"
    vals = np.frombuffer(body, dtype=dtype).reshape(height, width)[::-1].astype(np.float64)
    return DepthMap(vals, np.isfinite(vals) & (vals != 0))


def _read_txt(data: bytes) -> DepthMap:
    rows, offset = [], 0
    for line in data.splitlines(keepends=True):
        text = line.split(b"#", 1)[0].strip()
        if text:
            try:
                rows.append((offset, [float(t) for t in text.split()]))
            except ValueError as exc:
                raise FormatError(f"non-numeric value: {exc}", offset) from None
        offset += len(line)
    if not rows:
        raise FormatError("no data rows", 0)
    width = len(rows[0][1])
    for off, row in rows:
        if len(row) != width:
            raise FormatError(f"dimension mismatch: row has {len(row)} values, expected {width}", off)
    vals = np.array([r for _, r in rows])
    return DepthMap(vals, np.isfinite(vals) & (vals != 0))


def read_depth(path, format: str | None = None, divisor: float = DEFAULT_DIVISOR) -> DepthMap:
    """Load a depth raster; zero, NaN and infinite samples become invalid pixels.

    ``format`` defaults to the one implied by the file suffix. ``divisor``
    only applies to ``u16``.
    """
    fmt = format or guess_format(path)
    if fmt not in DEPTH_FORMATS:
        raise DomainError(f"unknown depth format {fmt!r}; expected one of {DEPTH_FORMATS}")
    if not divisor > 0:
        raise DomainError("divisor must be positive")
    data = Path(path).read_bytes()
    if not data:
        raise FormatError("empty file", 0)
    if fmt == "u16":
        return _read_pgm16(data, divisor)
    if fmt == "f32":
        return _read_pfm(data)
    return _read_txt(data)


def _encode(depth: DepthMap, fmt: str, divisor: float) -> bytes:
    h, w = depth.shape
    if fmt == "u16":
        scaled = np.where(depth.mask, np.rint(depth.values * divisor), 0.0)
        if scaled.min() < 0 or scaled.max() > 65535:
            raise DomainError(f"depth * divisor must fit in [0, 65535]; got range [{scaled.min()}, {scaled.max()}]")
        if np.any(depth.mask & (scaled == 0)):
            raise DomainError("a valid depth rounds to 0, which the u16 format reserves for missing pixels")
        return f"P5\n{w} {h}\n65535\n".encode() + scaled.astype(">u2").tobytes()
    if fmt == "f32":
        vals = np.where(depth.mask, depth.values, np.nan).astype("<f4")
        return f"Pf\n{w} {h}\n-1.0\n".encode() + vals[::-1].tobytes()
    lines = [" ".join(repr(float(x)) if m else "nan" for x, m in zip(row, mrow)) for row, mrow in zip(depth.values, depth.mask)]
    return ("\n".join(lines) + "\n").encode()


def write_depth(depth: DepthMap, path, format: str | None = None, divisor: float = DEFAULT_DIVISOR) -> None:
    """Write ``depth`` atomically; invalid pixels are stored as 0 (u16) or NaN."""
    fmt = format or guess_format(path)
    if fmt not in DEPTH_FORMATS:
        raise DomainError(f"unknown depth format {fmt!r}; expected one of {DEPTH_FORMATS}")
    if not divisor > 0:
        raise DomainError("divisor must be positive")
    payload = _encode(depth, fmt, divisor)
    with atomic_write(path) as fh:
        fh.write(payload)


def write_ply(cloud: PointCloud, path, binary: bool = False) -> None:
    """Export points (and normals, when present) as float32 PLY vertices."""
    n = len(cloud)
    if n == 0:
        raise EmptyInputError("cannot write an empty point cloud")
    names = ["x", "y", "z"]
    cols = [cloud.points]
    if cloud.normals is not None:
        names += ["nx", "ny", "nz"]
        cols.append(cloud.normals)
    data = np.hstack(cols).astype(np.float32)

    fmt = "binary_little_endian" if binary else "ascii"
    header = ["ply", f"format {fmt} 1.0", f"element vertex {n}"]
    header += [f"property float {name}" for name in names]
    header.append("end_header")
    head = ("\n".join(header) + "\n").encode("ascii")
    if binary:
        body = data.astype("<f4").tobytes()
    else:
        # 9 significant digits round-trip any float32 exactly.
        body = "".join(" ".join(f"{v:.9g}" for v in row) + "\n" for row in data.tolist()).encode("ascii")
    try:
        with atomic_write(path) as fh:
            fh.write(head)
            fh.write(body)
    except OSError as exc:
        raise OSError(exc.errno, f"cannot write PLY: {exc.strerror}", str(path)) from exc
