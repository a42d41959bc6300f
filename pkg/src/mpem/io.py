"""File formats: MPCS binary matrices, small CSV matrices, binary PGM images.

MPCS layout: 16-byte header (4-byte magic ``MPCS``, little-endian u32 rows,
u32 cols, u32 reserved = 0) followed by rows*cols little-endian float64
values in row-major order.  Vectors are stored as ``n x 1`` matrices.
"""
import struct

import numpy as np

from .errors import DimensionError

MAGIC = b"MPCS"
_HEADER = struct.Struct("<4sIII")


def write_matrix(path, array):
    a = np.asarray(array, dtype="<f8")
    if a.ndim == 1:
        a = a[:, None]
    if a.ndim != 2:
        raise DimensionError(f"can only store 1-D or 2-D arrays, got {a.ndim}-D")
    with open(path, "wb") as f:
        f.write(_HEADER.pack(MAGIC, a.shape[0], a.shape[1], 0))
        f.write(np.ascontiguousarray(a).tobytes())


def read_matrix(path, squeeze=True):
    with open(path, "rb") as f:
        header = f.read(_HEADER.size)
        if len(header) != _HEADER.size:
            raise ValueError(f"{path}: truncated header")
        magic, rows, cols, _ = _HEADER.unpack(header)
        if magic != MAGIC:
            raise ValueError(f"{path}: bad magic {magic!r}")
        data = np.frombuffer(f.read(), dtype="<f8")
    if data.size != rows * cols:
        raise DimensionError(f"{path}: expected {rows * cols} values, found {data.size}")
    a = data.reshape(rows, cols).astype(float)
    if squeeze and cols == 1:
        return a[:, 0]
    return a


def write_csv_matrix(path, array):
    np.savetxt(path, np.atleast_2d(np.asarray(array, dtype=float)), delimiter=",", fmt="%.17g")


def read_csv_matrix(path):
    return np.loadtxt(path, delimiter=",", ndmin=2)


def write_pgm(path, image):
    """Write an 8-bit binary PGM; values are rounded and clipped to 0..255."""
    img = np.clip(np.rint(np.asarray(image, dtype=float)), 0, 255).astype(np.uint8)
    rows, cols = img.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{cols} {rows}\n255\n".encode("ascii"))
        f.write(img.tobytes())


def _pgm_tokens(data, count, pos):
    tokens = []
    while len(tokens) < count:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while data[pos:pos + 1] not in (b"\n", b""):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    return tokens, pos + 1  # exactly one whitespace byte before the raster


def read_pgm(path):
    with open(path, "rb") as f:
        data = f.read()
    (magic, w, h, maxval), pos = _pgm_tokens(data, 4, 0)
    if magic != b"P5":
        raise ValueError(f"{path}: not a binary PGM (magic {magic!r})")
    w, h, maxval = int(w), int(h), int(maxval)
    if maxval > 255:
        raise ValueError(f"{path}: only 8-bit PGM is supported")
    raster = np.frombuffer(data, dtype=np.uint8, count=w * h, offset=pos)
    return raster.reshape(h, w).astype(float)
