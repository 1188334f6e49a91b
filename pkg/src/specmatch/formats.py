"""Binary artifact formats: FMAT, PMAP, SPEC basis blocks, and PPM heatmaps.

All multi-byte fields are little-endian. Writers are atomic (temp file in the
target directory + rename) so concurrent readers never observe a torn file.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .errors import FormatError, ShapeMismatch

FMAT_MAGIC = b"FMAT"
PMAP_MAGIC = b"PMAP"
SPEC_MAGIC = b"SPEC"


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode())


def write_json(path, obj) -> None:
    atomic_write_text(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def read_json(path):
    with open(path) as fh:
        return json.load(fh)


def _take(buf: bytes, offset: int, size: int, what: str):
    if offset + size > len(buf):
        raise FormatError(f"truncated file while reading {what}")
    return buf[offset : offset + size], offset + size


def write_fmat(path, matrix) -> None:
    """Write a dense f64 matrix: magic, u32 rows, u32 cols, row-major payload."""
    m = np.ascontiguousarray(matrix, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeMismatch(f"FMAT wants a 2-D matrix, got shape {m.shape}")
    header = FMAT_MAGIC + struct.pack("<II", m.shape[0], m.shape[1])
    atomic_write_bytes(path, header + m.tobytes())


def read_fmat(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    magic, off = _take(buf, 0, 4, "magic")
    if magic != FMAT_MAGIC:
        raise FormatError(f"{path}: bad FMAT magic {magic!r}")
    hdr, off = _take(buf, off, 8, "header")
    rows, cols = struct.unpack("<II", hdr)
    payload, off = _take(buf, off, 8 * rows * cols, "payload")
    return np.frombuffer(payload, dtype="<f8").reshape(rows, cols).copy()


def write_pmap(path, indices) -> None:
    """Write a point-to-point map: magic, u32 n, u32 target indices."""
    idx = np.ascontiguousarray(indices, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeMismatch(f"PMAP wants a 1-D index array, got shape {idx.shape}")
    if idx.size and idx.min() < 0:
        raise FormatError("PMAP indices must be nonnegative")
    header = PMAP_MAGIC + struct.pack("<I", idx.size)
    atomic_write_bytes(path, header + idx.astype("<u4").tobytes())


def read_pmap(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    magic, off = _take(buf, 0, 4, "magic")
    if magic != PMAP_MAGIC:
        raise FormatError(f"{path}: bad PMAP magic {magic!r}")
    hdr, off = _take(buf, off, 4, "header")
    (n,) = struct.unpack("<I", hdr)
    payload, off = _take(buf, off, 4 * n, "payload")
    return np.frombuffer(payload, dtype="<u4").astype(np.int64)


def write_basis(path, phi, lam) -> None:
    """Cache an eigenbasis: magic, u32 n, u32 k, Phi row-major f64, lambda f64."""
    phi = np.ascontiguousarray(phi, dtype=np.float64)
    lam = np.ascontiguousarray(lam, dtype=np.float64)
    if phi.ndim != 2 or lam.ndim != 1 or phi.shape[1] != lam.size:
        raise ShapeMismatch("basis block wants Phi (n, k) and lambda (k,)")
    header = SPEC_MAGIC + struct.pack("<II", phi.shape[0], phi.shape[1])
    atomic_write_bytes(path, header + phi.tobytes() + lam.tobytes())


def read_basis(path):
    buf = Path(path).read_bytes()
    magic, off = _take(buf, 0, 4, "magic")
    if magic != SPEC_MAGIC:
        raise FormatError(f"{path}: bad SPEC magic {magic!r}")
    hdr, off = _take(buf, off, 8, "header")
    n, k = struct.unpack("<II", hdr)
    phi_raw, off = _take(buf, off, 8 * n * k, "eigenfunctions")
    lam_raw, off = _take(buf, off, 8 * k, "eigenvalues")
    phi = np.frombuffer(phi_raw, dtype="<f8").reshape(n, k).copy()
    lam = np.frombuffer(lam_raw, dtype="<f8").copy()
    return phi, lam


def write_ppm(path, matrix, sidecar: bool = True) -> float:
    """Write a matrix as a binary P6 grayscale heatmap.

    Values map linearly from [0, max] to [0, 255]; the scale maximum is
    echoed into a ``<path>.json`` sidecar so the image stays invertible.
    Returns the maximum used.
    """
    m = np.asarray(matrix, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeMismatch(f"PPM wants a 2-D matrix, got shape {m.shape}")
    top = float(m.max()) if m.size else 0.0
    if top > 0.0:
        gray = np.clip(np.rint(255.0 * np.clip(m, 0.0, None) / top), 0, 255)
    else:
        gray = np.zeros_like(m)
    gray = gray.astype(np.uint8)
    rgb = np.repeat(gray[:, :, None], 3, axis=2)
    header = f"P6\n{m.shape[1]} {m.shape[0]}\n255\n".encode()
    atomic_write_bytes(path, header + rgb.tobytes())
    if sidecar:
        write_json(str(path) + ".json", {"max": top, "rows": m.shape[0], "cols": m.shape[1]})
    return top
