"""Binary voxel grids: boolean algebra, morphology, resampling, overlap and VXG1 I/O.

Grids are plain ``numpy.uint8`` arrays of shape ``(depth, height, width)``
holding only 0 and 1. Real-valued volumes (generator outputs) are float arrays
of the same shape with values in ``[0, 1]``.
"""

from __future__ import annotations

import os
import struct
from typing import Sequence

import numpy as np
from scipy import ndimage

VXG_MAGIC = b"VXG1"
_VXG_HEADER = struct.Struct("<4sIII")

DEFAULT_THRESHOLD = 0.5
DEFAULT_CONNECTIVITY = 26
_CONNECTIVITY_RANK = {6: 1, 18: 2, 26: 3}


class ShapeError(ValueError):
    """Two grids that must share dims do not."""


class VxgFormatError(ValueError):
    """Malformed VXG1 file; the message names the offending byte offset."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


def as_grid(g) -> np.ndarray:
    """Validate ``g`` as a 3D binary grid and return it as uint8."""
    a = np.asarray(g)
    if a.ndim != 3:
        raise ShapeError(f"voxel grid must be 3D, got shape {a.shape}")
    if a.dtype == np.bool_:
        return a.astype(np.uint8)
    if not np.isin(a, (0, 1)).all():
        raise ValueError("voxel grid values must be 0 or 1")
    return a.astype(np.uint8, copy=False)


def _pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a, b = as_grid(a), as_grid(b)
    if a.shape != b.shape:
        raise ShapeError(f"grid dims differ: {a.shape} vs {b.shape}")
    return a, b


def default_min_voxels(dims: Sequence[int]) -> int:
    """0.05% of the grid volume, floored at one voxel."""
    return max(1, int(np.prod(dims) * 0.0005))


# -- boolean algebra ---------------------------------------------------------


def grid_and(a, b) -> np.ndarray:
    a, b = _pair(a, b)
    return a & b


def grid_or(a, b) -> np.ndarray:
    a, b = _pair(a, b)
    return a | b


def grid_xor(a, b) -> np.ndarray:
    a, b = _pair(a, b)
    return a ^ b


def grid_subtract(a, b) -> np.ndarray:
    """Voxels of ``a`` that are not in ``b``."""
    a, b = _pair(a, b)
    return a & (1 - b)


def separate_defect(defect, skull) -> np.ndarray:
    """Strip every defect voxel that collides with the skull: XOR(I, AND(I, S))."""
    return grid_xor(defect, grid_and(defect, skull))


# -- thresholding and resampling ---------------------------------------------


def binarize(volume, threshold: float = DEFAULT_THRESHOLD) -> np.ndarray:
    """Map a real volume to a binary grid; values ``>= threshold`` become 1."""
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must lie in (0, 1), got {threshold}")
    v = np.asarray(volume, dtype=np.float64)
    if v.ndim != 3:
        raise ShapeError(f"volume must be 3D, got shape {v.shape}")
    if not np.isfinite(v).all():
        raise ValueError("volume contains non-finite values")
    return (v >= threshold).astype(np.uint8)


def _nearest_indices(n_in: int, n_out: int) -> np.ndarray:
    # Voxel-center alignment: output center i maps to source floor((i + 0.5) * n_in / n_out).
    idx = ((2 * np.arange(n_out) + 1) * n_in) // (2 * n_out)
    return np.minimum(idx, n_in - 1)


def resample(g, new_dims: Sequence[int]) -> np.ndarray:
    """Nearest-neighbour resampling of a binary grid to ``new_dims``."""
    g = as_grid(g)
    new_dims = tuple(int(d) for d in new_dims)
    if len(new_dims) != 3 or min(new_dims) <= 0:
        raise ValueError(f"target dims must be three positive integers, got {new_dims}")
    iz, iy, ix = (_nearest_indices(n, m) for n, m in zip(g.shape, new_dims))
    return g[np.ix_(iz, iy, ix)]


# -- connected components ----------------------------------------------------


def label_components(g, connectivity: int = DEFAULT_CONNECTIVITY) -> tuple[np.ndarray, np.ndarray]:
    """Label foreground components.

    Returns ``(labels, sizes)``: an int32 map with 0 for background and 1..K for
    components, and an array of K voxel counts where ``sizes[k - 1]`` belongs
    to label ``k``.
    """
    if connectivity not in _CONNECTIVITY_RANK:
        raise ValueError(f"connectivity must be 6, 18 or 26, got {connectivity}")
    g = as_grid(g)
    structure = ndimage.generate_binary_structure(3, _CONNECTIVITY_RANK[connectivity])
    labels, k = ndimage.label(g, structure=structure)
    sizes = np.bincount(labels.ravel(), minlength=k + 1)[1:]
    return labels.astype(np.int32), sizes.astype(np.int64)


def remove_small_components(g, min_voxels: int, connectivity: int = DEFAULT_CONNECTIVITY) -> np.ndarray:
    """Drop every component with fewer than ``min_voxels`` voxels."""
    if min_voxels < 0:
        raise ValueError("min_voxels must be non-negative")
    g = as_grid(g)
    if min_voxels <= 1:
        return g.copy()
    labels, sizes = label_components(g, connectivity)
    keep = np.concatenate([[False], sizes >= min_voxels])
    return keep[labels].astype(np.uint8)


# -- overlap -----------------------------------------------------------------


def dice_coefficient(a, b) -> float:
    """Sørensen–Dice overlap ``2|A∩B| / (|A|+|B|)``; two empty grids score 1."""
    a, b = _pair(a, b)
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((a & b).sum()) / total


# -- VXG1 file format ---------------------------------------------------------


def write_vxg(g, path: str | os.PathLike) -> None:
    g = as_grid(g)
    d, h, w = g.shape
    with open(path, "wb") as f:
        f.write(_VXG_HEADER.pack(VXG_MAGIC, d, h, w))
        f.write(np.ascontiguousarray(g).tobytes())


def decode_vxg(buf: bytes) -> np.ndarray:
    """Parse an in-memory VXG1 image."""
    if len(buf) < _VXG_HEADER.size:
        raise VxgFormatError(f"truncated header: {len(buf)} of {_VXG_HEADER.size} bytes", len(buf))
    magic, d, h, w = _VXG_HEADER.unpack_from(buf)
    if magic != VXG_MAGIC:
        raise VxgFormatError(f"bad magic {magic!r}", 0)
    for offset, n in zip((4, 8, 12), (d, h, w)):
        if n == 0:
            raise VxgFormatError("zero dimension", offset)
    expected = d * h * w
    payload = memoryview(buf)[_VXG_HEADER.size:]
    if len(payload) < expected:
        raise VxgFormatError(
            f"truncated payload: header declares {expected} bytes, found {len(payload)}",
            len(buf),
        )
    if len(payload) > expected:
        raise VxgFormatError(
            f"trailing data: {len(payload) - expected} bytes after payload",
            _VXG_HEADER.size + expected,
        )
    data = np.frombuffer(payload, dtype=np.uint8)
    bad = np.flatnonzero(data > 1)
    if bad.size:
        i = int(bad[0])
        raise VxgFormatError(f"payload byte 0x{data[i]:02x} outside {{0, 1}}", _VXG_HEADER.size + i)
    return data.reshape(d, h, w).copy()


def read_vxg(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as f:
        return decode_vxg(f.read())
