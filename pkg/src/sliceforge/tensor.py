"""Dense float32 tensors and the "TSR1" binary file format.

Layout convention is batch x channels x height x width, row-major, rank 1..4.
Tensors are immutable once constructed; reductions and matrix products
accumulate in float64 before storing back to float32.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .errors import FormatError, NumericError, ShapeError

MAGIC = b"TSR1"
MAX_RANK = 4
_MAX_ELEMENTS = 2 ** 31  # keeps every dim and offset within u32


def _validate_dims(dims: Sequence[int]) -> tuple[int, ...]:
    dims = tuple(int(d) for d in dims)
    if not 1 <= len(dims) <= MAX_RANK:
        raise ShapeError(f"rank must be 1..{MAX_RANK}, got {len(dims)}")
    if any(d < 1 for d in dims):
        raise ShapeError(f"all dims must be >= 1, got {dims}")
    count = 1
    for d in dims:
        count *= d
    if count > _MAX_ELEMENTS:
        raise ShapeError(f"element count {count} exceeds limit {_MAX_ELEMENTS}")
    return dims


class Tensor:
    """Immutable dense array of 32-bit reals with explicit shape."""

    __slots__ = ("data",)

    def __init__(self, data: np.ndarray):
        arr = np.ascontiguousarray(data, dtype=np.float32)
        _validate_dims(arr.shape)
        if not np.all(np.isfinite(arr)):
            raise NumericError("tensor contains NaN or Inf")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    def __setattr__(self, name, value):
        raise AttributeError("Tensor is immutable")

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def rank(self) -> int:
        return self.data.ndim

    def tolist(self):
        return self.data.tolist()

    def __repr__(self):
        return f"Tensor(shape={self.shape})"


def create(shape: Sequence[int], fill: float | Sequence[float] = 0.0) -> Tensor:
    """Build a tensor from a scalar fill or a flat value list."""
    dims = _validate_dims(shape)
    if np.isscalar(fill):
        return Tensor(np.full(dims, float(fill), dtype=np.float32))
    values = np.asarray(fill, dtype=np.float32).reshape(-1)
    count = int(np.prod(dims))
    if values.size != count:
        raise ShapeError(
            f"value list has {values.size} elements, shape {dims} needs {count}"
        )
    return Tensor(values.reshape(dims))


def map_zip(a: Tensor, b: Tensor | None, fn: Callable) -> Tensor:
    """Apply ``fn`` elementwise over one tensor, or zip it over two.

    ``fn`` receives ndarrays and must act pointwise; the result keeps the
    input shape.
    """
    if b is None:
        out = fn(a.data)
    else:
        if a.shape != b.shape:
            raise ShapeError(f"shape mismatch {a.shape} vs {b.shape}")
        out = fn(a.data, b.data)
    out = np.asarray(out)
    if out.shape != a.shape:
        raise ShapeError(f"fn changed shape {a.shape} -> {out.shape}")
    return Tensor(out)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of two rank-2 tensors, accumulated in float64."""
    if a.rank != 2 or b.rank != 2:
        raise ShapeError(f"matmul needs rank-2 operands, got {a.shape} x {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner dims disagree: {a.shape} x {b.shape}")
    out = matmul_f64(a.data, b.data)
    return Tensor(out.astype(np.float32))


def matmul_f64(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Float64 matrix product of 2-D arrays; result stays float64."""
    return np.matmul(a.astype(np.float64, copy=False), b.astype(np.float64, copy=False))


def write_array(path, arr: np.ndarray) -> None:
    """Serialize an array in TSR1 form: magic, u32 rank, u32 dims, f32 payload."""
    arr = np.ascontiguousarray(arr, dtype=np.float32)
    dims = _validate_dims(arr.shape)
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"refusing to write non-finite values to {path}")
    with open(path, "wb") as fh:
        fh.write(_encode_array(arr, dims))


def _encode_array(arr: np.ndarray, dims: tuple[int, ...]) -> bytes:
    header = MAGIC + struct.pack("<I", len(dims))
    header += struct.pack(f"<{len(dims)}I", *dims)
    return header + arr.astype("<f4", copy=False).tobytes()


def read_array(path) -> np.ndarray:
    """Read a TSR1 file back into a float32 array, bit-exactly."""
    blob = Path(path).read_bytes()
    arr, used = _decode_array(blob, path)
    if used != len(blob):
        raise FormatError(f"{path}: {len(blob) - used} trailing bytes after payload")
    return arr


def _decode_array(blob: bytes, label) -> tuple[np.ndarray, int]:
    if len(blob) < 8:
        raise FormatError(f"{label}: truncated header")
    if blob[:4] != MAGIC:
        raise FormatError(f"{label}: bad magic {blob[:4]!r}")
    (rank,) = struct.unpack_from("<I", blob, 4)
    if not 1 <= rank <= MAX_RANK:
        raise FormatError(f"{label}: rank {rank} outside 1..{MAX_RANK}")
    need = 8 + 4 * rank
    if len(blob) < need:
        raise FormatError(f"{label}: truncated dim list")
    dims = struct.unpack_from(f"<{rank}I", blob, 8)
    try:
        dims = _validate_dims(dims)
    except ShapeError as exc:
        raise FormatError(f"{label}: {exc}") from exc
    count = int(np.prod(dims))
    end = need + 4 * count
    if len(blob) < end:
        raise FormatError(f"{label}: truncated payload ({len(blob) - need} of {4 * count} bytes)")
    arr = np.frombuffer(blob, dtype="<f4", count=count, offset=need)
    return arr.reshape(dims).copy(), end


def write_tensor(path, t: Tensor) -> None:
    write_array(path, t.data)


def read_tensor(path) -> Tensor:
    return Tensor(read_array(path))


def read_header(path) -> tuple[int, ...]:
    """Dims of a TSR1 file without loading the payload."""
    with open(path, "rb") as fh:
        head = fh.read(8)
        if len(head) < 8:
            raise FormatError(f"{path}: truncated header")
        if head[:4] != MAGIC:
            raise FormatError(f"{path}: bad magic {head[:4]!r}")
        (rank,) = struct.unpack("<I", head[4:])
        if not 1 <= rank <= MAX_RANK:
            raise FormatError(f"{path}: rank {rank} outside 1..{MAX_RANK}")
        raw = fh.read(4 * rank)
        if len(raw) < 4 * rank:
            raise FormatError(f"{path}: truncated dim list")
        return struct.unpack(f"<{rank}I", raw)


def write_pgm(path, image: np.ndarray) -> None:
    """Export a 2-D array as an 8-bit binary PGM (P5), min-max scaled."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2:
        raise ShapeError(f"PGM export needs a 2-D array, got shape {image.shape}")
    lo, hi = float(image.min()), float(image.max())
    if hi > lo:
        scaled = (image - lo) / (hi - lo)
    else:
        scaled = np.zeros_like(image)
    pixels = np.round(scaled * 255.0).astype(np.uint8)
    h, w = image.shape
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n255\n" % (w, h))
        fh.write(pixels.tobytes())
