"""Dense float64 arrays and the handful of primitives the layers build on.

Tensors are plain C-contiguous ``numpy.ndarray`` objects of dtype float64.
Random draws use numpy's ``PCG64`` bit generator (``numpy.random.default_rng``)
seeded with an integer or a sequence of integers; the same seed always yields
the same tensor.

On-disk format (little endian)::

    b"TCNDS001" | u32 rank | u32 extents[rank] | f64 values (row-major)
"""
from __future__ import annotations

import io
import struct
from pathlib import Path
from typing import BinaryIO, Sequence

import numpy as np

from .errors import ParameterError, ShapeError

MAGIC = b"TCNDS001"
DTYPE = np.float64


def _check_shape(shape: Sequence[int]) -> tuple[int, ...]:
    shape = tuple(int(s) for s in shape)
    if len(shape) == 0 or any(s < 1 for s in shape):
        raise ShapeError(f"every extent must be >= 1, got {shape}")
    return shape


def as_tensor(x) -> np.ndarray:
    return np.ascontiguousarray(x, dtype=DTYPE)


def zeros(shape: Sequence[int]) -> np.ndarray:
    return np.zeros(_check_shape(shape), dtype=DTYPE)


def rng(seed) -> np.random.Generator:
    """PCG64 generator; ``seed`` may be an int, a sequence of ints or a Generator."""
    return np.random.default_rng(seed)


def gaussian_init(shape: Sequence[int], std: float, seed) -> np.ndarray:
    """i.i.d. N(0, std^2) draws, reproducible for a fixed (shape, std, seed)."""
    if not std > 0:
        raise ParameterError(f"std must be > 0, got {std}")
    shape = _check_shape(shape)
    return rng(seed).normal(0.0, std, size=shape).astype(DTYPE, copy=False)


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul needs 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner extents differ: {a.shape} x {b.shape}")
    return a @ b


def elementwise_add(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.shape != b.shape:
        raise ShapeError(f"cannot add tensors of shape {a.shape} and {b.shape}")
    return a + b


def scale(t: np.ndarray, c: float) -> np.ndarray:
    return t * c


def mean_abs(t: np.ndarray) -> float:
    if t.size == 0:
        raise ShapeError("mean_abs of an empty tensor")
    return float(np.mean(np.abs(t)))


def write_tensor(f: BinaryIO, t: np.ndarray) -> None:
    t = as_tensor(t)
    f.write(MAGIC)
    f.write(struct.pack(f"<I{t.ndim}I", t.ndim, *t.shape))
    f.write(t.astype("<f8", copy=False).tobytes(order="C"))


def read_tensor(f: BinaryIO) -> np.ndarray:
    magic = f.read(8)
    if magic != MAGIC:
        raise ShapeError(f"bad tensor magic {magic!r}")
    (rank,) = struct.unpack("<I", f.read(4))
    shape = struct.unpack(f"<{rank}I", f.read(4 * rank))
    n = int(np.prod(shape)) if rank else 1
    buf = f.read(8 * n)
    if len(buf) != 8 * n:
        raise ShapeError("truncated tensor payload")
    return np.frombuffer(buf, dtype="<f8").astype(DTYPE).reshape(shape)


def to_bytes(t: np.ndarray) -> bytes:
    buf = io.BytesIO()
    write_tensor(buf, t)
    return buf.getvalue()


def from_bytes(data: bytes) -> np.ndarray:
    return read_tensor(io.BytesIO(data))


def save_tensor(path, t: np.ndarray) -> None:
    Path(path).write_bytes(to_bytes(t))


def load_tensor(path) -> np.ndarray:
    return from_bytes(Path(path).read_bytes())
