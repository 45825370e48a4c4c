"""Dense tensor container, contraction-axis block partitioning and the DQT1 file format.

DQT1 layout (all little-endian)::

    b"DQT1" | u32 rank | rank x u64 dims | prod(dims) x f32
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

MAGIC = b"DQT1"


class TensorFormatError(ValueError):
    """Base class for container load failures."""


class MalformedHeaderError(TensorFormatError):
    pass


class LengthMismatchError(TensorFormatError):
    pass


class NonFiniteError(TensorFormatError):
    pass


@dataclass(frozen=True)
class Tensor:
    """Immutable row-major float32 tensor.

    ``data`` is stored flat; ``array`` gives a read-only reshaped view.
    """

    shape: tuple[int, ...]
    data: np.ndarray

    def __post_init__(self):
        shape = tuple(int(d) for d in self.shape)
        if any(d < 1 for d in shape):
            raise ValueError(f"dimensions must be positive, got {shape}")
        data = np.ascontiguousarray(self.data, dtype=np.float32).reshape(-1).copy()
        if data.size != math.prod(shape):
            raise ValueError(f"data length {data.size} does not match shape {shape}")
        data.setflags(write=False)
        object.__setattr__(self, "shape", shape)
        object.__setattr__(self, "data", data)

    @classmethod
    def from_array(cls, arr) -> "Tensor":
        arr = np.asarray(arr, dtype=np.float32)
        return cls(arr.shape, arr.reshape(-1))

    @property
    def array(self) -> np.ndarray:
        return self.data.reshape(self.shape)

    @property
    def size(self) -> int:
        return self.data.size

    def __array__(self, dtype=None, copy=None):
        arr = self.array
        return arr if dtype is None else arr.astype(dtype)

    def __eq__(self, other):
        if not isinstance(other, Tensor):
            return NotImplemented
        return self.shape == other.shape and self.data.tobytes() == other.data.tobytes()

    def __hash__(self):
        return hash((self.shape, self.data.tobytes()))


@dataclass(frozen=True)
class BlockPartition:
    axis_len: int
    block_size: int
    blocks: tuple[tuple[int, int], ...]

    def __len__(self):
        return len(self.blocks)

    def __iter__(self):
        return iter(self.blocks)

    @property
    def num_full(self) -> int:
        return self.axis_len // self.block_size

    @property
    def tail(self) -> int:
        return self.axis_len % self.block_size

    def slices(self) -> list[slice]:
        return [slice(start, start + length) for start, length in self.blocks]


def partition(axis_len: int, block_size: int) -> BlockPartition:
    """Split ``[0, axis_len)`` into consecutive spans of ``block_size``.

    The last span is shorter when ``block_size`` does not divide ``axis_len``;
    nothing is padded.
    """
    if axis_len < 1 or block_size < 1:
        raise ValueError("axis_len and block_size must be >= 1")
    spans = tuple(
        (start, min(block_size, axis_len - start)) for start in range(0, axis_len, block_size)
    )
    return BlockPartition(axis_len, block_size, spans)


def encode_tensor(t: Tensor) -> bytes:
    header = MAGIC + struct.pack("<I", len(t.shape))
    header += struct.pack(f"<{len(t.shape)}Q", *t.shape)
    return header + t.data.astype("<f4").tobytes()


def decode_tensor(buf: bytes, offset: int = 0) -> tuple[Tensor, int]:
    """Parse a DQT1 record starting at ``offset``; return the tensor and the end offset."""
    if len(buf) - offset < 8 or buf[offset : offset + 4] != MAGIC:
        raise MalformedHeaderError("missing DQT1 magic")
    (rank,) = struct.unpack_from("<I", buf, offset + 4)
    pos = offset + 8
    if len(buf) - pos < 8 * rank:
        raise MalformedHeaderError(f"truncated header: rank {rank}")
    dims = struct.unpack_from(f"<{rank}Q", buf, pos)
    pos += 8 * rank
    if any(d == 0 for d in dims):
        raise MalformedHeaderError(f"zero-sized dimension in {dims}")
    count = math.prod(dims)
    available = (len(buf) - pos) // 4
    if available < count or (offset == 0 and len(buf) - pos != 4 * count):
        raise LengthMismatchError(
            f"header declares {count} elements, payload holds {(len(buf) - pos) / 4:g}"
        )
    data = np.frombuffer(buf, dtype="<f4", count=count, offset=pos).astype(np.float32)
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{int(np.sum(~np.isfinite(data)))} non-finite element(s)")
    return Tensor(tuple(dims), data), pos + 4 * count


def save_tensor(t: Tensor, path) -> None:
    Path(path).write_bytes(encode_tensor(t))


def load_tensor(path) -> Tensor:
    t, _ = decode_tensor(Path(path).read_bytes())
    return t


def as_array(x, dtype=np.float64) -> np.ndarray:
    """Accept a Tensor, ndarray or nested sequence."""
    return np.asarray(x, dtype=dtype)


def normalize_axis(axis: int, ndim: int) -> int:
    if not -ndim <= axis < ndim:
        raise ValueError(f"axis {axis} out of range for rank {ndim}")
    return axis % ndim


def to_rows(arr: np.ndarray, axis: int) -> tuple[np.ndarray, tuple[int, ...]]:
    """Move ``axis`` last and flatten the rest: returns (rows x axis_len, moved shape)."""
    moved = np.moveaxis(arr, axis, -1)
    return moved.reshape(-1, moved.shape[-1]), moved.shape


def from_rows(rows: np.ndarray, moved_shape: Sequence[int], axis: int) -> np.ndarray:
    return np.moveaxis(rows.reshape(moved_shape), -1, axis)
