"""DQZ1: on-disk layout of a blockwise quantized tensor.

All integers little-endian::

    b"DQZ1"
    u8 bits | u8 rounding | u8 coeff_precision | u8 sparsity_kind
    u32 block_size | f64 lambda | f64 epsilon
    u32 rank | rank x u64 dims | u32 axis
    u64 rows | u32 blocks_per_row                     block table
    u8 code_width | u64 code_bytes | packed codes     (rows x axis_len, axis moved last)
    coefficients, rows x blocks_per_row pairs (a, b): f32 each, or one E5M2 byte each
    sparsity section:
        kind 0  nothing
        kind 1  u64 count | packed 1-bit kept mask
        kind 2  u8 m | u8 n | u8 index_width | u64 count | packed kept positions

For M:N patterns each group of ``n`` (and a shorter trailing group, which
keeps ``ceil(m * g / n)``) stores the in-group positions of its survivors in
ascending order.
"""

from __future__ import annotations

import math
import struct
from pathlib import Path

import numpy as np

from .floatfmt import decode_e5m2, encode_e5m2
from .packing import pack_codes, packed_size, storage_width, unpack_codes
from .quantizer import CoeffPrecision, QuantConfig, QuantizedTensor, Rounding
from .sparsifier import SparsityConfig, SparsityMode, tail_keep
from .tensor import MalformedHeaderError, LengthMismatchError, partition

MAGIC = b"DQZ1"
_ROUNDING = [Rounding.HALF_EVEN, Rounding.HALF_AWAY]
_PRECISION = [CoeffPrecision.FULL, CoeffPrecision.E5M2]
SPARSITY_NONE, SPARSITY_MASK, SPARSITY_MN = 0, 1, 2


def _group_spans(length: int, n: int):
    for start in range(0, length, n):
        yield start, min(n, length - start)


def encode_mn_positions(kept: np.ndarray, m: int, n: int) -> np.ndarray:
    """Flatten a (rows x L) M:N mask into per-group survivor positions."""
    out = []
    for row in kept:
        for start, g in _group_spans(row.size, n):
            idx = np.flatnonzero(row[start : start + g])
            want = m if g == n else tail_keep(m, n, g)
            if idx.size != want:
                raise ValueError(f"group at {start} keeps {idx.size}, expected {want}")
            out.append(idx)
    return np.concatenate(out).astype(np.uint8) if out else np.zeros(0, np.uint8)


def decode_mn_positions(pos: np.ndarray, rows: int, length: int, m: int, n: int) -> np.ndarray:
    kept = np.zeros((rows, length), dtype=bool)
    k = 0
    for r in range(rows):
        for start, g in _group_spans(length, n):
            want = m if g == n else tail_keep(m, n, g)
            kept[r, start + pos[k : k + want].astype(np.intp)] = True
            k += want
    return kept


def encode_quantized(qt: QuantizedTensor) -> bytes:
    cfg = qt.config
    kind = SPARSITY_NONE
    if qt.kept is not None:
        kind = SPARSITY_MN if qt.sparsity.mode is SparsityMode.STRUCTURED else SPARSITY_MASK
    out = bytearray(MAGIC)
    out += struct.pack(
        "<BBBBIdd",
        cfg.bits, _ROUNDING.index(cfg.rounding), _PRECISION.index(cfg.coeff_precision), kind,
        cfg.block_size, cfg.lam, cfg.epsilon,
    )
    out += struct.pack("<I", len(qt.shape)) + struct.pack(f"<{len(qt.shape)}Q", *qt.shape)
    out += struct.pack("<I", qt.axis)
    out += struct.pack("<QI", qt.rows, qt.scale.shape[1])

    width = storage_width(cfg.bits)
    packed = pack_codes(qt.codes, width)
    out += struct.pack("<BQ", width, len(packed)) + packed

    coeffs = np.stack([qt.scale, qt.bias], axis=-1).reshape(-1)
    if cfg.coeff_precision is CoeffPrecision.E5M2:
        out += encode_e5m2(coeffs).tobytes()
    else:
        out += coeffs.astype("<f4").tobytes()

    if kind == SPARSITY_MASK:
        out += struct.pack("<Q", qt.kept.size) + pack_codes(qt.kept.astype(np.uint8), 1)
    elif kind == SPARSITY_MN:
        m, n = qt.sparsity.m, qt.sparsity.n
        pos = encode_mn_positions(qt.kept, m, n)
        iw = storage_width(max(1, math.ceil(math.log2(n))))
        out += struct.pack("<BBBQ", m, n, iw, pos.size) + pack_codes(pos, iw)
    return bytes(out)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, fmt: str):
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.buf):
            raise MalformedHeaderError("truncated DQZ1 record")
        vals = struct.unpack_from(fmt, self.buf, self.pos)
        self.pos += size
        return vals

    def raw(self, size: int) -> bytes:
        if self.pos + size > len(self.buf):
            raise LengthMismatchError(f"payload needs {size} bytes, {len(self.buf) - self.pos} left")
        chunk = self.buf[self.pos : self.pos + size]
        self.pos += size
        return chunk


def decode_quantized(buf: bytes) -> QuantizedTensor:
    if buf[:4] != MAGIC:
        raise MalformedHeaderError("missing DQZ1 magic")
    rd = _Reader(buf)
    rd.pos = 4
    bits, rounding, precision, kind, block, lam, eps = rd.take("<BBBBIdd")
    try:
        cfg = QuantConfig(bits=bits, block_size=block, lam=lam, epsilon=eps,
                          rounding=_ROUNDING[rounding], coeff_precision=_PRECISION[precision])
    except (IndexError, ValueError) as exc:
        raise MalformedHeaderError(f"invalid config in header: {exc}") from None
    (rank,) = rd.take("<I")
    shape = rd.take(f"<{rank}Q")
    (axis,) = rd.take("<I")
    rows, nblocks = rd.take("<QI")
    if rank == 0 or axis >= rank or 0 in shape:
        raise MalformedHeaderError(f"bad shape/axis: {shape}, axis {axis}")
    length = shape[axis]
    if rows * length != math.prod(shape) or nblocks != len(partition(length, block)):
        raise MalformedHeaderError("block table disagrees with shape and block size")

    width, nbytes = rd.take("<BQ")
    if width != storage_width(bits) or nbytes != packed_size(rows * length, width):
        raise LengthMismatchError("code section size does not match the header")
    codes = unpack_codes(rd.raw(nbytes), rows * length, width).reshape(rows, length)

    ncoef = 2 * rows * nblocks
    if cfg.coeff_precision is CoeffPrecision.E5M2:
        coeffs = decode_e5m2(np.frombuffer(rd.raw(ncoef), dtype=np.uint8))
    else:
        coeffs = np.frombuffer(rd.raw(4 * ncoef), dtype="<f4").astype(np.float64)
    coeffs = coeffs.reshape(rows, nblocks, 2)

    sparsity = kept = None
    if kind == SPARSITY_MASK:
        (count,) = rd.take("<Q")
        if count != rows * length:
            raise LengthMismatchError("mask length does not match the tensor")
        kept = unpack_codes(rd.raw(packed_size(count, 1)), count, 1).astype(bool).reshape(rows, length)
    elif kind == SPARSITY_MN:
        m, n, iw, count = rd.take("<BBBQ")
        pos = unpack_codes(rd.raw(packed_size(count, iw)), count, iw)
        kept = decode_mn_positions(pos, rows, length, m, n)
        sparsity = SparsityConfig.structured(m, n)
    elif kind != SPARSITY_NONE:
        raise MalformedHeaderError(f"unknown sparsity kind {kind}")
    if rd.pos != len(buf):
        raise LengthMismatchError(f"{len(buf) - rd.pos} trailing bytes")
    return QuantizedTensor(tuple(shape), axis, cfg, codes, coeffs[..., 0].copy(),
                           coeffs[..., 1].copy(), sparsity=sparsity, kept=kept)


def save_quantized(qt: QuantizedTensor, path) -> None:
    Path(path).write_bytes(encode_quantized(qt))


def load_quantized(path) -> QuantizedTensor:
    return decode_quantized(Path(path).read_bytes())
