"""Little-endian sub-byte packing of small unsigned codes.

Element ``k`` occupies bits ``[k*w, (k+1)*w)`` of the stream, least
significant bit first, for widths ``w`` in {1, 2, 4, 8}.
"""

import numpy as np

WIDTHS = (1, 2, 4, 8)


def storage_width(bits: int) -> int:
    """Smallest supported packing width holding ``bits``-bit codes."""
    for w in WIDTHS:
        if bits <= w:
            return w
    raise ValueError(f"cannot pack {bits}-bit codes")


def packed_size(count: int, width: int) -> int:
    return (count * width + 7) // 8


def pack_codes(codes, width: int) -> bytes:
    codes = np.asarray(codes, dtype=np.uint8).reshape(-1)
    if width not in WIDTHS:
        raise ValueError(f"unsupported width {width}")
    if codes.size and int(codes.max()) >= (1 << width):
        raise ValueError(f"code {int(codes.max())} does not fit in {width} bits")
    if width == 8:
        return codes.tobytes()
    shifts = np.arange(width, dtype=np.uint8)
    bits = (codes[:, None] >> shifts) & 1
    return np.packbits(bits.reshape(-1), bitorder="little").tobytes()


def unpack_codes(buf: bytes, count: int, width: int) -> np.ndarray:
    raw = np.frombuffer(buf, dtype=np.uint8, count=packed_size(count, width))
    if width == 8:
        return raw.copy()
    bits = np.unpackbits(raw, bitorder="little")[: count * width].reshape(count, width)
    weights = (1 << np.arange(width)).astype(np.uint8)
    return (bits * weights).sum(axis=1).astype(np.uint8)
