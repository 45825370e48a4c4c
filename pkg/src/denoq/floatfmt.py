"""Simulated float8 E5M2 rounding for reconstruction coefficients.

E5M2 is 1 sign bit, 5 exponent bits (bias 15) and 2 mantissa bits, i.e. the
top byte of an IEEE half. Values are rounded to nearest, ties to even, and
saturate at the largest finite magnitude instead of overflowing to inf.
"""

import numpy as np

E5M2_MAX = 57344.0
_MIN_NORMAL_EXP = -14
_MANTISSA_BITS = 2


def round_e5m2(x):
    """Round to the nearest E5M2-representable value (ties to even, saturating)."""
    x = np.asarray(x, dtype=np.float64)
    mag = np.abs(x)
    _, exp = np.frexp(mag)
    # frexp gives mag = m * 2**exp with m in [0.5, 1); the unbiased exponent is exp - 1
    exp = np.maximum(exp - 1, _MIN_NORMAL_EXP)
    step = np.ldexp(1.0, exp - _MANTISSA_BITS)
    rounded = np.rint(mag / step) * step
    rounded = np.minimum(rounded, E5M2_MAX)
    out = np.copysign(rounded, x)
    return out if out.ndim else float(out)


def encode_e5m2(x) -> np.ndarray:
    """Pack already-representable values into E5M2 bytes."""
    half = np.asarray(round_e5m2(x), dtype=np.float16)
    return (half.view(np.uint16) >> 8).astype(np.uint8)


def decode_e5m2(codes) -> np.ndarray:
    bits = np.asarray(codes, dtype=np.uint16) << 8
    return bits.view(np.float16).astype(np.float64)
