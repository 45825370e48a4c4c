import numpy as np
import pytest
from hypothesis import given, strategies as st

from denoq.container import decode_quantized, encode_quantized, load_quantized, save_quantized
from denoq.floatfmt import E5M2_MAX, decode_e5m2, encode_e5m2, round_e5m2
from denoq.packing import pack_codes, storage_width, unpack_codes
from denoq.quantizer import QuantConfig, quantize_tensor
from denoq.sparsifier import SparsityConfig
from denoq.tensor import LengthMismatchError, MalformedHeaderError

# -- E5M2 -----------------------------------------------------------------------


def _e5m2_grid():
    """Every finite E5M2 value, enumerated from sign/exponent/mantissa fields."""
    vals = []
    for e in range(31):
        for m in range(4):
            vals.append(m / 4 * 2.0**-14 if e == 0 else (1 + m / 4) * 2.0 ** (e - 15))
    vals = np.array(sorted(set(vals)))
    return np.concatenate([-vals[::-1], vals])


GRID = _e5m2_grid()


def test_grid_extremes():
    assert GRID.max() == E5M2_MAX == 57344.0
    assert GRID[GRID > 0].min() == 2.0**-16


@given(st.floats(-6e4, 6e4, allow_nan=False))
def test_round_e5m2_is_nearest_grid_point(v):
    r = round_e5m2(v)
    assert r in GRID
    assert abs(r - v) <= np.min(np.abs(GRID - v)) + 1e-300


def test_round_e5m2_ties_to_even():
    # 1.125 lies halfway between 1.0 (mantissa 00) and 1.25 (mantissa 01)
    assert round_e5m2(1.125) == 1.0
    assert round_e5m2(1.375) == 1.5


def test_round_e5m2_saturates():
    assert round_e5m2(1e9) == E5M2_MAX
    assert round_e5m2(-1e9) == -E5M2_MAX


def test_round_e5m2_matches_ml_dtypes():
    ml_dtypes = pytest.importorskip("ml_dtypes")
    x = np.random.default_rng(3).standard_normal(20000) * 10.0 ** np.random.default_rng(4).integers(-6, 5, 20000)
    ref = x.astype(ml_dtypes.float8_e5m2).astype(np.float64)
    np.testing.assert_array_equal(round_e5m2(x), ref)


def test_e5m2_byte_round_trip():
    np.testing.assert_array_equal(decode_e5m2(encode_e5m2(GRID)), GRID)
    assert encode_e5m2(GRID).dtype == np.uint8


# -- bit packing ------------------------------------------------------------------


@pytest.mark.parametrize("bits, width", [(1, 1), (2, 2), (3, 4), (4, 4), (5, 8), (8, 8)])
def test_storage_width(bits, width):
    assert storage_width(bits) == width


def test_pack_layout_little_endian():
    assert pack_codes([1, 0, 1, 1], 1) == bytes([0b1101])
    assert pack_codes([1, 2, 3, 0], 2) == bytes([0b00111001])
    assert pack_codes([0xA, 0x5], 4) == bytes([0x5A])


@given(st.sampled_from([1, 2, 4, 8]), st.data())
def test_pack_round_trip(width, data):
    codes = data.draw(st.lists(st.integers(0, 2**width - 1), max_size=100))
    packed = pack_codes(codes, width)
    assert len(packed) == (len(codes) * width + 7) // 8
    assert unpack_codes(packed, len(codes), width).tolist() == codes


def test_pack_rejects_overflow():
    with pytest.raises(ValueError):
        pack_codes([4], 2)


# -- DQZ1 container -------------------------------------------------------------------


@pytest.mark.parametrize("bits", [1, 2, 3, 4, 8])
@pytest.mark.parametrize("precision", ["full", "e5m2-simulated"])
def test_container_round_trip(tmp_path, rng, bits, precision):
    x = rng.standard_normal((5, 70))
    qt, _ = quantize_tensor(x, cfg=QuantConfig(bits=bits, block_size=32, coeff_precision=precision))
    save_quantized(qt, tmp_path / "q.dqz")
    back = load_quantized(tmp_path / "q.dqz")
    assert back.config == qt.config and back.shape == qt.shape and back.axis == qt.axis
    np.testing.assert_array_equal(back.codes, qt.codes)
    if precision == "full":
        np.testing.assert_array_equal(back.scale, qt.scale.astype(np.float32))
    else:
        np.testing.assert_array_equal(back.scale, qt.scale)
        np.testing.assert_array_equal(back.bias, qt.bias)
    np.testing.assert_allclose(back.dequantize(), qt.dequantize(), rtol=1e-6, atol=1e-6)


def test_container_axis_zero(rng):
    qt, _ = quantize_tensor(rng.standard_normal((33, 2, 3)), axis=0, cfg=QuantConfig(block_size=8))
    back = decode_quantized(encode_quantized(qt))
    assert back.axis == 0 and back.dequantize().shape == (33, 2, 3)


@pytest.mark.parametrize(
    "sparsity", [SparsityConfig.toward_mean(0.5), SparsityConfig.zero(0.25), SparsityConfig.structured(2, 4),
                 SparsityConfig.structured(3, 8)]
)
def test_container_sparsity_pattern(rng, sparsity):
    qt, _ = quantize_tensor(rng.standard_normal((3, 50)), cfg=QuantConfig(block_size=16), sparsity=sparsity)
    back = decode_quantized(encode_quantized(qt))
    np.testing.assert_array_equal(back.kept, qt.kept)


def test_container_rejects_corruption(rng):
    qt, _ = quantize_tensor(rng.standard_normal((2, 16)), cfg=QuantConfig(block_size=8))
    raw = encode_quantized(qt)
    with pytest.raises(MalformedHeaderError):
        decode_quantized(b"XXXX" + raw[4:])
    with pytest.raises(LengthMismatchError):
        decode_quantized(raw[:-3])
    with pytest.raises(LengthMismatchError):
        decode_quantized(raw + b"\0")
