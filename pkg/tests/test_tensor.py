import struct

import numpy as np
import pytest
from hypothesis import given, strategies as st

from denoq.tensor import (
    LengthMismatchError,
    MalformedHeaderError,
    NonFiniteError,
    Tensor,
    load_tensor,
    partition,
    save_tensor,
)


@pytest.mark.parametrize(
    "axis_len, block, spans",
    [
        (256, 128, ((0, 128), (128, 128))),
        (130, 128, ((0, 128), (128, 2))),
        (5, 8, ((0, 5),)),
    ],
)
def test_partition_examples(axis_len, block, spans):
    assert partition(axis_len, block).blocks == spans


@given(st.integers(1, 5000), st.integers(1, 600))
def test_partition_covers_axis(axis_len, block):
    p = partition(axis_len, block)
    assert len(p) == -(-axis_len // block)
    assert sum(length for _, length in p) == axis_len
    pos = 0
    for start, length in p:
        assert start == pos and length >= 1
        pos += length
    assert all(length == block for _, length in p.blocks[:-1])


@pytest.mark.parametrize("axis_len, block", [(0, 4), (4, 0)])
def test_partition_rejects_nonpositive(axis_len, block):
    with pytest.raises(ValueError):
        partition(axis_len, block)


def test_tensor_is_immutable():
    t = Tensor((2, 2), [1, 2, 3, 4])
    with pytest.raises(ValueError):
        t.data[0] = 5
    with pytest.raises(ValueError):
        Tensor((2, 3), [1, 2, 3, 4])


def test_round_trip_small(tmp_path):
    t = Tensor((2, 2), [1, 2, 3, 4])
    save_tensor(t, tmp_path / "t.dqt")
    back = load_tensor(tmp_path / "t.dqt")
    assert back.shape == (2, 2)
    assert back.data.tolist() == [1, 2, 3, 4]


def test_round_trip_scalar(tmp_path):
    t = Tensor((), [3.5])
    save_tensor(t, tmp_path / "s.dqt")
    assert load_tensor(tmp_path / "s.dqt") == t


def test_round_trip_million_elements(tmp_path):
    data = np.random.default_rng(7).standard_normal(10**6).astype(np.float32)
    t = Tensor((1000, 1000), data)
    save_tensor(t, tmp_path / "big.dqt")
    back = load_tensor(tmp_path / "big.dqt")
    assert back.data.tobytes() == data.tobytes()


def test_header_layout(tmp_path):
    save_tensor(Tensor((3,), [1, 2, 3]), tmp_path / "t.dqt")
    raw = (tmp_path / "t.dqt").read_bytes()
    assert raw[:4] == b"DQT1"
    assert struct.unpack_from("<IQ", raw, 4) == (1, 3)
    assert np.frombuffer(raw[16:], "<f4").tolist() == [1, 2, 3]


def _write(path, dims, values, magic=b"DQT1"):
    payload = magic + struct.pack("<I", len(dims)) + struct.pack(f"<{len(dims)}Q", *dims)
    path.write_bytes(payload + np.asarray(values, "<f4").tobytes())


def test_length_mismatch(tmp_path):
    _write(tmp_path / "t.dqt", (4,), [1, 2, 3])
    with pytest.raises(LengthMismatchError):
        load_tensor(tmp_path / "t.dqt")


def test_trailing_bytes_rejected(tmp_path):
    _write(tmp_path / "t.dqt", (2,), [1, 2, 3])
    with pytest.raises(LengthMismatchError):
        load_tensor(tmp_path / "t.dqt")


@pytest.mark.parametrize("bad", [np.nan, np.inf, -np.inf])
def test_non_finite_rejected(tmp_path, bad):
    _write(tmp_path / "t.dqt", (3,), [1, bad, 3])
    with pytest.raises(NonFiniteError):
        load_tensor(tmp_path / "t.dqt")


def test_bad_magic(tmp_path):
    _write(tmp_path / "t.dqt", (1,), [1], magic=b"XXXX")
    with pytest.raises(MalformedHeaderError):
        load_tensor(tmp_path / "t.dqt")


def test_truncated_header(tmp_path):
    (tmp_path / "t.dqt").write_bytes(b"DQT1" + struct.pack("<I", 3) + b"\0" * 8)
    with pytest.raises(MalformedHeaderError):
        load_tensor(tmp_path / "t.dqt")


@given(st.lists(st.floats(allow_nan=False, allow_infinity=False, width=32), min_size=1, max_size=64))
def test_round_trip_bit_exact(tmp_path_factory, values):
    path = tmp_path_factory.mktemp("rt") / "t.dqt"
    t = Tensor((len(values),), values)
    save_tensor(t, path)
    assert load_tensor(path).data.tobytes() == t.data.tobytes()
