import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from fcnlab.tensor import (
    IGNORE, BadMagicError, DimOverflowError, TruncatedError, crop, linear_index,
    read_checkpoint, read_pgm, read_tensor, write_checkpoint, write_pgm, write_tensor,
)


def test_crop_identity():
    t = np.arange(2 * 3 * 4 * 5, dtype=np.float32).reshape(2, 3, 4, 5)
    np.testing.assert_array_equal(crop(t, 0, 0, 4, 5), t)


def test_crop_window():
    t = np.arange(1, 10, dtype=np.float32).reshape(1, 1, 3, 3)
    np.testing.assert_array_equal(crop(t, 1, 1, 2, 2)[0, 0], [[5, 6], [8, 9]])


@pytest.mark.parametrize("args, axis", [((0, 0, 4, 4), "height"), ((0, 1, 3, 3), "width")])
def test_crop_out_of_bounds_names_axis(args, axis):
    t = np.zeros((1, 1, 3, 3), dtype=np.float32)
    with pytest.raises(IndexError, match=axis):
        crop(t, *args)


@given(st.tuples(*[st.integers(1, 4)] * 4))
def test_row_major_linearization(dims):
    t = np.arange(np.prod(dims)).reshape(dims)
    flat = t.ravel()
    B, C, H, W = dims
    for b in range(B):
        for c in range(C):
            for y in range(H):
                for x in range(W):
                    assert flat[linear_index(dims, b, c, y, x)] == t[b, c, y, x]


finite_f32 = hnp.arrays(
    np.float32,
    hnp.array_shapes(min_dims=4, max_dims=4, min_side=0, max_side=4),
    elements=st.floats(width=32, allow_nan=False, allow_infinity=False),
)


@settings(max_examples=50)
@given(finite_f32)
def test_tensor_roundtrip_bit_exact(tmp_path_factory, t):
    path = tmp_path_factory.mktemp("t") / "x.fcnt"
    write_tensor(t, path)
    back = read_tensor(path)
    assert back.shape == t.shape
    assert back.tobytes() == t.astype("<f4").tobytes()


def test_negative_zero_survives(tmp_path):
    t = np.array([-0.0, 0.0], dtype=np.float32).reshape(1, 1, 1, 2)
    write_tensor(t, tmp_path / "z.fcnt")
    back = read_tensor(tmp_path / "z.fcnt")
    assert np.signbit(back[0, 0, 0, 0]) and not np.signbit(back[0, 0, 0, 1])


def test_tensor_file_size(tmp_path):
    write_tensor(np.full((1, 1, 1, 1), 0.5, dtype=np.float32), tmp_path / "a.fcnt")
    data = (tmp_path / "a.fcnt").read_bytes()
    assert len(data) == 32
    assert data[:4] == b"FCNT"
    assert struct.unpack("<f", data[-4:])[0] == 0.5


def test_bad_magic(tmp_path):
    p = tmp_path / "bad.fcnt"
    write_tensor(np.zeros((1, 1, 1, 1)), p)
    p.write_bytes(b"XXXX" + p.read_bytes()[4:])
    with pytest.raises(BadMagicError):
        read_tensor(p)


def test_truncated(tmp_path):
    p = tmp_path / "short.fcnt"
    write_tensor(np.zeros((1, 2, 3, 4)), p)
    p.write_bytes(p.read_bytes()[:-3])
    with pytest.raises(TruncatedError):
        read_tensor(p)


def test_dim_overflow(tmp_path):
    p = tmp_path / "huge.fcnt"
    p.write_bytes(b"FCNT" + struct.pack("<II4I", 1, 4, 2**31, 2**31, 2, 2))
    with pytest.raises(DimOverflowError):
        read_tensor(p)


def test_checkpoint_empty(tmp_path):
    write_checkpoint({}, tmp_path / "e.fcnz")
    assert read_checkpoint(tmp_path / "e.fcnz") == {}


def test_checkpoint_roundtrip_sorted(tmp_path):
    rng = np.random.default_rng(0)
    named = {"conv2.w": rng.standard_normal((2, 3, 3, 3)), "conv1.w": rng.standard_normal((1, 1, 2, 2))}
    write_checkpoint(named, tmp_path / "c.fcnz")
    back = read_checkpoint(tmp_path / "c.fcnz")
    assert list(back) == ["conv1.w", "conv2.w"]
    for k in named:
        np.testing.assert_array_equal(back[k], named[k].astype(np.float32))


def test_checkpoint_duplicate_name(tmp_path):
    with pytest.raises(ValueError, match="duplicate"):
        write_checkpoint([("a", np.zeros(1)), ("a", np.zeros(1))], tmp_path / "d.fcnz")


def test_checkpoint_bad_magic(tmp_path):
    p = tmp_path / "x.fcnz"
    p.write_bytes(b"FCNT\x01\x00\x00\x00\x00\x00\x00\x00")
    with pytest.raises(BadMagicError):
        read_checkpoint(p)


def test_pgm_roundtrip(tmp_path):
    labels = np.array([[0, 1, 2], [IGNORE, 4, 0]], dtype=np.uint8)
    write_pgm(labels, tmp_path / "l.pgm")
    raw = (tmp_path / "l.pgm").read_bytes()
    assert raw.startswith(b"P5\n3 2\n255\n")
    np.testing.assert_array_equal(read_pgm(tmp_path / "l.pgm"), labels)


def test_pgm_with_comment(tmp_path):
    p = tmp_path / "c.pgm"
    p.write_bytes(b"P5\n# made by hand\n2 1\n255\n\x01\x02")
    np.testing.assert_array_equal(read_pgm(p), [[1, 2]])


def test_pgm_bad_magic(tmp_path):
    p = tmp_path / "c.pgm"
    p.write_bytes(b"P2\n1 1\n255\n0")
    with pytest.raises(BadMagicError):
        read_pgm(p)
