import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gramdyn.errors import FormatError, NotFound, SchemaError
from gramdyn.vg4t import expect_shape, read_blob, write_blob


@given(
    dims=st.lists(st.integers(1, 6), min_size=1, max_size=4),
    dtype=st.sampled_from(["f32", "u8"]),
    seed=st.integers(0, 2**16),
)
@settings(max_examples=60, deadline=None)
def test_roundtrip_identity(tmp_path_factory, dims, dtype, seed):
    rng = np.random.default_rng(seed)
    if dtype == "f32":
        arr = rng.normal(size=dims).astype(np.float32)
    else:
        arr = rng.integers(0, 256, size=dims).astype(np.uint8)
    path = tmp_path_factory.mktemp("blob") / "t.vg4t"
    write_blob(path, arr)
    back = read_blob(path)
    assert back.dtype == arr.dtype
    assert back.shape == arr.shape
    assert np.array_equal(back, arr)
    assert back.tobytes() == arr.tobytes()


def test_missing_file(tmp_path):
    with pytest.raises(NotFound):
        read_blob(tmp_path / "nope.vg4t")


def test_bad_magic(tmp_path):
    p = tmp_path / "bad.vg4t"
    p.write_bytes(b"NOPE" + b"\x00" * 16)
    with pytest.raises(FormatError, match="magic"):
        read_blob(p)


def test_bad_version(tmp_path):
    p = tmp_path / "bad.vg4t"
    p.write_bytes(b"VG4T" + struct.pack("<HBB", 9, 0, 1) + struct.pack("<I", 1) + b"\x00" * 4)
    with pytest.raises(FormatError, match="version"):
        read_blob(p)


def test_payload_dims_mismatch(tmp_path):
    p = tmp_path / "t.vg4t"
    write_blob(p, np.zeros((2, 3), np.float32))
    raw = bytearray(p.read_bytes())
    # declare 2x4 but keep the 2x3 payload
    raw[8 + 4:8 + 8] = struct.pack("<I", 4)
    p.write_bytes(bytes(raw))
    with pytest.raises(SchemaError, match="payload"):
        read_blob(p)


def test_truncated_header(tmp_path):
    p = tmp_path / "t.vg4t"
    p.write_bytes(b"VG4T" + struct.pack("<HBB", 1, 0, 3) + b"\x01")
    with pytest.raises(FormatError, match="truncated"):
        read_blob(p)


def test_expect_shape_names_tensor():
    with pytest.raises(SchemaError, match="'Q_4'"):
        expect_shape(np.zeros((2, 99, 64)), (2, 100, 64), "Q_4")


def test_float64_input_stored_as_f32(tmp_path):
    arr = np.linspace(0, 1, 12).reshape(3, 4)
    p = tmp_path / "t.vg4t"
    write_blob(p, arr)
    back = read_blob(p)
    assert back.dtype == np.float32
    assert np.allclose(back, arr, atol=1e-7)
