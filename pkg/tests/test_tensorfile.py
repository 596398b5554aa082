import io
import struct

import numpy as np
import pytest

from planequery import diffcore as dc
from planequery.errors import TensorFileError
from planequery.tensorfile import MAGIC, load_tensors, read_tensor, save_tensors, write_tensor


def test_header_layout():
    buf = io.BytesIO()
    write_tensor(buf, np.arange(6.0).reshape(2, 3))
    raw = buf.getvalue()
    assert raw[:4] == b"PQT1"
    assert raw[4] == 0 and raw[5] == 2
    assert struct.unpack("<2I", raw[6:14]) == (2, 3)
    assert len(raw) == 14 + 4 * 6
    assert np.array_equal(np.frombuffer(raw[14:], "<f4"), np.arange(6.0, dtype=np.float32))


def test_round_trip_1000_tensors(tmp_path):
    rng = dc.RngStream(31)
    arrays = []
    for _ in range(1000):
        ndim = int(rng.integers(0, 4))
        shape = tuple(int(x) for x in rng.integers(1, 6, size=ndim))
        arrays.append(rng.normal(size=shape) * 10.0 ** rng.uniform(-3, 3))
    save_tensors(tmp_path / "t.bin", arrays)
    back = load_tensors(tmp_path / "t.bin")
    assert len(back) == 1000
    for a, b in zip(arrays, back):
        assert b.shape == a.shape and b.dtype == np.float32
        assert np.array_equal(b, a.astype(np.float32))


def test_float64_records_are_exact(tmp_path):
    a = dc.RngStream(32).normal(size=(4, 5))
    save_tensors(tmp_path / "t.bin", [a], dtype="f64")
    (b,) = load_tensors(tmp_path / "t.bin")
    assert b.dtype == np.float64 and b.tobytes() == a.tobytes()


def test_empty_file_has_no_records(tmp_path):
    save_tensors(tmp_path / "t.bin", [])
    assert load_tensors(tmp_path / "t.bin") == []


@pytest.mark.parametrize("cut", [2, 5, 9, 20])
def test_truncated_record(cut):
    buf = io.BytesIO()
    write_tensor(buf, np.ones((2, 3)))
    with pytest.raises(TensorFileError):
        read_tensor(io.BytesIO(buf.getvalue()[:cut]))


def test_bad_magic_and_dtype(tmp_path):
    (tmp_path / "x.bin").write_bytes(b"NOPE" + bytes(10))
    with pytest.raises(TensorFileError):
        load_tensors(tmp_path / "x.bin")
    with pytest.raises(TensorFileError):
        read_tensor(io.BytesIO(MAGIC + bytes([7, 0])))


def test_missing_file(tmp_path):
    with pytest.raises(TensorFileError):
        load_tensors(tmp_path / "absent.bin")
