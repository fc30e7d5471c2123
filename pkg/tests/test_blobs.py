import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from mvaformer import blobs
from mvaformer.errors import FormatError


@given(hnp.arrays(st.sampled_from([np.float32, np.float64]), hnp.array_shapes(min_dims=0, max_dims=4, max_side=4)))
def test_tensor_round_trip(array):
    back = blobs.tensor_from_bytes(blobs.tensor_to_bytes(array))
    assert back.dtype == array.dtype and back.shape == array.shape
    assert back.tobytes() == array.tobytes()


def test_tensor_layout():
    raw = blobs.tensor_to_bytes(np.array([[1.0, 2.0]], dtype=np.float32))
    assert raw[:4] == b"MVTF"
    assert struct.unpack("<IIIIB", raw[4:21]) == (1, 2, 1, 2, 0)
    assert np.frombuffer(raw[21:], "<f4").tolist() == [1.0, 2.0]


@pytest.mark.parametrize("mutate, message", [
    (lambda b: b"XXXX" + b[4:], "bad magic"),
    (lambda b: b[:4] + struct.pack("<I", 9) + b[8:], "version"),
    (lambda b: b[:-1], "truncated"),
    (lambda b: b[:20] + b"\x07" + b[21:], "dtype tag"),
])
def test_tensor_corruption(mutate, message):
    raw = blobs.tensor_to_bytes(np.zeros((1, 2), dtype=np.float32))
    with pytest.raises(FormatError, match=message):
        blobs.tensor_from_bytes(mutate(raw))


def test_unsupported_dtype():
    with pytest.raises(FormatError):
        blobs.tensor_to_bytes(np.zeros(2, dtype=np.int32))


def test_clip_round_trip(tmp_path, rng):
    videos = rng.random((2, 3, 4, 5, 3)).astype(np.float32)
    blobs.write_clip(tmp_path / "c.mvaf", videos)
    raw = (tmp_path / "c.mvaf").read_bytes()
    assert raw[:4] == b"MVAF" and struct.unpack("<5I", raw[4:24]) == (1, 2, 3, 4, 5)
    assert np.array_equal(blobs.read_clip(tmp_path / "c.mvaf"), videos)


def test_checkpoint_round_trip_and_trailing_bytes(tmp_path, rng):
    params = {"layer0.dva.q.weight": rng.random((3, 3)).astype(np.float32), "view_embedding": np.zeros((4, 3))}
    path = tmp_path / "m.mvck"
    blobs.write_checkpoint(path, params)
    back = blobs.read_checkpoint(path)
    assert list(back) == list(params)
    assert all(np.array_equal(back[k], params[k]) for k in params)
    path.write_bytes(path.read_bytes() + b"\x00")
    with pytest.raises(FormatError, match="trailing"):
        blobs.read_checkpoint(path)
