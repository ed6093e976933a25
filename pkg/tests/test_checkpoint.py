import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
import hypothesis.extra.numpy as hnp

from hulk.checkpoint import (MAGIC, CheckpointError, array_to_bytes, bytes_to_array,
                             decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint)


def sample():
    r = np.random.default_rng(0)
    return {"a": r.normal(size=(3, 4)), "b/c": r.normal(size=5).astype(np.float32),
            "scalar": np.array(2.5), "empty": np.zeros((0, 3))}


def test_round_trip(tmp_path):
    t = sample()
    save_checkpoint(tmp_path / "x.ckpt", t)
    back = load_checkpoint(tmp_path / "x.ckpt")
    assert list(back) == list(t)
    for k in t:
        assert back[k].dtype == t[k].dtype and back[k].tobytes() == t[k].tobytes()
    save_checkpoint(tmp_path / "y.ckpt", back)
    assert (tmp_path / "x.ckpt").read_bytes() == (tmp_path / "y.ckpt").read_bytes()


def test_layout():
    buf = encode_checkpoint({"w": np.array([1.0, 2.0])})
    assert buf[:8] == MAGIC
    assert struct.unpack_from("<II", buf, 8) == (1, 1)
    assert struct.unpack_from("<H", buf, 16) == (1,)
    assert buf[18:19] == b"w"
    assert buf[19:21] == bytes([1, 1])
    assert struct.unpack_from("<I", buf, 21) == (2,)
    assert np.frombuffer(buf[25:], "<f8").tolist() == [1.0, 2.0]


def test_errors():
    buf = encode_checkpoint(sample())
    with pytest.raises(CheckpointError, match="bad magic"):
        decode_checkpoint(b"NOTACKPT" + buf[8:])
    with pytest.raises(CheckpointError, match="version"):
        decode_checkpoint(buf[:8] + struct.pack("<I", 9) + buf[12:])
    # entry 0 spans bytes 16..125
    with pytest.raises(CheckpointError, match="truncated at entry 1"):
        decode_checkpoint(buf[:130])
    with pytest.raises(CheckpointError, match="trailing"):
        decode_checkpoint(buf + b"\0")
    with pytest.raises(CheckpointError, match="name collision"):
        encode_checkpoint([("a", np.zeros(1)), ("a", np.zeros(1))])
    with pytest.raises(CheckpointError, match="dtype"):
        encode_checkpoint({"i": np.zeros(2, dtype=np.int64)})


def test_byte_payload():
    b = b'{"x": 1}'
    assert array_to_bytes(bytes_to_array(b)) == b
    with pytest.raises(CheckpointError):
        array_to_bytes(np.array([0.5]))


@settings(max_examples=50, deadline=None)
@given(hnp.arrays(st.sampled_from([np.float32, np.float64]), hnp.array_shapes(min_dims=0, max_dims=4),
                  elements=st.floats(allow_nan=True, allow_infinity=True, width=32)))
def test_bitwise_property(arr):
    back = decode_checkpoint(encode_checkpoint({"t": arr}))["t"]
    assert back.shape == arr.shape and back.dtype == arr.dtype
    assert back.tobytes() == np.ascontiguousarray(arr).tobytes()
