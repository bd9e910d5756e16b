import struct

import numpy as np
import pytest

from msm_mae.tensorio import TensorFileError, dumps, load_tensors, loads, save_tensors


def test_layout_by_hand():
    blob = dumps({"ab": np.array([[1.0, 2.0]], dtype=np.float32)})
    expected = (b"MSMM" + struct.pack("<II", 1, 1) + struct.pack("<I", 2) + b"ab"
                + struct.pack("<III", 2, 1, 2) + struct.pack("<2f", 1.0, 2.0))
    assert blob == expected


def test_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    t = {"w": rng.standard_normal((3, 4)).astype(np.float32), "s": np.array(2.5, dtype=np.float32),
         "e": np.zeros((0, 3), dtype=np.float32), "ü": rng.standard_normal(5).astype(np.float32)}
    save_tensors(tmp_path / "x.msmm", t)
    back = load_tensors(tmp_path / "x.msmm")
    assert list(back) == list(t)
    for k in t:
        assert back[k].shape == t[k].shape and np.array_equal(back[k], t[k])


def test_corruption_detected():
    blob = dumps({"w": np.ones(4, dtype=np.float32)})
    with pytest.raises(TensorFileError, match="bad magic"):
        loads(b"NOPE" + blob[4:])
    with pytest.raises(TensorFileError, match="truncated"):
        loads(blob[:-3])
    with pytest.raises(TensorFileError, match="trailing"):
        loads(blob + b"\0")
    with pytest.raises(TensorFileError, match="version"):
        loads(b"MSMM" + struct.pack("<II", 9, 0))
