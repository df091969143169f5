import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from dynhuman import tensorio


def test_header_layout():
    blob = tensorio.encode_tensor(np.zeros((2, 3), dtype=np.float32))
    assert blob[:4] == b"TNSR"
    assert struct.unpack_from("<HBB", blob, 4) == (1, 1, 2)
    assert struct.unpack_from("<2I", blob, 8) == (2, 3)
    assert len(blob) == 8 + 8 + 6 * 4


def test_bool_stored_as_u8():
    out = tensorio.decode_tensor(tensorio.encode_tensor(np.array([True, False, True])))
    assert out.dtype == np.uint8
    np.testing.assert_array_equal(out, [1, 0, 1])


@settings(max_examples=40, deadline=None)
@given(hnp.arrays(st.sampled_from([np.float32, np.float64, np.uint8]),
                  hnp.array_shapes(min_dims=0, max_dims=4, max_side=5)))
def test_roundtrip(arr):
    out = tensorio.decode_tensor(tensorio.encode_tensor(arr))
    assert out.dtype == arr.dtype and out.shape == arr.shape
    assert out.tobytes() == np.ascontiguousarray(arr).tobytes()


@pytest.mark.parametrize("mutate", [
    lambda b: b"XXXX" + b[4:],
    lambda b: b[:4] + struct.pack("<H", 9) + b[6:],
    lambda b: b[:6] + bytes([7]) + b[7:],
    lambda b: b[:-1],
    lambda b: b[:5],
])
def test_corrupt_blobs_rejected(mutate):
    blob = tensorio.encode_tensor(np.arange(6, dtype=np.float64).reshape(2, 3))
    with pytest.raises(tensorio.ContainerError):
        tensorio.decode_tensor(mutate(blob))


def test_unsupported_dtype():
    with pytest.raises(tensorio.ContainerError):
        tensorio.encode_tensor(np.arange(3, dtype=np.int64))


def test_file_roundtrip_and_atomic(tmp_path):
    p = tmp_path / "sub" / "x.tnsr"
    a = np.random.default_rng(0).normal(size=(4, 4))
    tensorio.save_tensor(p, a)
    np.testing.assert_array_equal(tensorio.load_tensor(p), a)
    assert [f.name for f in p.parent.iterdir()] == ["x.tnsr"]


def test_config_hash_is_key_order_independent():
    a = {"b": 1, "a": [1, 2], "c": {"y": 1.5, "x": np.float64(2.0)}}
    b = {"c": {"x": 2.0, "y": 1.5}, "a": [1, 2], "b": 1}
    assert tensorio.config_hash(a) == tensorio.config_hash(b)
    assert tensorio.config_hash(a) != tensorio.config_hash({**b, "b": 2})


def test_manifests_append(tmp_path):
    for i in range(3):
        tensorio.write_manifest(tmp_path, "synth", {"k": i}, 0, [], 0.1, "0.1.0")
    runs = sorted((tmp_path / "runs").iterdir())
    assert [r.name for r in runs] == ["run-0000.json", "run-0001.json", "run-0002.json"]
    m = json.loads(runs[2].read_text())
    assert m["command"] == "synth" and m["seed"] == 0
