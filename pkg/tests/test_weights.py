"""Binary weight container: byte layout, round trips, malformed files."""

import struct

import numpy as np
import pytest

from fadekit.tensor import Tensor
from fadekit.weights import MAGIC, WeightFormatError, load_weights, save_weights


def test_round_trip_preserves_names_shapes_values(tmp_path):
    rng = np.random.default_rng(0)
    tensors = {
        "conv.weight": rng.normal(size=(4, 3, 3, 3)),
        "bias": rng.normal(size=(4,)),
        "scalar": np.asarray(3.5),
        "unicode/naïve": rng.normal(size=(2, 2)),
    }
    path = tmp_path / "w.fadekit"
    save_weights(path, tensors)
    loaded = load_weights(path)
    assert list(loaded) == list(tensors)
    for name, original in tensors.items():
        assert isinstance(loaded[name], Tensor)
        assert loaded[name].shape == np.asarray(original).shape
        np.testing.assert_array_equal(loaded[name].data, original)


def test_exact_byte_layout(tmp_path):
    path = tmp_path / "w.fadekit"
    save_weights(path, {"ab": np.array([[1.0, 2.0]])})
    expected = (
        MAGIC
        + struct.pack("<Q", 2)
        + b"ab"
        + struct.pack("<Q", 2)
        + struct.pack("<QQ", 1, 2)
        + struct.pack("<dd", 1.0, 2.0)
    )
    assert path.read_bytes() == expected


def test_accepts_tensor_values(tmp_path):
    path = tmp_path / "w.fadekit"
    save_weights(path, {"t": Tensor([1.0, 2.0, 3.0])})
    np.testing.assert_array_equal(load_weights(path)["t"].data, [1.0, 2.0, 3.0])


def test_bad_magic_rejected(tmp_path):
    path = tmp_path / "bad.fadekit"
    path.write_bytes(b"NOTMAGIC" + b"\x00" * 16)
    with pytest.raises(WeightFormatError, match="magic"):
        load_weights(path)


def test_truncation_rejected(tmp_path):
    path = tmp_path / "w.fadekit"
    save_weights(path, {"x": np.ones((3, 3))})
    blob = path.read_bytes()
    for cut in (len(MAGIC) + 4, len(blob) - 5):
        path.write_bytes(blob[:cut])
        with pytest.raises(WeightFormatError, match="truncated"):
            load_weights(path)


def test_duplicate_names_rejected(tmp_path):
    path = tmp_path / "w.fadekit"
    record = struct.pack("<Q", 1) + b"x" + struct.pack("<Q", 1) + struct.pack("<Q", 1) + struct.pack("<d", 7.0)
    path.write_bytes(MAGIC + record + record)
    with pytest.raises(WeightFormatError, match="duplicate"):
        load_weights(path)


def test_empty_container_round_trips(tmp_path):
    path = tmp_path / "w.fadekit"
    save_weights(path, {})
    assert load_weights(path) == {}
