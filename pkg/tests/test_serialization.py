import numpy as np
import pytest

from dc3.errors import FormatError
from dc3.serialization import read_arrays, read_manifest, write_arrays, write_manifest


def test_round_trip_preserves_shapes_and_bits(tmp_path):
    arrays = {"a": np.arange(6.0).reshape(2, 3), "s": np.float64(np.pi), "e": np.zeros((0, 4)),
              "tiny": np.array([5e-324, -0.0, 1e308])}
    write_arrays(tmp_path / "x.bin", arrays, kind="demo")
    back = read_arrays(tmp_path / "x.bin", kind="demo")
    assert list(back) == list(arrays)
    for k, v in arrays.items():
        assert back[k].shape == np.shape(v)
        assert np.array_equal(np.asarray(v).view(np.uint64), back[k].view(np.uint64))


def test_wrong_kind_and_garbage(tmp_path):
    write_arrays(tmp_path / "x.bin", {"a": np.ones(2)}, kind="demo")
    with pytest.raises(FormatError, match="kind"):
        read_arrays(tmp_path / "x.bin", kind="other")
    (tmp_path / "g.bin").write_bytes(b"hello\nEND\n")
    with pytest.raises(FormatError):
        read_arrays(tmp_path / "g.bin")


def test_truncated_and_trailing_bytes(tmp_path):
    write_arrays(tmp_path / "x.bin", {"a": np.ones(4)})
    raw = (tmp_path / "x.bin").read_bytes()
    (tmp_path / "x.bin").write_bytes(raw[:-1])
    with pytest.raises(FormatError, match="truncated"):
        read_arrays(tmp_path / "x.bin")
    (tmp_path / "x.bin").write_bytes(raw + b"\0")
    with pytest.raises(FormatError, match="trailing"):
        read_arrays(tmp_path / "x.bin")


def test_invalid_name(tmp_path):
    with pytest.raises(FormatError):
        write_arrays(tmp_path / "x.bin", {"a b": np.ones(1)})


def test_manifest_round_trip(tmp_path):
    write_manifest(tmp_path / "m.txt", {"n": 3, "splits": (1, 2, 3), "name": "qp"})
    assert read_manifest(tmp_path / "m.txt") == {"n": "3", "splits": "1,2,3", "name": "qp"}
    (tmp_path / "bad.txt").write_text("no equals sign\n")
    with pytest.raises(FormatError):
        read_manifest(tmp_path / "bad.txt")
