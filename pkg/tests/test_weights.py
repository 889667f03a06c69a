from collections import OrderedDict

import numpy as np
import pytest

from spf import nn, weights
from spf.errors import ShapeError, SpfError


def test_round_trip_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    tensors = OrderedDict([
        ("conv1.weight", rng.standard_normal((4, 3, 3, 3)).astype(np.float32)),
        ("head.bias", rng.standard_normal((2, 1, 1, 1)).astype(np.float32)),
        ("patch/äöü", rng.random((1, 3, 8, 8)).astype(np.float32)),
    ])
    path = tmp_path / "t.w32"
    weights.save_tensors(path, tensors)
    back = weights.load_tensors(path)
    assert list(back) == list(tensors)
    for name in tensors:
        assert back[name].dtype == np.float32
        assert back[name].tobytes() == tensors[name].tobytes()

    # writing again produces identical bytes
    path2 = tmp_path / "t2.w32"
    weights.save_tensors(path2, back)
    assert path.read_bytes() == path2.read_bytes()


def test_empty_file_round_trip(tmp_path):
    path = tmp_path / "empty.w32"
    weights.save_tensors(path, OrderedDict())
    assert weights.load_tensors(path) == OrderedDict()


def test_bad_magic_rejected(tmp_path):
    path = tmp_path / "bad.w32"
    path.write_bytes(b"NOPE" + b"\x00" * 10)
    with pytest.raises(SpfError):
        weights.load_tensors(path)


def test_truncated_rejected(tmp_path):
    rng = np.random.default_rng(1)
    path = tmp_path / "t.w32"
    weights.save_tensors(path, {"a": rng.random((1, 1, 2, 2)).astype(np.float32)})
    blob = path.read_bytes()
    path.write_bytes(blob[:-3])
    with pytest.raises(SpfError):
        weights.load_tensors(path)


def test_trailing_bytes_rejected(tmp_path):
    path = tmp_path / "t.w32"
    weights.save_tensors(path, {"a": np.zeros((1, 1, 1, 1), dtype=np.float32)})
    path.write_bytes(path.read_bytes() + b"xx")
    with pytest.raises(SpfError):
        weights.load_tensors(path)


def test_wrong_rank_rejected(tmp_path):
    with pytest.raises(ShapeError):
        weights.save_tensors(tmp_path / "t.w32", {"a": np.zeros((2, 2), dtype=np.float32)})


def test_parameter_round_trip(tmp_path):
    rng = np.random.default_rng(2)
    conv = nn.Conv2d(3, 4, 3, rng=rng, name="c")
    lin = nn.Linear(4, 2, rng=rng, name="h")
    params = conv.parameters() + lin.parameters()
    path = tmp_path / "params.w32"
    weights.save_parameters(path, params)

    conv2 = nn.Conv2d(3, 4, 3, rng=np.random.default_rng(99), name="c")
    lin2 = nn.Linear(4, 2, rng=np.random.default_rng(99), name="h")
    params2 = conv2.parameters() + lin2.parameters()
    weights.load_into_parameters(path, params2)
    for a, b in zip(params, params2):
        assert a.name == b.name
        assert np.array_equal(a.value, b.value)


def test_missing_parameter_detected(tmp_path):
    rng = np.random.default_rng(3)
    conv = nn.Conv2d(3, 4, 3, rng=rng, name="c")
    path = tmp_path / "p.w32"
    weights.save_parameters(path, conv.parameters())
    other = nn.Linear(4, 2, rng=rng, name="h")
    with pytest.raises(SpfError):
        weights.load_into_parameters(path, other.parameters())
