"""Tests for parameter sets, optimizers and checkpoint files."""

import numpy as np
import pytest

from src.core.exceptions import CheckpointError, StateError
from src.nn.checkpoint import MAGIC, decode_checkpoint, file_hash, load_checkpoint, save_checkpoint
from src.nn.optim import SGD, Adam, clip_gradients
from src.nn.parameters import ParameterSet


@pytest.fixture
def params():
    return ParameterSet({"encoder.token": np.arange(6.0).reshape(2, 3), "lrcm.aggregator.fc1.bias": np.array([0.5]),
                         "scalar": np.array(3.0)})


def test_round_trip(tmp_path, params):
    path = tmp_path / "model.ckpt"
    digest = save_checkpoint(path, params, {"tasks": "mvlm", "step": 4})
    assert digest == file_hash(path)
    assert path.read_bytes().startswith(MAGIC)
    loaded, metadata = load_checkpoint(path)
    assert metadata == {"tasks": "mvlm", "step": 4}
    assert loaded.names() == params.names()
    assert loaded.fingerprint() == params.fingerprint()


def test_same_parameters_give_identical_files(tmp_path, params):
    assert save_checkpoint(tmp_path / "a.ckpt", params) == save_checkpoint(tmp_path / "b.ckpt", params.copy())


def test_malformed_files(tmp_path, params):
    with pytest.raises(CheckpointError):
        decode_checkpoint(b"nope")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "missing.ckpt")
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, params)
    with pytest.raises(CheckpointError):
        decode_checkpoint(path.read_bytes()[:-8])


def test_parameter_set_views(params):
    assert params.subset(["encoder."]).names() == ("encoder.token",)
    assert "encoder.token" not in params.without(["encoder."])
    renamed = params.rename("lrcm.aggregator", "relhead.row.aggregator")
    assert "relhead.row.aggregator.fc1.bias" in renamed
    merged = params.merge(ParameterSet({"scalar": np.array(4.0)}))
    assert float(merged["scalar"]) == 4.0 and float(params["scalar"]) == 3.0
    with pytest.raises(StateError):
        params.check_aligned(params.without(["scalar"]))


def test_clip_gradients():
    grads = {"a": np.array([3.0]), "b": np.array([4.0])}
    clipped, norm = clip_gradients(grads, 1.0)
    assert norm == pytest.approx(5.0)
    np.testing.assert_allclose([clipped["a"][0], clipped["b"][0]], [0.6, 0.8])
    unchanged, _ = clip_gradients(grads, 0.0)
    assert unchanged is grads


def test_optimizers_descend_and_decay():
    params = ParameterSet({"w": np.array([1.0, -1.0])})
    sgd = SGD(0.1, total_steps=2, end_factor=0.0)
    assert sgd.step(params, {"w": np.array([1.0, 1.0])}) == pytest.approx(0.1)
    np.testing.assert_allclose(params["w"], [0.9, -1.1])
    assert sgd.step(params, {"w": np.array([1.0, 1.0])}) == pytest.approx(0.05)
    assert sgd.current_lr() == pytest.approx(0.0)

    params = ParameterSet({"w": np.array([1.0])})
    Adam(0.01, total_steps=1).step(params, {"w": np.array([123.0])})
    np.testing.assert_allclose(params["w"], [0.99], atol=1e-8)


def test_non_finite_parameters_are_not_saved(tmp_path):
    bad = ParameterSet({"w": np.array([1.0, np.nan])})
    with pytest.raises(CheckpointError):
        save_checkpoint(tmp_path / "bad.ckpt", bad)
    assert not (tmp_path / "bad.ckpt").exists()
