import json
from pathlib import Path

import numpy as np
import pytest

from shiftwell.errors import ConfigError, EmptyBatch, InvalidVariant, UnknownRole, UntrainedModel
from shiftwell.model import (Batch, ModelConfig, MTMLNetwork, check_network_gradients,
                             load_config, masked_batch_loss, predict, train,
                             validation_loss)
from shiftwell.schema import LABELS

FIXTURES = Path(__file__).parent / "fixtures"


def _batch(n=12, roles=None, seed=0, task="regression", n_labels=5):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, 40))
    if roles is None:
        roles = np.where(np.arange(n) % 2 == 0, "nurse", "doctor")
    if task == "regression":
        y = rng.uniform(size=(n, n_labels))
    else:
        y = rng.integers(0, 2 if task == "binary" else 3, size=(n, n_labels)).astype(float)
    return Batch(x, np.asarray(roles), y)


# --- configuration --------------------------------------------------------------

def test_config_validation():
    with pytest.raises(InvalidVariant):
        ModelConfig(variant="deep")
    with pytest.raises(InvalidVariant):
        ModelConfig(variant="nn")  # single-label variant with five labels
    with pytest.raises(ConfigError):
        ModelConfig(task_mode="ordinal")
    with pytest.raises(ConfigError):
        ModelConfig(batch_size=0)
    with pytest.raises(ConfigError):
        ModelConfig(init_scale=0.0)
    with pytest.raises(ConfigError):
        ModelConfig.from_dict({"learning_rate": 0.01, "momentum": 0.9})


def test_config_round_trip(tmp_path):
    cfg = ModelConfig(variant="mt", labels=("stress",), shared_widths=(32, 16), seed=4)
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg.to_dict()))
    assert load_config(path) == cfg


# --- routing --------------------------------------------------------------------

def test_role_routing_changes_predictions():
    net = MTMLNetwork(ModelConfig())
    x = np.random.default_rng(0).normal(size=(1, 40))
    a = net.forward(x, ["nurse"])
    b = net.forward(x, ["doctor"])
    assert any(not np.array_equal(a[l], b[l]) for l in LABELS)


def test_identical_branches_give_identical_predictions():
    net = MTMLNetwork(ModelConfig())
    for name in net.branch_parameter_names("doctor"):
        net.params[name][...] = net.params[name.replace("doctor", "nurse")]
    x = np.random.default_rng(1).normal(size=(3, 40))
    a = net.forward(x, ["nurse"] * 3)
    b = net.forward(x, ["doctor"] * 3)
    for l in LABELS:
        assert np.array_equal(a[l], b[l])


def test_unknown_role():
    net = MTMLNetwork(ModelConfig())
    with pytest.raises(UnknownRole):
        net.forward(np.zeros((1, 40)), ["surgeon"])


def test_hand_traced_tiny_network():
    cfg = ModelConfig(n_features=2, conv_channels=1, shared_widths=(1,), branch_width=1,
                      labels=("stress",), variant="mt")
    net = MTMLNetwork(cfg)
    net.params["conv.kernels"][...] = [[1.0, -1.0]]
    net.params["conv.bias"][...] = [0.5]
    net.params["shared0.weight"][...] = [[2.0]]
    net.params["shared0.bias"][...] = [-1.0]
    for role, (w, hw, hb) in {"nurse": (3.0, 0.5, 0.1), "doctor": (1.0, -2.0, 0.0)}.items():
        net.params[f"branch.{role}.weight"][...] = [[w]]
        net.params[f"branch.{role}.bias"][...] = [0.0]
        net.params[f"head.{role}.stress.weight"][...] = [[hw]]
        net.params[f"head.{role}.stress.bias"][...] = [hb]
    x = np.array([[2.0, 1.0], [0.0, 3.0]])
    # row 0: conv 1.5, shared 2.0; nurse branch 6.0, head 3.1
    out = net.forward(x, ["nurse", "nurse"])["stress"][:, 0]
    assert out[0] == pytest.approx(3.1, abs=1e-15)
    # row 1: conv relu(-2.5) = 0, shared relu(-1) = 0, branch 0, head = bias
    assert out[1] == pytest.approx(0.1, abs=1e-15)
    assert net.forward(x[:1], ["doctor"])["stress"][0, 0] == pytest.approx(-4.0, abs=1e-15)


# --- loss masking ---------------------------------------------------------------

def test_single_role_batch_leaves_other_branch_gradient_zero():
    net = MTMLNetwork(ModelConfig())
    _, grads = masked_batch_loss(net, _batch(roles=["nurse"] * 12))
    for name in net.branch_parameter_names("doctor"):
        assert not np.any(grads[name])
    assert any(np.any(grads[n]) for n in net.branch_parameter_names("nurse"))


def test_mixed_loss_is_sum_of_role_partitions():
    net = MTMLNetwork(ModelConfig())
    batch = _batch(n=20)
    total = net.loss(batch)
    parts = sum(net.loss(batch.subset(np.flatnonzero(batch.roles == r))) for r in ("nurse", "doctor"))
    assert abs(total - parts) <= 1e-12


def test_one_row_loss_is_hand_squared_error():
    net = MTMLNetwork(ModelConfig())
    batch = _batch(n=1, roles=["nurse"])
    out = net.forward(batch.x, batch.roles)
    want = sum((out[l][0, 0] - batch.y[0, j]) ** 2 for j, l in enumerate(LABELS))
    assert net.loss(batch) == pytest.approx(want, abs=1e-15)


def test_empty_batch():
    net = MTMLNetwork(ModelConfig())
    with pytest.raises(EmptyBatch):
        net.loss(_batch().subset(np.array([], dtype=int)))


@pytest.mark.parametrize("task", ["regression", "binary", "three_class"])
def test_gradients_small_network(task):
    net = MTMLNetwork(ModelConfig(task_mode=task, seed=3, init_scale=1.0))
    assert check_network_gradients(net, _batch(task=task), n_samples=60) < 1e-5


# --- variants -------------------------------------------------------------------

def test_variant_parameter_counts():
    mtml = MTMLNetwork(ModelConfig()).n_parameters
    ml = MTMLNetwork(ModelConfig(variant="ml")).n_parameters
    mt = MTMLNetwork(ModelConfig(variant="mt", labels=("stress",))).n_parameters
    nn = MTMLNetwork(ModelConfig(variant="nn", labels=("stress",))).n_parameters
    assert mtml > ml and mt > nn
    assert mtml - ml == 32 * 16 + 16 + 5 * (16 + 1)


def test_unbranched_network_ignores_roles():
    net = MTMLNetwork(ModelConfig(variant="nn", labels=("energy",)))
    x = np.random.default_rng(2).normal(size=(4, 40))
    a = net.forward(x, ["nurse"] * 4)["energy"]
    assert np.array_equal(a, net.forward(x, ["doctor"] * 4)["energy"])


def test_mt_with_cloned_branches_equals_nn():
    nn = MTMLNetwork(ModelConfig(variant="nn", labels=("energy",), seed=5))
    mt = MTMLNetwork(ModelConfig(variant="mt", labels=("energy",), seed=5))
    for name, v in nn.params.items():
        if ".all." in name:
            for role in ("nurse", "doctor"):
                mt.params[name.replace(".all.", f".{role}.")][...] = v
        else:
            mt.params[name][...] = v
    x = np.random.default_rng(3).normal(size=(6, 40))
    roles = ["nurse", "doctor"] * 3
    np.testing.assert_allclose(nn.forward(x, roles)["energy"], mt.forward(x, roles)["energy"],
                               atol=1e-14, rtol=0)


# --- training -------------------------------------------------------------------

def test_training_reduces_loss_and_is_deterministic():
    batch = _batch(n=40, seed=4)
    a = MTMLNetwork(ModelConfig(epochs=20, seed=1))
    b = MTMLNetwork(ModelConfig(epochs=20, seed=1))
    ra, rb = train(a, batch), train(b, batch)
    assert ra.train_loss[-1] < ra.train_loss[0]
    assert ra.train_loss == rb.train_loss
    assert a.flat.tobytes() == b.flat.tobytes()


def test_training_learns_planted_linear_signal():
    rng = np.random.default_rng(7)
    x = rng.normal(size=(400, 40))
    w = np.zeros(40)
    w[:4] = [0.08, -0.06, 0.05, 0.04]
    y = 0.5 + x @ w
    roles = np.where(rng.uniform(size=400) < 0.5, "nurse", "doctor")
    data = Batch(x, roles, y[:, None])
    net = MTMLNetwork(ModelConfig(variant="nn", labels=("stress",), epochs=150, seed=0))
    train(net, data.subset(np.arange(300)))
    pred = predict(net, x[300:], roles[300:]).values[:, 0] / 100.0
    mae = np.mean(np.abs(pred - y[300:]))
    assert mae < 0.5 * np.std(y[300:])


def test_early_stopping_restores_best_parameters():
    train_set, val = _batch(n=30, seed=5), _batch(n=10, seed=6)
    net = MTMLNetwork(ModelConfig(epochs=300, patience=5, learning_rate=0.05))
    res = train(net, train_set, validation=val)
    assert res.stopped_early
    assert validation_loss(net, val) == pytest.approx(min(res.val_loss), abs=1e-12)


# --- prediction -----------------------------------------------------------------

def test_predict_requires_training():
    with pytest.raises(UntrainedModel):
        predict(MTMLNetwork(ModelConfig()), np.zeros((1, 40)), ["nurse"])


def test_classification_probabilities_sum_to_one():
    batch = _batch(task="three_class")
    net = MTMLNetwork(ModelConfig(task_mode="three_class", epochs=3))
    train(net, batch)
    pred = predict(net, batch.x, batch.roles)
    assert pred.values.shape == (12, 5)
    for p in pred.probabilities:
        np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)
        assert np.all((p >= 0) & (p <= 1))
    assert set(np.unique(pred.values)) <= {0, 1, 2}


# --- persistence ----------------------------------------------------------------

def test_save_load_round_trip_is_bit_exact(tmp_path):
    net = MTMLNetwork(ModelConfig(task_mode="binary", seed=9))
    train(net, _batch(task="binary"), epochs=2)
    net.save(tmp_path / "m.bin", extra_blocks={"note": np.arange(3.0)})
    back, header, extras = MTMLNetwork.load(tmp_path / "m.bin")
    assert back.flat.tobytes() == net.flat.tobytes()
    assert back.config == net.config and back.trained
    assert header["task_mode"] == "binary"
    assert np.array_equal(extras["note"], np.arange(3.0))


def test_golden_model_outputs_are_frozen():
    import sys
    sys.path.insert(0, str(FIXTURES))
    from record_golden_model import golden_config, golden_problem

    record = json.loads((FIXTURES / "golden_outputs.json").read_text())
    net, _, _ = MTMLNetwork.load(FIXTURES / "golden_model.bin")
    data = golden_problem()
    out = net.forward(data.x[:6], data.roles[:6])
    for label, values in record["outputs"].items():
        np.testing.assert_allclose(out[label][:, 0], values, atol=1e-12, rtol=0)
    fresh = MTMLNetwork(golden_config())
    res = train(fresh, data)
    np.testing.assert_allclose(res.train_loss, record["train_loss"], atol=1e-10, rtol=0)
    np.testing.assert_allclose(fresh.flat, net.flat, atol=1e-10, rtol=0)
