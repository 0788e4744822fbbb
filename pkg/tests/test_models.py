import math
import struct

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from trsbench.diffcore import fd_gradient
from trsbench.models import (Ensemble, MlpClassifier, ensemble_training_loss, input_gradient,
                             load_checkpoint, loss, predict_confidences, save_checkpoint)
from conftest import LN2, logistic_model, rel_err, zero_model


def test_zero_network_is_uniform():
    p = predict_confidences(zero_model((2, 4, 5)), [0.3, -1.2])
    np.testing.assert_allclose(p.numpy(), np.full(5, 0.2), atol=1e-15)


def test_two_class_zero_logits_is_half():
    p = predict_confidences(logistic_model(), [0.0])
    np.testing.assert_allclose(p.numpy(), [0.5, 0.5], atol=1e-15)


def test_predict_confidences_rejects_wrong_dimension():
    with pytest.raises(ValueError):
        predict_confidences(MlpClassifier([3, 2]), [1.0, 2.0])


def test_trained_model_confident_on_training_point(vanilla_moons):
    ens, tr, _ = vanilla_moons
    p = predict_confidences(ens, tr.inputs[0])
    assert p[tr.labels[0]].item() > 0.9


def test_loss_zero_when_confidence_is_one():
    m = MlpClassifier([1, 2])
    with torch.no_grad():
        m.layers[0].weight.zero_()
        m.layers[0].bias.copy_(torch.tensor([0.0, 800.0], dtype=torch.float64))
    assert loss(m, [0.0], [1]).item() == 0.0


def test_loss_uniform_ten_classes():
    assert loss(zero_model((3, 10)), [1.0, 2.0, 3.0], [4]).item() == pytest.approx(math.log(10), abs=1e-12)


def test_loss_logistic_is_ln2():
    assert loss(logistic_model(), [0.0], [1]).item() == pytest.approx(LN2, abs=1e-15)


def test_loss_clamps_tiny_confidences():
    m = MlpClassifier([1, 2])
    with torch.no_grad():
        m.layers[0].weight.zero_()
        m.layers[0].bias.copy_(torch.tensor([0.0, 1e4], dtype=torch.float64))
    val = loss(m, [0.0], [0]).item()
    assert math.isfinite(val) and val == pytest.approx(-math.log(1e-30))


def test_loss_rejects_invalid_label():
    with pytest.raises(ValueError):
        loss(logistic_model(), [0.0], [2])
    with pytest.raises(ValueError):
        loss(logistic_model(), [0.0], [-1])


def test_input_gradient_logistic():
    assert input_gradient(logistic_model(), [0.0], [1]).item() == pytest.approx(-0.5, abs=1e-15)


def test_input_gradient_vanishes_at_minimum():
    # class-1 logit softplus(x) + softplus(-x) is smallest at x = 0, so the
    # class-0 loss has its minimum there
    m = MlpClassifier([1, 2, 2], activation="softplus", seed=0)
    with torch.no_grad():
        m.layers[0].weight.copy_(torch.tensor([[1.0], [-1.0]], dtype=torch.float64))
        m.layers[0].bias.zero_()
        m.layers[1].weight.copy_(torch.tensor([[0.0, 0.0], [1.0, 1.0]], dtype=torch.float64))
        m.layers[1].bias.zero_()
    assert abs(input_gradient(m, [0.0], [0]).item()) < 1e-12
    assert loss(m, [0.0], [0]).item() < loss(m, [0.3], [0]).item()


def test_input_gradient_matches_fd():
    for trial in range(20):
        rng = np.random.default_rng([3, trial])
        m = MlpClassifier([4, 8, 3], activation="softplus" if trial % 2 else "tanh", seed=trial)
        x = rng.uniform(-2, 2, 4)
        y = int(rng.integers(0, 3))
        g = input_gradient(m, x, [y]).numpy()
        fd = fd_gradient(lambda z: loss(m, z, [y]).item(), x)
        assert rel_err(g, fd) <= 1e-5


def test_batched_input_gradient_equals_per_item():
    m = MlpClassifier([3, 6, 3], seed=4)
    rng = np.random.default_rng(0)
    x = rng.uniform(-1, 1, (5, 3))
    y = rng.integers(0, 3, 5)
    batched = input_gradient(m, x, y).numpy()
    for i in range(5):
        np.testing.assert_allclose(batched[i], input_gradient(m, x[i], [y[i]]).numpy(), atol=1e-14)


def test_confidences_sum_to_one_on_random_models():
    rng = np.random.default_rng(0)
    worst = 0.0
    for i in range(1000):
        m = MlpClassifier([3, 5, 4], activation=("tanh", "softplus", "relu")[i % 3], seed=i)
        x = rng.uniform(-3, 3, 3)
        p = predict_confidences(m, x).numpy()
        assert (p >= 0).all()
        worst = max(worst, abs(p.sum() - 1.0))
    assert worst <= 1e-9


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10_000), st.lists(st.floats(-3, 3), min_size=2, max_size=2))
def test_argmax_confidence_is_argmin_loss(seed, x):
    m = MlpClassifier([2, 6, 4], seed=seed)
    losses = [loss(m, x, [c]).item() for c in range(4)]
    assert m.predict(np.array(x))[0] == int(np.argmin(losses))


def test_ties_go_to_lowest_index():
    assert zero_model((2, 4)).predict(np.zeros((3, 2))).tolist() == [0, 0, 0]


def test_ensemble_confidence_is_mean_of_bases():
    models = [MlpClassifier([2, 5, 3], seed=s) for s in range(4)]
    ens = Ensemble(models)
    x = np.random.default_rng(1).uniform(-2, 2, (10, 2))
    mean = np.mean([predict_confidences(m, x).numpy() for m in models], axis=0)
    np.testing.assert_allclose(predict_confidences(ens, x).numpy(), mean, rtol=0, atol=1e-12)


def test_ensemble_rejects_mismatched_models():
    with pytest.raises(ValueError):
        Ensemble([MlpClassifier([2, 3]), MlpClassifier([3, 3])])
    with pytest.raises(ValueError):
        Ensemble([])


def test_ensemble_training_loss_single_model():
    m = MlpClassifier([2, 4, 3], seed=9)
    x = np.random.default_rng(2).uniform(size=(6, 2))
    y = np.array([0, 1, 2, 0, 1, 2])
    assert ensemble_training_loss(Ensemble([m]), x, y).item() == pytest.approx(loss(m, x, y).item(), abs=1e-14)


def test_ensemble_training_loss_identical_models():
    m = MlpClassifier([2, 4, 3], seed=9)
    clones = [MlpClassifier([2, 4, 3], seed=9) for _ in range(3)]
    x = np.random.default_rng(2).uniform(size=(6, 2))
    y = np.array([0, 1, 2, 0, 1, 2])
    assert ensemble_training_loss(Ensemble(clones), x, y).item() == pytest.approx(loss(m, x, y).item(), abs=1e-14)


def test_ensemble_training_loss_uniform_models():
    ens = Ensemble([zero_model((2, 10)) for _ in range(3)])
    val = ensemble_training_loss(ens, np.ones((4, 2)), [0, 3, 5, 9]).item()
    assert val == pytest.approx(math.log(10), abs=1e-12)


def test_ensemble_training_loss_rejects_empty_batch():
    with pytest.raises(ValueError):
        ensemble_training_loss(Ensemble([zero_model((2, 3))]), np.zeros((0, 2)), [])


def test_glorot_initialization_range_and_seed():
    m = MlpClassifier([10, 30, 5], seed=3)
    a = math.sqrt(6 / 40)
    assert m.layers[0].weight.abs().max().item() <= a
    m2 = MlpClassifier([10, 30, 5], seed=3)
    for p, q in zip(m.parameters(), m2.parameters()):
        assert torch.equal(p, q)


def test_checkpoint_round_trip(tmp_path):
    models = [MlpClassifier([3, 7, 2], "softplus", seed=1), MlpClassifier([3, 4, 4, 2], "relu", seed=2)]
    path = tmp_path / "m.trsm"
    save_checkpoint(models, path)
    loaded = load_checkpoint(path)
    assert [m.activation for m in loaded] == ["softplus", "relu"]
    for a, b in zip(models, loaded):
        assert a.layer_sizes == b.layer_sizes
        for p, q in zip(a.parameters(), b.parameters()):
            assert torch.equal(p, q)


def test_checkpoint_layout(tmp_path):
    m = MlpClassifier([2, 3], seed=5)
    path = tmp_path / "m.trsm"
    save_checkpoint([m], path)
    raw = path.read_bytes()
    assert raw[:4] == b"TRSM" and raw[4] == 1
    assert struct.unpack_from("<I", raw, 5)[0] == 1
    assert raw[9] == 0  # tanh tag
    assert struct.unpack_from("<III", raw, 10) == (1, 3, 2)
    w = np.frombuffer(raw, dtype="<f8", count=6, offset=22).reshape(3, 2)
    np.testing.assert_array_equal(w, m.layers[0].weight.detach().numpy())
    assert len(raw) == 22 + 8 * (6 + 3)


def test_checkpoint_rejects_corruption(tmp_path):
    path = tmp_path / "m.trsm"
    save_checkpoint([MlpClassifier([2, 3])], path)
    raw = path.read_bytes()
    for bad in (b"XXXX" + raw[4:], raw[:-3], raw + b"\0"):
        path.write_bytes(bad)
        with pytest.raises(ValueError):
            load_checkpoint(path)
