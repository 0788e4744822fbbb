import csv

import numpy as np
import pytest
import torch

from trsbench.attacks import AttackSpec, effectiveness, run_attack
from trsbench.data import Dataset
from trsbench.models import MlpClassifier
from trsbench.transfer import (blackbox_robust_accuracy, estimate_transferability,
                               report_from_batch, transfer_matrix, transfer_predicate)
from conftest import logistic_model


def threshold_model(t: float, w: float = 10.0):
    """1-d binary model that predicts class 1 iff x > t."""
    m = MlpClassifier([1, 2])
    with torch.no_grad():
        m.layers[0].weight.copy_(torch.tensor([[0.0], [w]], dtype=torch.float64))
        m.layers[0].bias.copy_(torch.tensor([0.0, -w * t], dtype=torch.float64))
    return m


def three_class_model():
    """1-d model: class 0 below 0, class 1 in (0, 1), class 2 above 1."""
    m = MlpClassifier([1, 3])
    with torch.no_grad():
        m.layers[0].weight.copy_(torch.tensor([[-10.0], [0.0], [10.0]], dtype=torch.float64))
        m.layers[0].bias.copy_(torch.tensor([0.0, 5.0, -5.0], dtype=torch.float64))
    return m


def test_predicate_untargeted_examples():
    F, G = threshold_model(0.0), threshold_model(0.5)
    assert transfer_predicate(F, G, [1.0], 1, [-1.0]) == 1  # both flipped
    assert transfer_predicate(F, G, [1.0], 1, [0.2]) == 0   # only G flipped
    assert transfer_predicate(F, G, [0.2], 1, [-1.0]) == 0  # G already wrong on x
    assert transfer_predicate(F, G, [1.0], 1, [0.8]) == 0   # neither flipped


def test_predicate_targeted_examples():
    F = G = three_class_model()
    assert transfer_predicate(F, G, [0.5], 1, [2.0], targeted=True, y_t=2) == 1
    assert transfer_predicate(F, G, [0.5], 1, [-1.0], targeted=True, y_t=2) == 0
    # untargeted reading of the same point counts as a transfer
    assert transfer_predicate(F, G, [0.5], 1, [-1.0]) == 1
    with pytest.raises(ValueError):
        transfer_predicate(F, G, [0.5], 1, [2.0], targeted=True)


def test_predicate_batch_returns_array():
    F, G = threshold_model(0.0), threshold_model(0.5)
    bits = transfer_predicate(F, G, [[1.0], [1.0], [-1.0]], [1, 1, 0], [[-1.0], [0.2], [1.0]])
    assert bits.tolist() == [1, 0, 1]


def test_report_counts_are_consistent():
    rng = np.random.default_rng(0)
    F, G = MlpClassifier([2, 8, 3], seed=1), MlpClassifier([2, 8, 3], seed=2)
    ds = Dataset(rng.uniform(size=(60, 2)), rng.integers(0, 3, 60), 3)
    for targeted in (False, True):
        rep = estimate_transferability(F, G, ds, AttackSpec("PGD", eps=0.3, steps=10, targeted=targeted))
        assert rep.n == 60 and rep.bits.shape == (60,)
        assert rep.predicate_satisfied == rep.bits.sum()
        assert rep.predicate_satisfied <= min(rep.clean_both_correct, rep.surrogate_fooled, rep.target_fooled)
        assert 0.0 <= rep.probability <= rep.success_rate <= 1.0


def test_self_transfer_equals_effectiveness():
    rng = np.random.default_rng(1)
    F = MlpClassifier([2, 8, 2], seed=3)
    ds = Dataset(rng.uniform(size=(40, 2)), rng.integers(0, 2, 40), 2)
    adv = run_attack(F, ds, AttackSpec("PGD", eps=0.2, steps=10))
    rep = report_from_batch(F, F, adv)
    assert rep.success_rate == effectiveness(F, adv).success_rate
    # gated predicate only counts items F classified correctly to begin with
    clean = F.predict(ds.inputs) == ds.labels
    assert rep.probability == pytest.approx((clean & adv.success).mean())


def test_empty_inputs_rejected():
    F = logistic_model()
    empty = Dataset(np.zeros((0, 1)), np.zeros(0, dtype=int), 2)
    with pytest.raises(ValueError):
        estimate_transferability(F, F, empty, AttackSpec("FGSM", eps=0.1))
    with pytest.raises(ValueError):
        transfer_matrix([F], empty, AttackSpec("FGSM", eps=0.1))


def test_transfer_matrix_and_csv(tmp_path):
    rng = np.random.default_rng(2)
    models = [MlpClassifier([2, 8, 2], seed=s) for s in range(3)]
    ds = Dataset(rng.uniform(size=(30, 2)), rng.integers(0, 2, 30), 2)
    spec = AttackSpec("PGD", eps=0.2, steps=10)
    tm = transfer_matrix(models, ds, spec, ids=["a", "b", "c"])
    for i, F in enumerate(models):
        adv = run_attack(F, ds, spec)
        assert tm.success[i, i] == effectiveness(F, adv).success_rate
        for j, G in enumerate(models):
            if i != j:
                assert tm.success[i, j] == (G.predict(adv.adversarials) != ds.labels).mean()
    mask = ~np.eye(3, dtype=bool)
    assert tm.off_diagonal_mean() == pytest.approx(tm.success[mask].mean())
    path = tmp_path / "m.csv"
    tm.to_csv(path)
    rows = list(csv.reader(open(path)))
    assert rows[0] == ["surrogate", "a", "b", "c"]
    np.testing.assert_array_equal(np.array([[float(v) for v in r[1:]] for r in rows[1:]]), tm.success)
    with pytest.raises(ValueError):
        transfer_matrix(models[:1], ds, spec).off_diagonal_mean()


def test_blackbox_perfectly_robust_target():
    x = np.linspace(0.5, 1.0, 10)[:, None]
    ds = Dataset(x, np.ones(10, dtype=int), 2)
    target = threshold_model(-5.0)  # class 1 everywhere within reach
    res = blackbox_robust_accuracy(target, [threshold_model(0.6), threshold_model(0.7)], ds,
                                   [AttackSpec("PGD", eps=1.0, steps=5, restarts=3),
                                    AttackSpec("FGSM", eps=1.0)])
    assert res.rate == 1.0 and res.instance_rate == 1.0
    assert res.attempts_per_item == 2 * (3 + 1) and res.n == 10


def test_blackbox_rate_dominates_instance_rate():
    rng = np.random.default_rng(3)
    ds = Dataset(rng.uniform(size=(40, 2)), rng.integers(0, 2, 40), 2)
    target = MlpClassifier([2, 8, 2], seed=0)
    sur = [MlpClassifier([2, 8, 2], seed=s) for s in (1, 2)]
    res = blackbox_robust_accuracy(target, sur, ds, [AttackSpec("PGD", eps=0.3, steps=10, restarts=2)])
    assert res.attempts_per_item == 4
    assert 0.0 <= res.instance_rate <= res.rate <= 1.0


def test_restart_replay_matches_full_run():
    rng = np.random.default_rng(4)
    ds = Dataset(rng.uniform(size=(25, 2)), rng.integers(0, 2, 25), 2)
    m = MlpClassifier([2, 8, 2], seed=5)
    full = run_attack(m, ds, AttackSpec("PGD", eps=0.2, steps=10, restarts=3, seed=2))
    single = AttackSpec("PGD", eps=0.2, steps=10, restarts=1, seed=2)
    parts = np.stack([run_attack(m, ds, single, first_restart=r).adversarials for r in range(3)])
    # the multi-restart result keeps, per item, one of the individual restarts' answers
    match = (np.abs(parts - full.adversarials[None]).max(axis=2) == 0).any(axis=0)
    assert match.all()
    np.testing.assert_array_equal(parts[0], run_attack(m, ds, single).adversarials)


def test_blackbox_rejects_empty():
    ds = Dataset(np.zeros((1, 1)), np.zeros(1, dtype=int), 2)
    with pytest.raises(ValueError):
        blackbox_robust_accuracy(logistic_model(), [], ds, [AttackSpec("FGSM", eps=0.1)])
    with pytest.raises(ValueError):
        blackbox_robust_accuracy(logistic_model(), [logistic_model()], ds, [])
