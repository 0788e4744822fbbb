"""Instance-level transferability, transfer matrices and blackbox robust accuracy."""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .attacks import AdvBatch, AttackSpec, effectiveness, run_attack
from .data import Dataset
from .models import Classifier


def transfer_predicate(F: Classifier, G: Classifier, x, y, adv, targeted: bool = False,
                       y_t=None):
    """Transferability bit(s) for items ``x`` with labels ``y`` and adversarials ``adv``.

    Untargeted: both models are right on ``x`` and both are wrong on ``adv``.
    Targeted: both are right on ``x`` and both output ``y_t`` on ``adv``.
    The clean gate always uses the stored label ``y``. Returns an int for a
    single item and an int array for a batch.
    """
    x = np.asarray(x, dtype=np.float64)
    adv = np.asarray(adv, dtype=np.float64)
    single = x.ndim == 1
    xb, ab = np.atleast_2d(x), np.atleast_2d(adv)
    yb = np.atleast_1d(np.asarray(y, dtype=np.int64))
    if targeted and y_t is None:
        raise ValueError("targeted transferability needs y_t")
    clean = (F.predict(xb) == yb) & (G.predict(xb) == yb)
    fa, ga = F.predict(ab), G.predict(ab)
    if targeted:
        tb = np.broadcast_to(np.asarray(y_t, dtype=np.int64), yb.shape)
        fooled = (fa == tb) & (ga == tb)
    else:
        fooled = (fa != yb) & (ga != yb)
    bits = (clean & fooled).astype(np.int64)
    return int(bits[0]) if single else bits


def _fooled(model: Classifier, adv: AdvBatch) -> np.ndarray:
    """Per-item attack success against ``model`` (misclassified, or hit the target)."""
    pred = model.predict(adv.adversarials)
    if adv.targets is None:
        return pred != adv.labels
    return pred == adv.targets


@dataclass
class TransferReport:
    surrogate: str
    target: str
    spec: AttackSpec
    n: int
    clean_both_correct: int
    surrogate_fooled: int
    predicate_satisfied: int
    target_fooled: int
    bits: np.ndarray

    @property
    def probability(self) -> float:
        """Empirical Pr[T_r = 1]."""
        return self.predicate_satisfied / self.n

    @property
    def success_rate(self) -> float:
        """Ungated transfer success rate on the target (a transfer-matrix cell)."""
        return self.target_fooled / self.n


def report_from_batch(F: Classifier, G: Classifier, adv: AdvBatch,
                      surrogate: str = "F", target: str = "G") -> TransferReport:
    if len(adv) == 0:
        raise ValueError("empty adversarial batch")
    bits = transfer_predicate(F, G, adv.originals, adv.labels, adv.adversarials,
                              targeted=adv.targets is not None, y_t=adv.targets)
    clean = (F.predict(adv.originals) == adv.labels) & (G.predict(adv.originals) == adv.labels)
    return TransferReport(surrogate, target, adv.spec, len(adv), int(clean.sum()),
                          int(_fooled(F, adv).sum()), int(bits.sum()),
                          int(_fooled(G, adv).sum()), bits)


def estimate_transferability(F: Classifier, G: Classifier, dataset: Dataset, spec: AttackSpec,
                             surrogate: str = "F", target: str = "G") -> TransferReport:
    """Craft attacks against ``F`` and measure how often they transfer to ``G``."""
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    return report_from_batch(F, G, run_attack(F, dataset, spec), surrogate, target)


@dataclass
class TransferMatrix:
    """``success[i, j]``: success rate on model j of attacks crafted on model i.

    ``predicate[i, j]`` is the gated Pr[T_r = 1] for the same adversarials;
    both are kept because they answer different questions.
    """

    ids: list[str]
    success: np.ndarray
    predicate: np.ndarray

    def off_diagonal_mean(self, which: str = "success") -> float:
        m = getattr(self, which)
        k = m.shape[0]
        if k < 2:
            raise ValueError("need at least two models for off-diagonal entries")
        return float(m[~np.eye(k, dtype=bool)].mean())

    def to_csv(self, path: str | Path, which: str = "success") -> None:
        m = getattr(self, which)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["surrogate"] + list(self.ids))
            for name, row in zip(self.ids, m):
                w.writerow([name] + [repr(float(v)) for v in row])


def transfer_matrix(models: Sequence[Classifier], dataset: Dataset, spec: AttackSpec,
                    ids: Sequence[str] | None = None) -> TransferMatrix:
    if len(models) < 1:
        raise ValueError("need at least one model")
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    ids = list(ids) if ids is not None else [f"m{i}" for i in range(len(models))]
    k = len(models)
    success = np.zeros((k, k))
    predicate = np.zeros((k, k))
    for i, F in enumerate(models):
        adv = run_attack(F, dataset, spec)
        for j, G in enumerate(models):
            if i == j:
                success[i, j] = effectiveness(F, adv).success_rate
            else:
                success[i, j] = _fooled(G, adv).mean()
            predicate[i, j] = report_from_batch(F, G, adv).probability
    return TransferMatrix(ids, success, predicate)


@dataclass(frozen=True)
class BlackboxResult:
    """``rate``: unsuccessful attempts / all attempts. ``instance_rate``:
    fraction of items that survive every attempt."""

    rate: float
    instance_rate: float
    attempts_per_item: int
    n: int


def blackbox_attempts(surrogates: Sequence[Classifier], dataset: Dataset,
                      specs: Sequence[AttackSpec]) -> list[np.ndarray]:
    """Adversarial inputs for every (surrogate, spec, restart) attempt.

    Each PGD restart is its own attempt: restart ``r`` replays the random
    start a full multi-restart run would use.
    """
    if not surrogates or not specs:
        raise ValueError("need at least one surrogate and one spec")
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    attempts = []
    for surrogate in surrogates:
        for spec in specs:
            single = replace(spec, restarts=1)
            for r in range(spec.restarts):
                attempts.append(run_attack(surrogate, dataset, single, first_restart=r).adversarials)
    return attempts


def score_attempts(target: Classifier, dataset: Dataset,
                   attempts: Sequence[np.ndarray]) -> BlackboxResult:
    """An attempt succeeds iff the target misclassifies its adversarial."""
    if not attempts:
        raise ValueError("no attempts")
    survived = np.stack([target.predict(a) == dataset.labels for a in attempts])
    return BlackboxResult(rate=float(survived.mean()),
                          instance_rate=float(survived.all(axis=0).mean()),
                          attempts_per_item=survived.shape[0], n=len(dataset))


def blackbox_robust_accuracy(target: Classifier, surrogates: Sequence[Classifier],
                             dataset: Dataset, specs: Sequence[AttackSpec]) -> BlackboxResult:
    """Transfer attacks from every surrogate, spec and restart onto ``target``."""
    return score_attempts(target, dataset, blackbox_attempts(surrogates, dataset, specs))
