"""Norm-bounded evasion attacks (FGSM, BIM, PGD, MIM, CW, EAD) and effectiveness.

All attacks are batched: items never interact, so the gradient of the summed
objective gives each item its own input gradient.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from .data import Dataset
from .diffcore import safe_norm
from .models import Classifier

logger = logging.getLogger(__name__)

METHODS = ("FGSM", "BIM", "PGD", "MIM", "CW", "EAD")
NORMS = ("linf", "l2")


@dataclass(frozen=True)
class AttackSpec:
    """Attack configuration.

    Unset ``steps``/``step_size``/``restarts``/``eps`` are filled per method:
    50 steps of size eps/5 for BIM/MIM/PGD, 5 random starts for PGD, and
    1000 unconstrained iterations for CW/EAD. ``target=None`` in targeted
    mode means "next class", i.e. ``(y + 1) % C`` per item. ``loss`` picks the
    objective of the gradient-sign family: ``"ce"`` or the ``"cw"`` margin.
    """

    method: str = "PGD"
    eps: float | None = None
    norm: str = "linf"
    targeted: bool = False
    target: int | None = None
    steps: int | None = None
    step_size: float | None = None
    restarts: int | None = None
    momentum: float = 1.0
    c: float = 1.0
    kappa: float = 0.1
    l1_weight: float = 0.01
    lr: float = 0.01
    loss: str = "ce"
    box: tuple | None = None
    seed: int = 0

    def __post_init__(self):
        method = self.method.upper()
        if method not in METHODS:
            raise ValueError(f"unknown attack method {self.method!r}")
        object.__setattr__(self, "method", method)
        if self.norm not in NORMS:
            raise ValueError(f"unknown norm {self.norm!r}")
        if self.loss not in ("ce", "cw"):
            raise ValueError(f"unknown attack loss {self.loss!r}")
        optimizer_based = method in ("CW", "EAD")
        eps = self.eps if self.eps is not None else (math.inf if optimizer_based else 0.3)
        steps = self.steps
        if steps is None:
            steps = {"FGSM": 1, "CW": 1000, "EAD": 1000}.get(method, 50)
        if method == "FGSM":
            steps = 1
        step_size = self.step_size
        if step_size is None:
            step_size = eps if method == "FGSM" else eps / 5.0
        restarts = self.restarts if self.restarts is not None else (5 if method == "PGD" else 1)
        object.__setattr__(self, "eps", float(eps))
        object.__setattr__(self, "steps", int(steps))
        object.__setattr__(self, "step_size", float(step_size))
        object.__setattr__(self, "restarts", int(restarts))
        if self.eps < 0 or math.isnan(self.eps):
            raise ValueError("eps must be >= 0")
        if math.isinf(self.eps) and not optimizer_based:
            raise ValueError(f"{method} needs a finite eps")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.restarts < 1:
            raise ValueError("restarts must be >= 1")
        if not 0.0 <= self.momentum <= 1.0:
            raise ValueError("momentum must lie in [0, 1]")
        if self.l1_weight < 0:
            raise ValueError("l1_weight must be >= 0")

    @property
    def constrained(self) -> bool:
        return math.isfinite(self.eps)

    def label(self) -> str:
        mode = "T" if self.targeted else "U"
        return f"{self.method}-{self.norm}-{mode}-eps{self.eps:g}"


@dataclass
class AdvBatch:
    originals: np.ndarray
    adversarials: np.ndarray
    labels: np.ndarray
    targets: np.ndarray | None
    spec: AttackSpec
    success: np.ndarray
    degenerate_steps: np.ndarray = field(default=None)

    def __len__(self) -> int:
        return self.originals.shape[0]

    def to_csv(self, path: str | Path) -> None:
        """Columns: index, label, target, success, orig_0..orig_{d-1}, adv_0..adv_{d-1}."""
        d = self.originals.shape[1]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["index", "label", "target", "success"]
                       + [f"orig_{i}" for i in range(d)] + [f"adv_{i}" for i in range(d)])
            for i in range(len(self)):
                t = "" if self.targets is None else int(self.targets[i])
                w.writerow([i, int(self.labels[i]), t, int(self.success[i])]
                           + [repr(float(v)) for v in self.originals[i]]
                           + [repr(float(v)) for v in self.adversarials[i]])


def _unpack(batch) -> tuple[np.ndarray, np.ndarray, tuple | None]:
    if isinstance(batch, Dataset):
        return batch.inputs, batch.labels, batch.box
    x, y = batch
    return np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.int64), None


def resolve_targets(spec: AttackSpec, y: np.ndarray, num_classes: int) -> np.ndarray | None:
    if not spec.targeted:
        return None
    if spec.target is None:
        return (y + 1) % num_classes
    if not 0 <= spec.target < num_classes:
        raise ValueError(f"target {spec.target} outside [0, {num_classes})")
    return np.full_like(y, spec.target)


def _margin(logits: torch.Tensor, cls: torch.Tensor) -> torch.Tensor:
    """``Z_cls - max_{i != cls} Z_i`` per row."""
    z_cls = logits.gather(1, cls.unsqueeze(1)).squeeze(1)
    other = logits.scatter(1, cls.unsqueeze(1), -math.inf)
    return z_cls - other.max(dim=1).values


def attack_objective(model: Classifier, x: torch.Tensor, y: torch.Tensor,
                     targets: torch.Tensor | None, spec: AttackSpec) -> torch.Tensor:
    """Per-item quantity the gradient-sign attacks ascend."""
    if spec.loss == "ce":
        if targets is None:
            return model.loss(x, y)
        return -model.loss(x, targets)
    z = model.logits(x)
    if targets is None:
        return -torch.clamp(_margin(z, y), min=-spec.kappa)
    return -torch.clamp(-_margin(z, targets), min=-spec.kappa)


def cw_penalty(model: Classifier, x: torch.Tensor, y: torch.Tensor,
               targets: torch.Tensor | None, kappa: float) -> torch.Tensor:
    """CW hinge ``f``: max(Z_y - max_{i!=y} Z_i, -kappa); targeted uses the target margin."""
    z = model.logits(x)
    if targets is None:
        return torch.clamp(_margin(z, y), min=-kappa)
    return torch.clamp(-_margin(z, targets), min=-kappa)


class _Projector:
    def __init__(self, x0: torch.Tensor, spec: AttackSpec, box):
        self.x0 = x0
        self.spec = spec
        if box is None:
            self.lo = self.hi = None
        else:
            self.lo = torch.as_tensor(np.asarray(box[0], dtype=np.float64)).expand_as(x0)
            self.hi = torch.as_tensor(np.asarray(box[1], dtype=np.float64)).expand_as(x0)

    def __call__(self, x: torch.Tensor) -> torch.Tensor:
        eps = self.spec.eps
        if math.isfinite(eps):
            delta = x - self.x0
            if self.spec.norm == "linf":
                delta = torch.clamp(delta, -eps, eps)
            else:
                norms = torch.linalg.vector_norm(delta, dim=1, keepdim=True)
                scale = torch.where(norms > eps, eps / torch.clamp(norms, min=1e-300),
                                    torch.ones_like(norms))
                delta = delta * scale
            x = self.x0 + delta
        if self.lo is not None:
            x = torch.minimum(torch.maximum(x, self.lo), self.hi)
        return x


def _direction(g: torch.Tensor, norm: str) -> tuple[torch.Tensor, torch.Tensor]:
    """Steepest-ascent direction for the norm, plus a per-item degenerate mask."""
    n, degenerate = safe_norm(g, dim=1)
    if norm == "linf":
        return torch.sign(g), degenerate
    safe = torch.where(degenerate, torch.ones_like(n), n)
    d = g / safe.unsqueeze(1)
    return torch.where(degenerate.unsqueeze(1), torch.zeros_like(d), d), degenerate


def _objective_and_grad(model, x, y, t, spec):
    x = x.detach().requires_grad_(True)
    obj = attack_objective(model, x, y, t, spec)
    (g,) = torch.autograd.grad(obj.sum(), x)
    return obj.detach(), g


def _random_start(x0: torch.Tensor, spec: AttackSpec, rng: np.random.Generator) -> torch.Tensor:
    n, d = x0.shape
    if spec.norm == "linf":
        delta = rng.uniform(-spec.eps, spec.eps, size=(n, d))
    else:
        v = rng.standard_normal((n, d))
        v /= np.maximum(np.linalg.norm(v, axis=1, keepdims=True), 1e-300)
        delta = v * spec.eps * rng.uniform(size=(n, 1)) ** (1.0 / d)
    return x0 + torch.from_numpy(delta)


def _saturated(obj: torch.Tensor, spec) -> torch.Tensor:
    """Items whose CW hinge is clamped at kappa: already adversarial with
    margin, so a zero gradient there is expected rather than degenerate."""
    if spec.loss != "cw" and spec.method not in ("CW", "EAD"):
        return torch.zeros_like(obj, dtype=torch.bool)
    return obj >= spec.kappa


def _iterative(model, x0, y, t, spec, project, start, degenerate_count, track_best=False):
    """Gradient-sign iterations; with ``track_best`` the highest-objective
    iterate (start included) is returned instead of the last one."""
    x = start
    momentum = torch.zeros_like(x0)
    best = best_obj = None
    for _ in range(spec.steps):
        obj, g = _objective_and_grad(model, x, y, t, spec)
        if track_best:
            best, best_obj = _keep_better(best, best_obj, x, obj)
        if spec.method == "MIM":
            l1 = g.abs().sum(dim=1, keepdim=True)
            momentum = spec.momentum * momentum + g / torch.where(l1 > 0, l1, torch.ones_like(l1))
            g = momentum
        step, degenerate = _direction(g, spec.norm)
        degenerate_count += (degenerate & ~_saturated(obj, spec)).long()
        x = project(x + spec.step_size * step)
    if not track_best:
        return x, None
    with torch.no_grad():
        obj = attack_objective(model, x, y, t, spec)
    return _keep_better(best, best_obj, x, obj)


def _keep_better(best, best_obj, cand, obj):
    if best is None:
        return cand, obj
    better = obj > best_obj
    return (torch.where(better.unsqueeze(1), cand, best),
            torch.where(better, obj, best_obj))


def _optimizer_attack(model, x0, y, t, spec, project, degenerate_count):
    """CW / EAD by fixed-step gradient descent (ISTA shrinkage for the EAD l1 term)."""
    x = x0.clone()
    for _ in range(spec.steps):
        xv = x.detach().requires_grad_(True)
        dist = ((xv - x0) ** 2).sum(dim=1)
        hinge = cw_penalty(model, xv, y, t, spec.kappa)
        obj = dist + spec.c * hinge
        (g,) = torch.autograd.grad(obj.sum(), xv)
        degenerate_count += (safe_norm(g, dim=1)[1] & ~_saturated(-hinge.detach(), spec)).long()
        z = x - spec.lr * g
        if spec.method == "EAD":
            diff = z - x0
            thr = spec.lr * spec.l1_weight
            z = x0 + torch.sign(diff) * torch.clamp(diff.abs() - thr, min=0.0)
        x = project(z)
    return x


def run_attack(model: Classifier, batch, spec: AttackSpec, start=None,
               first_restart: int = 0) -> AdvBatch:
    """Craft adversarial examples for every item in ``batch`` against ``model``.

    ``batch`` is a :class:`Dataset` or an ``(x, y)`` pair. The spec's ``box``
    overrides the dataset box when set. ``start`` warm-starts the iterative
    methods (PGD uses it for its first restart); it is projected first.

    PGD returns, per item, the highest-objective iterate over all restarts
    and steps, starting points included. Restart ``r`` draws its random start
    from ``default_rng([spec.seed, first_restart + r])``, so a single restart
    can be replayed on its own.
    """
    x_np, y_np, box = _unpack(batch)
    if spec.box is not None:
        box = spec.box
    if x_np.shape[0] == 0:
        raise ValueError("empty batch")
    targets_np = resolve_targets(spec, y_np, model.num_classes)
    x0 = torch.from_numpy(x_np.copy())
    y = torch.from_numpy(y_np)
    t = None if targets_np is None else torch.from_numpy(targets_np)
    project = _Projector(x0, spec, box)
    degenerate = torch.zeros(x0.shape[0], dtype=torch.long)

    if spec.eps == 0.0:
        adv = x0.clone()
    elif spec.method in ("CW", "EAD"):
        adv = _optimizer_attack(model, x0, y, t, spec, project, degenerate)
    elif spec.method == "PGD":
        best = best_obj = None
        for r in range(spec.restarts):
            if r == 0 and start is not None:
                x_init = torch.from_numpy(np.asarray(start, dtype=np.float64).copy())
            else:
                x_init = _random_start(x0, spec, np.random.default_rng([spec.seed, first_restart + r]))
            cand, obj = _iterative(model, x0, y, t, spec, project, project(x_init), degenerate,
                                   track_best=True)
            best, best_obj = _keep_better(best, best_obj, cand, obj)
        adv = best
    else:
        x_init = x0 if start is None else torch.from_numpy(np.asarray(start, dtype=np.float64).copy())
        adv, _ = _iterative(model, x0, y, t, spec, project, project(x_init), degenerate)

    adv_np = adv.detach().numpy().copy()
    pred = model.predict(adv_np)
    success = pred != y_np if targets_np is None else pred == targets_np
    if degenerate.any():
        logger.warning("%s: %d item-steps had degenerate gradients and were left unperturbed",
                       spec.label(), int(degenerate.sum()))
    return AdvBatch(x_np.copy(), adv_np, y_np.copy(), targets_np, spec, success,
                    degenerate.numpy())


@dataclass(frozen=True)
class Effectiveness:
    alpha: float
    success_rate: float
    n: int


def effectiveness(model: Classifier, adv: AdvBatch) -> Effectiveness:
    """Empirical alpha: fraction of items on which the attack fails against ``model``."""
    if len(adv) == 0:
        raise ValueError("empty adversarial batch")
    pred = model.predict(adv.adversarials)
    if adv.targets is None:
        failed = pred == adv.labels
    else:
        failed = pred != adv.targets
    alpha = float(failed.mean())
    return Effectiveness(alpha=alpha, success_rate=1.0 - alpha, n=len(adv))


def robust_accuracy(model: Classifier, adv: AdvBatch) -> float:
    """Fraction of adversarial examples still classified with the true label."""
    return float((model.predict(adv.adversarials) == adv.labels).mean())


def with_eps(spec: AttackSpec, eps: float) -> AttackSpec:
    """Same attack at a new radius, with step size re-derived unless pinned."""
    return replace(spec, eps=eps, step_size=None)
