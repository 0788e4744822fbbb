"""TRS regularizer, its ablations and baselines, and the epoch loop."""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass
from itertools import combinations
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .data import Dataset, iter_batches
from .diffcore import cosine, safe_norm
from .models import Ensemble

logger = logging.getLogger(__name__)

MODES = ("TRS", "CosOnly", "CosL2", "GAL", "Vanilla", "TRS+AdvT", "AdvT")


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    mode: str = "TRS"
    lambda_a: float = 100.0
    lambda_b: float = 2.5
    delta0: float = 0.1
    deltaM: float = 0.3
    epochs: int = 120
    inner_steps: int = 5
    optimizer: str = "adam"
    lr: float = 1e-3
    lr_milestones: tuple[int, ...] = ()
    lr_gamma: float = 0.1
    batch_size: int = 64
    seed: int = 0
    gal_weight: float = 1.0
    adv_eps: float = 0.2
    adv_steps: int = 10

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown training mode {self.mode!r}; expected one of {MODES}")
        if self.lambda_a < 0 or self.lambda_b < 0:
            raise ValueError("lambda_a and lambda_b must be >= 0")
        if not 0 <= self.delta0 <= self.deltaM:
            raise ValueError("need 0 <= delta0 <= deltaM")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.inner_steps < 0:
            raise ValueError("inner_steps must be >= 0")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.adv_eps < 0:
            raise ValueError("adv_eps must be >= 0")
        self.lr_milestones = tuple(int(m) for m in self.lr_milestones)


def warmup_delta(m: int, cfg: TrainConfig) -> float:
    """Smoothness-ball radius at epoch ``m``: linear from delta0 (m=0) to deltaM (m=M)."""
    if not 0 <= m <= cfg.epochs:
        raise ValueError(f"epoch {m} outside [0, {cfg.epochs}]")
    if m == cfg.epochs:
        return cfg.deltaM
    return cfg.delta0 + (cfg.deltaM - cfg.delta0) * m / cfg.epochs


def loss_input_grad(model, x: torch.Tensor, y: torch.Tensor,
                    create_graph: bool = True) -> torch.Tensor:
    """Per-item input gradient of ``model.loss``; differentiable in the
    parameters when ``create_graph`` is set. ``model`` may be any object with
    a per-item ``loss(x, y)``."""
    if not x.requires_grad:
        x = x.detach().requires_grad_(True)
    (g,) = torch.autograd.grad(model.loss(x, y).sum(), x, create_graph=create_graph)
    return g


def _xy(x, y) -> tuple[torch.Tensor, torch.Tensor]:
    x = x if torch.is_tensor(x) else torch.from_numpy(np.asarray(x, dtype=np.float64))
    y = y if torch.is_tensor(y) else torch.from_numpy(np.asarray(y, dtype=np.int64))
    if x.dim() == 1:
        x, y = x.unsqueeze(0), y.reshape(1)
    return x.detach(), y.long()


def abs_cosine(g_f: torch.Tensor, g_g: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Per-item |cos| of two gradient batches; degenerate items give 0."""
    cos, degenerate = cosine(g_f, g_g, dim=1)
    return cos.abs(), degenerate


def similarity_loss(F, G, x, y) -> torch.Tensor:
    """Batch mean of |cos(grad_x loss_F, grad_x loss_G)|, differentiable in both models."""
    x, y = _xy(x, y)
    x = x.requires_grad_(True)
    value, degenerate = abs_cosine(loss_input_grad(F, x, y), loss_input_grad(G, x, y))
    if degenerate.any():
        logger.debug("similarity_loss: %d degenerate items", int(degenerate.sum()))
    return value.mean()


def _grad_norm_sum(F, G, x: torch.Tensor, y: torch.Tensor, create_graph: bool) -> torch.Tensor:
    """Per-item ``||grad loss_F|| + ||grad loss_G||`` at ``x``."""
    n_f = safe_norm(loss_input_grad(F, x, y, create_graph), dim=1)[0]
    n_g = safe_norm(loss_input_grad(G, x, y, create_graph), dim=1)[0]
    return n_f + n_g


def search_smooth_support(F, G, x: torch.Tensor, y: torch.Tensor, delta: float,
                          inner_steps: int) -> torch.Tensor:
    """Inner l_inf PGD (step delta/4, starting at x) maximizing the gradient-norm sum.

    Returns per item whichever of ``x`` and the PGD endpoint has the larger
    objective, so the result never scores below ``x`` itself.
    """
    x = x.detach()
    if delta == 0 or inner_steps == 0:
        return x.clone()
    step = delta / 4.0
    xh = x.clone()
    for _ in range(inner_steps):
        xv = xh.requires_grad_(True)
        obj = _grad_norm_sum(F, G, xv, y, create_graph=True)
        (g,) = torch.autograd.grad(obj.sum(), xv)
        xh = (x + torch.clamp(xv.detach() + step * torch.sign(g) - x, -delta, delta)).detach()
    with torch.enable_grad():
        at_x = _grad_norm_sum(F, G, x.clone().requires_grad_(True), y, create_graph=False)
        at_end = _grad_norm_sum(F, G, xh.clone().requires_grad_(True), y, create_graph=False)
    keep_end = (at_end > at_x).unsqueeze(1)
    return torch.where(keep_end, xh, x)


def smoothness_loss(F, G, x, y, delta: float, inner_steps: int = 5,
                    x_hat: torch.Tensor | None = None) -> tuple[torch.Tensor, torch.Tensor]:
    """Batch mean of max over the l_inf ball of the two input-gradient norms.

    The maximizer is treated as a constant when differentiating with respect
    to parameters. Pass ``x_hat`` to skip the search and evaluate there.
    """
    if delta < 0:
        raise ValueError("delta must be >= 0")
    x, y = _xy(x, y)
    if x_hat is None:
        x_hat = search_smooth_support(F, G, x, y, delta, inner_steps)
    xh = x_hat.detach().clone().requires_grad_(True)
    value = _grad_norm_sum(F, G, xh, y, create_graph=True)
    return value.mean(), x_hat.detach()


def trs_regularizer(F, G, x, y, delta: float, cfg: TrainConfig,
                    x_hat: torch.Tensor | None = None) -> torch.Tensor:
    """``lambda_a * L_sim + lambda_b * L_smooth`` for one model pair."""
    x, y = _xy(x, y)
    sim = similarity_loss(F, G, x, y)
    smooth, _ = smoothness_loss(F, G, x, y, delta, cfg.inner_steps, x_hat=x_hat)
    return cfg.lambda_a * sim + cfg.lambda_b * smooth


def gal_loss(models: Sequence, x, y) -> torch.Tensor:
    """Batch mean of log sum_{i<j} exp(cos_ij) with the signed cosine."""
    if len(models) < 2:
        raise ValueError("GAL needs at least two models")
    x, y = _xy(x, y)
    x = x.requires_grad_(True)
    grads = [loss_input_grad(m, x, y) for m in models]
    cos = torch.stack([cosine(grads[i], grads[j], dim=1)[0]
                       for i, j in combinations(range(len(models)), 2)])
    return torch.logsumexp(cos, dim=0).mean()


def adversarial_points(model, x, y, adv_eps: float, steps: int = 10,
                       step_size: float | None = None) -> torch.Tensor:
    """l_inf PGD from ``x`` keeping, per item, the highest-loss iterate (x included)."""
    x, y = _xy(x, y)
    if adv_eps == 0 or steps == 0:
        return x.clone()
    step_size = adv_eps / 4.0 if step_size is None else step_size
    best = x.clone()
    with torch.no_grad():
        best_loss = model.loss(x, y)
    xa = x.clone()
    for _ in range(steps):
        xv = xa.requires_grad_(True)
        (g,) = torch.autograd.grad(model.loss(xv, y).sum(), xv)
        xa = (x + torch.clamp(xv.detach() + step_size * torch.sign(g) - x, -adv_eps, adv_eps)).detach()
        with torch.no_grad():
            cand = model.loss(xa, y)
        better = cand > best_loss
        best = torch.where(better.unsqueeze(1), xa, best)
        best_loss = torch.where(better, cand, best_loss)
    return best


def adv_training_loss(model, x, y, adv_eps: float, steps: int = 10) -> torch.Tensor:
    """Mean loss at PGD-found points within the l_inf ball of radius ``adv_eps``."""
    if adv_eps < 0:
        raise ValueError("adv_eps must be >= 0")
    x, y = _xy(x, y)
    xa = adversarial_points(model, x, y, adv_eps, steps)
    return model.loss(xa, y).mean()


@dataclass
class BatchTerms:
    total: torch.Tensor
    ce: float
    reg: float
    mean_abs_cos: float
    mean_grad_norm: float


def batch_objective(ensemble: Ensemble, x, y, cfg: TrainConfig, delta: float,
                    x_hats: dict | None = None) -> BatchTerms:
    """Full training objective for one mini-batch.

    ``x_hats`` maps model-index pairs to frozen smoothness support points;
    missing pairs are searched. Normalization follows the ensemble loss:
    cross-entropy averaged over models, pairwise regularizer averaged over
    the N(N-1)/2 pairs.
    """
    x, y = _xy(x, y)
    models = list(ensemble.models)
    n = len(models)
    pairs = list(combinations(range(n), 2))
    mode = cfg.mode

    if mode in ("AdvT", "TRS+AdvT"):
        base = adv_training_loss(ensemble, x, y, cfg.adv_eps, cfg.adv_steps)
        ce_value = torch.stack([m.loss(x, y).mean() for m in models]).mean()
    else:
        base = torch.stack([m.loss(x, y).mean() for m in models]).mean()
        ce_value = base

    xg = x.clone().requires_grad_(True)
    need_graph = mode in ("TRS", "CosOnly", "CosL2", "GAL", "TRS+AdvT") and n > 1
    grads = [loss_input_grad(m, xg, y, create_graph=need_graph) for m in models]
    norms = [safe_norm(g, dim=1)[0] for g in grads]

    reg = torch.zeros((), dtype=x.dtype)
    if mode == "GAL" and n > 1:
        cos = torch.stack([cosine(grads[i], grads[j], dim=1)[0] for i, j in pairs])
        reg = cfg.gal_weight * torch.logsumexp(cos, dim=0).mean()
    elif mode in ("TRS", "CosOnly", "CosL2", "TRS+AdvT") and n > 1:
        for i, j in pairs:
            term = cfg.lambda_a * abs_cosine(grads[i], grads[j])[0].mean()
            if mode == "CosL2":
                term = term + cfg.lambda_b * (norms[i] + norms[j]).mean()
            elif mode in ("TRS", "TRS+AdvT"):
                frozen = None if x_hats is None else x_hats.get((i, j))
                smooth, xh = smoothness_loss(models[i], models[j], x, y, delta,
                                             cfg.inner_steps, x_hat=frozen)
                if x_hats is not None:
                    x_hats[(i, j)] = xh
                term = term + cfg.lambda_b * smooth
            reg = reg + term
        reg = reg / len(pairs)

    total = base + reg
    if not torch.isfinite(total):
        raise TrainingError(f"non-finite loss in mode {mode}: base={float(base)}, reg={float(reg)}")
    with torch.no_grad():
        abs_cos = (torch.stack([abs_cosine(grads[i].detach(), grads[j].detach())[0].mean()
                                for i, j in pairs]).mean().item() if pairs else 0.0)
        grad_norm = torch.stack([nm.detach().mean() for nm in norms]).mean().item()
    return BatchTerms(total, float(ce_value.detach()), float(reg.detach()), abs_cos, grad_norm)


@dataclass
class EpochMetrics:
    epoch: int
    delta: float
    mean_ce: float
    mean_reg: float
    mean_abs_cos: float
    mean_grad_norm: float
    clean_acc: float


METRIC_FIELDS = ("epoch", "delta", "mean_ce", "mean_reg", "mean_abs_cos", "mean_grad_norm", "clean_acc")


def make_optimizer(ensemble: Ensemble, cfg: TrainConfig):
    params = list(ensemble.parameters())
    if cfg.optimizer == "adam":
        opt = torch.optim.Adam(params, lr=cfg.lr)
    else:
        opt = torch.optim.SGD(params, lr=cfg.lr)
    sched = torch.optim.lr_scheduler.MultiStepLR(opt, milestones=list(cfg.lr_milestones),
                                                 gamma=cfg.lr_gamma)
    return opt, sched


def train_epoch(ensemble: Ensemble, dataset: Dataset, m: int, cfg: TrainConfig,
                optimizer) -> EpochMetrics:
    """One pass over ``dataset`` in shuffled mini-batches; updates in place."""
    delta = warmup_delta(m, cfg)
    rng = np.random.default_rng([cfg.seed, m])
    sums = np.zeros(4)
    count = 0
    for xb, yb in iter_batches(dataset, cfg.batch_size, rng):
        terms = batch_objective(ensemble, xb, yb, cfg, delta)
        optimizer.zero_grad(set_to_none=True)
        terms.total.backward()
        optimizer.step()
        k = len(yb)
        sums += k * np.array([terms.ce, terms.reg, terms.mean_abs_cos, terms.mean_grad_norm])
        count += k
    sums /= max(count, 1)
    acc = float((ensemble.predict(dataset.inputs) == dataset.labels).mean())
    return EpochMetrics(m, delta, *map(float, sums), acc)


def train(ensemble: Ensemble, dataset: Dataset, cfg: TrainConfig,
          metrics_path: str | Path | None = None) -> list[EpochMetrics]:
    """Run ``cfg.epochs`` epochs; optionally write the per-epoch metrics CSV."""
    optimizer, scheduler = make_optimizer(ensemble, cfg)
    history = []
    for m in range(cfg.epochs):
        metrics = train_epoch(ensemble, dataset, m, cfg, optimizer)
        scheduler.step()
        history.append(metrics)
        logger.info("%s epoch %d: ce=%.4f reg=%.4f |cos|=%.3f acc=%.3f", cfg.mode, m,
                    metrics.mean_ce, metrics.mean_reg, metrics.mean_abs_cos, metrics.clean_acc)
    if metrics_path is not None:
        write_metrics_csv(history, metrics_path)
    return history


def write_metrics_csv(history: Sequence[EpochMetrics], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(METRIC_FIELDS)
        for h in history:
            row = asdict(h)
            w.writerow([row["epoch"]] + [repr(float(row[k])) for k in METRIC_FIELDS[1:]])
