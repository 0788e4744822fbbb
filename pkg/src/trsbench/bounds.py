"""Transferability bound constants, the four bound formulas, the two geometric
lemma margins, and an exact checker for the TV-distance results on finite domains.

Constants are empirical extremes: the true inf/sup over the whole input space
is not computable, so every estimate carries the sample count behind it.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Protocol

import numpy as np
import torch

from .attacks import AdvBatch, AttackSpec, effectiveness, run_attack
from .data import Dataset
from .diffcore import safe_norm


class LossModel(Protocol):
    """Anything with a per-item loss ``loss(x, y)`` and ``num_classes``.

    ``predict`` is only needed for risk and effectiveness estimates.
    """

    num_classes: int

    def loss(self, x: torch.Tensor, y) -> torch.Tensor: ...


# --- lemma margins -----------------------------------------------------------

def _check_cosine(m: float, name: str) -> None:
    if not -1.0 <= m <= 1.0:
        raise ValueError(f"{name} must lie in [-1, 1], got {m}")


def lemma_shift_margin(m: float, eps: float) -> float:
    """``eps * sqrt(2 - 2m)``: if ``δ·y > c + margin`` with ``‖δ‖ <= eps`` and
    unit ``x, y`` of cosine at least ``m``, then ``δ·x > c``."""
    _check_cosine(m, "m")
    if eps < 0:
        raise ValueError("eps must be >= 0")
    return eps * math.sqrt(max(2.0 - 2.0 * m, 0.0))


def lemma_dissimilar_projection(S: float, delta) -> float:
    """``‖δ‖₂ sqrt((1+S)/2)``, an upper bound on ``min(δ·x, δ·y)`` for unit
    ``x, y`` with ``x·y < S``."""
    _check_cosine(S, "S")
    return float(np.linalg.norm(np.asarray(delta, dtype=np.float64))) * math.sqrt((1.0 + S) / 2.0)


# --- constants -----------------------------------------------------------------

@dataclass
class SmoothnessConfig:
    """β is estimated from ``pairs`` random partners per sample point, drawn
    uniformly from the l2 ball of radius ``radius`` around it."""

    radius: float = 0.1
    pairs: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.radius <= 0:
            raise ValueError("radius must be positive")
        if self.pairs < 1:
            raise ValueError("pairs must be >= 1")


@dataclass
class ModelConstants:
    mode: str = "untargeted"
    eta_f: float = 0.0
    eta_g: float = 0.0
    xi_f: float = 0.0
    xi_g: float = 0.0
    s_lower: float = 1.0
    s_upper: float = 1.0
    beta: float = 0.0
    B: float = 0.0
    c_f: float = math.nan
    c_g: float = math.nan
    l_min: float = math.nan
    eps: float = math.nan
    alpha: float = 0.0
    n_points: int = 0
    n_trajectory: int = 0
    n_cosine: int = 0
    n_beta_pairs: int = 0
    n_degenerate: int = 0

    def __post_init__(self):
        if self.mode not in ("targeted", "untargeted"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.s_lower > self.s_upper:
            raise ValueError("s_lower must not exceed s_upper")


def _loss_and_grad(model, x: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    xt = torch.from_numpy(np.ascontiguousarray(x, dtype=np.float64)).requires_grad_(True)
    losses = model.loss(xt, torch.from_numpy(np.asarray(y, dtype=np.int64)))
    (g,) = torch.autograd.grad(losses.sum(), xt)
    return losses.detach().numpy(), g.numpy()


def _losses_all_classes(model, x: np.ndarray) -> np.ndarray:
    """(n, C) matrix of ``loss(x_i, c)``."""
    xt = torch.from_numpy(np.ascontiguousarray(x, dtype=np.float64))
    with torch.no_grad():
        cols = [model.loss(xt, torch.full((len(x),), c, dtype=torch.long)).numpy()
                for c in range(model.num_classes)]
    return np.stack(cols, axis=1)


def _l2_radius(spec: AttackSpec, adv: AdvBatch) -> float:
    """l2 radius containing every perturbation: the nominal one when finite,
    otherwise the largest observed perturbation."""
    d = adv.originals.shape[1]
    if math.isfinite(spec.eps):
        return spec.eps if spec.norm == "l2" else spec.eps * math.sqrt(d)
    return float(np.linalg.norm(adv.adversarials - adv.originals, axis=1).max())


def _beta_pairs(model, x: np.ndarray, y: np.ndarray, g: np.ndarray,
                cfg: SmoothnessConfig, keys: np.ndarray) -> np.ndarray:
    """Per-point max of ‖∇ℓ(x1) − ∇ℓ(x2)‖ / ‖x1 − x2‖ over random partners.

    Point ``i`` draws from ``default_rng([seed, *keys[i]])``, where the key is
    (sample block, item index); enlarging the dataset never changes the draws
    of items already present.
    """
    n, d = x.shape
    partners = np.empty((n, cfg.pairs, d))
    for i in range(n):
        rng = np.random.default_rng([cfg.seed, *map(int, keys[i])])
        v = rng.standard_normal((cfg.pairs, d))
        v /= np.maximum(np.linalg.norm(v, axis=1, keepdims=True), 1e-300)
        r = cfg.radius * rng.uniform(size=(cfg.pairs, 1)) ** (1.0 / d)
        partners[i] = x[i] + v * np.maximum(r, 1e-6 * cfg.radius)
    flat = partners.reshape(-1, d)
    _, g2 = _loss_and_grad(model, flat, np.repeat(y, cfg.pairs))
    g2 = g2.reshape(n, cfg.pairs, d)
    num = np.linalg.norm(g[:, None, :] - g2, axis=2)
    den = np.linalg.norm(x[:, None, :] - partners, axis=2)
    return (num / den).max(axis=1)


def _cosines(gf: np.ndarray, gg: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    nf, df = safe_norm(torch.from_numpy(gf), dim=1)
    ng, dg = safe_norm(torch.from_numpy(gg), dim=1)
    ok = ~(df | dg).numpy()
    cos = np.einsum("ij,ij->i", gf, gg)[ok] / (nf.numpy()[ok] * ng.numpy()[ok])
    return np.clip(cos, -1.0, 1.0), ok


def estimate_constants(F, G, dataset: Dataset, attack_spec: AttackSpec | None = None,
                       smoothness: SmoothnessConfig | None = None,
                       adv: AdvBatch | None = None) -> ModelConstants:
    """Estimate every bound constant for the pair (F, G).

    The attack (crafted on ``F``, or supplied as ``adv``) contributes its
    endpoints as extra sample points and defines ``eps``, ``alpha``, ``c_F``
    and ``c_G``. Without an attack only the model-only constants are filled.
    """
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    smoothness = smoothness or SmoothnessConfig()
    if adv is None and attack_spec is not None:
        adv = run_attack(F, dataset, attack_spec)
    spec = adv.spec if adv is not None else attack_spec
    mode = "targeted" if (spec is not None and spec.targeted) else "untargeted"

    x, y = dataset.inputs, dataset.labels
    n = len(dataset)
    # Sample points with the labels at which gradients are evaluated.
    pts, labs = [x], [y]
    if adv is not None:
        pts.append(adv.adversarials)
        labs.append(y)
        if adv.targets is not None:
            pts += [x, adv.adversarials]
            labs += [adv.targets, adv.targets]
    P, Y = np.concatenate(pts), np.concatenate(labs)
    keys = np.concatenate([np.stack([np.full(n, b), np.arange(n)], axis=1) for b in range(len(pts))])

    out = {}
    grads = {}
    for name, model in (("f", F), ("g", G)):
        lp, gp = _loss_and_grad(model, P, Y)
        grads[name] = gp
        out[f"xi_{name}"] = float(lp[:n].mean())
        if hasattr(model, "predict"):
            out[f"eta_{name}"] = float((model.predict(x) != y).mean())
        out[f"beta_{name}"] = float(_beta_pairs(model, P, Y, gp, smoothness, keys).max())
        out[f"B_{name}"] = float(np.linalg.norm(gp, axis=1).max())

    cos, ok = _cosines(grads["f"], grads["g"])
    n_deg = int((~ok).sum())
    beta = max(out["beta_f"], out["beta_g"])
    consts = ModelConstants(
        mode=mode,
        eta_f=out.get("eta_f", math.nan), eta_g=out.get("eta_g", math.nan),
        xi_f=out["xi_f"], xi_g=out["xi_g"],
        s_lower=float(cos.min()) if cos.size else -1.0,
        s_upper=float(cos.max()) if cos.size else 1.0,
        beta=beta, B=max(out["B_f"], out["B_g"]),
        n_points=n, n_trajectory=0 if adv is None else len(adv),
        n_cosine=int(cos.size), n_beta_pairs=len(P) * smoothness.pairs, n_degenerate=n_deg,
    )
    if adv is None:
        return consts

    eps = _l2_radius(spec, adv)
    consts.eps = eps
    consts.alpha = effectiveness(F, adv).alpha if hasattr(F, "predict") else math.nan
    half = beta * eps * eps / 2.0
    n_deg_c = 0
    if mode == "targeted":
        t = adv.targets
        vals = {}
        for name, model in (("f", F), ("g", G)):
            adv_min = _losses_all_classes(model, adv.adversarials).min(axis=1)
            lt, gt = _loss_and_grad(model, x, t)
            norm = np.linalg.norm(gt, axis=1)
            good = norm >= 1e-12
            n_deg_c += int((~good).sum())
            shift = half if name == "f" else -half
            vals[name] = (adv_min - lt + shift)[good] / norm[good]
        consts.c_f = float(vals["f"].max()) if vals["f"].size else math.nan
        consts.c_g = float(vals["g"].min()) if vals["g"].size else math.nan
        # min over every sample point of the target-class loss
        pts_t = np.concatenate([x, adv.adversarials])
        tt = np.concatenate([t, t])
        consts.l_min = float(min(_loss_and_grad(m, pts_t, tt)[0].min() for m in (F, G)))
    else:
        vals = {}
        for name, model in (("f", F), ("g", G)):
            la = _losses_all_classes(model, adv.adversarials)
            la[np.arange(n), y] = np.inf
            l0, g0 = _loss_and_grad(model, x, y)
            norm = np.linalg.norm(g0, axis=1)
            good = norm >= 1e-12
            n_deg_c += int((~good).sum())
            shift = -half if name == "f" else half
            vals[name] = (la.min(axis=1) - l0 + shift)[good] / norm[good]
        consts.c_f = float(vals["f"].min()) if vals["f"].size else math.nan
        consts.c_g = float(vals["g"].max()) if vals["g"].size else math.nan
        # min over benign points and wrong labels
        lmins = []
        for model in (F, G):
            la = _losses_all_classes(model, x)
            la[np.arange(n), y] = np.inf
            lmins.append(la.min())
        consts.l_min = float(min(lmins))
    consts.n_degenerate += n_deg_c
    return consts


# --- bound formulas ------------------------------------------------------------

def lower_bound(mode: str, c: ModelConstants) -> float:
    """Raw lower bound on Pr[T_r = 1]; NaN when the denominator is not positive."""
    root = math.sqrt(max(2.0 - 2.0 * c.s_lower, 0.0))
    one_minus = 1.0 - c.alpha
    eps = c.eps
    if mode == "targeted":
        den = c.c_g + eps
        if not den > 0:
            return math.nan
        return (one_minus - (c.eta_f + c.eta_g)
                - (eps * (1.0 + c.alpha) + c.c_f * one_minus) / den
                - eps * one_minus / den * root)
    if mode == "untargeted":
        den = eps - c.c_g
        if not den > 0:
            return math.nan
        return (one_minus - (c.eta_f + c.eta_g)
                - (eps * (1.0 + c.alpha) - c.c_f * one_minus) / den
                - eps * one_minus / den * root)
    raise ValueError(f"unknown mode {mode!r}")


def upper_bound(mode: str, c: ModelConstants) -> float:
    """Raw upper bound (ξ_F + ξ_G) / denominator; NaN when the denominator is not positive.

    Both modes share the formula; they differ only in how ``l_min`` is estimated.
    """
    if mode not in ("targeted", "untargeted"):
        raise ValueError(f"unknown mode {mode!r}")
    den = (c.l_min - c.eps * c.B * (1.0 + math.sqrt((1.0 + c.s_upper) / 2.0))
           - c.beta * c.eps ** 2)
    if not den > 0:
        return math.nan
    return (c.xi_f + c.xi_g) / den


def is_vacuous(value: float) -> bool:
    return not (0.0 <= value <= 1.0)


def _clamp(v: float) -> float:
    return math.nan if math.isnan(v) else min(max(v, 0.0), 1.0)


@dataclass
class BoundReport:
    mode: str
    lower_raw: float
    upper_raw: float
    lower_clamped: float
    upper_clamped: float
    lower_vacuous: bool
    upper_vacuous: bool
    empirical: float
    sandwich_violation: bool
    constants: ModelConstants
    notes: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        d = asdict(self)
        # JSON has no NaN; use null.
        def clean(v):
            if isinstance(v, float) and not math.isfinite(v):
                return None
            if isinstance(v, dict):
                return {k: clean(w) for k, w in v.items()}
            if isinstance(v, list):
                return [clean(w) for w in v]
            return v
        return clean(d)

    def to_json(self, path: str | Path | None = None) -> str:
        text = json.dumps(self.to_dict(), indent=2, sort_keys=True)
        if path is not None:
            Path(path).write_text(text + "\n")
        return text


def bound_report(constants: ModelConstants, empirical: float) -> BoundReport:
    mode = constants.mode
    lo, hi = lower_bound(mode, constants), upper_bound(mode, constants)
    notes = []
    if mode == "untargeted":
        notes.append("untargeted c_F is a min and c_G a max over the data, the reverse of the "
                     "targeted case; evaluated as stated, which may be a transcription slip")
    lo_c, hi_c = _clamp(lo), _clamp(hi)
    violation = ((not math.isnan(lo) and empirical < lo_c)
                 or (not math.isnan(hi) and empirical > hi_c))
    return BoundReport(mode, lo, hi, lo_c, hi_c, is_vacuous(lo), is_vacuous(hi),
                       empirical, bool(violation), constants, notes)


# --- TV-distance checker --------------------------------------------------------

@dataclass
class DiscreteScenario:
    """Finite domain with masses ``p``, labelers ``F``/``G``, ground truth and
    an attack map ``attack[i]`` (index of the image of point ``i``)."""

    p: np.ndarray
    F: np.ndarray
    G: np.ndarray
    truth: np.ndarray
    attack: np.ndarray
    eps_risk: float

    def __post_init__(self):
        self.p = np.asarray(self.p, dtype=np.float64)
        k = self.p.shape[0]
        for name in ("F", "G", "truth", "attack"):
            arr = np.asarray(getattr(self, name), dtype=np.int64)
            if arr.shape != (k,):
                raise ValueError(f"{name} must have one entry per domain point")
            setattr(self, name, arr)
        if (self.p < 0).any() or abs(self.p.sum() - 1.0) > 1e-12:
            raise ValueError("masses must be non-negative and sum to 1")
        if (self.attack < 0).any() or (self.attack >= k).any():
            raise ValueError("attack map must send points into the domain")


@dataclass(frozen=True)
class TVCheck:
    rho: float
    risk_f: float
    risk_g: float
    disagreement_after_attack: float
    lemma_bound: float
    lemma_holds: bool
    delta_f: float
    delta_g: float
    flip_bound: float
    flip_holds: bool


def tv_distance(p: np.ndarray, q: np.ndarray) -> float:
    """Largest change in probability over events, i.e. half the l1 distance."""
    return 0.5 * float(np.abs(np.asarray(p) - np.asarray(q)).sum())


def tv_bound_check(s: DiscreteScenario) -> TVCheck:
    """Exact check of Pr[F(A x) != G(A x)] <= 2ε + ρ and of the effectiveness transfer.

    Effectiveness is read as the label-flip event: A is (δ, F)-effective when
    Pr[F(x) = F(A x)] <= δ. With δ_F the exact value for F, the claim is
    Pr[G(x) = G(A x)] <= δ_F + 4ε + ρ.
    """
    risk_f = float(s.p[s.F != s.truth].sum())
    risk_g = float(s.p[s.G != s.truth].sum())
    if risk_f > s.eps_risk + 1e-15 or risk_g > s.eps_risk + 1e-15:
        raise ValueError("scenario classifiers exceed the declared risk")
    q = np.bincount(s.attack, weights=s.p, minlength=s.p.shape[0])
    rho = tv_distance(s.p, q)
    a = s.attack
    disagree = float(s.p[s.F[a] != s.G[a]].sum())
    lemma_bound = 2.0 * s.eps_risk + rho
    delta_f = float(s.p[s.F == s.F[a]].sum())
    delta_g = float(s.p[s.G == s.G[a]].sum())
    flip_bound = delta_f + 4.0 * s.eps_risk + rho
    slack = 1e-12
    return TVCheck(rho, risk_f, risk_g, disagree, lemma_bound, disagree <= lemma_bound + slack,
                   delta_f, delta_g, flip_bound, delta_g <= flip_bound + slack)


def random_scenario(rng: np.random.Generator, k: int = 8, eps_risk: float = 0.1) -> DiscreteScenario:
    """Random binary scenario whose labelers each err on at most ``eps_risk`` mass."""
    p = rng.dirichlet(np.ones(k))
    p[-1] = 1.0 - p[:-1].sum()
    truth = rng.integers(0, 2, size=k)

    def labeler():
        lab = truth.copy()
        budget = eps_risk
        for i in rng.permutation(k):
            if rng.uniform() < 0.5 and p[i] <= budget:
                lab[i] ^= 1
                budget -= p[i]
        return lab

    return DiscreteScenario(p, labeler(), labeler(), truth, rng.integers(0, k, size=k), eps_risk)
