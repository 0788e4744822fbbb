"""Float64 tensor helpers and nested reverse-mode differentiation.

Autodiff itself is delegated to ``torch.autograd`` (tape per evaluation,
``create_graph=True`` for the one nesting level that double backprop needs).
``fd_gradient`` is a pure-numpy central-difference oracle and never touches
torch, so it can check the autograd route independently.
"""

from __future__ import annotations

import logging
from typing import Callable, Sequence

import numpy as np
import torch

logger = logging.getLogger(__name__)

DTYPE = torch.float64
DEGENERATE_NORM = 1e-12


class NonFiniteError(ValueError):
    """Raised when a tensor or an intermediate value contains NaN/Inf."""


class DegenerateGradientWarning(UserWarning):
    pass


def as_tensor(data, requires_grad: bool = False) -> torch.Tensor:
    """Build a float64 tensor, rejecting NaN/Inf."""
    if torch.is_tensor(data):
        t = data.detach().to(DTYPE).clone()
    else:
        t = torch.tensor(np.asarray(data, dtype=np.float64))
    if not torch.isfinite(t).all():
        raise NonFiniteError("tensor contains non-finite values")
    if requires_grad:
        t.requires_grad_(True)
    return t


def _check_scalar(out: torch.Tensor) -> None:
    if out.numel() != 1:
        raise ValueError(f"function must return a scalar, got shape {tuple(out.shape)}")
    if not torch.isfinite(out).all():
        raise NonFiniteError("function value is not finite")


def grad(f: Callable[..., torch.Tensor], at: Sequence[torch.Tensor] | torch.Tensor,
         wrt: int = 0, create_graph: bool = False) -> torch.Tensor:
    """Reverse-mode gradient of scalar ``f(*at)`` with respect to ``at[wrt]``.

    ``at`` may be a single tensor (then ``wrt`` must be 0). Inputs are copied
    into fresh leaves unless ``create_graph`` is set, in which case they are
    used as given so the result stays attached to the caller's graph.
    """
    args = [at] if torch.is_tensor(at) else list(at)
    if not create_graph:
        args = [a.detach().clone().requires_grad_(i == wrt) for i, a in enumerate(args)]
    elif not args[wrt].requires_grad:
        args[wrt] = args[wrt].requires_grad_(True)
    out = f(*args)
    _check_scalar(out)
    if not out.requires_grad:  # f ignores its inputs
        return torch.zeros_like(args[wrt])
    (g,) = torch.autograd.grad(out, args[wrt], create_graph=create_graph, allow_unused=True)
    if g is None:
        g = torch.zeros_like(args[wrt])
    if not torch.isfinite(g).all():
        raise NonFiniteError("gradient is not finite")
    return g if create_graph else g.detach()


def safe_norm(v: torch.Tensor, dim: int = -1) -> tuple[torch.Tensor, torch.Tensor]:
    """l2 norm along ``dim`` with a zero-gradient sentinel for degenerate rows.

    Returns ``(norm, degenerate)``. Rows with norm below 1e-12 get norm 0 and
    contribute exactly zero gradient (sqrt is never evaluated at 0).
    """
    sq = (v * v).sum(dim=dim)
    degenerate = sq < DEGENERATE_NORM**2
    safe_sq = torch.where(degenerate, torch.ones_like(sq), sq)
    norm = torch.where(degenerate, torch.zeros_like(sq), torch.sqrt(safe_sq))
    return norm, degenerate


def cosine(a: torch.Tensor, b: torch.Tensor, dim: int = -1) -> tuple[torch.Tensor, torch.Tensor]:
    """Row-wise cosine similarity; degenerate rows get cosine 0 and a flag."""
    na, da = safe_norm(a, dim)
    nb, db = safe_norm(b, dim)
    degenerate = da | db
    denom = torch.where(degenerate, torch.ones_like(na), na * nb)
    cos = torch.where(degenerate, torch.zeros_like(na), (a * b).sum(dim=dim) / denom)
    return cos, degenerate


def grad_of_grad_functional(f: Callable[[Sequence[torch.Tensor], torch.Tensor], torch.Tensor],
                            params: Sequence[torch.Tensor], x: torch.Tensor,
                            functional: str = "l2-norm",
                            constant: torch.Tensor | None = None
                            ) -> tuple[list[torch.Tensor], bool]:
    """Parameter gradient of a functional of the input gradient.

    Computes d/d(params) of ``functional(grad_x f(params, x))`` where the
    functional is ``"l2-norm"`` or ``"dot"`` (with ``constant``). Returns the
    list of parameter gradients and a degenerate flag; when the input
    gradient norm is below 1e-12 the l2-norm case returns zeros and sets the
    flag.
    """
    ps = [p.detach().clone().requires_grad_(True) for p in params]
    xx = x.detach().clone().requires_grad_(True)
    out = f(ps, xx)
    _check_scalar(out)
    (gx,) = torch.autograd.grad(out, xx, create_graph=True)
    if functional == "l2-norm":
        value, degenerate = safe_norm(gx.reshape(-1), dim=0)
        degenerate = bool(degenerate)
        if degenerate:
            logger.debug("degenerate input gradient; returning zero parameter gradient")
            return [torch.zeros_like(p) for p in ps], True
    elif functional == "dot":
        if constant is None:
            raise ValueError("functional 'dot' needs a constant tensor")
        value = (gx * constant).sum()
        degenerate = False
    else:
        raise ValueError(f"unknown functional {functional!r}")
    grads = torch.autograd.grad(value, ps, allow_unused=True)
    out_grads = []
    for p, g in zip(ps, grads):
        g = torch.zeros_like(p) if g is None else g.detach()
        if not torch.isfinite(g).all():
            raise NonFiniteError("parameter gradient is not finite")
        out_grads.append(g)
    return out_grads, degenerate


def fd_gradient(f: Callable[[np.ndarray], float], at, step: float = 1e-5) -> np.ndarray:
    """Central finite-difference gradient of a scalar function of a numpy array."""
    if step <= 0:
        raise ValueError("step must be positive")
    x = np.array(at, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = float(f(x))
        flat[i] = orig - step
        fm = float(f(x))
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * step)
    return g


# Primitives. Thin wrappers so property tests can enumerate them by name.

def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return a @ b


def add(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return a + b


def tanh(a: torch.Tensor) -> torch.Tensor:
    return torch.tanh(a)


def softplus(a: torch.Tensor) -> torch.Tensor:
    return torch.nn.functional.softplus(a)


def relu(a: torch.Tensor) -> torch.Tensor:
    return torch.relu(a)


def softmax_cross_entropy(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Per-row ``-log softmax(logits)[label]``."""
    logp = torch.log_softmax(logits, dim=-1)
    return -logp.gather(-1, labels.long().unsqueeze(-1)).squeeze(-1)


def l2_norm(a: torch.Tensor) -> torch.Tensor:
    return safe_norm(a.reshape(-1), dim=0)[0]


def dot(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return (a * b).sum()


ACTIVATIONS: dict[str, Callable[[torch.Tensor], torch.Tensor]] = {
    "tanh": tanh,
    "softplus": softplus,
    "relu": relu,
}

# relu has no finite curvature bound; smoothness estimates on it are meaningless.
SMOOTH_ACTIVATIONS = frozenset({"tanh", "softplus"})
