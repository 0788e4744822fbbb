"""Decision-boundary grids in the plane of the loss gradient and a random direction."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .diffcore import DEGENERATE_NORM
from .models import Classifier, input_gradient


class DegenerateGradientError(ValueError):
    pass


@dataclass
class BoundaryGrid:
    u: np.ndarray           # (resolution,)
    v: np.ndarray           # (resolution,)
    labels: np.ndarray      # (resolution, resolution), labels[i, j] at (u[i], v[j])
    d_grad: np.ndarray
    d_orth: np.ndarray
    center: np.ndarray

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["u", "v", "label"])
            for i, u in enumerate(self.u):
                for j, v in enumerate(self.v):
                    w.writerow([repr(float(u)), repr(float(v)), int(self.labels[i, j])])

    def label_changes(self) -> int:
        """Adjacent grid cells (along u or v) whose labels differ."""
        lab = self.labels
        return int((lab[1:, :] != lab[:-1, :]).sum() + (lab[:, 1:] != lab[:, :-1]).sum())


def emit_boundary_grid(model: Classifier, x, y: int, resolution: int = 41,
                       half_width: float = 0.5, seed: int = 0) -> BoundaryGrid:
    """Predicted labels at ``x + u·d_grad + v·d_orth`` on a square grid.

    ``d_grad`` is the normalized negative loss gradient at ``(x, y)``;
    ``d_orth`` is a seeded random unit vector orthogonal to it. An odd
    resolution puts the grid centre exactly on ``x``.
    """
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    if x.shape[0] < 2:
        raise ValueError("boundary grids need input dimension >= 2")
    if resolution < 2:
        raise ValueError("resolution must be >= 2")
    g = input_gradient(model, x, [y]).numpy().reshape(-1)
    norm = np.linalg.norm(g)
    if norm < DEGENERATE_NORM:
        raise DegenerateGradientError("loss gradient at x is degenerate")
    d_grad = -g / norm
    rng = np.random.default_rng(seed)
    r = rng.standard_normal(x.shape[0])
    r -= (r @ d_grad) * d_grad
    r -= (r @ d_grad) * d_grad      # second pass tightens orthogonality
    d_orth = r / np.linalg.norm(r)
    ticks = np.linspace(-half_width, half_width, resolution)
    uu, vv = np.meshgrid(ticks, ticks, indexing="ij")
    pts = x + uu.reshape(-1, 1) * d_grad + vv.reshape(-1, 1) * d_orth
    labels = model.predict(pts).reshape(resolution, resolution)
    return BoundaryGrid(ticks, ticks.copy(), labels, d_grad, d_orth, x.copy())
