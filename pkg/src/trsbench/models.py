"""MLP classifiers, averaged-probability ensembles, and their checkpoint format."""

from __future__ import annotations

import math
import struct
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .diffcore import ACTIVATIONS, DTYPE, as_tensor

# Confidences are clamped below by this before taking logs.
MIN_CONFIDENCE = 1e-30
_LOG_MIN_CONFIDENCE = math.log(MIN_CONFIDENCE)

CHECKPOINT_MAGIC = b"TRSM"
CHECKPOINT_VERSION = 1
_ACTIVATION_TAGS = {"tanh": 0, "softplus": 1, "relu": 2}
_TAG_ACTIVATIONS = {v: k for k, v in _ACTIVATION_TAGS.items()}


def _as_labels(y) -> torch.Tensor:
    return torch.as_tensor(np.asarray(y) if not torch.is_tensor(y) else y).long().reshape(-1)


def _as_batch(x) -> tuple[torch.Tensor, bool]:
    x = x if torch.is_tensor(x) and x.dtype == DTYPE else as_tensor(x)
    single = x.dim() == 1
    return (x.unsqueeze(0) if single else x), single


class Classifier(nn.Module):
    """Shared interface: subclasses implement ``log_confidences``."""

    num_classes: int
    input_dim: int

    def log_confidences(self, x: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError

    def logits(self, x: torch.Tensor) -> torch.Tensor:
        return self.log_confidences(x)

    def confidences(self, x: torch.Tensor) -> torch.Tensor:
        return torch.exp(self.log_confidences(x))

    def loss(self, x: torch.Tensor, y) -> torch.Tensor:
        """Per-item cross-entropy ``-log f_y(x)`` for a batch ``x``."""
        y = _as_labels(y)
        if y.numel() and (y.min() < 0 or y.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")
        if x.shape[-1] != self.input_dim:
            raise ValueError(f"expected input dimension {self.input_dim}, got {x.shape[-1]}")
        logp = self.log_confidences(x)
        return -logp.gather(-1, y.unsqueeze(-1)).squeeze(-1)

    @torch.no_grad()
    def predict(self, x) -> np.ndarray:
        """Argmax labels; ``torch.argmax`` returns the first maximum, so ties go low."""
        xb, _ = _as_batch(x)
        return torch.argmax(self.log_confidences(xb), dim=-1).numpy()


class MlpClassifier(Classifier):
    def __init__(self, layer_sizes: Sequence[int], activation: str = "tanh", seed: int = 0):
        super().__init__()
        if len(layer_sizes) < 2:
            raise ValueError("need at least input and output sizes")
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        self.layer_sizes = list(layer_sizes)
        self.activation = activation
        self.input_dim = layer_sizes[0]
        self.num_classes = layer_sizes[-1]
        self.layers = nn.ModuleList(
            nn.Linear(a, b, dtype=DTYPE) for a, b in zip(layer_sizes[:-1], layer_sizes[1:])
        )
        self.reset_parameters(seed)

    def reset_parameters(self, seed: int) -> None:
        # Glorot-uniform weights; biases from the same range so that hidden
        # units are not all anchored at the origin (inputs live in [0, 1]^d).
        rng = np.random.default_rng(seed)
        with torch.no_grad():
            for layer in self.layers:
                fan_out, fan_in = layer.weight.shape
                a = math.sqrt(6.0 / (fan_in + fan_out))
                layer.weight.copy_(torch.from_numpy(rng.uniform(-a, a, size=(fan_out, fan_in))))
                layer.bias.copy_(torch.from_numpy(rng.uniform(-a, a, size=fan_out)))

    def logits(self, x: torch.Tensor) -> torch.Tensor:
        act = ACTIVATIONS[self.activation]
        h = x
        for layer in self.layers[:-1]:
            h = act(layer(h))
        return self.layers[-1](h)

    def log_confidences(self, x: torch.Tensor) -> torch.Tensor:
        return torch.clamp(torch.log_softmax(self.logits(x), dim=-1), min=_LOG_MIN_CONFIDENCE)

    def forward(self, x):
        return self.logits(x)


class Ensemble(Classifier):
    """Averages base-model confidence vectors.

    ``logits`` returns log of the averaged confidences, which is a valid logit
    vector for the averaged distribution (softmax of it gives it back).
    """

    def __init__(self, models: Sequence[Classifier]):
        super().__init__()
        if len(models) < 1:
            raise ValueError("an ensemble needs at least one base model")
        dims = {m.input_dim for m in models}
        classes = {m.num_classes for m in models}
        if len(dims) != 1 or len(classes) != 1:
            raise ValueError("base models disagree on input dimension or class count")
        self.models = nn.ModuleList(models)
        self.input_dim = dims.pop()
        self.num_classes = classes.pop()

    def __len__(self) -> int:
        return len(self.models)

    def __getitem__(self, i: int) -> Classifier:
        return self.models[i]

    def confidences(self, x: torch.Tensor) -> torch.Tensor:
        probs = torch.stack([m.confidences(x) for m in self.models])
        return probs.mean(dim=0)

    def log_confidences(self, x: torch.Tensor) -> torch.Tensor:
        return torch.log(torch.clamp(self.confidences(x), min=MIN_CONFIDENCE))

    def forward(self, x):
        return self.logits(x)


def predict_confidences(model: Classifier, x) -> torch.Tensor:
    """Confidence vector(s) for a single input or a batch."""
    xb, single = _as_batch(x)
    if xb.shape[-1] != model.input_dim:
        raise ValueError(f"expected input dimension {model.input_dim}, got {xb.shape[-1]}")
    with torch.no_grad():
        p = model.confidences(xb)
    return p[0] if single else p


def loss(model: Classifier, x, y) -> torch.Tensor:
    """Cross-entropy for one item (scalar) or mean over a batch."""
    xb, _ = _as_batch(x)
    return model.loss(xb, _as_labels(y)).mean()


def input_gradient(model: Classifier, x, y, create_graph: bool = False) -> torch.Tensor:
    """Per-item gradient of the loss with respect to the input.

    Items are independent, so the gradient of the summed loss gives every
    row's own gradient in one backward pass.
    """
    xb, single = _as_batch(x)
    if not create_graph or not xb.requires_grad:
        xb = xb.detach().clone().requires_grad_(True)
    total = model.loss(xb, y).sum()
    (g,) = torch.autograd.grad(total, xb, create_graph=create_graph)
    if not create_graph:
        g = g.detach()
    return g[0] if single else g


def ensemble_training_loss(ensemble: Ensemble, x, y) -> torch.Tensor:
    """Mean cross-entropy over base models and batch items."""
    xb, _ = _as_batch(x)
    if xb.shape[0] == 0:
        raise ValueError("empty batch")
    y = _as_labels(y)
    return torch.stack([m.loss(xb, y).mean() for m in ensemble.models]).mean()


def save_checkpoint(models: Sequence[MlpClassifier], path: str | Path) -> None:
    """Write models to the binary checkpoint container.

    Layout (all integers little-endian)::

        b"TRSM" | u8 version | u32 model count
        per model: u8 activation tag | u32 layer count
            per layer: u32 rows | u32 cols | rows*cols f64 weights | rows f64 biases

    Weights are stored row-major as little-endian float64.
    """
    buf = bytearray(CHECKPOINT_MAGIC)
    buf += struct.pack("<BI", CHECKPOINT_VERSION, len(models))
    for m in models:
        buf += struct.pack("<BI", _ACTIVATION_TAGS[m.activation], len(m.layers))
        for layer in m.layers:
            w = layer.weight.detach().numpy()
            b = layer.bias.detach().numpy()
            buf += struct.pack("<II", *w.shape)
            buf += w.astype("<f8").tobytes(order="C")
            buf += b.astype("<f8").tobytes()
    Path(path).write_bytes(bytes(buf))


def load_checkpoint(path: str | Path) -> list[MlpClassifier]:
    data = Path(path).read_bytes()
    if data[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a model checkpoint (bad magic)")
    pos = 4
    version, count = struct.unpack_from("<BI", data, pos)
    pos += 5
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    models = []
    try:
        for _ in range(count):
            tag, n_layers = struct.unpack_from("<BI", data, pos)
            pos += 5
            weights = []
            for _ in range(n_layers):
                rows, cols = struct.unpack_from("<II", data, pos)
                pos += 8
                w = np.frombuffer(data, dtype="<f8", count=rows * cols, offset=pos).reshape(rows, cols)
                pos += 8 * rows * cols
                b = np.frombuffer(data, dtype="<f8", count=rows, offset=pos)
                pos += 8 * rows
                weights.append((w, b))
            sizes = [weights[0][0].shape[1]] + [w.shape[0] for w, _ in weights]
            m = MlpClassifier(sizes, activation=_TAG_ACTIVATIONS[tag])
            with torch.no_grad():
                for layer, (w, b) in zip(m.layers, weights):
                    layer.weight.copy_(torch.from_numpy(w.astype(np.float64)))
                    layer.bias.copy_(torch.from_numpy(b.astype(np.float64)))
            models.append(m)
    except (struct.error, ValueError) as exc:
        raise ValueError(f"{path}: truncated or malformed checkpoint") from exc
    if pos != len(data):
        raise ValueError(f"{path}: trailing bytes in checkpoint")
    return models
