"""A small numpy MLP: ReLU hidden layers, linear logits, SoftMax on top."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .checkpoint import Checkpoint, Dataset, DenseLayer


def softmax(z: np.ndarray) -> np.ndarray:
    """Numerically stable SoftMax over the last axis."""
    z = np.asarray(z)
    if np.isnan(z).any():
        raise ValueError("softmax input contains NaN")
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def _check_input(model: Checkpoint, x: np.ndarray) -> None:
    expected = model.layers[0].in_dim
    if x.shape[-1] != expected:
        raise ValueError(f"input has {x.shape[-1]} features, model expects {expected}")


def forward(model: Checkpoint, x: np.ndarray) -> np.ndarray:
    """Logits for one input vector or a batch of row vectors (float32)."""
    h = np.asarray(x, dtype=np.float32)
    _check_input(model, h)
    last = len(model.layers) - 1
    for i, layer in enumerate(model.layers):
        h = h @ layer.weights.T + layer.biases
        if i < last:
            h = np.maximum(h, 0.0)
    return h


def predict(model: Checkpoint, x: np.ndarray) -> np.ndarray | int:
    """Argmax class; ties resolve to the lowest index."""
    logits = forward(model, x)
    out = np.argmax(logits, axis=-1)
    return int(out) if out.ndim == 0 else out


def _batched_predictions(model: Checkpoint, data: Dataset, batch: int = 4096) -> np.ndarray:
    if len(data) == 0:
        raise ValueError("dataset is empty")
    return np.concatenate(
        [predict(model, data.images[i : i + batch]) for i in range(0, len(data), batch)]
    )


def evaluate_accuracy(model: Checkpoint, data: Dataset) -> float:
    """Sparse categorical accuracy."""
    preds = _batched_predictions(model, data)
    return float(np.mean(preds == data.labels))


def class_prediction_rate(model: Checkpoint, data: Dataset, k: int) -> float:
    """Fraction of all inputs predicted as class ``k``."""
    n_out = model.layers[-1].out_dim
    if not 0 <= k < n_out:
        raise ValueError(f"class {k} out of range for {n_out} outputs")
    preds = _batched_predictions(model, data)
    return float(np.mean(preds == k))


def prediction_rates(model: Checkpoint, data: Dataset) -> list[float]:
    preds = _batched_predictions(model, data)
    counts = np.bincount(preds, minlength=model.layers[-1].out_dim)
    return (counts / len(data)).tolist()


# --------------------------------------------------------------------------- training


@dataclass(frozen=True)
class TrainConfig:
    hidden_sizes: tuple[int, ...] = (128, 64)
    epochs: int = 5
    batch_size: int = 64
    learning_rate: float = 0.1
    seed: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "hidden_sizes", tuple(int(h) for h in self.hidden_sizes))
        if any(h <= 0 for h in self.hidden_sizes):
            raise ValueError("hidden sizes must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if self.batch_size <= 0:
            raise ValueError("batch_size must be positive")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")


def he_init(sizes: Sequence[int], rng: np.random.Generator) -> list[tuple[np.ndarray, np.ndarray]]:
    params = []
    for fan_in, fan_out in zip(sizes, sizes[1:]):
        std = math.sqrt(2.0 / fan_in)
        w = (rng.standard_normal((fan_out, fan_in)) * std).astype(np.float32)
        params.append((w, np.zeros(fan_out, dtype=np.float32)))
    return params


def loss_and_grads(
    params: Sequence[tuple[np.ndarray, np.ndarray]], x: np.ndarray, y: np.ndarray
) -> tuple[float, list[tuple[np.ndarray, np.ndarray]]]:
    """Mean cross-entropy of the batch and its gradient for every (W, b).

    Works in whatever float dtype ``params`` and ``x`` carry.
    """
    acts = [x]
    h = x
    last = len(params) - 1
    for i, (w, b) in enumerate(params):
        h = h @ w.T + b
        if i < last:
            h = np.maximum(h, 0)
        acts.append(h)

    n = x.shape[0]
    logp = log_softmax(acts[-1])
    loss = -float(logp[np.arange(n), y].mean())

    delta = np.exp(logp)
    delta[np.arange(n), y] -= 1
    delta /= n
    grads: list[tuple[np.ndarray, np.ndarray]] = [None] * len(params)  # type: ignore[list-item]
    for i in range(last, -1, -1):
        w, _ = params[i]
        grads[i] = (delta.T @ acts[i], delta.sum(axis=0))
        if i > 0:
            delta = (delta @ w) * (acts[i] > 0)
    return loss, grads


def train(
    data: Dataset,
    cfg: TrainConfig = TrainConfig(),
    on_epoch: Optional[Callable[[int, float], None]] = None,
) -> Checkpoint:
    """He-initialized mini-batch SGD on cross-entropy.

    ``on_epoch(epoch, mean_loss)`` is called after every epoch.
    """
    if len(data) == 0:
        raise ValueError("cannot train on an empty dataset")
    rng = np.random.default_rng(cfg.seed)
    sizes = [data.images.shape[1], *cfg.hidden_sizes, data.num_classes]
    params = he_init(sizes, rng)
    lr = np.float32(cfg.learning_rate)
    n = len(data)

    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            loss, grads = loss_and_grads(params, data.images[idx], data.labels[idx])
            total += loss * len(idx)
            for (w, b), (gw, gb) in zip(params, grads):
                w -= lr * gw.astype(np.float32)
                b -= lr * gb.astype(np.float32)
        if on_epoch is not None:
            on_epoch(epoch, total / n)

    return Checkpoint(tuple(DenseLayer(w, b) for w, b in params))
