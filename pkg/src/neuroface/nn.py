"""Fully connected ReLU network mapping 17 normalized AUs to 56 activations.

Plain numpy: He-uniform initialization, mean-squared-error loss,
backpropagation and Adam.  The output layer is linear during training and
clamped to [0, 1] at inference.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

log = logging.getLogger(__name__)

LAYER_DIMS = (17, 100, 100, 100, 100, 56)
FORMAT_VERSION = 1


class TrainingError(RuntimeError):
    pass


@dataclass
class MLPModel:
    layer_dims: tuple[int, ...]
    weights: list[np.ndarray]  # (fan_in, fan_out) per layer
    biases: list[np.ndarray]
    seed: int = 0
    norm_table: np.ndarray | None = None  # (17, 2) AU (min, max) used for training
    meta: dict = field(default_factory=dict)

    @property
    def n_weights(self) -> int:
        return int(sum(w.size for w in self.weights))

    @property
    def n_biases(self) -> int:
        return int(sum(b.size for b in self.biases))

    def copy(self) -> "MLPModel":
        return MLPModel(self.layer_dims, [w.copy() for w in self.weights], [b.copy() for b in self.biases],
                        self.seed, None if self.norm_table is None else self.norm_table.copy(), dict(self.meta))


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.01
    batch_size: int = 32
    epochs: int = 100
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0

    def __post_init__(self) -> None:
        if not (self.learning_rate > 0 and self.batch_size > 0 and self.epochs > 0 and self.eps > 0):
            raise ValueError("training hyper-parameters must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("Adam betas must lie in [0, 1)")


def init_mlp(seed: int = 0, layer_dims: tuple[int, ...] = LAYER_DIMS) -> MLPModel:
    """He-uniform weights (limit sqrt(6 / fan_in)), zero biases."""
    rng = np.random.default_rng(seed)
    ws, bs = [], []
    for fan_in, fan_out in zip(layer_dims[:-1], layer_dims[1:]):
        lim = np.sqrt(6.0 / fan_in)
        ws.append(rng.uniform(-lim, lim, size=(fan_in, fan_out)))
        bs.append(np.zeros(fan_out))
    return MLPModel(tuple(layer_dims), ws, bs, seed)


def _as_batch(model: MLPModel, x: np.ndarray) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    xb = x[None, :] if single else x
    if xb.ndim != 2 or xb.shape[1] != model.layer_dims[0]:
        raise ValueError(f"expected input of width {model.layer_dims[0]}, got shape {x.shape}")
    if not np.all(np.isfinite(xb)):
        raise ValueError("input must be finite")
    return xb, single


def _forward_trace(model: MLPModel, x: np.ndarray) -> list[np.ndarray]:
    """Layer outputs; the last entry is the linear network output."""
    acts = [x]
    h = x
    last = len(model.weights) - 1
    for k, (w, b) in enumerate(zip(model.weights, model.biases)):
        z = h @ w + b
        h = z if k == last else np.maximum(z, 0.0)
        acts.append(h)
    return acts


def forward(model: MLPModel, x: np.ndarray, clamp: bool = False) -> np.ndarray:
    xb, single = _as_batch(model, x)
    y = _forward_trace(model, xb)[-1]
    if clamp:
        y = np.clip(y, 0.0, 1.0)
    return y[0] if single else y


def predict_activations(model: MLPModel, aus: np.ndarray) -> np.ndarray:
    """Inference output: all 56 values clamped to [0, 1]."""
    return forward(model, aus, clamp=True)


def mse_and_grads(model: MLPModel, x: np.ndarray, y: np.ndarray) -> tuple[float, list[np.ndarray], list[np.ndarray]]:
    """Mean squared error over all outputs and its gradients."""
    acts = _forward_trace(model, x)
    diff = acts[-1] - y
    loss = float(np.mean(diff**2))
    delta = 2.0 * diff / diff.size
    gw: list[np.ndarray] = [np.empty(0)] * len(model.weights)
    gb: list[np.ndarray] = [np.empty(0)] * len(model.weights)
    for k in range(len(model.weights) - 1, -1, -1):
        gw[k] = acts[k].T @ delta
        gb[k] = delta.sum(axis=0)
        if k:
            delta = (delta @ model.weights[k].T) * (acts[k] > 0)
    return loss, gw, gb


def dataset_mse(model: MLPModel, x: np.ndarray, y: np.ndarray) -> float:
    return float(np.mean((forward(model, x) - y) ** 2))


def train(
    model: MLPModel,
    x: np.ndarray,
    y: np.ndarray,
    config: TrainConfig = TrainConfig(),
    on_epoch: Callable[[int, float], None] | None = None,
) -> tuple[MLPModel, list[float]]:
    """Adam on mini-batches, reshuffled every epoch with a seeded generator.

    Returns a trained copy and the per-epoch training MSE (full dataset,
    linear outputs).
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if len(x) == 0 or len(x) != len(y):
        raise ValueError("training data must be non-empty with matching rows")
    if y.shape[1] != model.layer_dims[-1]:
        raise ValueError(f"targets must have width {model.layer_dims[-1]}")
    _as_batch(model, x)
    m = model.copy()
    params = m.weights + m.biases
    mom = [np.zeros_like(p) for p in params]
    vel = [np.zeros_like(p) for p in params]
    rng = np.random.default_rng(config.seed)
    c = config
    t = 0
    history = []
    for epoch in range(c.epochs):
        order = rng.permutation(len(x))
        for start in range(0, len(x), c.batch_size):
            idx = order[start:start + c.batch_size]
            loss, gw, gb = mse_and_grads(m, x[idx], y[idx])
            if not np.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch starting {start}: {loss}")
            t += 1
            lr = c.learning_rate * np.sqrt(1 - c.beta2**t) / (1 - c.beta1**t)
            for p, g, mo, ve in zip(params, gw + gb, mom, vel):
                mo *= c.beta1
                mo += (1 - c.beta1) * g
                ve *= c.beta2
                ve += (1 - c.beta2) * g * g
                p -= lr * mo / (np.sqrt(ve) + c.eps)
        epoch_loss = dataset_mse(m, x, y)
        if not np.isfinite(epoch_loss):
            raise TrainingError(f"non-finite training MSE after epoch {epoch}")
        history.append(epoch_loss)
        if on_epoch:
            on_epoch(epoch, epoch_loss)
    m.meta["train_config"] = asdict(config)
    m.meta["final_mse"] = history[-1]
    return m, history


def save_model(model: MLPModel, path: str | Path) -> None:
    """Weights as ``.npz`` with a JSON header recording dims, seed and normalization."""
    header = {
        "format_version": FORMAT_VERSION,
        "layer_dims": list(model.layer_dims),
        "seed": model.seed,
        "meta": model.meta,
    }
    arrays = {f"w{k}": w for k, w in enumerate(model.weights)}
    arrays.update({f"b{k}": b for k, b in enumerate(model.biases)})
    if model.norm_table is not None:
        arrays["norm_table"] = model.norm_table
    arrays["header"] = np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_model(path: str | Path) -> MLPModel:
    with np.load(path) as z:
        header = json.loads(bytes(z["header"]).decode())
        if header.get("format_version") != FORMAT_VERSION:
            raise ValueError(f"{path}: unsupported model format {header.get('format_version')}")
        dims = tuple(int(d) for d in header["layer_dims"])
        n = len(dims) - 1
        ws = [z[f"w{k}"] for k in range(n)]
        bs = [z[f"b{k}"] for k in range(n)]
        table = z["norm_table"] if "norm_table" in z.files else None
    for k, (w, b) in enumerate(zip(ws, bs)):
        if w.shape != (dims[k], dims[k + 1]) or b.shape != (dims[k + 1],):
            raise ValueError(f"{path}: layer {k} shape does not match recorded dims")
    return MLPModel(dims, ws, bs, int(header["seed"]), table, header.get("meta", {}))
