"""Small feed-forward softmax classifier with exact manual backpropagation.

All math is float64. The per-batch training step is delegated to
`fedns.kernels` (compiled extension when available, numpy otherwise); the
functions here double as the reference semantics for those kernels.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np

from .data import ClientDataset, Dataset


class NormOrder(str, Enum):
    L1 = "l1"
    L2 = "l2"


@dataclass(frozen=True)
class ModelLayout:
    input_dim: int
    hidden_dims: tuple[int, ...]
    num_classes: int

    def __post_init__(self):
        if self.input_dim < 1 or self.num_classes < 1 or any(h < 1 for h in self.hidden_dims):
            raise ValueError(f"all layer dims must be positive, got {self}")

    @property
    def dims(self) -> tuple[int, ...]:
        return (self.input_dim, *self.hidden_dims, self.num_classes)


@dataclass
class ModelParams:
    """Per-layer weight matrices [fan_in, fan_out] and bias vectors [fan_out]."""

    layout: ModelLayout
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def copy(self) -> "ModelParams":
        return ModelParams(self.layout, [w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def allclose(self, other: "ModelParams", atol: float = 0.0, rtol: float = 0.0) -> bool:
        return all(
            np.allclose(a, b, atol=atol, rtol=rtol)
            for a, b in zip(self.weights + self.biases, other.weights + other.biases)
        )


@dataclass
class Gradients:
    """Same array structure as ModelParams; also reused as momentum buffers."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]


@dataclass
class OptConfig:
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 32
    local_epochs: int = 5
    prox_mu: float = 0.0
    temperature: float = 1.0

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be > 0")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must be in [0, 1)")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.prox_mu < 0:
            raise ValueError("prox_mu must be >= 0")
        if self.temperature <= 0:
            raise ValueError("temperature must be > 0")


@dataclass
class GradNormTrace:
    client_id: int
    per_batch_norms: list[float]
    norm_order: NormOrder
    batch_size: int


def init_params(layout: ModelLayout, seed: int) -> ModelParams:
    """He-uniform fan-in initialization; biases start at zero."""
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    dims = layout.dims
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        limit = np.sqrt(6.0 / fan_in)
        weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return ModelParams(layout, weights, biases)


def zero_velocity(p: ModelParams) -> Gradients:
    return Gradients([np.zeros_like(w) for w in p.weights], [np.zeros_like(b) for b in p.biases])


def _flatten_batch(p: ModelParams, batch: np.ndarray) -> np.ndarray:
    flat = np.ascontiguousarray(batch.reshape(batch.shape[0], -1), dtype=np.float64)
    if flat.shape[1] != p.layout.input_dim:
        raise ValueError(f"batch flattens to {flat.shape[1]} features, model expects {p.layout.input_dim}")
    return flat


def _forward_activations(p: ModelParams, x: np.ndarray) -> list[np.ndarray]:
    acts = [x]
    for w, b in zip(p.weights[:-1], p.biases[:-1]):
        acts.append(np.maximum(acts[-1] @ w + b, 0.0))
    acts.append(acts[-1] @ p.weights[-1] + p.biases[-1])
    return acts


def forward(p: ModelParams, batch: np.ndarray) -> np.ndarray:
    """Logits [B, num_classes] for a batch (flattened to input_dim)."""
    return _forward_activations(p, _flatten_batch(p, batch))[-1]


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def loss(logits: np.ndarray, labels: np.ndarray, temperature: float = 1.0) -> float:
    """Mean softmax cross-entropy at the given temperature."""
    if temperature <= 0:
        raise ValueError("temperature must be > 0")
    z = logits / temperature
    z = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    return float(np.mean(lse - z[np.arange(len(labels)), labels]))


def backward(
    p: ModelParams,
    batch: np.ndarray,
    labels: np.ndarray,
    temperature: float = 1.0,
    prox_mu: float = 0.0,
    anchor: ModelParams | None = None,
) -> Gradients:
    """Exact gradients of the mean batch loss w.r.t. every parameter.

    With prox_mu > 0 the proximal penalty (prox_mu / 2) * ||p - anchor||^2 is
    added to the objective, so its gradient prox_mu * (p - anchor) is added
    to every layer.
    """
    if (prox_mu > 0) != (anchor is not None):
        raise ValueError("anchor must be given exactly when prox_mu > 0")
    x = _flatten_batch(p, batch)
    acts = _forward_activations(p, x)
    batch_n = x.shape[0]
    g = softmax(acts[-1] / temperature)
    g[np.arange(batch_n), labels] -= 1.0
    g /= batch_n * temperature
    grads_w: list[np.ndarray] = [None] * len(p.weights)  # type: ignore[list-item]
    grads_b: list[np.ndarray] = [None] * len(p.biases)  # type: ignore[list-item]
    for layer in range(len(p.weights) - 1, -1, -1):
        dw = acts[layer].T @ g
        db = g.sum(axis=0)
        if prox_mu > 0:
            dw += prox_mu * (p.weights[layer] - anchor.weights[layer])
            db += prox_mu * (p.biases[layer] - anchor.biases[layer])
        grads_w[layer], grads_b[layer] = dw, db
        if layer > 0:
            g = (g @ p.weights[layer].T) * (acts[layer] > 0.0)
    return Gradients(grads_w, grads_b)


def sgd_step(p: ModelParams, g: Gradients, opt: OptConfig, state: Gradients) -> ModelParams:
    """One SGD-momentum step: v <- momentum*v + g + wd*p; p <- p - lr*v.

    Updates p and state in place and returns p.
    """
    for w, dw, v in zip(p.weights, g.weights, state.weights):
        v *= opt.momentum
        v += dw + opt.weight_decay * w
        w -= opt.lr * v
    for b, db, v in zip(p.biases, g.biases, state.biases):
        v *= opt.momentum
        v += db + opt.weight_decay * b
        b -= opt.lr * v
    return p


def last_layer_grad_norm(g: Gradients, order: NormOrder) -> float:
    """L1 or L2 norm over the final layer's weight and bias gradients."""
    dw, db = g.weights[-1], g.biases[-1]
    if order == NormOrder.L1:
        return float(np.abs(dw).sum() + np.abs(db).sum())
    return float(np.sqrt((dw * dw).sum() + (db * db).sum()))


def local_train(
    p0: ModelParams,
    c: ClientDataset,
    opt: OptConfig,
    collect_norms: NormOrder | None = None,
    norm_batch: int = 32,
    seed: int = 0,
) -> tuple[ModelParams, GradNormTrace | None, int]:
    """Run opt.local_epochs of seeded-shuffled mini-batch SGD on one shard.

    When collect_norms is set, last-layer gradient norms are recorded during
    the first epoch: training backprops are reused if norm_batch equals the
    training batch size, otherwise a dedicated measurement pass over the
    shard in stored order runs at p0 before any update. Returns the trained
    params, the optional trace, and the number of optimizer steps.
    """
    from . import kernels  # deferred: kernels never imports back into model

    n = len(c)
    if n == 0:
        raise ValueError(f"client {c.client_id} has an empty shard")
    x = np.ascontiguousarray(c.samples.reshape(n, -1), dtype=np.float64)
    if x.shape[1] != p0.layout.input_dim:
        raise ValueError(f"shard flattens to {x.shape[1]} features, model expects {p0.layout.input_dim}")
    y = np.ascontiguousarray(c.labels, dtype=np.int64)

    params = p0.copy()
    vel = zero_velocity(params)
    anchor = p0 if opt.prox_mu > 0 else None
    anchor_w = anchor.weights if anchor else None
    anchor_b = anchor.biases if anchor else None

    norms: list[float] = []
    reuse_training_norms = collect_norms is not None and norm_batch == opt.batch_size
    if collect_norms is not None and not reuse_training_norms:
        for start in range(0, n, norm_batch):
            l1, l2 = kernels.grad_norms(
                params.weights,
                params.biases,
                x[start : start + norm_batch],
                y[start : start + norm_batch],
                temperature=opt.temperature,
                prox_mu=opt.prox_mu,
                anchor_ws=anchor_w,
                anchor_bs=anchor_b,
            )
            norms.append(l1 if collect_norms == NormOrder.L1 else l2)

    rng = np.random.default_rng(seed)
    steps = 0
    for epoch in range(opt.local_epochs):
        perm = rng.permutation(n)
        for start in range(0, n, opt.batch_size):
            idx = perm[start : start + opt.batch_size]
            want = reuse_training_norms and epoch == 0
            result = kernels.train_batch(
                params.weights,
                params.biases,
                vel.weights,
                vel.biases,
                np.ascontiguousarray(x[idx]),
                np.ascontiguousarray(y[idx]),
                lr=opt.lr,
                momentum=opt.momentum,
                weight_decay=opt.weight_decay,
                temperature=opt.temperature,
                prox_mu=opt.prox_mu,
                anchor_ws=anchor_w,
                anchor_bs=anchor_b,
                want_norms=want,
            )
            if want:
                norms.append(result[0] if collect_norms == NormOrder.L1 else result[1])
            steps += 1

    trace = None
    if collect_norms is not None:
        trace = GradNormTrace(c.client_id, norms, collect_norms, norm_batch)
    return params, trace, steps


def evaluate(p: ModelParams, d: Dataset, chunk: int = 4096) -> float:
    """Top-1 accuracy; argmax ties resolve to the lowest class index."""
    if len(d) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    correct = 0
    for start in range(0, len(d), chunk):
        logits = forward(p, d.samples[start : start + chunk])
        correct += int((logits.argmax(axis=1) == d.labels[start : start + chunk]).sum())
    return correct / len(d)


def dataset_loss(p: ModelParams, d: Dataset, temperature: float = 1.0, chunk: int = 4096) -> float:
    """Mean cross-entropy of the model over a dataset."""
    total = 0.0
    for start in range(0, len(d), chunk):
        batch_labels = d.labels[start : start + chunk]
        logits = forward(p, d.samples[start : start + chunk])
        total += loss(logits, batch_labels, temperature) * len(batch_labels)
    return total / len(d)


def save_params(p: ModelParams, path: str | Path) -> None:
    """Checkpoint: int32-LE layer dims descriptor, then float64-LE W/b stream."""
    dims = p.layout.dims
    with open(path, "wb") as f:
        f.write(struct.pack("<i", len(dims)))
        f.write(np.asarray(dims, dtype="<i4").tobytes())
        for w, b in zip(p.weights, p.biases):
            f.write(np.ascontiguousarray(w, dtype="<f8").tobytes())
            f.write(np.ascontiguousarray(b, dtype="<f8").tobytes())


def load_params(path: str | Path) -> ModelParams:
    with open(path, "rb") as f:
        (ndims,) = struct.unpack("<i", f.read(4))
        dims = np.frombuffer(f.read(4 * ndims), dtype="<i4").astype(int)
        layout = ModelLayout(int(dims[0]), tuple(int(h) for h in dims[1:-1]), int(dims[-1]))
        weights, biases = [], []
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            weights.append(
                np.frombuffer(f.read(8 * fan_in * fan_out), dtype="<f8").reshape(fan_in, fan_out).copy()
            )
            biases.append(np.frombuffer(f.read(8 * fan_out), dtype="<f8").copy())
    return ModelParams(layout, weights, biases)
