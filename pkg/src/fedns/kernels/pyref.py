"""Pure-numpy training-step kernels: the fallback and reference backend.

Semantics must match fedns.kernels._fast exactly (up to float rounding);
test_kernels cross-checks both against fedns.model's backward/sgd_step.
"""

from __future__ import annotations

import numpy as np


def _softmax_grad(logits: np.ndarray, y: np.ndarray, temperature: float) -> np.ndarray:
    z = logits / temperature
    z -= z.max(axis=1, keepdims=True)
    g = np.exp(z)
    g /= g.sum(axis=1, keepdims=True)
    g[np.arange(len(y)), y] -= 1.0
    g /= len(y) * temperature
    return g


def _forward(ws, bs, x):
    acts = [x]
    for w, b in zip(ws[:-1], bs[:-1]):
        acts.append(np.maximum(acts[-1] @ w + b, 0.0))
    acts.append(acts[-1] @ ws[-1] + bs[-1])
    return acts


def _last_layer_grads(ws, bs, acts, g, prox_mu, anchor_ws, anchor_bs):
    dw = acts[-2].T @ g
    db = g.sum(axis=0)
    if prox_mu > 0.0:
        dw += prox_mu * (ws[-1] - anchor_ws[-1])
        db += prox_mu * (bs[-1] - anchor_bs[-1])
    return dw, db


def _norm_pair(dw: np.ndarray, db: np.ndarray) -> tuple[float, float]:
    l1 = float(np.abs(dw).sum() + np.abs(db).sum())
    l2 = float(np.sqrt((dw * dw).sum() + (db * db).sum()))
    return l1, l2


def train_batch(
    ws,
    bs,
    vws,
    vbs,
    x,
    y,
    *,
    lr,
    momentum,
    weight_decay,
    temperature,
    prox_mu,
    anchor_ws,
    anchor_bs,
    want_norms,
):
    """Fused forward/backward/SGD-momentum step; mutates ws/bs/vws/vbs in place.

    Returns (l1, l2) of the final layer's gradients when want_norms, else None.
    """
    acts = _forward(ws, bs, x)
    g = _softmax_grad(acts[-1], y, temperature)
    norms = None
    for layer in range(len(ws) - 1, -1, -1):
        dw = acts[layer].T @ g
        db = g.sum(axis=0)
        if prox_mu > 0.0:
            dw += prox_mu * (ws[layer] - anchor_ws[layer])
            db += prox_mu * (bs[layer] - anchor_bs[layer])
        if want_norms and layer == len(ws) - 1:
            norms = _norm_pair(dw, db)
        if layer > 0:
            g = (g @ ws[layer].T) * (acts[layer] > 0.0)
        vws[layer] *= momentum
        vws[layer] += dw + weight_decay * ws[layer]
        ws[layer] -= lr * vws[layer]
        vbs[layer] *= momentum
        vbs[layer] += db + weight_decay * bs[layer]
        bs[layer] -= lr * vbs[layer]
    return norms


def grad_norms(ws, bs, x, y, *, temperature, prox_mu, anchor_ws, anchor_bs):
    """Last-layer gradient norms (l1, l2) at the current params, no update."""
    acts = _forward(ws, bs, x)
    g = _softmax_grad(acts[-1], y, temperature)
    dw, db = _last_layer_grads(ws, bs, acts, g, prox_mu, anchor_ws, anchor_bs)
    return _norm_pair(dw, db)
