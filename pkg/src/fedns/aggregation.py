"""Server-side aggregation: four base strategies plus the noise-sifting plug-in.

Noise sifting rescales each client's mixing weight by alpha (clean) or beta
(noisy) and renormalizes, so the clean:noisy contribution ratio follows
alpha:beta while the update stays on the weight simplex.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .data import Label
from .model import ModelParams

_WEIGHT_SUM_TOL = 1e-6


class Strategy(str, Enum):
    FEDAVG = "fedavg"
    FEDPROX = "fedprox"
    FEDTRIMMEDAVG = "fedtrimmedavg"
    FEDNOVA = "fednova"


@dataclass
class ClientUpdate:
    client_id: int
    params: ModelParams
    num_samples: int
    local_steps: int

    def __post_init__(self):
        if self.num_samples < 1:
            raise ValueError("num_samples must be >= 1")
        if self.local_steps < 0:
            raise ValueError("local_steps must be >= 0")


@dataclass
class AggregationPlan:
    strategy: Strategy = Strategy.FEDAVG
    alpha: float = 2.0
    beta: float = 0.3
    trim_ratio: float = 0.2
    ns_enabled: bool = True
    labels: dict[int, Label] = field(default_factory=dict)

    def __post_init__(self):
        if self.alpha <= 0:
            raise ValueError("alpha must be > 0")
        if self.beta < 0:
            raise ValueError("beta must be >= 0")
        if not 0.0 <= self.trim_ratio < 0.5:
            raise ValueError("trim_ratio must be in [0, 0.5)")


def base_weights(updates: list[ClientUpdate]) -> dict[int, float]:
    """Sample-count-proportional weights; they sum to 1."""
    if not updates:
        raise ValueError("no client updates to weight")
    total = sum(u.num_samples for u in updates)
    return {u.client_id: u.num_samples / total for u in updates}


def ns_reweight(
    weights: dict[int, float], labels: dict[int, Label], alpha: float, beta: float
) -> dict[int, float]:
    """Scale clean weights by alpha and noisy ones by beta, then renormalize.

    A uniformly-labelled group is returned unchanged (renormalization would
    cancel the scaling anyway, and doing it explicitly keeps it bit-exact).
    """
    if alpha <= 0:
        raise ValueError("alpha must be > 0")
    if beta < 0:
        raise ValueError("beta must be >= 0")
    if abs(sum(weights.values()) - 1.0) > _WEIGHT_SUM_TOL:
        raise ValueError(f"weights must sum to 1, got {sum(weights.values())}")
    missing = sorted(set(weights) - set(labels))
    if missing:
        raise ValueError(f"clients without labels: {missing}")
    tags = {labels[k] for k in weights}
    if tags == {Label.NOISY} and beta == 0:
        raise ValueError("all participants labelled noisy with beta=0: zero aggregate mass")
    if len(tags) == 1:
        return dict(weights)
    scaled = {k: (alpha if labels[k] == Label.CLEAN else beta) * w for k, w in weights.items()}
    total = sum(scaled.values())
    if total <= 0:
        raise ValueError("scaled weights sum to zero")
    return {k: v / total for k, v in scaled.items()}


def _check_weights(updates: list[ClientUpdate], weights: dict[int, float]) -> np.ndarray:
    w = np.array([weights[u.client_id] for u in updates], dtype=np.float64)
    if abs(w.sum() - 1.0) > _WEIGHT_SUM_TOL:
        raise ValueError(f"weights must sum to 1, got {w.sum()}")
    return w


def _check_shapes(global_params: ModelParams, updates: list[ClientUpdate]) -> None:
    for u in updates:
        if u.params.layout != global_params.layout:
            raise ValueError(f"client {u.client_id} layout {u.params.layout} != global {global_params.layout}")


def _layer_arrays(p: ModelParams) -> list[np.ndarray]:
    return list(p.weights) + list(p.biases)


def _rebuild(like: ModelParams, arrays: list[np.ndarray]) -> ModelParams:
    n = len(like.weights)
    return ModelParams(like.layout, arrays[:n], arrays[n:])


def aggregate_fedavg(
    global_params: ModelParams, updates: list[ClientUpdate], weights: dict[int, float]
) -> ModelParams:
    """Coordinatewise convex combination of client parameters."""
    if not updates:
        raise ValueError("no client updates")
    _check_shapes(global_params, updates)
    w = _check_weights(updates, weights)
    out = [np.zeros_like(a) for a in _layer_arrays(global_params)]
    for wk, u in zip(w, updates):
        for acc, arr in zip(out, _layer_arrays(u.params)):
            acc += wk * arr
    return _rebuild(global_params, out)


def aggregate_trimmed(
    global_params: ModelParams,
    updates: list[ClientUpdate],
    trim_ratio: float,
    weights: dict[int, float] | None = None,
) -> ModelParams:
    """Coordinatewise trimmed mean: drop the t highest and t lowest client
    values per coordinate (t = floor(trim_ratio * K)), average the rest.

    The base strategy ignores client weights; passing a weights map switches
    the surviving values to a per-coordinate weighted mean (the noise-sifting
    composition).
    """
    if not updates:
        raise ValueError("no client updates")
    _check_shapes(global_params, updates)
    k = len(updates)
    t = int(np.floor(trim_ratio * k))
    if 2 * t >= k:
        raise ValueError(f"trim count {t} leaves no survivors among {k} clients")
    w = _check_weights(updates, weights) if weights is not None else None
    per_update = [_layer_arrays(u.params) for u in updates]
    out = []
    for idx in range(len(_layer_arrays(global_params))):
        stacked = np.stack([arrays[idx] for arrays in per_update])
        if w is None:
            clipped = np.sort(stacked, axis=0)[t : k - t]
            out.append(clipped.mean(axis=0))
        else:
            ranks = np.argsort(np.argsort(stacked, axis=0, kind="stable"), axis=0, kind="stable")
            survives = (ranks >= t) & (ranks < k - t)
            wcol = w.reshape((k,) + (1,) * (stacked.ndim - 1))
            mass = (survives * wcol).sum(axis=0)
            if np.any(mass <= 0):
                raise ValueError("trimming left coordinates with zero surviving weight mass")
            out.append((stacked * survives * wcol).sum(axis=0) / mass)
    return _rebuild(global_params, out)


def aggregate_fednova(
    global_params: ModelParams, updates: list[ClientUpdate], weights: dict[int, float]
) -> ModelParams:
    """Normalized averaging: per-client deltas are divided by their local
    step counts before mixing, then rescaled by the effective step count."""
    if not updates:
        raise ValueError("no client updates")
    _check_shapes(global_params, updates)
    if any(u.local_steps < 1 for u in updates):
        bad = [u.client_id for u in updates if u.local_steps < 1]
        raise ValueError(f"fednova requires local_steps >= 1, offending clients: {bad}")
    w = _check_weights(updates, weights)
    tau_eff = float(sum(wk * u.local_steps for wk, u in zip(w, updates)))
    globals_arrays = _layer_arrays(global_params)
    mixed = [np.zeros_like(a) for a in globals_arrays]
    for wk, u in zip(w, updates):
        for acc, g_arr, c_arr in zip(mixed, globals_arrays, _layer_arrays(u.params)):
            acc += (wk / u.local_steps) * (g_arr - c_arr)
    out = [g_arr - tau_eff * d for g_arr, d in zip(globals_arrays, mixed)]
    return _rebuild(global_params, out)


def aggregate(plan: AggregationPlan, global_params: ModelParams, updates: list[ClientUpdate]) -> ModelParams:
    """Dispatch to the configured strategy, with noise sifting when enabled.

    FedProx aggregates exactly like FedAvg (its proximal term acts during
    local training). The trimmed strategy is unweighted at base, so noise
    sifting starts it from uniform weights rather than sample-proportional
    ones; survivors are then mixed by the sifted weights per coordinate.
    """
    if plan.strategy == Strategy.FEDTRIMMEDAVG:
        if not updates:
            raise ValueError("no client updates")
        weights = {u.client_id: 1.0 / len(updates) for u in updates}
    else:
        weights = base_weights(updates)
    if plan.ns_enabled:
        weights = ns_reweight(weights, plan.labels, plan.alpha, plan.beta)

    if plan.strategy in (Strategy.FEDAVG, Strategy.FEDPROX):
        return aggregate_fedavg(global_params, updates, weights)
    if plan.strategy == Strategy.FEDTRIMMEDAVG:
        return aggregate_trimmed(
            global_params, updates, plan.trim_ratio, weights if plan.ns_enabled else None
        )
    if plan.strategy == Strategy.FEDNOVA:
        return aggregate_fednova(global_params, updates, weights)
    raise ValueError(f"unknown strategy {plan.strategy!r}")
