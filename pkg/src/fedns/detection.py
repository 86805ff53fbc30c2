"""Clean/noisy client partitioning from gradient-norm traces.

Clients are scored by the population variance of their per-batch last-layer
gradient norms; a deterministic 1-D 2-means over the scores splits them, and
the higher-centroid cluster is labelled clean.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import Label
from .errors import DegenerateScoresError
from .model import GradNormTrace

_SCORE_EPS = 1e-12
_MAX_LLOYD_ITERS = 100


@dataclass(frozen=True)
class ClientScore:
    client_id: int
    score: float


@dataclass
class ClusterAssignment:
    labels: dict[int, Label]
    centroids: tuple[float, float]  # (low, high)
    iterations: int


def client_score(trace: GradNormTrace) -> ClientScore:
    """Population variance (divide by B) of a client's per-batch norms."""
    if len(trace.per_batch_norms) < 2:
        raise ValueError(
            f"client {trace.client_id}: need >= 2 per-batch norms to score, got {len(trace.per_batch_norms)}"
        )
    norms = np.asarray(trace.per_batch_norms, dtype=np.float64)
    return ClientScore(trace.client_id, float(np.mean((norms - norms.mean()) ** 2)))


def _best_contiguous_split(sorted_scores: np.ndarray) -> int:
    """Index k minimizing within-cluster SSE of [:k] | [k:], first k on ties.

    Prefix sums make the scan O(n); optimal 1-D 2-partitions are contiguous
    in sorted order, so this finds the global 2-means optimum.
    """
    n = len(sorted_scores)
    prefix = np.concatenate([[0.0], np.cumsum(sorted_scores)])
    prefix_sq = np.concatenate([[0.0], np.cumsum(sorted_scores**2)])
    best_k, best_sse = 1, np.inf
    for k in range(1, n):
        left = prefix_sq[k] - prefix[k] ** 2 / k
        right = (prefix_sq[n] - prefix_sq[k]) - (prefix[n] - prefix[k]) ** 2 / (n - k)
        if left + right < best_sse:
            best_sse, best_k = left + right, k
    return best_k


def kmeans_1d(scores: list[ClientScore]) -> ClusterAssignment:
    """Deterministic scalar 2-means: Lloyd from (min, max), then an exact
    contiguous-split refinement so the returned partition is SSE-optimal.

    Ties in point-to-centroid distance go to the lower centroid. Raises
    DegenerateScoresError when all scores coincide within 1e-12.
    """
    if len(scores) < 2:
        raise ValueError("need at least 2 clients to cluster")
    order = sorted(scores, key=lambda s: (s.score, s.client_id))
    values = np.array([s.score for s in order], dtype=np.float64)
    if values[-1] - values[0] <= _SCORE_EPS:
        raise DegenerateScoresError(
            f"all {len(scores)} client scores coincide within {_SCORE_EPS}; no two-cluster structure"
        )

    c_low, c_high = values[0], values[-1]
    in_high = np.zeros(len(values), dtype=bool)
    iterations = 0
    for _ in range(_MAX_LLOYD_ITERS):
        iterations += 1
        # ties (equidistant points) go to the lower centroid
        new_high = np.abs(values - c_high) < np.abs(values - c_low)
        if iterations > 1 and np.array_equal(new_high, in_high):
            break
        in_high = new_high
        if not in_high.any() or in_high.all():  # defensive; unreachable with min/max init
            break
        c_low, c_high = values[~in_high].mean(), values[in_high].mean()

    # Lloyd can stall in a local optimum even in 1-D; snap to the exact split.
    split = _best_contiguous_split(values)
    c_low, c_high = float(values[:split].mean()), float(values[split:].mean())
    labels = {
        s.client_id: (Label.CLEAN if i >= split else Label.NOISY) for i, s in enumerate(order)
    }
    return ClusterAssignment(labels=labels, centroids=(c_low, c_high), iterations=iterations)


def label_clusters(a: ClusterAssignment) -> dict[int, Label]:
    """Members of the higher-centroid cluster are clean, the rest noisy."""
    c_low, c_high = a.centroids
    if c_high - c_low <= _SCORE_EPS:
        raise DegenerateScoresError(f"cluster centroids coincide within {_SCORE_EPS}")
    return dict(a.labels)


def detection_accuracy(pred: dict[int, Label], truth: dict[int, Label]) -> float:
    """Fraction of clients whose predicted label matches the ground truth."""
    if pred.keys() != truth.keys():
        raise ValueError(
            f"client id sets differ: {sorted(pred.keys() ^ truth.keys())} present on one side only"
        )
    if not pred:
        raise ValueError("empty label maps")
    return sum(pred[k] == truth[k] for k in pred) / len(pred)


def write_detection_jsonl(
    scores: dict[int, float],
    pred: dict[int, Label],
    truth: dict[int, Label],
    path: str | Path,
) -> None:
    """One JSONL record per scored client: id, score, predicted and true label."""
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for cid in sorted(scores):
            record = {
                "client_id": cid,
                "score": scores[cid],
                "label": pred[cid].value if cid in pred else None,
                "truth_tag": truth[cid].value,
            }
            f.write(json.dumps(record, sort_keys=True) + "\n")


def write_norms_histogram(
    traces: dict[int, list[float]],
    truth: dict[int, Label],
    path: str | Path,
    bins: int = 30,
) -> None:
    """Shared-bin histogram of per-batch norms, split by true client tag.

    Bin counts over both columns sum to the total number of recorded batches.
    """
    clean = np.array(
        [v for cid, t in traces.items() if truth[cid] == Label.CLEAN for v in t], dtype=np.float64
    )
    noisy = np.array(
        [v for cid, t in traces.items() if truth[cid] == Label.NOISY for v in t], dtype=np.float64
    )
    both = np.concatenate([clean, noisy])
    if len(both) == 0:
        edges = np.linspace(0.0, 1.0, bins + 1)
    else:
        lo, hi = float(both.min()), float(both.max())
        if hi <= lo:
            hi = lo + 1.0
        edges = np.linspace(lo, hi, bins + 1)
    clean_counts, _ = np.histogram(clean, bins=edges)
    noisy_counts, _ = np.histogram(noisy, bins=edges)
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["bin_lo", "bin_hi", "clean_batches", "noisy_batches"])
        for i in range(bins):
            writer.writerow([repr(float(edges[i])), repr(float(edges[i + 1])), int(clean_counts[i]), int(noisy_counts[i])])
