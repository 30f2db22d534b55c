"""Server-side aggregation rules and the global update step."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numcore import as_vector, check_same_dim

RULE_KINDS = ("fedavg", "median", "trimmed_mean")


@dataclass(frozen=True)
class AggregationRule:
    kind: str
    k: int = 0  # trimmed_mean only

    def __post_init__(self):
        if self.kind not in RULE_KINDS:
            raise ValueError(f"unknown aggregation rule {self.kind!r}")
        if self.k < 0:
            raise ValueError("k must be >= 0")


def _stack(updates) -> np.ndarray:
    if len(updates) == 0:
        raise ValueError("no updates to aggregate")
    vecs = [as_vector(u, name=f"update[{i}]") for i, u in enumerate(updates)]
    for v in vecs[1:]:
        check_same_dim(vecs[0], v)
    return np.stack(vecs)


def fedavg(updates, sizes) -> np.ndarray:
    """Average weighted by local dataset sizes."""
    mat = _stack(updates)
    w = np.asarray(sizes, dtype=np.float64)
    if w.shape != (mat.shape[0],):
        raise ValueError("need one size per update")
    if np.any(w <= 0):
        raise ValueError("sizes must be positive")
    w = w / w.sum()
    return w @ mat


def coord_median(updates) -> np.ndarray:
    """Coordinate-wise median; even counts use the mean of the middle two."""
    mat = _stack(updates)
    return np.median(mat, axis=0)


def trimmed_mean(updates, k: int) -> np.ndarray:
    """Per coordinate: sort, drop the k largest and k smallest, average."""
    mat = _stack(updates)
    n = mat.shape[0]
    if n <= 2 * k:
        raise ValueError(f"trimmed_mean needs more than 2k={2 * k} updates, got {n}")
    if k == 0:
        return mat.mean(axis=0)
    srt = np.sort(mat, axis=0)
    return srt[k : n - k].mean(axis=0)


def aggregate(rule: AggregationRule, updates, sizes) -> np.ndarray:
    if rule.kind == "fedavg":
        return fedavg(updates, sizes)
    if rule.kind == "median":
        return coord_median(updates)
    return trimmed_mean(updates, rule.k)


def apply_update(w, aggregated, eta: float) -> np.ndarray:
    """One global step: w - eta * aggregated."""
    w = as_vector(w, name="w")
    g = as_vector(aggregated, name="aggregated")
    check_same_dim(w, g)
    if eta <= 0:
        raise ValueError("learning rate must be positive")
    return w - eta * g
