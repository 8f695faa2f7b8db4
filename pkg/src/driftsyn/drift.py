"""Kernel attraction/repulsion drift field over sets of flattened patches.

For a query x, positives P and negatives Q (rows of 2-D arrays):

    k(a, b)  = exp(-||a - b||_2 / tau)
    V_plus   = sum_i k(x, p_i) (p_i - x) / sum_i k(x, p_i)
    V_minus  = same over Q
    V        = V_plus - V_minus

Z_p and Z_q are the sample-mean kernel values. Weights are normalized with the
largest exponent subtracted first, so far-away sets do not underflow to 0/0.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


class DriftError(ValueError):
    pass


class EmptyNegativeSetError(DriftError):
    pass


@dataclass(frozen=True)
class KernelConfig:
    tau: float = 1.0

    def __post_init__(self):
        if not (math.isfinite(self.tau) and self.tau > 0):
            raise DriftError(f"tau must be finite and > 0, got {self.tau}")


@dataclass
class DriftFieldResult:
    V: np.ndarray
    V_plus: np.ndarray
    V_minus: np.ndarray
    Z_p: float
    Z_q: float


def _as_set(points, name: str) -> np.ndarray:
    s = np.asarray(points, dtype=np.float64)
    if s.ndim == 1:
        s = s[:, None]
    if s.ndim != 2 or s.shape[0] == 0:
        raise DriftError(f"{name} must be a non-empty set of vectors, got shape {s.shape}")
    if not np.all(np.isfinite(s)):
        raise DriftError(f"{name} contains non-finite entries")
    return s


def _as_query(query) -> np.ndarray:
    q = np.asarray(query, dtype=np.float64).ravel()
    if q.size == 0 or not np.all(np.isfinite(q)):
        raise DriftError(f"query must be a finite non-empty vector, got shape {q.shape}")
    return q


def _tau(cfg) -> float:
    return cfg.tau if isinstance(cfg, KernelConfig) else KernelConfig(float(cfg)).tau


def kernel(a, b, cfg) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise DriftError(f"kernel: dimension mismatch {a.shape[0]} vs {b.shape[0]}")
    return float(np.exp(-np.linalg.norm(a - b) / _tau(cfg)))


_BLOCK_ELEMS = 1 << 22


def pairwise_distances(x: np.ndarray, y: np.ndarray, block: int = 64) -> np.ndarray:
    """Euclidean distances between rows of x (n, D) and y (m, D), from explicit differences."""
    d = np.empty((x.shape[0], y.shape[0]))
    for lo in range(0, x.shape[0], block):
        diff = x[lo : lo + block, None, :] - y[None, :, :]
        d[lo : lo + block] = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
    return d


def _weighted_field(queries: np.ndarray, samples: np.ndarray, tau: float, mask=None):
    """Normalized kernel-weighted mean displacement for each query row.

    Returns (field (n, D), Z (n,)) where Z is the mean kernel value over the
    unmasked samples.
    """
    n, m = queries.shape[0], samples.shape[0]
    field = np.empty_like(queries)
    z = np.empty(n)
    block = max(1, _BLOCK_ELEMS // max(1, m * queries.shape[1]))
    for lo in range(0, n, block):
        hi = min(n, lo + block)
        diff = samples[None, :, :] - queries[lo:hi, None, :]
        logits = -np.sqrt(np.einsum("ijk,ijk->ij", diff, diff)) / tau
        if mask is not None:
            logits = np.where(mask[lo:hi], logits, -np.inf)
        shift = logits.max(axis=1, keepdims=True)
        w = np.exp(logits - shift)
        wsum = w.sum(axis=1)
        field[lo:hi] = np.einsum("ij,ijk->ik", w, diff) / wsum[:, None]
        count = m if mask is None else mask[lo:hi].sum(axis=1)
        z[lo:hi] = np.exp(shift[:, 0]) * wsum / count
    return field, z


def attraction(query, positives, cfg) -> tuple[np.ndarray, float]:
    q = _as_query(query)
    pos = _as_set(positives, "positives")
    if q.shape[0] != pos.shape[1]:
        raise DriftError(f"dimension mismatch: query {q.shape[0]} vs positives {pos.shape[1]}")
    f, z = _weighted_field(q[None, :], pos, _tau(cfg))
    return f[0], float(z[0])


def _exclude_self(q: np.ndarray, neg: np.ndarray) -> np.ndarray:
    keep = ~np.all(neg == q[None, :], axis=1)
    # drop exactly one copy of the query, keep any other duplicates
    hits = np.nonzero(~keep)[0]
    keep[hits[1:]] = True
    return neg[keep]


def repulsion(query, negatives, cfg, exclude_self: bool = True) -> tuple[np.ndarray, float]:
    q = _as_query(query)
    neg = _as_set(negatives, "negatives")
    if q.shape[0] != neg.shape[1]:
        raise DriftError(f"dimension mismatch: query {q.shape[0]} vs negatives {neg.shape[1]}")
    if exclude_self:
        neg = _exclude_self(q, neg)
    if neg.shape[0] == 0:
        raise EmptyNegativeSetError("negative set is empty after removing the query itself")
    f, z = _weighted_field(q[None, :], neg, _tau(cfg))
    return f[0], float(z[0])


def drift_field(query, positives, negatives, cfg, exclude_self: bool = True) -> DriftFieldResult:
    vp, zp = attraction(query, positives, cfg)
    vm, zq = repulsion(query, negatives, cfg, exclude_self=exclude_self)
    return DriftFieldResult(V=vp - vm, V_plus=vp, V_minus=vm, Z_p=zp, Z_q=zq)


def drift_field_batch(
    queries, positives, negatives, cfg, self_index=None
) -> DriftFieldResult:
    """Vectorized drift field for many queries at once.

    ``self_index[i]`` is the row of ``negatives`` that *is* query i (excluded from
    its repulsion set), or -1 for none. Returned fields are stacked (n, D) arrays and
    Z_p/Z_q are (n,) arrays.
    """
    q = _as_set(queries, "queries")
    pos = _as_set(positives, "positives")
    neg = _as_set(negatives, "negatives")
    if not (q.shape[1] == pos.shape[1] == neg.shape[1]):
        raise DriftError(
            f"dimension mismatch: queries {q.shape[1]}, positives {pos.shape[1]}, "
            f"negatives {neg.shape[1]}"
        )
    tau = _tau(cfg)
    vp, zp = _weighted_field(q, pos, tau)
    mask = None
    if self_index is not None:
        self_index = np.asarray(self_index)
        mask = np.ones((q.shape[0], neg.shape[0]), dtype=bool)
        rows = np.nonzero(self_index >= 0)[0]
        mask[rows, self_index[rows]] = False
        if np.any(mask.sum(axis=1) == 0):
            raise EmptyNegativeSetError("negative set is empty after removing the query itself")
    vm, zq = _weighted_field(q, neg, tau, mask)
    return DriftFieldResult(V=vp - vm, V_plus=vp, V_minus=vm, Z_p=zp, Z_q=zq)


def median_tau(queries, positives) -> float:
    """Median heuristic: median query-to-positive distance (falls back to 1.0 if all zero)."""
    d = pairwise_distances(_as_set(queries, "queries"), _as_set(positives, "positives"))
    tau = float(np.median(d))
    return tau if tau > 0 else 1.0


def reference_drift_field(query, positives, negatives, tau: float, exclude_index=None):
    """Naive loop over (query, sample) pairs with the literal, unshifted kernel weights.

    Kept independent of the vectorized path for cross-checking; not for production use.
    """
    x = np.asarray(query, dtype=np.float64).ravel()

    def side(samples, skip):
        num = np.zeros_like(x)
        den = 0.0
        count = 0
        for idx in range(samples.shape[0]):
            if idx == skip:
                continue
            diff = samples[idx] - x
            wt = math.exp(-math.sqrt(float(np.dot(diff, diff))) / tau)
            num += wt * diff
            den += wt
            count += 1
        return num / den, den / count

    pos = np.asarray(positives, dtype=np.float64).reshape(-1, x.size)
    neg = np.asarray(negatives, dtype=np.float64).reshape(-1, x.size)
    vp, zp = side(pos, None)
    vm, zq = side(neg, exclude_index)
    return DriftFieldResult(V=vp - vm, V_plus=vp, V_minus=vm, Z_p=zp, Z_q=zq)
