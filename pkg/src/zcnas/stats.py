"""Rank correlation, histogram discretization, entropy, and bias measures.

All entropies use natural log and the plug-in estimator over empirical
joint counts; sums run through math.fsum, so identical count multisets
always produce bit-identical entropies regardless of grouping order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import CorrelationUndefinedError, DataError

Array = np.ndarray


@dataclass(frozen=True)
class ScoreVector:
    """Aligned (architecture id, value) pairs; ids must be unique."""

    ids: tuple[str, ...]
    values: Array

    def __post_init__(self):
        if len(self.ids) != len(self.values):
            raise DataError("ids and values lengths differ")
        if len(set(self.ids)) != len(self.ids):
            raise DataError("duplicate architecture ids in score vector")


def _values(x) -> Array:
    if isinstance(x, ScoreVector):
        return np.asarray(x.values, dtype=np.float64)
    return np.asarray(x, dtype=np.float64)


def _check_pair(a, b, op: str) -> tuple[Array, Array]:
    va, vb = _values(a), _values(b)
    if va.shape != vb.shape or va.ndim != 1:
        raise DataError(f"{op} needs two equal-length 1-d vectors")
    if va.shape[0] < 2:
        raise DataError(f"{op} needs at least 2 entries")
    if isinstance(a, ScoreVector) and isinstance(b, ScoreVector) and a.ids != b.ids:
        raise DataError(f"{op} called on misaligned architecture ids")
    if not (np.all(np.isfinite(va)) and np.all(np.isfinite(vb))):
        raise DataError(f"{op} called on non-finite values; mask degenerates first")
    return va, vb


def rankdata(values) -> Array:
    """Fractional ranks (1-based), ties get the average of their ranks."""
    v = _values(values)
    order = np.argsort(v, kind="stable")
    ranks = np.empty(len(v))
    i = 0
    while i < len(v):
        j = i
        while j + 1 < len(v) and v[order[j + 1]] == v[order[i]]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def pearson_r(a, b) -> float:
    """Product-moment correlation."""
    va, vb = _check_pair(a, b, "pearson_r")
    da, db = va - va.mean(), vb - vb.mean()
    na, nb = np.sqrt((da * da).sum()), np.sqrt((db * db).sum())
    if na == 0.0 or nb == 0.0:
        raise CorrelationUndefinedError("constant vector has no correlation")
    return float(np.clip((da * db).sum() / (na * nb), -1.0, 1.0))


def spearman_rho(a, b) -> float:
    """Pearson correlation of fractional ranks (average-rank ties)."""
    va, vb = _check_pair(a, b, "spearman_rho")
    ra, rb = rankdata(va), rankdata(vb)
    if np.all(ra == ra[0]) or np.all(rb == rb[0]):
        raise CorrelationUndefinedError("zero rank variance")
    return pearson_r(ra, rb)


# ---------------------------------------------------------------------------
# Discretization
# ---------------------------------------------------------------------------


def sturges_bins(n: int) -> int:
    """round(1 + 3.322 * log10(N)): the base-10 statement of the rule,
    3.322 being 1/log10(2)."""
    if n < 1:
        raise DataError("sample size must be positive")
    return max(1, round(1 + 3.322 * math.log10(n)))


@dataclass(frozen=True)
class BinnedVector:
    bins: Array            # integer bin index per entry
    n_bins: int
    edges: Array
    constant: bool = False  # flagged when the source vector had one value

    def __post_init__(self):
        if self.bins.min() < 0 or self.bins.max() >= self.n_bins:
            raise DataError("bin index outside [0, n_bins)")


def bin_sturges(values, n_bins: int | None = None) -> BinnedVector:
    """Equal-width bins over [min, max]; the max value lands in the top bin."""
    v = _values(values)
    if v.ndim != 1 or len(v) < 1:
        raise DataError("bin_sturges needs a 1-d vector")
    if not np.all(np.isfinite(v)):
        raise DataError("bin_sturges called on non-finite values")
    if n_bins is None:
        n_bins = sturges_bins(len(v))
    lo, hi = float(v.min()), float(v.max())
    if lo == hi:
        return BinnedVector(np.zeros(len(v), dtype=np.int64), 1,
                            np.array([lo, hi]), constant=True)
    edges = np.linspace(lo, hi, n_bins + 1)
    idx = np.floor((v - lo) / (hi - lo) * n_bins).astype(np.int64)
    idx = np.clip(idx, 0, n_bins - 1)
    return BinnedVector(idx, n_bins, edges)


# ---------------------------------------------------------------------------
# Entropy and information gain
# ---------------------------------------------------------------------------


def _bins_of(x) -> Array:
    if isinstance(x, BinnedVector):
        return x.bins
    arr = np.asarray(x)
    if arr.dtype.kind not in "iu":
        raise DataError("entropy operands must be binned (integer) vectors")
    return arr


def joint_entropy(*variables) -> float:
    """Plug-in entropy of the empirical joint distribution, natural log;
    0 * log 0 terms are dropped by construction."""
    cols = [_bins_of(v) for v in variables]
    n = len(cols[0])
    for c in cols:
        if len(c) != n:
            raise DataError("entropy operands have mismatched lengths")
    stacked = np.stack(cols, axis=1)
    _, counts = np.unique(stacked, axis=0, return_counts=True)
    return -math.fsum((c / n) * math.log(c / n) for c in counts)


def conditional_entropy(y, given) -> float:
    """H(y | given); `given` is one binned vector or a list of them,
    computed as H(y, given) - H(given)."""
    conds = list(given) if isinstance(given, (list, tuple)) else [given]
    if not conds:
        raise DataError("conditional_entropy needs at least one condition")
    return joint_entropy(y, *conds) - joint_entropy(*conds)


def information_gain(y, z_i, z_j) -> float:
    """Extra information about y revealed by z_j once z_i is known:
    H(y | z_i) - H(y | z_i, z_j)."""
    return conditional_entropy(y, z_i) - conditional_entropy(y, [z_i, z_j])


def bias_of(metric, bias_source) -> float:
    """Pearson correlation between the rank a metric induces and the rank
    the bias source (parameter count, by convention) induces."""
    va, vb = _check_pair(metric, bias_source, "bias_of")
    return pearson_r(rankdata(va), rankdata(vb))
