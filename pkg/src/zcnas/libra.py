"""Proxy-ensemble selection over a score table: pick the best-correlated
proxy, then the in-band proxy adding the least information about accuracy,
then the in-band proxy whose parameter-count bias is closest to the bias
of accuracy itself.  RankAve merges the triple into one fitness.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError
from .proxies import GRADIENT_PROXIES
from .stats import (
    bias_of,
    bin_sturges,
    conditional_entropy,
    pearson_r,
    rankdata,
    spearman_rho,
    sturges_bins,
)

BASE_TOLERANCE = 0.1
MAX_TOLERANCE = 0.3
TOLERANCE_STEP = 0.1


@dataclass
class ProxyTable:
    """Aligned per-architecture scores: named proxy columns, validation
    accuracy y, and a bias column (params unless stated otherwise).
    Degenerate or missing scores are stored as NaN and excluded pairwise."""

    benchmark_id: str
    ids: tuple[str, ...]
    y: np.ndarray
    columns: dict[str, np.ndarray]
    bias_column: str = "params"

    def __post_init__(self):
        n = len(self.ids)
        if len(set(self.ids)) != n:
            raise DataError("duplicate architecture ids in table")
        self.y = np.asarray(self.y, dtype=np.float64)
        if self.y.shape != (n,):
            raise DataError("validation accuracy column misaligned")
        if not np.all(np.isfinite(self.y)):
            raise DataError("validation accuracy must be finite")
        self.columns = {k: np.asarray(v, dtype=np.float64)
                        for k, v in self.columns.items()}
        for name, col in self.columns.items():
            if col.shape != (n,):
                raise DataError(f"column {name!r} misaligned")

    @property
    def n(self) -> int:
        return len(self.ids)

    def proxy_names(self) -> list[str]:
        return sorted(self.columns)

    def bias_source(self) -> np.ndarray:
        if self.bias_column not in self.columns:
            raise ConfigError(
                f"bias column {self.bias_column!r} missing from table")
        return self.columns[self.bias_column]


def masked_spearman(values: np.ndarray, y: np.ndarray) -> tuple[float | None, int]:
    """Spearman rho over pairwise-finite rows; (None, excluded) when the
    column has too few valid entries or no rank variance."""
    mask = np.isfinite(values) & np.isfinite(y)
    excluded = int((~mask).sum())
    if mask.sum() < 3:
        return None, excluded
    sub = values[mask]
    if np.all(sub == sub[0]):
        return None, excluded
    return spearman_rho(sub, y[mask]), excluded


@dataclass
class LibraSelection:
    benchmark_id: str
    z1: str | None
    z2: str | None
    z3: str | None
    rho: dict[str, float]
    ig: dict[str, float]
    bias_gap: dict[str, float]
    tolerance: float
    widened: bool
    missing: tuple[str, ...] = ()
    excluded: dict[str, int] = field(default_factory=dict)

    def names(self) -> list[str]:
        return [z for z in (self.z1, self.z2, self.z3) if z is not None]


def _binned_on(values: np.ndarray, on_ranks: bool):
    v = rankdata(values) if on_ranks else values
    return bin_sturges(v, n_bins=sturges_bins(len(v)))


def table_information_gain(table: ProxyTable, z_i: str, z_h: str,
                           bin_on_ranks: bool = True) -> float:
    """IG of z_h about y given z_i on rows where all three are finite.

    Columns are rank-transformed before the equal-width binning by
    default, which makes the whole selection invariant under monotone
    rescalings of any proxy; raw-value binning stays available.
    """
    a, b = table.columns[z_i], table.columns[z_h]
    mask = np.isfinite(a) & np.isfinite(b) & np.isfinite(table.y)
    if mask.sum() < 4:
        raise DataError(f"too few aligned rows for IG({z_i}, {z_h})")
    yb = _binned_on(table.y[mask], bin_on_ranks)
    ab = _binned_on(a[mask], bin_on_ranks)
    bb = _binned_on(b[mask], bin_on_ranks)
    return conditional_entropy(yb, ab) - conditional_entropy(yb, [ab, bb])


def table_bias(table: ProxyTable, values: np.ndarray) -> float:
    source = table.bias_source()
    mask = np.isfinite(values) & np.isfinite(source)
    if mask.sum() < 3:
        raise DataError("too few aligned rows for bias computation")
    return bias_of(values[mask], source[mask])


def libra_select(table: ProxyTable, tolerance: float = BASE_TOLERANCE,
                 bin_on_ranks: bool = True) -> LibraSelection:
    """Selects (z1, z2, z3): best Spearman rho, then minimum information
    gain inside the correlation band, then closest bias match to y.

    The band (rho_best - tol, rho_best] widens in +0.1 steps up to 0.3
    when it holds fewer than two candidates; a still-short band yields a
    partial selection with the missing slots reported.
    """
    candidates = [name for name in table.proxy_names()]
    if len(candidates) < 3:
        raise ConfigError("need at least 3 proxy columns")
    rho: dict[str, float] = {}
    excluded: dict[str, int] = {}
    for name in candidates:
        r, exc = masked_spearman(table.columns[name], table.y)
        excluded[name] = exc
        if r is not None:
            rho[name] = r
    if not rho:
        raise DataError("no proxy column has a defined correlation with y")
    z1 = max(sorted(rho), key=lambda name: rho[name])
    rho_best = rho[z1]

    tol = tolerance
    widened = False
    while True:
        band = [z for z in sorted(rho) if z != z1
                and rho_best - tol < rho[z] <= rho_best]
        if len(band) >= 2 or tol >= MAX_TOLERANCE - 1e-12:
            break
        tol = min(tol + TOLERANCE_STEP, MAX_TOLERANCE)
        widened = True

    ig: dict[str, float] = {}
    for z in band:
        ig[z] = table_information_gain(table, z1, z, bin_on_ranks)

    def pick(pool, key):
        # smallest key; ties go to the higher rho, then lexicographic name
        return min(pool, key=lambda z: (key[z], -rho[z], z)) if pool else None

    z2 = pick(band, ig)

    bias_gap: dict[str, float] = {}
    missing: list[str] = []
    if z2 is None:
        missing.append("z2")
    z3_pool = [z for z in band if z != z2]
    if z3_pool:
        b_val = table_bias(table, table.y)
        for z in z3_pool:
            bias_gap[z] = abs(b_val - table_bias(table, table.columns[z]))
    z3 = pick(z3_pool, bias_gap)
    if z3 is None:
        missing.append("z3")

    return LibraSelection(
        benchmark_id=table.benchmark_id,
        z1=z1, z2=z2, z3=z3,
        rho=rho, ig=ig, bias_gap=bias_gap,
        tolerance=tol, widened=widened,
        missing=tuple(missing), excluded=excluded,
    )


def selection_to_json(sel: LibraSelection) -> dict:
    return {
        "benchmark": sel.benchmark_id,
        "z1": sel.z1,
        "z2": sel.z2,
        "z3": sel.z3,
        "rho": {k: sel.rho[k] for k in sorted(sel.rho)},
        "ig": {k: sel.ig[k] for k in sorted(sel.ig)},
        "bias_gap": {k: sel.bias_gap[k] for k in sorted(sel.bias_gap)},
        "tolerance": sel.tolerance,
        "widened": sel.widened,
        "missing": list(sel.missing),
    }


# ---------------------------------------------------------------------------
# Rank aggregation and selection-strategy ablations
# ---------------------------------------------------------------------------


def rank_aggregate(vectors) -> np.ndarray:
    """Average of fractional ranks (higher aggregate = better).  NaN
    entries sink to the bottom ranks before averaging."""
    if not vectors:
        raise ConfigError("rank_aggregate needs at least one vector")
    arrays = []
    for v in vectors:
        arr = np.asarray(getattr(v, "values", v), dtype=np.float64).copy()
        arr[~np.isfinite(arr)] = -math.inf
        arrays.append(rankdata(arr))
    return np.mean(arrays, axis=0)


def rankave_rho(table: ProxyTable, names) -> float:
    agg = rank_aggregate([table.columns[n] for n in names])
    return spearman_rho(agg, table.y)


def _split_by_kind(table: ProxyTable):
    grad, free = [], []
    for name in table.proxy_names():
        (grad if name in GRADIENT_PROXIES else free).append(name)
    return grad, free


def ablation_variants(table: ProxyTable, seed: int = 0,
                      bin_on_ranks: bool = True) -> dict[str, dict]:
    """RankAve correlation of alternative pair/triple selection
    strategies, so the ensemble choices can be compared on one table."""
    rng = np.random.default_rng(seed)
    sel = libra_select(table, bin_on_ranks=bin_on_ranks)
    rho = sel.rho
    by_rho = sorted(rho, key=lambda z: -rho[z])
    grad, free = _split_by_kind(table)
    grad = [z for z in by_rho if z in grad]
    free = [z for z in by_rho if z in free]

    report: dict[str, dict] = {}

    def add(name, names):
        names = [n for n in names if n is not None]
        if len(names) == 0:
            return
        report[name] = {"selection": list(names),
                        "rho": rankave_rho(table, names)}

    add("libra", sel.names())
    add("libra_pair", [sel.z1, sel.z2])
    add("two_grad_free", free[:2])
    add("two_grad_based", grad[:2])
    if grad and free:
        add("grad_free_plus_grad_based", [free[0], grad[0]])
    pool = list(by_rho)
    if len(pool) >= 2:
        add("two_random", list(rng.choice(pool, size=2, replace=False)))
    if sel.ig:
        z_max_ig = max(sorted(sel.ig), key=lambda z: (sel.ig[z], rho[z]))
        add("best_plus_max_ig", [sel.z1, z_max_ig])
    add("best_plus_min_ig", [sel.z1, sel.z2])
    # third-metric variants
    band_rest = [z for z in sel.bias_gap]
    if band_rest:
        add("random_z3", [sel.z1, sel.z2, str(rng.choice(band_rest))])
        bias_abs = {z: abs(table_bias(table, table.columns[z])) for z in band_rest}
        z3_min_bias = min(band_rest, key=lambda z: (bias_abs[z], -rho[z], z))
        add("bias_minimization", [sel.z1, sel.z2, z3_min_bias])
    add("bias_matching", sel.names())
    return report
