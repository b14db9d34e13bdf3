"""Population gradient profiling over depth percentiles and the detection
of the layer window that the windowed score aggregates over.

A profile is built once per (space, batch) and persisted; scoring then
loads the stored window instead of re-deriving it per network.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import archspace as asp
from .errors import ConfigError, DataError
from .proxies import PERC_BINS, LayerWindow, extract_stats, layer_percentile

PROFILE_FORMAT_VERSION = 1
SPIKE_Z_THRESHOLD = 1.0  # buckets above global mean + k * std count as spikes


@dataclass
class BucketStats:
    index: int
    count: int = 0
    _sum: float = 0.0
    _sumsq: float = 0.0

    def add(self, value: float) -> None:
        self.count += 1
        self._sum += value
        self._sumsq += value * value

    @property
    def empty(self) -> bool:
        return self.count == 0

    @property
    def mean(self) -> float | None:
        return None if self.empty else self._sum / self.count

    @property
    def std(self) -> float | None:
        if self.empty:
            return None
        var = max(self._sumsq / self.count - (self._sum / self.count) ** 2, 0.0)
        return math.sqrt(var)


@dataclass
class PercentileProfile:
    """Per-percentile mean/std of the per-layer inverse-deviation sum
    sum_w 1/sqrt(Var(|grad_w|)) across a population of networks."""

    space_id: str
    n_bins: int
    n_nets: int
    batch: str
    buckets: list[BucketStats]
    config: dict = field(default_factory=dict)

    def nonempty(self) -> list[BucketStats]:
        return [b for b in self.buckets if not b.empty]


@dataclass
class SpikeWindow:
    lo: int
    hi: int
    trace: dict[int, float]  # per-bucket z-score of the mean
    no_spike: bool = False

    def to_layer_window(self, n_bins: int = PERC_BINS) -> LayerWindow:
        return LayerWindow(self.lo, self.hi, n_bins)


def layer_profile_entries(net, batch, labels,
                          loss_kind: str = "cross_entropy") -> list[tuple[int, float]]:
    """(percentile bucket, per-layer statistic) for every parameterized
    layer of one network."""
    stats = extract_stats(net, batch, labels, loss_kind)
    return [
        (layer_percentile(ls.depth, stats.total_depth, PERC_BINS), ls.term_no_mu)
        for ls in stats.param_stats
    ]


def _new_buckets(n_bins: int) -> list[BucketStats]:
    return [BucketStats(i) for i in range(n_bins + 1)]


def profile(space: asp.SearchSpaceDef, n_nets: int, batch,
            strategy: asp.InitStrategy, seed: int = 0) -> PercentileProfile:
    """Profiles n_nets networks sampled from the space on one shared batch.

    Genotype and per-net init seeds derive from `seed` and the strategy
    seed, so equal arguments reproduce the profile bit for bit.
    """
    if n_nets < 2:
        raise ConfigError("profiling needs at least 2 networks")
    x, labels, descriptor = batch
    buckets = _new_buckets(PERC_BINS)
    saw_params = False
    for i in range(n_nets):
        genotype = asp.sample_genotype(space, seed * 1_000_003 + i)
        net = asp.instantiate(
            genotype, asp.InitStrategy(strategy.kind, strategy.seed * 1_000_003 + i))
        for bucket, value in layer_profile_entries(net, x, labels):
            buckets[bucket].add(value)
            saw_params = True
    if not saw_params:
        raise ConfigError("every sampled network is parameterless; nothing to profile")
    return PercentileProfile(
        space_id=space.space_id,
        n_bins=PERC_BINS,
        n_nets=n_nets,
        batch=descriptor,
        buckets=buckets,
        config={"strategy": strategy.kind, "strategy_seed": strategy.seed,
                "seed": seed},
    )


def profile_network_population(nets, batch,
                               loss_kind: str = "cross_entropy") -> PercentileProfile:
    """Profile over an explicit list of instantiated networks (used by
    tests and by depth clustering)."""
    x, labels, descriptor = batch
    buckets = _new_buckets(PERC_BINS)
    for net in nets:
        for bucket, value in layer_profile_entries(net, x, labels, loss_kind):
            buckets[bucket].add(value)
    return PercentileProfile("adhoc", PERC_BINS, len(nets), descriptor, buckets)


def profile_by_depth(space: asp.SearchSpaceDef, depth_clusters, n_nets: int,
                     batch, strategy: asp.InitStrategy,
                     seed: int = 0) -> list[PercentileProfile]:
    """One profile per (lo, hi) network-depth cluster; every sampled net
    falls into exactly one cluster or is dropped if none matches."""
    clusters = [tuple(c) for c in depth_clusters]
    for lo, hi in clusters:
        if lo > hi:
            raise ConfigError(f"bad depth cluster ({lo}, {hi})")
    x, labels, descriptor = batch
    nets_by_cluster: dict[int, list] = {i: [] for i in range(len(clusters))}
    for i in range(n_nets):
        genotype = asp.sample_genotype(space, seed * 1_000_003 + i)
        net = asp.instantiate(
            genotype, asp.InitStrategy(strategy.kind, strategy.seed * 1_000_003 + i))
        for ci, (lo, hi) in enumerate(clusters):
            if lo <= net.depth <= hi:
                nets_by_cluster[ci].append(net)
                break
    out = []
    for ci, (lo, hi) in enumerate(clusters):
        prof = profile_network_population(nets_by_cluster[ci], (x, labels, descriptor))
        prof.space_id = space.space_id
        prof.config = {"depth_cluster": [lo, hi], "strategy": strategy.kind,
                       "strategy_seed": strategy.seed, "seed": seed}
        out.append(prof)
    return out


def merge_profiles(a: PercentileProfile, b: PercentileProfile) -> PercentileProfile:
    """Commutative merge of two profiles over the same space and batch."""
    if a.n_bins != b.n_bins or a.space_id != b.space_id or a.batch != b.batch:
        raise DataError("cannot merge profiles from different populations")
    buckets = _new_buckets(a.n_bins)
    for src in (a, b):
        for bk in src.buckets:
            dst = buckets[bk.index]
            dst.count += bk.count
            dst._sum += bk._sum
            dst._sumsq += bk._sumsq
    return PercentileProfile(a.space_id, a.n_bins, a.n_nets + b.n_nets,
                             a.batch, buckets, dict(a.config))


def detect_spikes(profile: PercentileProfile, k: float = SPIKE_Z_THRESHOLD,
                  log_scale: bool = False) -> SpikeWindow:
    """Maximal contiguous run of buckets whose mean exceeds the global
    mean + k * std of bucket means; no bucket above the line yields the
    full range with the no-spike marker.

    log_scale applies the same rule to log10 of the bucket means, which
    is the robust choice when the intensity curve spans several decades
    (inverse-deviation sums routinely do).
    """
    filled = profile.nonempty()
    if len(filled) < 3:
        raise ConfigError("spike detection needs at least 3 non-empty buckets")
    means = np.array([b.mean for b in filled])
    if log_scale:
        if np.any(means <= 0.0):
            raise ConfigError("log-scale detection needs positive bucket means")
        means = np.log10(means)
    g_mean, g_std = float(means.mean()), float(means.std())
    by_index = dict(zip((b.index for b in filled), means))
    trace = {idx: (0.0 if g_std == 0.0 else (m - g_mean) / g_std)
             for idx, m in by_index.items()}
    threshold = g_mean + k * g_std
    elevated = {idx for idx, m in by_index.items() if m > threshold}
    if not elevated:
        return SpikeWindow(0, profile.n_bins, trace, no_spike=True)
    runs: list[tuple[int, int]] = []
    indices = sorted(b.index for b in filled)
    run_start = None
    prev = None
    for idx in indices:
        if idx in elevated and (run_start is None or prev not in elevated):
            run_start = idx
        if idx not in elevated and run_start is not None:
            runs.append((run_start, prev))
            run_start = None
        prev = idx
    if run_start is not None:
        runs.append((run_start, prev))

    def run_key(run):
        lo, hi = run
        peak = max(trace[i] for i in range(lo, hi + 1) if i in trace)
        return (hi - lo, peak, -lo)  # longest, then highest peak, then earliest

    lo, hi = max(runs, key=run_key)
    return SpikeWindow(lo, hi, trace)


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------


def profile_to_json(profile: PercentileProfile,
                    window: SpikeWindow | None = None) -> dict:
    doc = {
        "version": PROFILE_FORMAT_VERSION,
        "space_id": profile.space_id,
        "n_bins": profile.n_bins,
        "n_nets": profile.n_nets,
        "batch": profile.batch,
        "buckets": [
            {"index": b.index, "count": b.count, "mean": b.mean, "std": b.std}
            for b in profile.buckets
        ],
        "config": profile.config,
    }
    if window is not None:
        doc["window"] = {"lo": window.lo, "hi": window.hi,
                         "no_spike": window.no_spike}
    return doc


def save_profile(path, profile: PercentileProfile,
                 window: SpikeWindow | None = None) -> None:
    with open(path, "w") as fh:
        json.dump(profile_to_json(profile, window), fh, sort_keys=True, indent=1)
        fh.write("\n")


def load_window(path) -> LayerWindow:
    with open(path) as fh:
        doc = json.load(fh)
    try:
        win = doc["window"]
        return LayerWindow(int(win["lo"]), int(win["hi"]), int(doc["n_bins"]))
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"profile document at {path} has no usable window: {exc}")
