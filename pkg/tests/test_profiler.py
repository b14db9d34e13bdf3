"""Gradient-profile accumulation and spike-window detection tests."""

import numpy as np
import pytest

from zcnas import archspace as asp
from zcnas import profiler as prof
from zcnas.engine import Linear, chain
from zcnas.errors import ConfigError
from zcnas.proxies import PERC_BINS, layer_percentile


def make_profile(means, entries_per_bucket=1):
    """Hand-built profile with one synthetic entry per bucket mean."""
    buckets = [prof.BucketStats(i) for i in range(PERC_BINS + 1)]
    for idx, mean in means.items():
        for _ in range(entries_per_bucket):
            buckets[idx].add(mean)
    return prof.PercentileProfile("hand", PERC_BINS, 1, "hand", buckets)


def linear_chain_net(depth=10, width=4, seed=0):
    net = chain(*[Linear(width, width) for _ in range(depth)])
    rng = np.random.default_rng(seed)
    for (d, n), arr in net.param_items():
        net.set_param(d, n, rng.standard_normal(arr.shape) * 0.4)
    return net


def mse_batch(width=4, s=6, seed=0):
    rng = np.random.default_rng(seed)
    return rng.standard_normal((s, width)), rng.standard_normal((s, width)), "test"


# ---------------------------------------------------------------------------
# profile accumulation
# ---------------------------------------------------------------------------


def test_identical_nets_give_zero_bucket_std():
    net = linear_chain_net()
    x, labels, _ = mse_batch()
    p = prof.profile_network_population([net, net], (x, labels, "b"), loss_kind="mse")
    for b in p.nonempty():
        assert b.std == pytest.approx(0.0, abs=1e-12)
        assert b.count == 2


def test_ten_layer_chain_fills_buckets_one_to_ten():
    net = linear_chain_net(depth=10)
    x, labels, _ = mse_batch()
    p = prof.profile_network_population([net], (x, labels, "b"), loss_kind="mse")
    assert p.buckets[0].empty
    for idx in range(1, 11):
        assert p.buckets[idx].count == 1, idx


def test_bucket_means_match_bruteforce_recomputation():
    space = asp.builtin_space("toy-micro")
    batch = asp.make_batch(space, 16, seed=3)
    strategy = asp.InitStrategy("KaimingUniform", 11)
    p = prof.profile(space, 12, batch, strategy, seed=5)

    collected: dict[int, list[float]] = {}
    for i in range(12):
        g = asp.sample_genotype(space, 5 * 1_000_003 + i)
        net = asp.instantiate(g, asp.InitStrategy("KaimingUniform",
                                                  11 * 1_000_003 + i))
        for bucket, value in prof.layer_profile_entries(net, batch[0], batch[1]):
            collected.setdefault(bucket, []).append(value)
    for idx, values in collected.items():
        assert p.buckets[idx].count == len(values)
        assert p.buckets[idx].mean == pytest.approx(np.mean(values), rel=1e-12)
        assert p.buckets[idx].std == pytest.approx(np.std(values), rel=1e-9, abs=1e-12)
    for b in p.buckets:
        if b.index not in collected:
            assert b.empty


def test_merge_equals_pooled_accumulation():
    space = asp.builtin_space("toy-micro")
    batch = asp.make_batch(space, 8, seed=4)
    strategy = asp.InitStrategy("KaimingUniform", 2)
    pa = prof.profile(space, 5, batch, strategy, seed=1)
    pb = prof.profile(space, 7, batch, strategy, seed=99)
    merged = prof.merge_profiles(pa, pb)
    assert merged.n_nets == 12
    for idx in range(PERC_BINS + 1):
        a, b, m = pa.buckets[idx], pb.buckets[idx], merged.buckets[idx]
        assert m.count == a.count + b.count
        if m.empty:
            continue
        pooled = ([a.mean] * 0 if a.empty else [a._sum]) + \
                 ([] if b.empty else [b._sum])
        assert m._sum == pytest.approx(sum(pooled), rel=1e-12)
        values_mean = (a._sum + b._sum) / m.count
        assert m.mean == pytest.approx(values_mean, rel=1e-10)


def test_profile_requires_two_nets():
    space = asp.builtin_space("toy-micro")
    with pytest.raises(ConfigError):
        prof.profile(space, 1, asp.make_batch(space, 4, 0), asp.InitStrategy())


# ---------------------------------------------------------------------------
# spike detection
# ---------------------------------------------------------------------------


def test_flat_profile_yields_no_spike_full_range():
    p = make_profile({i: 2.0 for i in range(11)})
    win = prof.detect_spikes(p)
    assert win.no_spike
    assert (win.lo, win.hi) == (0, PERC_BINS)


def test_single_elevated_bucket_detected():
    means = {i: 1.0 for i in range(11)}
    means[7] = 5.0
    win = prof.detect_spikes(make_profile(means))
    assert not win.no_spike
    assert (win.lo, win.hi) == (7, 7)


def test_rise_at_six_to_nine_detected():
    means = {i: 1.0 for i in range(11)}
    for i in (6, 7, 8, 9):
        means[i] = 10.0
    # global mean 4.27, std 4.33: threshold 8.6 selects exactly 6..9
    win = prof.detect_spikes(make_profile(means))
    assert (win.lo, win.hi) == (6, 9)
    assert not win.no_spike


def test_detection_invariant_to_constant_shift():
    means = {i: float(v) for i, v in enumerate([1, 1, 2, 1, 1, 9, 9, 8, 1, 1, 1])}
    base = prof.detect_spikes(make_profile(means))
    shifted = prof.detect_spikes(make_profile({i: v + 123.0 for i, v in means.items()}))
    assert (base.lo, base.hi) == (shifted.lo, shifted.hi)
    assert base.no_spike == shifted.no_spike


def test_longest_run_wins_then_peak():
    means = {i: 1.0 for i in range(11)}
    means[2] = 10.0
    means[6] = 9.0
    means[7] = 9.0
    win = prof.detect_spikes(make_profile(means))
    assert (win.lo, win.hi) == (6, 7)  # longer run beats higher single peak


def test_detect_needs_three_nonempty_buckets():
    with pytest.raises(ConfigError):
        prof.detect_spikes(make_profile({1: 1.0, 2: 2.0}))


# ---------------------------------------------------------------------------
# depth clustering
# ---------------------------------------------------------------------------


def test_depth_clusters_partition_networks():
    space = asp.builtin_space("toy-micro")
    batch = asp.make_batch(space, 8, seed=6)
    strategy = asp.InitStrategy("KaimingUniform", 4)
    profiles = prof.profile_by_depth(space, [(1, 11), (12, 99)], 10, batch,
                                     strategy, seed=3)
    pooled = prof.profile(space, 10, batch, strategy, seed=3)
    merged = prof.merge_profiles(profiles[0], profiles[1])
    # cluster ranges cover all depths, so entry counts must partition
    for idx in range(PERC_BINS + 1):
        assert merged.buckets[idx].count == pooled.buckets[idx].count


def test_single_depth_cluster_equals_filtered_profile():
    space = asp.builtin_space("toy-micro")
    batch = asp.make_batch(space, 8, seed=7)
    strategy = asp.InitStrategy("KaimingUniform", 4)
    nets = []
    for i in range(8):
        g = asp.sample_genotype(space, 3 * 1_000_003 + i)
        nets.append(asp.instantiate(g, asp.InitStrategy("KaimingUniform",
                                                        4 * 1_000_003 + i)))
    depths = {n.depth for n in nets}
    target = min(depths)
    filtered = [n for n in nets if n.depth == target]
    clustered = prof.profile_by_depth(space, [(target, target)], 8, batch,
                                      strategy, seed=3)[0]
    direct = prof.profile_network_population(filtered, batch)
    for idx in range(PERC_BINS + 1):
        assert clustered.buckets[idx].count == direct.buckets[idx].count
        if not clustered.buckets[idx].empty:
            assert clustered.buckets[idx].mean == pytest.approx(
                direct.buckets[idx].mean, rel=1e-12)


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------


def test_profile_json_roundtrip(tmp_path):
    space = asp.builtin_space("toy-micro")
    batch = asp.make_batch(space, 8, seed=8)
    p = prof.profile(space, 4, batch, asp.InitStrategy("KaimingUniform", 1), seed=2)
    win = prof.detect_spikes(p)
    path = tmp_path / "profile.json"
    prof.save_profile(path, p, win)
    loaded = prof.load_window(path)
    assert (loaded.lo, loaded.hi) == (win.lo, win.hi)
    doc = prof.profile_to_json(p, win)
    assert doc["version"] == prof.PROFILE_FORMAT_VERSION
    assert len(doc["buckets"]) == PERC_BINS + 1
    for b in doc["buckets"]:
        if b["count"] == 0:
            assert b["mean"] is None and b["std"] is None
