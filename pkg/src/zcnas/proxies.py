"""Zero-cost architecture scores computed from one batch at initialization.

Trainability is read off per-sample gradient dispersion (inverse standard
deviation of absolute per-sample gradients, summed per layer under a log);
expressivity is the number of distinct firing patterns that post-activation
units produce across the batch.  The headline score composes the two
layer-wise over a window of depth percentiles.

Stable proxy identifiers (the join keys of score tables): "l_swag",
"zico", "swap", "nwot", "grad_norm", "snip", "plain", "synflow", "jacov",
"params", "flops".
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .engine import (
    ActivationCache,
    GradientRecord,
    NetworkInstance,
    backward,
    forward,
    input_gradient_rows,
    per_sample_gradients,
    _backprop,
)
from .errors import ConfigError

PERC_BINS = 10
EPS = 1e-12  # inside every sqrt(Var) and log argument
JACOV_EPS = 1e-5

GRADIENT_PROXIES = ("l_swag", "zico", "grad_norm", "snip", "plain", "synflow", "jacov")
GRADIENT_FREE_PROXIES = ("swap", "nwot", "params", "flops")
PROXY_NAMES = GRADIENT_PROXIES + GRADIENT_FREE_PROXIES


def layer_percentile(l: int, depth: int, n_bins: int = PERC_BINS) -> int:
    """Depth percentile bucket of layer l in a depth-D network.

    Exact integer-division semantics: int((l/D * 100) // (100 / n_bins));
    the result lies in [0, n_bins] and only l == D reaches n_bins.
    """
    if not (1 <= l <= depth):
        raise ConfigError(f"layer index {l} outside [1, {depth}]")
    if n_bins < 1:
        raise ConfigError("n_bins must be >= 1")
    return int((l / depth * 100) // (100 / n_bins))


@dataclass(frozen=True)
class LayerWindow:
    """Inclusive percentile range [lo, hi] selecting layers for scoring.

    The spike detector may return lo = 0 because very early layers of deep
    networks land in bucket 0 under the percentile formula, so 0 is a
    legal lower bound here and the full window is (0, n_bins).
    """

    lo: int
    hi: int
    n_bins: int = PERC_BINS

    def __post_init__(self):
        if not (0 <= self.lo <= self.hi <= self.n_bins):
            raise ConfigError(f"bad window ({self.lo}, {self.hi}) for {self.n_bins} bins")

    def contains(self, layer_depth: int, total_depth: int) -> bool:
        return self.lo <= layer_percentile(layer_depth, total_depth, self.n_bins) <= self.hi

    def to_json(self) -> dict:
        return {"lo": self.lo, "hi": self.hi, "n_bins": self.n_bins}


def full_window(n_bins: int = PERC_BINS) -> LayerWindow:
    return LayerWindow(0, n_bins, n_bins)


@dataclass
class ProxyScore:
    name: str
    arch_id: str
    value: float
    degenerate: bool = False
    batch: str = ""
    seed: int | None = None


# ---------------------------------------------------------------------------
# One-pass statistics extraction
# ---------------------------------------------------------------------------


@dataclass
class ParamLayerStats:
    depth: int
    n_weights: int
    term_no_mu: float   # sum_w 1 / sqrt(Var(|g_w|) + eps)
    term_mu: float      # sum_w |mu_w| / sqrt(Var(g_w) + eps)
    zero_var_abs: bool  # every weight has Var(|g_w|) == 0
    zero_var_raw: bool
    grad_sq_sum: float  # batch-gradient reductions for saliency proxies
    wg_abs_sum: float
    wg_sum: float


@dataclass
class NetStats:
    """Everything the batch-based proxies need from one forward/backward."""

    total_depth: int
    n_samples: int
    param_stats: list[ParamLayerStats]
    act_codes: dict[int, np.ndarray]  # depth -> bool (units, S) firing matrix
    pair_act: dict[int, int | None]   # param depth -> its activation depth


def _pair_activations(net: NetworkInstance) -> dict[int, int | None]:
    """Each parameterized layer pairs with the first activation node after
    it in topological order (its cell's activation); None for the head."""
    act_depths = [l.depth_index for l in net.layers if l.is_activation]
    pairs: dict[int, int | None] = {}
    for l in net.layers:
        if not l.has_params:
            continue
        after = [d for d in act_depths if d > l.depth_index]
        pairs[l.depth_index] = after[0] if after else None
    return pairs


def binarize_activations(cache: ActivationCache) -> dict[int, np.ndarray]:
    """Unit firing matrix per activation layer: (units, S) booleans.

    A unit fires iff its post-activation value is strictly positive; this
    covers GeLU as well, where the output sign equals the input sign, so
    exact zeros count as not firing.
    """
    out = {}
    for depth, act in cache.by_depth.items():
        s = act.shape[0]
        out[depth] = (act.reshape(s, -1) > 0.0).T.copy()
    return out


def extract_stats(net: NetworkInstance, batch, labels,
                  loss_kind: str = "cross_entropy") -> NetStats:
    res = forward(net, batch, labels, loss_kind)
    stacked = _backprop(net, res, res._seed, per_sample=True)
    s = res.outputs.shape[0]
    if s < 2:
        raise ValueError("proxy statistics require a batch of S >= 2")
    by_depth: dict[int, dict[str, np.ndarray]] = {}
    for (depth, name), g in stacked.grads.items():
        by_depth.setdefault(depth, {})[name] = g
    param_stats = []
    weights = dict(net.param_items())
    for layer in net.layers:
        if not layer.has_params:
            continue
        terms_no_mu = 0.0
        terms_mu = 0.0
        zero_abs = True
        zero_raw = True
        grad_sq = 0.0
        wg_abs = 0.0
        wg = 0.0
        for name in layer.params:
            g = by_depth[layer.depth_index][name].reshape(s, -1)
            ga = np.abs(g)
            mu_abs = ga.mean(axis=0)
            var_abs = ((ga - mu_abs) ** 2).mean(axis=0)
            mu_raw = g.mean(axis=0)
            var_raw = ((g - mu_raw) ** 2).mean(axis=0)
            # weights that receive no gradient at all (dead channels are
            # common in narrow random conv nets) carry no trainability
            # signal; pinning them at 1/sqrt(eps) would reward deadness
            alive = ga.max(axis=0) > 0.0
            terms_no_mu += float((alive / np.sqrt(var_abs + EPS)).sum())
            terms_mu += float((np.abs(mu_raw) / np.sqrt(var_raw + EPS)).sum())
            zero_abs &= bool(np.all(var_abs == 0.0))
            zero_raw &= bool(np.all(var_raw == 0.0))
            bg = mu_raw  # gradient of the mean batch loss
            w = weights[(layer.depth_index, name)].ravel()
            grad_sq += float((bg * bg).sum())
            wg_abs += float(np.abs(w * bg).sum())
            wg += float((w * bg).sum())
        param_stats.append(ParamLayerStats(
            depth=layer.depth_index,
            n_weights=sum(p.size for p in layer.params.values()),
            term_no_mu=terms_no_mu,
            term_mu=terms_mu,
            zero_var_abs=zero_abs,
            zero_var_raw=zero_raw,
            grad_sq_sum=grad_sq,
            wg_abs_sum=wg_abs,
            wg_sum=wg,
        ))
    return NetStats(
        total_depth=net.depth,
        n_samples=s,
        param_stats=param_stats,
        act_codes=binarize_activations(res.activations),
        pair_act=_pair_activations(net),
    )


def _distinct_rows(mat: np.ndarray) -> int:
    if mat.size == 0:
        return 0
    return int(np.unique(mat, axis=0).shape[0])


# ---------------------------------------------------------------------------
# Core terms
# ---------------------------------------------------------------------------


def lambda_term(per_sample_grads: list[GradientRecord], window: LayerWindow) -> float:
    """Sum over in-window parameterized layers of
    log(sum_w 1/sqrt(Var(|grad_w|))), population variance over samples.

    Weights whose gradient is identically zero across the batch are
    excluded from the inner sum (they carry no trainability signal).
    Returns +inf as the degenerate sentinel when every in-window variance
    is zero (e.g. a duplicated batch).
    """
    if len(per_sample_grads) < 2:
        raise ValueError("lambda_term needs per-sample gradients for S >= 2")
    total_depth = per_sample_grads[0].total_depth
    by_layer: dict[int, list[np.ndarray]] = {}
    for (depth, _name), g in per_sample_grads[0].grads.items():
        if window.contains(depth, total_depth):
            by_layer.setdefault(depth, [])
    if not by_layer:
        raise ValueError("no parameterized layer inside the window")
    for depth in by_layer:
        stacks = []
        for key in per_sample_grads[0].grads:
            if key[0] != depth:
                continue
            stacks.append(np.stack([np.abs(r.grads[key].ravel())
                                    for r in per_sample_grads]))
        by_layer[depth] = stacks
    value = 0.0
    any_nonzero = False
    for depth in sorted(by_layer):
        term = 0.0
        for ga in by_layer[depth]:
            mu = ga.mean(axis=0)
            var = ((ga - mu) ** 2).mean(axis=0)
            any_nonzero |= bool(np.any(var > 0.0))
            alive = ga.max(axis=0) > 0.0
            term += float((alive / np.sqrt(var + EPS)).sum())
        value += math.log(term + EPS)
    if not any_nonzero:
        return math.inf
    return value


def psi_term(cache: ActivationCache, window: LayerWindow) -> int:
    """Distinct firing codes over every in-window post-activation unit.

    Returns 0 when the window contains no activation layer (the degenerate
    case: any unit at all yields at least one code).
    """
    codes = binarize_activations(cache)
    selected = [codes[d] for d in sorted(codes)
                if window.contains(d, cache.total_depth)]
    if not selected:
        return 0
    return _distinct_rows(np.vstack(selected))


def _swag_from_stats(stats: NetStats, window: LayerWindow, *, use_mu: bool,
                     use_psi: bool, composition: str) -> tuple[float, bool]:
    """Windowed trainability/expressivity score; returns (value, degenerate)."""
    if composition not in ("layerwise", "aggregate"):
        raise ConfigError(f"unknown composition {composition!r}")
    layers = [ls for ls in stats.param_stats
              if window.contains(ls.depth, stats.total_depth)]
    if not layers:
        return math.inf, True
    all_zero = all((ls.zero_var_raw if use_mu else ls.zero_var_abs) for ls in layers)
    if all_zero:
        return math.inf, True
    psi_by_depth = {d: _distinct_rows(m) for d, m in stats.act_codes.items()}
    if composition == "aggregate":
        lam = sum(math.log((ls.term_mu if use_mu else ls.term_no_mu) + EPS)
                  for ls in layers)
        if not use_psi:
            return lam, False
        in_win = [stats.act_codes[d] for d in sorted(stats.act_codes)
                  if window.contains(d, stats.total_depth)]
        psi = _distinct_rows(np.vstack(in_win)) if in_win else 0
        if psi == 0:
            return math.inf, True
        return lam * psi, False
    value = 0.0
    for ls in layers:
        lam_l = math.log((ls.term_mu if use_mu else ls.term_no_mu) + EPS)
        if use_psi:
            act = stats.pair_act.get(ls.depth)
            psi_l = psi_by_depth.get(act, 1) if act is not None else 1
        else:
            psi_l = 1
        value += lam_l * psi_l
    return value, False


def swag_variant(net: NetworkInstance, batch, labels, window: LayerWindow, *,
                 use_mu: bool = False, use_window: bool = True,
                 use_psi: bool = True, composition: str = "layerwise",
                 loss_kind: str = "cross_entropy",
                 stats: NetStats | None = None) -> ProxyScore:
    """Ablation-grid variant of the windowed score; the defaults are the
    full metric, (use_mu=True, use_window=False, use_psi=False) is the
    all-layer mean/std baseline."""
    if stats is None:
        stats = extract_stats(net, batch, labels, loss_kind)
    win = window if use_window else full_window(window.n_bins)
    value, degenerate = _swag_from_stats(stats, win, use_mu=use_mu,
                                         use_psi=use_psi, composition=composition)
    name = "l_swag" if (not use_mu and use_window and use_psi) else "swag_variant"
    return ProxyScore(name, net.genotype_id or "", value, degenerate)


def l_swag(net: NetworkInstance, batch, labels, window: LayerWindow,
           composition: str = "layerwise", loss_kind: str = "cross_entropy",
           stats: NetStats | None = None) -> ProxyScore:
    if stats is None:
        stats = extract_stats(net, batch, labels, loss_kind)
    value, degenerate = _swag_from_stats(stats, window, use_mu=False,
                                         use_psi=True, composition=composition)
    return ProxyScore("l_swag", net.genotype_id or "", value, degenerate)


def zico(net: NetworkInstance, batch, labels, loss_kind: str = "cross_entropy",
         stats: NetStats | None = None) -> ProxyScore:
    """All-layer mean/std gradient score: sum_l log(sum_w |mu_w|/sigma_w)."""
    if stats is None:
        stats = extract_stats(net, batch, labels, loss_kind)
    value, degenerate = _swag_from_stats(stats, full_window(), use_mu=True,
                                         use_psi=False, composition="layerwise")
    return ProxyScore("zico", net.genotype_id or "", value, degenerate)


def swap(net: NetworkInstance, batch,
         stats: NetStats | None = None) -> ProxyScore:
    """Distinct activation patterns over the whole network."""
    if stats is not None:
        mats = [stats.act_codes[d] for d in sorted(stats.act_codes)]
        value = _distinct_rows(np.vstack(mats)) if mats else 0
    else:
        res = forward(net, batch, labels=None, loss_kind="sum")
        value = psi_term(res.activations, full_window())
    return ProxyScore("swap", net.genotype_id or "", float(value),
                      degenerate=value == 0)


def nwot(net: NetworkInstance, batch,
         stats: NetStats | None = None) -> ProxyScore:
    """Log-determinant of the S x S pattern-agreement kernel."""
    if stats is not None:
        codes = stats.act_codes
    else:
        res = forward(net, batch, labels=None, loss_kind="sum")
        codes = binarize_activations(res.activations)
    mats = [codes[d] for d in sorted(codes)]
    if not mats:
        return ProxyScore("nwot", net.genotype_id or "", -math.inf, degenerate=True)
    b = np.vstack(mats).T.astype(np.float64)  # (S, units)
    k = b @ b.T + (1.0 - b) @ (1.0 - b.T)
    sign, logdet = np.linalg.slogdet(k)
    if sign <= 0 or not np.isfinite(logdet):
        return ProxyScore("nwot", net.genotype_id or "", -math.inf, degenerate=True)
    return ProxyScore("nwot", net.genotype_id or "", float(logdet))


def _saliency_sums(net, batch, labels, stats: NetStats | None,
                   loss_kind: str = "cross_entropy"):
    if stats is None:
        stats = extract_stats(net, batch, labels, loss_kind)
    return stats


def grad_norm(net, batch, labels, loss_kind: str = "cross_entropy",
         stats: NetStats | None = None) -> ProxyScore:
    """Sum over parameterized layers of the batch-gradient L2 norm."""
    stats = _saliency_sums(net, batch, labels, stats, loss_kind)
    value = sum(math.sqrt(ls.grad_sq_sum) for ls in stats.param_stats)
    return ProxyScore("grad_norm", net.genotype_id or "", value)


def snip(net, batch, labels, loss_kind: str = "cross_entropy",
         stats: NetStats | None = None) -> ProxyScore:
    stats = _saliency_sums(net, batch, labels, stats, loss_kind)
    value = sum(ls.wg_abs_sum for ls in stats.param_stats)
    return ProxyScore("snip", net.genotype_id or "", value)


def plain(net, batch, labels, loss_kind: str = "cross_entropy",
         stats: NetStats | None = None) -> ProxyScore:
    stats = _saliency_sums(net, batch, labels, stats, loss_kind)
    value = sum(ls.wg_sum for ls in stats.param_stats)
    return ProxyScore("plain", net.genotype_id or "", value)


def synflow(net: NetworkInstance, input_shape: tuple[int, ...] | None = None) -> ProxyScore:
    """All-ones input, all-absolute parameters, R = sum of outputs;
    score = sum_w w * dR/dw."""
    if input_shape is None:
        genotype = net.meta.get("genotype")
        if genotype is None:
            raise ConfigError("synflow needs input_shape for hand-built nets")
        space = genotype.space
        input_shape = (1, space.in_channels, space.image_size, space.image_size)
    saved = {key: arr for key, arr in net.param_items()}
    try:
        for (depth, name), arr in list(saved.items()):
            net.set_param(depth, name, np.abs(arr))
        ones = np.ones(input_shape)
        res = forward(net, ones, labels=None, loss_kind="sum")
        rec = backward(net, res)
        value = 0.0
        for key, arr in net.param_items():
            value += float((arr * rec.grads[key]).sum())
    finally:
        for (depth, name), arr in saved.items():
            net.set_param(depth, name, arr)
    return ProxyScore("synflow", net.genotype_id or "", value)


def jacov(net: NetworkInstance, batch) -> ProxyScore:
    """Eigenvalue score of the correlation matrix of per-sample input
    gradients."""
    batch = np.asarray(batch)
    if batch.shape[0] < 2:
        raise ValueError("jacov requires S >= 2")
    rows = input_gradient_rows(net, batch)
    stds = rows.std(axis=1)
    if np.any(stds == 0.0):
        return ProxyScore("jacov", net.genotype_id or "", -math.inf, degenerate=True)
    corr = np.corrcoef(rows)
    eig = np.linalg.eigvalsh(corr)
    value = -float(np.sum(np.log(eig + JACOV_EPS) + 1.0 / (eig + JACOV_EPS)))
    if not np.isfinite(value):
        return ProxyScore("jacov", net.genotype_id or "", -math.inf, degenerate=True)
    return ProxyScore("jacov", net.genotype_id or "", value)
