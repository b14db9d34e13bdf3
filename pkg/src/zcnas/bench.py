"""Benchmark harness: score-table IO, the evaluation protocol (Spearman
over sampled architectures, repeated runs), proxy-guided evolutionary
search, ablation drivers, and report emission.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import archspace as asp
from . import profiler as prof
from . import proxies as px
from .errors import ConfigError, DataError
from .libra import ProxyTable, ablation_variants, masked_spearman, rank_aggregate
from .stats import spearman_rho

DEFAULT_PROXIES = ("l_swag", "zico", "swap", "nwot", "grad_norm", "snip",
                   "plain", "synflow", "jacov", "params", "flops")


# ---------------------------------------------------------------------------
# Table IO
# ---------------------------------------------------------------------------


def _parse_cell(value: str, row: int, column: str) -> float:
    value = value.strip()
    if value == "":
        return math.nan
    try:
        return float(value)
    except ValueError:
        raise DataError(
            f"non-numeric cell at row {row}, column {column!r}: {value!r}")


def load_table(path, fmt: str | None = None,
               benchmark_id: str | None = None) -> ProxyTable:
    """Reads `id,val_acc,<proxy columns...>` from CSV or the equivalent
    record-list JSON; unknown proxy columns are preserved verbatim and
    empty cells become NaN (excluded pairwise downstream)."""
    path = Path(path)
    if fmt is None:
        fmt = "json" if path.suffix.lower() == ".json" else "csv"
    if fmt == "csv":
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames is None or "id" not in reader.fieldnames \
                    or "val_acc" not in reader.fieldnames:
                raise DataError(f"{path}: header must name 'id' and 'val_acc'")
            names = [c for c in reader.fieldnames if c not in ("id", "val_acc")]
            ids, y, cols = [], [], {c: [] for c in names}
            for i, row in enumerate(reader, start=2):  # 1-based incl. header
                if row["id"] is None or row["id"].strip() == "":
                    raise DataError(f"{path}: missing id at row {i}")
                ids.append(row["id"].strip())
                y.append(_parse_cell(row["val_acc"] or "", i, "val_acc"))
                for c in names:
                    cols[c].append(_parse_cell(row[c] or "", i, c))
    elif fmt == "json":
        with open(path) as fh:
            doc = json.load(fh)
        records = doc.get("records")
        if not isinstance(records, list):
            raise DataError(f"{path}: expected a 'records' list")
        names = sorted({k for rec in records for k in rec}
                       - {"id", "val_acc"})
        ids, y, cols = [], [], {c: [] for c in names}
        for i, rec in enumerate(records):
            if "id" not in rec or "val_acc" not in rec:
                raise DataError(f"{path}: record {i} lacks id/val_acc")
            ids.append(str(rec["id"]))
            y.append(float(rec["val_acc"]))
            for c in names:
                v = rec.get(c)
                cols[c].append(math.nan if v is None else float(v))
        benchmark_id = benchmark_id or doc.get("benchmark")
    else:
        raise ConfigError(f"unknown table format {fmt!r}")
    if len(set(ids)) != len(ids):
        dupes = sorted({i for i in ids if ids.count(i) > 1})
        raise DataError(f"{path}: duplicate ids {dupes[:5]}")
    y = np.asarray(y)
    if not np.all(np.isfinite(y)):
        bad = int(np.flatnonzero(~np.isfinite(y))[0])
        raise DataError(f"{path}: missing val_acc for id {ids[bad]!r}")
    return ProxyTable(
        benchmark_id=benchmark_id or path.stem,
        ids=tuple(ids),
        y=y,
        columns={c: np.asarray(v) for c, v in cols.items()},
    )


def save_table(table: ProxyTable, path, fmt: str | None = None) -> None:
    path = Path(path)
    if fmt is None:
        fmt = "json" if path.suffix.lower() == ".json" else "csv"
    names = table.proxy_names()
    if fmt == "csv":
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["id", "val_acc"] + names)
            for i, arch_id in enumerate(table.ids):
                row = [arch_id, repr(float(table.y[i]))]
                for c in names:
                    v = table.columns[c][i]
                    row.append("" if not np.isfinite(v) else repr(float(v)))
                writer.writerow(row)
    elif fmt == "json":
        records = []
        for i, arch_id in enumerate(table.ids):
            rec = {"id": arch_id, "val_acc": float(table.y[i])}
            for c in names:
                v = table.columns[c][i]
                rec[c] = None if not np.isfinite(v) else float(v)
            records.append(rec)
        doc = {"benchmark": table.benchmark_id, "records": records}
        with open(path, "w") as fh:
            json.dump(doc, fh, sort_keys=True, indent=1)
            fh.write("\n")
    else:
        raise ConfigError(f"unknown table format {fmt!r}")


# ---------------------------------------------------------------------------
# Architecture sampling and scoring
# ---------------------------------------------------------------------------


def sample_architectures(space: asp.SearchSpaceDef, n: int,
                         rng: np.random.Generator) -> list[asp.ArchGenotype]:
    """n distinct genotypes, uniform without replacement; n equal to the
    space size reduces to full enumeration."""
    total = asp.space_size(space)
    if n > total:
        raise ConfigError(f"cannot draw {n} distinct genotypes from {total}")
    if total <= 2_000_000:
        idxs = rng.choice(total, size=n, replace=False)
    else:
        seen: set[int] = set()
        while len(seen) < n:
            seen.add(int(rng.integers(total)))
        idxs = np.fromiter(seen, dtype=object)
    return [asp.genotype_from_index(space, int(i)) for i in idxs]


def compute_arch_scores(net, genotype: asp.ArchGenotype, batch, labels,
                        names, window: px.LayerWindow,
                        composition: str = "layerwise") -> dict[str, float]:
    """All requested proxy scores for one network from shared statistics;
    degenerate scores surface as NaN."""
    space = genotype.space
    out: dict[str, float] = {}
    need_stats = any(n in ("l_swag", "zico", "swap", "nwot", "grad_norm",
                           "snip", "plain") for n in names)
    stats = px.extract_stats(net, batch, labels) if need_stats else None

    def put(name, score: px.ProxyScore):
        out[name] = math.nan if score.degenerate else float(score.value)

    for name in names:
        if name == "l_swag":
            put(name, px.l_swag(net, batch, labels, window,
                                composition=composition, stats=stats))
        elif name == "zico":
            put(name, px.zico(net, batch, labels, stats=stats))
        elif name == "swap":
            put(name, px.swap(net, batch, stats=stats))
        elif name == "nwot":
            put(name, px.nwot(net, batch, stats=stats))
        elif name == "grad_norm":
            put(name, px.grad_norm(net, batch, labels, stats=stats))
        elif name == "snip":
            put(name, px.snip(net, batch, labels, stats=stats))
        elif name == "plain":
            put(name, px.plain(net, batch, labels, stats=stats))
        elif name == "synflow":
            put(name, px.synflow(net))
        elif name == "jacov":
            put(name, px.jacov(net, batch))
        elif name == "params":
            out[name] = float(asp.count_params(net))
        elif name == "flops":
            shape = (1, space.in_channels, space.image_size, space.image_size)
            out[name] = float(asp.count_flops(net, shape))
        else:
            raise ConfigError(f"unknown proxy {name!r}")
    return out


@dataclass(frozen=True)
class EvalProtocol:
    n_archs: int = 1000
    n_runs: int = 5
    batch_size: int | None = None  # falls back to the space default
    strategy_kind: str = "KaimingUniform"
    seed: int = 0

    def __post_init__(self):
        if self.n_runs < 1:
            raise ConfigError("n_runs must be >= 1")
        if self.n_archs < 2:
            raise ConfigError("n_archs must be >= 2")


def build_synthetic_table(space: asp.SearchSpaceDef, n_archs: int,
                          proxies, window: px.LayerWindow, seed: int,
                          batch_size: int | None = None,
                          strategy_kind: str = "KaimingUniform") -> ProxyTable:
    """Scores + synthetic accuracy for sampled architectures, one run."""
    rng = np.random.default_rng(seed)
    batch_size = batch_size or space.default_batch_size
    x, labels, _ = asp.make_batch(space, batch_size, seed)
    genotypes = sample_architectures(space, n_archs, rng)
    ids, y = [], []
    columns: dict[str, list[float]] = {name: [] for name in proxies}
    if "params" not in columns:
        columns["params"] = []
    for i, g in enumerate(genotypes):
        net = asp.instantiate(g, asp.InitStrategy(strategy_kind,
                                                  seed * 1_000_003 + i))
        scores = compute_arch_scores(net, g, x, labels, list(columns), window)
        ids.append(g.identity)
        y.append(asp.synthetic_accuracy(space, g))
        for name in columns:
            columns[name].append(scores[name])
    return ProxyTable(
        benchmark_id=f"{space.space_id}:seed{seed}",
        ids=tuple(ids),
        y=np.asarray(y),
        columns={k: np.asarray(v) for k, v in columns.items()},
    )


def evaluate_proxies(space: asp.SearchSpaceDef, protocol: EvalProtocol,
                     proxies, window: px.LayerWindow) -> dict:
    """Spearman rho of each proxy against the synthetic accuracy, mean and
    std over repeated runs; degenerate scores are excluded pairwise with
    counts reported."""
    proxies = list(proxies)
    per_proxy: dict[str, list] = {name: [] for name in proxies}
    per_excluded: dict[str, list] = {name: [] for name in proxies}
    for run in range(protocol.n_runs):
        run_seed = protocol.seed * 10_007 + run
        table = build_synthetic_table(
            space, protocol.n_archs, proxies, window, run_seed,
            batch_size=protocol.batch_size,
            strategy_kind=protocol.strategy_kind)
        for name in proxies:
            rho, excluded = masked_spearman(table.columns[name], table.y)
            per_proxy[name].append(rho)
            per_excluded[name].append(excluded)
    report = {
        "space": space.space_id,
        "protocol": {
            "n_archs": protocol.n_archs,
            "n_runs": protocol.n_runs,
            "batch_size": protocol.batch_size or space.default_batch_size,
            "strategy": protocol.strategy_kind,
            "seed": protocol.seed,
        },
        "window": window.to_json(),
        "proxies": {},
    }
    for name in proxies:
        runs = per_proxy[name]
        valid = [r for r in runs if r is not None]
        report["proxies"][name] = {
            "rho_runs": runs,
            "rho_mean": float(np.mean(valid)) if valid else None,
            "rho_std": float(np.std(valid)) if valid else None,
            "excluded": per_excluded[name],
        }
    return report


# ---------------------------------------------------------------------------
# Evolutionary search
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SearchConfig:
    fitness: str = "l_swag"       # proxy name, "libra", or "synthetic_y"
    population_size: int = 64
    mutation_rate: float | None = None  # defaults to 1/genome-length
    tournament_size: int = 4
    seed: int = 0
    budget: int = 512             # maximum fitness evaluations

    def __post_init__(self):
        if self.budget < self.population_size:
            raise ConfigError("budget must cover the initial population")
        if self.tournament_size < 1:
            raise ConfigError("tournament_size must be >= 1")


def fitness_sort_key(value: float, degenerate: bool, n_params: int):
    """Degenerate scores rank below every finite score; among degenerates
    fewer parameters ranks higher."""
    if degenerate or not np.isfinite(value):
        return (0, -n_params)
    return (1, value)


def evolutionary_search(space: asp.SearchSpaceDef, config: SearchConfig,
                        fitness_fn) -> dict:
    """Tournament selection with point mutation and elitism of one.

    fitness_fn(genotype, net) -> (value, degenerate).  Distinct genotypes
    are evaluated at most once and never beyond the budget; the trace
    records every evaluation and the running best.
    """
    rng = np.random.default_rng(config.seed)
    cache: dict[str, tuple] = {}
    trace: list[dict] = []
    evals = 0
    best: tuple | None = None
    best_genotype: asp.ArchGenotype | None = None

    def evaluate(genotype: asp.ArchGenotype):
        nonlocal evals, best, best_genotype
        ident = genotype.identity
        if ident in cache:
            return cache[ident]
        if evals >= config.budget:
            return None
        net = asp.instantiate(genotype, asp.InitStrategy(
            "KaimingUniform", config.seed * 1_000_003 + evals))
        n_params = asp.count_params(net)
        value, degenerate = fitness_fn(genotype, net)
        evals += 1
        key = fitness_sort_key(value, degenerate, n_params)
        cache[ident] = (key, value, degenerate)
        if best is None or key > best[0]:
            best = cache[ident]
            best_genotype = genotype
        trace.append({
            "eval": evals,
            "id": ident,
            "fitness": None if not np.isfinite(value) else float(value),
            "degenerate": bool(degenerate),
            "best_so_far": None if best is None or not np.isfinite(best[1])
            else float(best[1]),
        })
        return cache[ident]

    population: list[asp.ArchGenotype] = []
    while len(population) < config.population_size and evals < config.budget:
        g = asp.sample_genotype(space, rng)
        if evaluate(g) is not None:
            population.append(g)

    def tournament() -> asp.ArchGenotype:
        contenders = [population[int(rng.integers(len(population)))]
                      for _ in range(config.tournament_size)]
        return max(contenders, key=lambda g: cache[g.identity][0])

    while evals < config.budget:
        elite = max(population, key=lambda g: cache[g.identity][0])
        children = [elite]
        while len(children) < config.population_size and evals < config.budget:
            parent = tournament()
            rate = config.mutation_rate or 1.0 / max(1, parent.depth)
            child = asp.mutate_genotype(parent, rng, rate)
            if evaluate(child) is None:
                break
            children.append(child)
        population = children
    assert best_genotype is not None
    return {
        "best_genotype": best_genotype,
        "best_fitness": best[1],
        "best_degenerate": best[2],
        "evaluations": evals,
        "trace": trace,
        "config": asdict(config),
    }


def make_fitness(space: asp.SearchSpaceDef, fitness: str,
                 window: px.LayerWindow, batch_seed: int = 0,
                 batch_size: int | None = None):
    """Fitness callable for the search: a proxy name or the true synthetic
    accuracy ("synthetic_y")."""
    if fitness == "synthetic_y":
        def fn(genotype, net):
            return asp.synthetic_accuracy(space, genotype), False
        return fn
    if fitness == "libra":
        raise ConfigError("libra fitness needs a selection; use "
                          "make_libra_fitness")
    if fitness not in DEFAULT_PROXIES:
        raise ConfigError(f"unknown fitness {fitness!r}")
    batch_size = batch_size or space.default_batch_size
    x, labels, _ = asp.make_batch(space, batch_size, batch_seed)

    def fn(genotype, net):
        scores = compute_arch_scores(net, genotype, x, labels, [fitness], window)
        v = scores[fitness]
        return v, not np.isfinite(v)
    return fn


def make_libra_fitness(space: asp.SearchSpaceDef, selection_names,
                       window: px.LayerWindow, batch_seed: int = 0,
                       batch_size: int | None = None):
    """RankAve of the selected proxies, estimated against a reference
    population so single-architecture fitness stays comparable.

    Ranks need a population; each evaluation scores the candidate against
    a frozen reference sample of architectures, averaging the candidate's
    fractional rank across the selected proxies.
    """
    names = [n for n in selection_names if n is not None]
    if not names:
        raise ConfigError("empty selection for libra fitness")
    batch_size = batch_size or space.default_batch_size
    x, labels, _ = asp.make_batch(space, batch_size, batch_seed)
    rng = np.random.default_rng(batch_seed + 17)
    reference = sample_architectures(space, min(64, asp.space_size(space)), rng)
    ref_scores: dict[str, np.ndarray] = {n: [] for n in names}
    for i, g in enumerate(reference):
        net = asp.instantiate(g, asp.InitStrategy("KaimingUniform",
                                                  batch_seed * 31 + i))
        s = compute_arch_scores(net, g, x, labels, names, window)
        for n in names:
            ref_scores[n].append(s[n])
    ref_scores = {n: np.asarray(v) for n, v in ref_scores.items()}

    def fn(genotype, net):
        scores = compute_arch_scores(net, genotype, x, labels, names, window)
        if all(not np.isfinite(scores[n]) for n in names):
            return math.nan, True
        ranks = []
        for n in names:
            col = ref_scores[n]
            v = scores[n]
            if not np.isfinite(v):
                ranks.append(0.0)
                continue
            finite = col[np.isfinite(col)]
            ranks.append(float((finite < v).sum() + 0.5 * (finite == v).sum()))
        return float(np.mean(ranks)), False
    return fn


# ---------------------------------------------------------------------------
# Ablations
# ---------------------------------------------------------------------------

ABLATION_NAMES = ("no_mu", "layer_window", "psi", "percentile_sweep",
                  "batch_sweep", "init_robustness", "libra_variants")


def _rho_of(values, y) -> float | None:
    rho, _ = masked_spearman(np.asarray(values, dtype=float), np.asarray(y))
    return rho


def _population_stats(space, n_archs, seed, batch_size=None,
                      strategy_kind="KaimingUniform"):
    rng = np.random.default_rng(seed)
    batch_size = batch_size or space.default_batch_size
    x, labels, _ = asp.make_batch(space, batch_size, seed)
    genotypes = sample_architectures(space, n_archs, rng)
    rows = []
    for i, g in enumerate(genotypes):
        net = asp.instantiate(g, asp.InitStrategy(strategy_kind,
                                                  seed * 1_000_003 + i))
        stats = px.extract_stats(net, x, labels)
        rows.append((g, net, stats))
    y = np.array([asp.synthetic_accuracy(space, g) for g, _, _ in rows])
    return rows, y, (x, labels)


def run_ablation(name: str, space: asp.SearchSpaceDef, window: px.LayerWindow,
                 n_archs: int = 100, seed: int = 0) -> dict:
    """Component and protocol ablations on the synthetic benchmark."""
    if name not in ABLATION_NAMES:
        raise ConfigError(f"unknown ablation {name!r}; choose from {ABLATION_NAMES}")
    report: dict = {"ablation": name, "space": space.space_id,
                    "n_archs": n_archs, "seed": seed,
                    "window": window.to_json()}

    if name in ("no_mu", "layer_window", "psi", "percentile_sweep"):
        rows, y, (x, labels) = _population_stats(space, n_archs, seed)

    if name == "no_mu":
        grid = []
        for no_mu in (False, True):
            for use_window in (False, True):
                for use_psi in (False, True):
                    values = [px.swag_variant(net, x, labels, window,
                                              use_mu=not no_mu,
                                              use_window=use_window,
                                              use_psi=use_psi,
                                              stats=stats).value
                              for _, net, stats in rows]
                    grid.append({"no_mu": no_mu, "window": use_window,
                                 "psi": use_psi, "rho": _rho_of(values, y)})
        report["grid"] = grid
    elif name == "layer_window":
        for label, win in (("windowed", window), ("all_layers", px.full_window())):
            values = [px.l_swag(net, x, labels, win, stats=stats).value
                      for _, net, stats in rows]
            report[label] = _rho_of(values, y)
    elif name == "psi":
        for label, use_psi in (("with_psi", True), ("without_psi", False)):
            values = [px.swag_variant(net, x, labels, window, use_psi=use_psi,
                                      stats=stats).value
                      for _, net, stats in rows]
            report[label] = _rho_of(values, y)
    elif name == "percentile_sweep":
        sweep = []
        for p in range(1, px.PERC_BINS + 1):
            win = px.LayerWindow(p, p)
            values = [px.l_swag(net, x, labels, win, stats=stats).value
                      for _, net, stats in rows]
            sweep.append({"percentile": p, "rho": _rho_of(values, y)})
        values = [px.l_swag(net, x, labels, px.full_window(), stats=stats).value
                  for _, net, stats in rows]
        sweep.append({"percentile": "ALL", "rho": _rho_of(values, y)})
        report["sweep"] = sweep
    elif name == "batch_sweep":
        sweep = []
        for s in (8, 16, 32, 64):
            rows, y, (x, labels) = _population_stats(space, n_archs, seed,
                                                     batch_size=s)
            values = [px.l_swag(net, x, labels, window, stats=stats).value
                      for _, net, stats in rows]
            sweep.append({"batch_size": s, "rho": _rho_of(values, y)})
        report["sweep"] = sweep
    elif name == "init_robustness":
        strategies = ("XavierUniform", "KaimingUniform", "Gaussian")
        scores_by_strategy = {}
        rhos = {}
        for kind in strategies:
            rows, y, (x, labels) = _population_stats(space, n_archs, seed,
                                                     strategy_kind=kind)
            values = np.array([px.l_swag(net, x, labels, window,
                                         stats=stats).value
                               for _, net, stats in rows])
            scores_by_strategy[kind] = values
            rhos[kind] = _rho_of(values, y)
        pairwise = {}
        for i, a in enumerate(strategies):
            for b in strategies[i + 1:]:
                va, vb = scores_by_strategy[a], scores_by_strategy[b]
                mask = np.isfinite(va) & np.isfinite(vb)
                pairwise[f"{a}|{b}"] = float(spearman_rho(va[mask], vb[mask]))
        valid = [r for r in rhos.values() if r is not None]
        report["rho_by_strategy"] = rhos
        report["pairwise_rank_rho"] = pairwise
        report["rho_std_across_strategies"] = float(np.std(valid))
    elif name == "libra_variants":
        table = build_synthetic_table(space, n_archs, DEFAULT_PROXIES,
                                      window, seed)
        report["variants"] = ablation_variants(table, seed=seed)
    return report


# ---------------------------------------------------------------------------
# Report emission
# ---------------------------------------------------------------------------


def _json_default(obj):
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, asp.ArchGenotype):
        return json.loads(obj.canonical_text())
    raise TypeError(f"cannot serialize {type(obj)}")


def emit_report(results, path, kind: str = "json") -> None:
    """json: canonical document; csv: rows with a stable header union;
    plotdata: {"series": [{"name", "x", "y"}, ...]} triples for external
    plotting."""
    path = Path(path)
    if kind == "json":
        with open(path, "w") as fh:
            json.dump(results, fh, sort_keys=True, indent=1,
                      default=_json_default)
            fh.write("\n")
        return
    if kind == "csv":
        rows = results if isinstance(results, list) else [results]
        rows = [r if isinstance(r, dict) else {"value": r} for r in rows]
        fields: list[str] = []
        for r in rows:
            for k in r:
                if k not in fields:
                    fields.append(k)
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=fields)
            writer.writeheader()
            for r in rows:
                writer.writerow({k: r.get(k, "") for k in fields})
        return
    if kind == "plotdata":
        series = results if isinstance(results, list) else [results]
        doc = {"kind": "plotdata", "series": []}
        for s in series:
            doc["series"].append({
                "name": str(s.get("name", f"series{len(doc['series'])}")),
                "x": list(s.get("x", [])),
                "y": list(s.get("y", [])),
            })
        with open(path, "w") as fh:
            json.dump(doc, fh, sort_keys=True, indent=1, default=_json_default)
            fh.write("\n")
        return
    raise ConfigError(f"unknown report kind {kind!r}")


def profile_plotdata(profile: prof.PercentileProfile) -> list[dict]:
    """Series triples for a mean/std intensity curve over percentiles."""
    filled = profile.nonempty()
    return [
        {"name": "bucket_mean", "x": [b.index for b in filled],
         "y": [b.mean for b in filled]},
        {"name": "bucket_std", "x": [b.index for b in filled],
         "y": [b.std for b in filled]},
    ]
