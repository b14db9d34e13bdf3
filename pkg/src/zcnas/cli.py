"""Command-line front end.

Every subcommand takes a JSON config file plus --seed/--out overrides and
writes one report file.  Exit codes: 0 success, 2 configuration error,
3 data error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import archspace as asp
from . import bench
from . import libra as lb
from . import profiler as prof
from . import proxies as px
from . import theorem as thm
from .errors import ConfigError, DataError

TUPLE_FIELDS = ("op_vocabulary", "depth_range", "width_choices")


def load_config(path) -> dict:
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    return cfg


def space_from_config(cfg: dict) -> asp.SearchSpaceDef:
    space = asp.builtin_space(cfg.get("space", "toy-micro"))
    overrides = dict(cfg.get("space_overrides", {}))
    for key in TUPLE_FIELDS:
        if key in overrides:
            overrides[key] = tuple(overrides[key])
    if "position_widths" in overrides and overrides["position_widths"] is not None:
        overrides["position_widths"] = tuple(
            tuple(p) for p in overrides["position_widths"])
    if "signal_band" in overrides and overrides["signal_band"] is not None:
        overrides["signal_band"] = tuple(overrides["signal_band"])
    if overrides:
        space = asp.space_with(space, **overrides)
    return space


def resolve_window(spec, space: asp.SearchSpaceDef, seed: int) -> px.LayerWindow:
    """Window from a config value: "full", {"lo","hi"}, a stored profile
    path, or "detect" to profile on the spot."""
    if spec in (None, "full"):
        return px.full_window()
    if isinstance(spec, dict):
        return px.LayerWindow(int(spec["lo"]), int(spec["hi"]),
                              int(spec.get("n_bins", px.PERC_BINS)))
    if spec == "detect":
        batch = asp.make_batch(space, space.default_batch_size, seed)
        profile = prof.profile(space, 48, batch, asp.InitStrategy(
            "KaimingUniform", seed), seed=seed)
        return prof.detect_spikes(profile).to_layer_window()
    if isinstance(spec, str):
        return prof.load_window(spec)
    raise ConfigError(f"cannot interpret window spec {spec!r}")


def cmd_profile(cfg: dict, seed: int, out: str) -> None:
    space = space_from_config(cfg)
    n_nets = int(cfg.get("n_nets", 48))
    batch_size = int(cfg.get("batch_size") or space.default_batch_size)
    batch = asp.make_batch(space, batch_size, int(cfg.get("batch_seed", seed)))
    strategy = asp.InitStrategy(cfg.get("strategy", "KaimingUniform"), seed)
    profile = prof.profile(space, n_nets, batch, strategy, seed=seed)
    window = prof.detect_spikes(profile, k=float(cfg.get("spike_k",
                                                         prof.SPIKE_Z_THRESHOLD)))
    prof.save_profile(out, profile, window)


def cmd_eval(cfg: dict, seed: int, out: str) -> None:
    space = space_from_config(cfg)
    protocol = bench.EvalProtocol(
        n_archs=int(cfg.get("n_archs", 1000)),
        n_runs=int(cfg.get("n_runs", 5)),
        batch_size=cfg.get("batch_size"),
        strategy_kind=cfg.get("strategy", "KaimingUniform"),
        seed=seed,
    )
    window = resolve_window(cfg.get("window"), space, seed)
    proxies = cfg.get("proxies", list(bench.DEFAULT_PROXIES))
    report = bench.evaluate_proxies(space, protocol, proxies, window)
    bench.emit_report(report, out, kind=cfg.get("report_kind", "json"))


def cmd_libra(cfg: dict, seed: int, out: str) -> None:
    if "table" in cfg:
        table = bench.load_table(cfg["table"], fmt=cfg.get("format"))
    else:
        space = space_from_config(cfg)
        window = resolve_window(cfg.get("window"), space, seed)
        table = bench.build_synthetic_table(
            space, int(cfg.get("n_archs", 200)),
            cfg.get("proxies", list(bench.DEFAULT_PROXIES)), window, seed,
            batch_size=cfg.get("batch_size"))
    selection = lb.libra_select(
        table,
        tolerance=float(cfg.get("tolerance", lb.BASE_TOLERANCE)),
        bin_on_ranks=bool(cfg.get("bin_on_ranks", True)),
    )
    doc = lb.selection_to_json(selection)
    if selection.z2 is not None or selection.z3 is not None:
        doc["rankave_rho"] = lb.rankave_rho(table, selection.names())
    bench.emit_report(doc, out, kind="json")


def cmd_search(cfg: dict, seed: int, out: str) -> None:
    space = space_from_config(cfg)
    window = resolve_window(cfg.get("window"), space, seed)
    config = bench.SearchConfig(
        fitness=cfg.get("fitness", "l_swag"),
        population_size=int(cfg.get("population", 64)),
        mutation_rate=cfg.get("mutation_rate"),
        tournament_size=int(cfg.get("tournament", 4)),
        seed=seed,
        budget=int(cfg.get("budget", 512)),
    )
    batch_seed = int(cfg.get("batch_seed", seed))
    if config.fitness == "libra":
        selection = cfg.get("selection")
        if not selection:
            raise ConfigError('fitness "libra" needs a "selection" list '
                              "(run the libra subcommand first)")
        fitness_fn = bench.make_libra_fitness(space, selection, window,
                                              batch_seed=batch_seed,
                                              batch_size=cfg.get("batch_size"))
    else:
        fitness_fn = bench.make_fitness(space, config.fitness, window,
                                        batch_seed=batch_seed,
                                        batch_size=cfg.get("batch_size"))
    result = bench.evolutionary_search(space, config, fitness_fn)
    best = result["best_genotype"]
    doc = {
        "space": space.space_id,
        "best_genotype": json.loads(best.canonical_text()),
        "best_id": best.identity,
        "best_fitness": result["best_fitness"],
        "best_synthetic_accuracy": asp.synthetic_accuracy(space, best),
        "evaluations": result["evaluations"],
        "config": result["config"],
        "trace": result["trace"] if cfg.get("emit_trace", True) else [],
    }
    bench.emit_report(doc, out, kind="json")


def cmd_ablate(cfg: dict, seed: int, out: str) -> None:
    space = space_from_config(cfg)
    window = resolve_window(cfg.get("window"), space, seed)
    name = cfg.get("name")
    if name is None:
        raise ConfigError('ablate config needs a "name"')
    report = bench.run_ablation(name, space, window,
                                n_archs=int(cfg.get("n_archs", 100)),
                                seed=seed)
    bench.emit_report(report, out, kind=cfg.get("report_kind", "json"))


def cmd_theorem(cfg: dict, seed: int, out: str) -> None:
    mode = cfg.get("mode", "fig5")
    if mode == "fig5":
        report = thm.fig5_experiment(
            n_runs=int(cfg.get("n_runs", 1000)),
            m=int(cfg.get("m", 200)),
            d=int(cfg.get("d", 32)),
            r=float(cfg.get("r", 3.0)),
            seed=seed,
        )
        records = report["records"]
        if str(out).endswith(".json"):
            bench.emit_report(report, out, kind="json")
        else:
            thm.write_runs_csv(out, records)
    elif mode == "bound_sweep":
        records = thm.bound_sweep(n_runs=int(cfg.get("n_runs", 10_000)),
                                  seed=seed)
        if not all(rec["holds"] for rec in records):
            raise DataError("bound violated; see emitted records")
        thm.write_runs_csv(out, records)
    else:
        raise ConfigError(f"unknown theorem mode {mode!r}")


COMMANDS = {
    "profile": cmd_profile,
    "eval": cmd_eval,
    "libra": cmd_libra,
    "search": cmd_search,
    "ablate": cmd_ablate,
    "theorem": cmd_theorem,
}


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="zcnas",
        description="training-free architecture scoring laboratory")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("config", help="JSON config file")
        p.add_argument("--seed", type=int, default=None,
                       help="master seed (overrides the config)")
        p.add_argument("--out", required=True, help="output file path")
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config)
        seed = args.seed if args.seed is not None else int(cfg.get("seed", 0))
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        COMMANDS[args.command](cfg, seed, args.out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
