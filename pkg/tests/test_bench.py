"""Harness tests: table IO, evaluation protocol, search, reports."""

import json

import numpy as np
import pytest

from zcnas import archspace as asp
from zcnas import bench
from zcnas import proxies as px
from zcnas.errors import ConfigError, DataError


def write_csv(path, text):
    path.write_text(text)
    return path


# ---------------------------------------------------------------------------
# table IO
# ---------------------------------------------------------------------------


def test_load_minimal_csv(tmp_path):
    p = write_csv(tmp_path / "t.csv",
                  "id,val_acc,zico,params\n"
                  "a,91.0,1.5,100\n"
                  "b,88.5,0.7,120\n"
                  "c,75.2,,90\n")
    table = bench.load_table(p)
    assert table.ids == ("a", "b", "c")
    assert table.proxy_names() == ["params", "zico"]
    assert np.isnan(table.columns["zico"][2])  # empty cell -> excluded later
    np.testing.assert_allclose(table.y, [91.0, 88.5, 75.2])


def test_table_roundtrip_identity(tmp_path):
    p = write_csv(tmp_path / "t.csv",
                  "id,val_acc,zico,params\n"
                  "a,91.0,1.5,100\nb,88.5,0.7,120\n")
    table = bench.load_table(p)
    out_csv = tmp_path / "out.csv"
    bench.save_table(table, out_csv)
    again = bench.load_table(out_csv)
    assert again.ids == table.ids
    for name in table.proxy_names():
        np.testing.assert_array_equal(again.columns[name], table.columns[name])
    out_json = tmp_path / "out.json"
    bench.save_table(table, out_json)
    again = bench.load_table(out_json)
    np.testing.assert_array_equal(again.y, table.y)


def test_malformed_cell_names_row_and_column(tmp_path):
    p = write_csv(tmp_path / "bad.csv",
                  "id,val_acc,zico\na,91.0,1.5\nb,oops,0.2\n")
    with pytest.raises(DataError, match="row 3.*val_acc"):
        bench.load_table(p)


def test_duplicate_ids_rejected(tmp_path):
    p = write_csv(tmp_path / "dup.csv",
                  "id,val_acc\na,91.0\na,88.0\n")
    with pytest.raises(DataError, match="duplicate"):
        bench.load_table(p)


def test_missing_header_rejected(tmp_path):
    p = write_csv(tmp_path / "noheader.csv", "id,accuracy\na,91.0\n")
    with pytest.raises(DataError, match="val_acc"):
        bench.load_table(p)


# ---------------------------------------------------------------------------
# sampling and evaluation
# ---------------------------------------------------------------------------


def test_sample_architectures_distinct_and_full_space_is_enumeration():
    space = asp.SearchSpaceDef("s", ("skip", "conv3x3"), (2, 2), (8,))
    total = asp.space_size(space)
    rng = np.random.default_rng(0)
    sampled = bench.sample_architectures(space, total, rng)
    assert len({g.identity for g in sampled}) == total
    enumerated = {g.identity for g in asp.enumerate_space(space)}
    assert {g.identity for g in sampled} == enumerated
    with pytest.raises(ConfigError):
        bench.sample_architectures(space, total + 1, rng)


def test_evaluate_identity_proxy_scores_one():
    # feeding the synthetic accuracy back as a proxy must give rho = 1
    space = asp.builtin_space("toy-micro-mini")
    rng = np.random.default_rng(1)
    table = bench.build_synthetic_table(space, 40, ("params",),
                                        px.full_window(), seed=3)
    rho, excluded = bench.masked_spearman(table.y.copy(), table.y)
    assert rho == pytest.approx(1.0)
    assert excluded == 0


def test_evaluate_proxies_report_shape():
    space = asp.builtin_space("toy-micro-mini")
    protocol = bench.EvalProtocol(n_archs=12, n_runs=2, batch_size=16, seed=5)
    report = bench.evaluate_proxies(space, protocol, ("params", "swap"),
                                    px.full_window())
    assert set(report["proxies"]) == {"params", "swap"}
    for entry in report["proxies"].values():
        assert len(entry["rho_runs"]) == 2
        assert entry["rho_mean"] is not None
    assert report["protocol"]["batch_size"] == 16


def test_random_noise_proxy_uncorrelated():
    space = asp.builtin_space("toy-micro-mini")
    rng = np.random.default_rng(2)
    table = bench.build_synthetic_table(space, 200, ("params",),
                                        px.full_window(), seed=7)
    noise = rng.standard_normal(table.n)
    rho, _ = bench.masked_spearman(noise, table.y)
    assert abs(rho) < 3.0 / np.sqrt(table.n)


def test_params_proxy_tracks_monotone_accuracy():
    # depth-only space: parameter count and capacity are both strictly
    # increasing in depth, so with noise disabled params must rank perfectly
    space = asp.space_with(
        asp.SearchSpaceDef("mono", ("conv3x3",), (1, 10), (8,),
                           cell_style="chain"),
        accuracy_noise=0.0)
    table = bench.build_synthetic_table(space, asp.space_size(space),
                                        ("params",), px.full_window(), seed=9)
    rho, _ = bench.masked_spearman(table.columns["params"], table.y)
    assert rho > 0.95


# ---------------------------------------------------------------------------
# evolutionary search
# ---------------------------------------------------------------------------


def fitness_from_accuracy(space):
    def fn(genotype, net):
        return asp.synthetic_accuracy(space, genotype), False
    return fn


def test_search_budget_equals_population_returns_best_initial():
    space = asp.builtin_space("toy-micro-mini")
    config = bench.SearchConfig(fitness="synthetic_y", population_size=16,
                                budget=16, seed=3)
    result = bench.evolutionary_search(space, config,
                                       fitness_from_accuracy(space))
    assert result["evaluations"] == 16
    fits = [t["fitness"] for t in result["trace"]]
    assert result["best_fitness"] == max(fits)


def test_search_trace_monotone_and_deterministic():
    space = asp.builtin_space("toy-micro-mini")
    config = bench.SearchConfig(fitness="synthetic_y", population_size=12,
                                budget=60, seed=11)

    def run():
        return bench.evolutionary_search(space, config,
                                         fitness_from_accuracy(space))

    a, b = run(), run()
    assert a["trace"] == b["trace"]
    assert a["best_genotype"] == b["best_genotype"]
    best_so_far = [t["best_so_far"] for t in a["trace"]]
    assert best_so_far == sorted(best_so_far)
    assert a["evaluations"] <= config.budget


def test_search_finds_top_architecture_with_true_fitness():
    space = asp.builtin_space("toy-micro-mini")
    config = bench.SearchConfig(fitness="synthetic_y", population_size=24,
                                budget=180, seed=7)
    result = bench.evolutionary_search(space, config,
                                       fitness_from_accuracy(space))
    accs = sorted(
        (asp.synthetic_accuracy(space, g) for g in asp.enumerate_space(space)),
        reverse=True)
    threshold = accs[int(0.02 * len(accs))]
    assert asp.synthetic_accuracy(space, result["best_genotype"]) >= threshold


def test_degenerate_fitness_ranks_below_finite_and_ties_by_params():
    assert bench.fitness_sort_key(1.0, False, 10) > \
        bench.fitness_sort_key(float("inf"), True, 5)
    assert bench.fitness_sort_key(float("nan"), True, 5) > \
        bench.fitness_sort_key(float("nan"), True, 9)


def test_budget_must_cover_population():
    with pytest.raises(ConfigError):
        bench.SearchConfig(population_size=32, budget=16)


# ---------------------------------------------------------------------------
# ablations and reports
# ---------------------------------------------------------------------------


def test_run_ablation_no_mu_grid_has_eight_rows():
    space = asp.builtin_space("toy-micro-mini")
    report = bench.run_ablation("no_mu", space, px.full_window(),
                                n_archs=16, seed=1)
    assert len(report["grid"]) == 8
    baseline = [row for row in report["grid"]
                if not row["no_mu"] and not row["window"] and not row["psi"]]
    assert len(baseline) == 1  # the mean/std all-layer row is present


def test_run_ablation_percentile_sweep_rows():
    space = asp.builtin_space("toy-micro-mini")
    report = bench.run_ablation("percentile_sweep", space, px.full_window(),
                                n_archs=12, seed=2)
    labels = [row["percentile"] for row in report["sweep"]]
    assert labels == list(range(1, 11)) + ["ALL"]


def test_run_ablation_batch_sweep_grid():
    space = asp.builtin_space("toy-micro-mini")
    report = bench.run_ablation("batch_sweep", space, px.full_window(),
                                n_archs=10, seed=3)
    assert [row["batch_size"] for row in report["sweep"]] == [8, 16, 32, 64]


def test_run_ablation_unknown_name():
    with pytest.raises(ConfigError):
        bench.run_ablation("nope", asp.builtin_space("toy-micro-mini"),
                           px.full_window())


def test_emit_report_kinds(tmp_path):
    results = [{"a": 1, "b": 2.5}, {"a": 3, "c": "x"}]
    jp = tmp_path / "r.json"
    bench.emit_report(results, jp, "json")
    assert json.loads(jp.read_text()) == results
    cp = tmp_path / "r.csv"
    bench.emit_report(results, cp, "csv")
    lines = cp.read_text().strip().splitlines()
    assert lines[0] == "a,b,c"
    assert len(lines) == 3
    pp = tmp_path / "r.plot.json"
    bench.emit_report([{"name": "curve", "x": [1, 2], "y": [3.0, 4.0]}],
                      pp, "plotdata")
    doc = json.loads(pp.read_text())
    assert doc["kind"] == "plotdata"
    assert doc["series"][0]["name"] == "curve"


def test_emit_report_empty_documents(tmp_path):
    jp = tmp_path / "empty.json"
    bench.emit_report([], jp, "json")
    assert json.loads(jp.read_text()) == []
    cp = tmp_path / "empty.csv"
    bench.emit_report([], cp, "csv")
    assert cp.read_text() == "\r\n" or cp.read_text() == "\n" or cp.read_text() == ""
