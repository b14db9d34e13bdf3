"""Shared test fixtures: constructed score tables with a known optimal
ensemble selection."""

import numpy as np

from zcnas.libra import ProxyTable, table_bias, table_information_gain
from zcnas.stats import rankdata


def constructed_libra_table(seed: int, n: int = 64):
    """Score table whose optimal (z1, z2, z3) is known by construction.

    m_best tracks accuracy most closely; m_dup is a strictly monotone
    transform of m_best (identical ranks, so zero information gain);
    m_match and m_skew sit inside the correlation band but differ in how
    close their parameter-count bias is to the bias of accuracy itself.
    Constructions are resampled until every selection margin is
    unambiguous, so the expected triple is exact, not probabilistic.
    """
    rng = np.random.default_rng(seed)
    for _attempt in range(64):
        y = rng.normal(size=n)
        y_std = (y - y.mean()) / y.std()
        # parameter count moderately rank-aligned with accuracy
        params = np.exp(0.8 * y_std + 0.9 * rng.normal(size=n))
        p_std = (params - params.mean()) / params.std()

        m_best = y + 0.30 * rng.normal(size=n)
        m_dup = np.exp(0.6 * m_best)  # same ranks as m_best
        # small params component keeps m_match's bias near the bias of y;
        # m_skew leans on params hard enough to push its bias well away
        m_match = y + 0.12 * p_std + 0.40 * rng.normal(size=n)
        m_skew = y + 0.50 * p_std + 0.25 * rng.normal(size=n)
        noise_cols = {f"noise{i}": rng.normal(size=n) for i in range(4)}

        table = ProxyTable(
            benchmark_id=f"constructed{seed}",
            ids=tuple(f"a{i:03d}" for i in range(n)),
            y=y,
            columns={"m_best": m_best, "m_dup": m_dup, "m_match": m_match,
                     "m_skew": m_skew, "params": params, **noise_cols},
        )

        # verify the intended selection margins with the oracle pieces
        def rho(col):
            ra, rb = rankdata(table.columns[col]), rankdata(y)
            return float(np.corrcoef(ra, rb)[0, 1])

        rhos = {c: rho(c) for c in table.columns}
        band = {c for c in rhos
                if c not in ("m_best",) and rhos["m_best"] - 0.1 < rhos[c] <= rhos["m_best"]}
        if rhos["m_best"] < max(r for c, r in rhos.items() if c != "m_best"):
            continue
        if band != {"m_dup", "m_match", "m_skew"}:
            continue
        igs = {c: table_information_gain(table, "m_best", c) for c in band}
        others = [igs["m_match"], igs["m_skew"]]
        if not (igs["m_dup"] == 0.0 and min(others) > 0.02):
            continue
        b_val = table_bias(table, y)
        gaps = {c: abs(b_val - table_bias(table, table.columns[c]))
                for c in ("m_match", "m_skew")}
        if gaps["m_match"] + 0.05 > gaps["m_skew"]:
            continue
        expected = ("m_best", "m_dup", "m_match")
        return table, expected
    raise AssertionError(f"could not construct an unambiguous table for seed {seed}")
