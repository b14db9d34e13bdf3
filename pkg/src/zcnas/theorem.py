"""One-step gradient descent on linear regressors: closed-form per-sample
gradients, the loss upper bound they imply, and the correlation experiment
between squared mean gradients and realized loss.

For unit-norm inputs the residual identity y_i = (a - g(x_i))^T x_i turns
the post-update loss into a Cauchy-Schwarz bound built from per-coordinate
gradient means and deviations (1/M variance convention):

    loss(a - eta * sum_i g_i) <= (M/2) * sum_j [sigma_j^2 + ((M*eta - 1) * mu_j)^2]

At eta = 1/M the mean term vanishes and only deviations remain.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .archspace import init_weight

FIG5_STRATEGIES = ("KaimingUniform", "KaimingNormal", "XavierUniform", "XavierNormal")
NORM_TOL = 1e-12


@dataclass(frozen=True)
class RegressionSet:
    """M unit-norm inputs with bounded labels."""

    x: np.ndarray  # (M, d), rows L2-normalized
    y: np.ndarray  # (M,), |y| <= r
    r: float

    def __post_init__(self):
        x, y = np.asarray(self.x), np.asarray(self.y)
        if x.ndim != 2 or x.shape[0] < 2:
            raise ValueError("need at least two samples (M > 1)")
        norms = np.linalg.norm(x, axis=1)
        if np.any(np.abs(norms - 1.0) > NORM_TOL):
            raise ValueError("every input must be L2-normalized to 1")
        if y.shape != (x.shape[0],):
            raise ValueError("labels misaligned with inputs")
        if np.any(np.abs(y) > self.r + 1e-9):
            raise ValueError(f"labels exceed the stated bound {self.r}")

    @property
    def m(self) -> int:
        return self.x.shape[0]

    @property
    def d(self) -> int:
        return self.x.shape[1]


def make_regression_set(m: int, d: int, r: float = 3.0,
                        seed: int = 0) -> RegressionSet:
    """Gaussian directions normalized to the unit sphere, labels uniform
    in [-r, r]; the bound is distribution-free so this stands in for any
    real dataset."""
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((m, d))
    x /= np.linalg.norm(x, axis=1, keepdims=True)
    y = rng.uniform(-r, r, size=m)
    return RegressionSet(x, y, r)


def per_sample_grads(rset: RegressionSet, a: np.ndarray) -> np.ndarray:
    """g(x_i) = x_i x_i^T a - y_i x_i, stacked as (M, d)."""
    residuals = rset.x @ a - rset.y
    return residuals[:, None] * rset.x


def total_loss(rset: RegressionSet, a: np.ndarray) -> float:
    residuals = rset.x @ a - rset.y
    return float(0.5 * (residuals ** 2).sum())


def bound(mu: np.ndarray, sigma: np.ndarray, m: int, eta: float) -> float:
    """(M/2) * sum_j [sigma_j^2 + ((M*eta - 1) * mu_j)^2]."""
    mu = np.asarray(mu, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    return float(0.5 * m * np.sum(sigma ** 2 + ((m * eta - 1.0) * mu) ** 2))


@dataclass
class TheoremRun:
    a0: np.ndarray
    eta: float
    grads: np.ndarray        # (M, d) per-sample gradients at a0
    mu: np.ndarray           # per-coordinate mean
    sigma: np.ndarray        # per-coordinate deviation, 1/M convention
    a_updated: np.ndarray
    loss: float
    bound_value: float

    @property
    def holds(self) -> bool:
        return self.loss <= self.bound_value + 1e-9


def run_regressor(rset: RegressionSet, a0: np.ndarray, eta: float) -> TheoremRun:
    """One aggregated update a0 - eta * sum_i g(x_i) and its bound check."""
    a0 = np.asarray(a0, dtype=np.float64)
    if a0.shape != (rset.d,):
        raise ValueError("initial parameter vector misaligned with inputs")
    grads = per_sample_grads(rset, a0)
    mu = grads.mean(axis=0)
    sigma = np.sqrt(((grads - mu) ** 2).mean(axis=0))
    a_updated = a0 - eta * grads.sum(axis=0)
    loss = total_loss(rset, a_updated)
    return TheoremRun(a0=a0, eta=eta, grads=grads, mu=mu, sigma=sigma,
                      a_updated=a_updated, loss=loss,
                      bound_value=bound(mu, sigma, rset.m, eta))


def draw_init(d: int, kind: str, rng: np.random.Generator) -> np.ndarray:
    """Initial weight vector drawn as a (1, d) linear map under the named
    strategy."""
    return init_weight(np.zeros((1, d)), kind, rng)[0]


def bound_sweep(n_runs: int = 10_000, seed: int = 0,
                m_range=(2, 64), d_range=(1, 64)) -> list[dict]:
    """Random (set, init, eta) draws with eta log-uniform in (0, 3/M];
    one record per run including whether the bound held."""
    rng = np.random.default_rng(seed)
    records = []
    for run_id in range(n_runs):
        m = int(rng.integers(m_range[0], m_range[1] + 1))
        d = int(rng.integers(d_range[0], d_range[1] + 1))
        rset = make_regression_set(m, d, r=3.0, seed=int(rng.integers(2 ** 32)))
        kind = FIG5_STRATEGIES[run_id % len(FIG5_STRATEGIES)]
        a0 = draw_init(d, kind, rng)
        eta = (3.0 / m) * 10 ** rng.uniform(-3, 0)  # log-uniform in (0, 3/M]
        run = run_regressor(rset, a0, eta)
        records.append({
            "run_id": run_id,
            "eta": eta,
            "m": m,
            "d": d,
            "sum_mu_sq": float((run.mu ** 2).sum()),
            "sum_sigma_sq": float((run.sigma ** 2).sum()),
            "loss": run.loss,
            "bound": run.bound_value,
            "init_strategy": kind,
            "holds": run.holds,
        })
    return records


def fig5_experiment(n_runs: int = 1000, m: int = 200, d: int = 32,
                    r: float = 3.0, seed: int = 0,
                    eta_choices=None) -> dict:
    """Correlation between the squared-mean-gradient sum and the realized
    loss over repeated random initializations on one fixed dataset.

    eta defaults to the three regimes {1/(10M), 1, 3/M}; every run draws
    one of the four named init strategies.
    """
    if eta_choices is None:
        eta_choices = {"low": 1.0 / (10 * m), "one": 1.0, "high": 3.0 / m}
    rset = make_regression_set(m, d, r=r, seed=seed)
    rng = np.random.default_rng(seed + 1)
    records = []
    for run_id in range(n_runs):
        kind = FIG5_STRATEGIES[int(rng.integers(len(FIG5_STRATEGIES)))]
        a0 = draw_init(d, kind, rng)
        for label, eta in eta_choices.items():
            run = run_regressor(rset, a0, eta)
            records.append({
                "run_id": run_id,
                "eta_label": label,
                "eta": eta,
                "sum_mu_sq": float((run.mu ** 2).sum()),
                "sum_sigma_sq": float((run.sigma ** 2).sum()),
                "loss": run.loss,
                "bound": run.bound_value,
                "init_strategy": kind,
            })
    correlations = {}
    for label in eta_choices:
        xs = np.array([r_["sum_mu_sq"] for r_ in records if r_["eta_label"] == label])
        ys = np.array([r_["loss"] for r_ in records if r_["eta_label"] == label])
        xm, ym = xs - xs.mean(), ys - ys.mean()
        denom = np.sqrt((xm * xm).sum() * (ym * ym).sum())
        correlations[label] = float((xm * ym).sum() / denom) if denom > 0 else 0.0
    return {"records": records, "pearson_by_eta": correlations,
            "eta_choices": {k: float(v) for k, v in eta_choices.items()},
            "m": m, "d": d, "n_runs": n_runs}


CSV_FIELDS = ("run_id", "eta", "sum_mu_sq", "sum_sigma_sq", "loss", "bound",
              "init_strategy")


def write_runs_csv(path, records) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_FIELDS, extrasaction="ignore")
        writer.writeheader()
        for rec in records:
            writer.writerow({k: rec.get(k) for k in CSV_FIELDS})
