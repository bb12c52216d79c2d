"""Point and probabilistic forecast verification.

Arrays follow a common layout: ``actual`` is ``[q, N]`` (any shape works
for cell-wise scores) and ensembles carry the member axis first.
"""
import csv
import json
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata, studentized_range

from . import kernels

POINT_METRICS = ("smape", "mae", "rmse", "mase", "rmsse")


def _nanmean_or_nan(values):
    values = np.asarray(values, dtype=np.float64)
    ok = np.isfinite(values)
    return float(values[ok].mean()) if ok.any() else float("nan")


def _as_2d(x):
    x = np.asarray(x, dtype=np.float64)
    return x[:, None] if x.ndim == 1 else x


def smape_terms(actual, predicted):
    actual = np.asarray(actual, dtype=np.float64)
    predicted = np.asarray(predicted, dtype=np.float64)
    den = (np.abs(actual) + np.abs(predicted)) / 2.0
    num = np.abs(predicted - actual)
    # y = yhat = 0 contributes nothing
    return 100.0 * np.divide(num, den, out=np.zeros_like(num), where=den > 0)


def point_metrics(actual, predicted, history):
    """SMAPE (%), MAE, RMSE, MASE and RMSSE, computed per node then averaged.

    Scaled metrics use the one-step naive forecast errors of ``history``; a
    node whose naive errors are all zero contributes a missing value, and
    the aggregate is NaN when every node is missing.
    """
    y = _as_2d(actual)
    yhat = _as_2d(predicted)
    hist = _as_2d(history)
    if y.shape != yhat.shape:
        raise ValueError(f"actual {y.shape} and predicted {yhat.shape} differ")
    if hist.shape[0] < 2:
        raise ValueError("history needs at least 2 steps for scaled metrics")
    if hist.shape[1] != y.shape[1]:
        raise ValueError(f"history has {hist.shape[1]} nodes, forecasts have {y.shape[1]}")
    err = yhat - y
    mae = np.abs(err).mean(axis=0)
    mse = (err**2).mean(axis=0)
    diffs = np.diff(hist, axis=0)
    naive_abs = np.abs(diffs).mean(axis=0)
    naive_sq = (diffs**2).mean(axis=0)
    mase = np.divide(mae, naive_abs, out=np.full_like(mae, np.nan), where=naive_abs > 0)
    rmsse = np.sqrt(np.divide(mse, naive_sq, out=np.full_like(mse, np.nan), where=naive_sq > 0))
    per_node = {
        "smape": smape_terms(y, yhat).mean(axis=0),
        "mae": mae,
        "rmse": np.sqrt(mse),
        "mase": mase,
        "rmsse": rmsse,
    }
    summary = {k: _nanmean_or_nan(v) for k, v in per_node.items()}
    return summary, per_node


def _check_tau(tau):
    if not 0.0 < tau < 1.0:
        raise ValueError("tau must lie in (0, 1)")


def pinball_terms(actual, quantile_forecast, tau):
    _check_tau(tau)
    e = np.asarray(actual, dtype=np.float64) - np.asarray(quantile_forecast, dtype=np.float64)
    return np.maximum(tau * e, (tau - 1.0) * e)


def pinball(actual, quantile_forecast, tau):
    """Mean quantile (pinball) loss; every term is nonnegative."""
    return float(pinball_terms(actual, quantile_forecast, tau).mean())


def rho_risk(actual, quantile_forecast, tau):
    """``2 * sum(pinball terms) / sum(actual)``; NaN when the actuals sum to zero."""
    total = float(np.sum(actual))
    if total == 0.0:
        return float("nan")
    return 2.0 * float(pinball_terms(actual, quantile_forecast, tau).sum()) / total


def crps(members, actual):
    """Cell-wise ensemble CRPS; ``members`` is ``[M, ...]`` and ``actual`` the trailing shape."""
    members = np.asarray(members, dtype=np.float64)
    actual = np.asarray(actual, dtype=np.float64)
    if members.shape[1:] != actual.shape:
        raise ValueError(f"members {members.shape} do not match actual {actual.shape}")
    if members.shape[0] < 1:
        raise ValueError("CRPS needs at least one member")
    m = members.shape[0]
    flat = np.ascontiguousarray(members.reshape(m, -1))
    out = kernels.crps_ensemble(flat, np.ascontiguousarray(actual.reshape(-1)))
    return np.asarray(out).reshape(actual.shape)


def crps_ensemble(actual, members):
    """CRPS of a single scalar observation against an ensemble."""
    members = np.asarray(members, dtype=np.float64).reshape(-1, 1)
    return float(crps(members, np.array([actual], dtype=np.float64))[0])


def winkler_terms(actual, lower, upper, alpha):
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie in (0, 1)")
    y = np.asarray(actual, dtype=np.float64)
    lo = np.asarray(lower, dtype=np.float64)
    hi = np.asarray(upper, dtype=np.float64)
    if np.any(lo > hi):
        raise ValueError("inverted interval: lower bound exceeds upper bound")
    width = hi - lo
    below = np.where(y < lo, (2.0 / alpha) * (lo - y), 0.0)
    above = np.where(y > hi, (2.0 / alpha) * (y - hi), 0.0)
    return width + below + above


def winkler(actual, lower, upper, alpha):
    return float(winkler_terms(actual, lower, upper, alpha).mean())


def empirical_coverage(actual, lower, upper):
    y = np.asarray(actual, dtype=np.float64)
    return float(np.mean((np.asarray(lower) <= y) & (y <= np.asarray(upper))))


@dataclass
class PitSample:
    pit_values: np.ndarray
    m: int


def pit(actual, members):
    """Rank-based PIT: the share of members strictly below the observation, over ``M + 1``."""
    members = np.asarray(members, dtype=np.float64)
    y = np.asarray(actual, dtype=np.float64)
    if members.shape[1:] != y.shape:
        raise ValueError(f"members {members.shape} do not match actual {y.shape}")
    m = members.shape[0]
    counts = np.sum(members < y[None], axis=0)
    return PitSample(counts / (m + 1.0), m)


def pit_qq(pits):
    """Pairs ``((i - 0.5) / n, sorted_pit_i)`` for a uniform Q-Q plot."""
    values = pits.pit_values if isinstance(pits, PitSample) else pits
    v = np.sort(np.asarray(values, dtype=np.float64).reshape(-1))
    n = v.size
    theo = (np.arange(1, n + 1) - 0.5) / n
    return np.column_stack([theo, v])


def nemenyi_q(k, alpha=0.05):
    """Two-sided Nemenyi constant: studentized range quantile over sqrt(2)."""
    return float(studentized_range.ppf(1.0 - alpha, k, np.inf) / np.sqrt(2.0))


@dataclass
class McbResult:
    mean_ranks: np.ndarray
    critical_distance: float
    best: int
    overlaps_best: np.ndarray
    alpha: float
    labels: list = field(default_factory=list)

    @property
    def significantly_worse(self):
        return ~self.overlaps_best


def mcb(scores, alpha=0.05, labels=None):
    """Multiple comparisons with the best on a ``[models, cases]`` score table (lower is better).

    Ranks are averaged on ties. A model whose ``mean_rank +- CD/2`` interval
    overlaps the best model's interval is not significantly different from it.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 2 or scores.shape[0] < 2 or scores.shape[1] < 2:
        raise ValueError("MCB needs at least 2 models and 2 cases")
    k, n = scores.shape
    ranks = np.apply_along_axis(rankdata, 0, scores)
    mean_ranks = ranks.mean(axis=1)
    cd = nemenyi_q(k, alpha) * np.sqrt(k * (k + 1) / (12.0 * n))
    best = int(np.argmin(mean_ranks))
    overlaps = np.abs(mean_ranks - mean_ranks[best]) <= cd
    return McbResult(mean_ranks, float(cd), best, overlaps, alpha, list(labels) if labels is not None else [])


@dataclass
class MetricReport:
    values: dict
    per_node: dict = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    def to_dict(self):
        def clean(v):
            if isinstance(v, np.ndarray):
                return [clean(x) for x in v.tolist()]
            if isinstance(v, (float, np.floating)):
                return None if not np.isfinite(v) else float(v)
            if isinstance(v, dict):
                return {k: clean(x) for k, x in v.items()}
            if isinstance(v, (list, tuple)):
                return [clean(x) for x in v]
            return v

        return {"values": clean(self.values), "per_node": clean(self.per_node), "metadata": clean(self.metadata)}

    def to_json(self, path=None):
        text = json.dumps(self.to_dict(), indent=2)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text)
        return text


PINBALL_TAUS = (0.8, 0.95)
RHO_TAUS = (0.5, 0.9)


def evaluate_ensemble(trajectories, actual, history, alpha=0.05, pinball_taus=PINBALL_TAUS, rho_taus=RHO_TAUS):
    """Full metric set for one ensemble ``[M, q, N]`` against ``actual`` ``[q, N]``.

    The point forecast is the ensemble median; quantile forecasts and the
    ``1 - alpha`` interval come from the ensemble's empirical quantiles.
    """
    traj = np.asarray(trajectories, dtype=np.float64)
    if traj.ndim == 4 and traj.shape[-1] == 1:
        traj = traj[..., 0]
    y = np.asarray(actual, dtype=np.float64)
    if y.ndim == 3 and y.shape[-1] == 1:
        y = y[..., 0]
    if traj.shape[1:] != y.shape:
        raise ValueError(f"trajectories {traj.shape} do not match actual {y.shape}")
    qs = np.quantile(traj, [0.5, alpha / 2.0, 1.0 - alpha / 2.0], axis=0, method="hazen")
    median, lo, hi = qs
    values, per_node = point_metrics(y, median, history)
    for tau in pinball_taus:
        qf = np.quantile(traj, tau, axis=0, method="hazen")
        values[f"pinball_{tau:g}"] = pinball(y, qf, tau)
        per_node[f"pinball_{tau:g}"] = pinball_terms(y, qf, tau).mean(axis=0)
    for tau in rho_taus:
        qf = np.quantile(traj, tau, axis=0, method="hazen")
        values[f"rho_risk_{tau:g}"] = rho_risk(y, qf, tau)
    cells = crps(traj, y)
    values["crps"] = float(cells.mean())
    per_node["crps"] = cells.mean(axis=0)
    values["winkler"] = winkler(y, lo, hi, alpha)
    per_node["winkler"] = winkler_terms(y, lo, hi, alpha).mean(axis=0)
    values["coverage"] = empirical_coverage(y, lo, hi)
    return MetricReport(values, per_node, {"q": int(y.shape[0]), "M": int(traj.shape[0]), "alpha": alpha})


def summarize_runs(reports):
    """Mean and standard deviation of each metric across repeated ensembles."""
    keys = list(reports[0].values)
    table = {k: np.array([r.values[k] for r in reports], dtype=np.float64) for k in keys}
    mean = {k: _nanmean_or_nan(v) for k, v in table.items()}
    std = {}
    for k, v in table.items():
        ok = v[np.isfinite(v)]
        std[k] = float(ok.std()) if ok.size else float("nan")
    meta = dict(reports[0].metadata)
    meta["runs"] = len(reports)
    return MetricReport({"mean": mean, "std": std}, {}, meta)


def write_runs_csv(path, reports):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["run", "metric", "value"])
        for i, r in enumerate(reports):
            for k, v in r.values.items():
                w.writerow([i, k, repr(float(v))])
