"""Closed-loop simulation of engression processes and stability diagnostics.

A one-step (p = q = 1) model is run autonomously: its forecast is fed back
as the next input while the LSTM state is carried over. Stationarity of
the generated node series is checked with the KPSS test; contraction is
measured by synchronously coupling two chains that share every noise draw.
"""
import csv
from dataclasses import dataclass

import numpy as np
from scipy.special import logit

from . import kernels
from . import nncore as nn
from .models import EngressionModel, ModelConfig, NoiseConfig

KPSS_TABLE = ((0.347, 0.10), (0.463, 0.05), (0.574, 0.025), (0.739, 0.01))
MERGE_TOL = 1e-6


@dataclass
class ChainConfig:
    kind: str = "GCEN"
    n_nodes: int = None
    hidden_dim: int = 16
    T: int = 500
    burn_in: int = 50
    trials: int = 200
    seed: int = 0
    forget_bound: float = 0.9
    hidden_noise_sigma: float = 0.0
    edge_prob: float = 0.2
    node_range: tuple = (10, 60)

    def __post_init__(self):
        self.kind = self.kind.upper()
        if self.T <= self.burn_in:
            raise ValueError("T must exceed burn_in")
        if self.burn_in < 0:
            raise ValueError("burn_in must be >= 0")
        if self.trials < 1:
            raise ValueError("trials must be >= 1")
        if not 0.5 < self.forget_bound < 1.0:
            raise ValueError("forget_bound must lie in (0.5, 1)")


@dataclass
class KpssResult:
    statistic: float
    p_value: float
    reject: bool
    lags: int


@dataclass
class ChainRun:
    series: np.ndarray
    explosive: bool
    n_nodes: int
    max_abs_output: float


@dataclass
class CouplingTrial:
    slope: float
    intercept: float
    window: int
    merged: bool
    skipped: bool = False
    note: str = ""


@dataclass
class CouplingResult:
    trials: list
    mean_slope: float
    negative_share: float
    merged_share: float


@dataclass
class TrialRecord:
    trial: int
    kind: str
    hidden_dim: int
    n_nodes: int
    kpss_pass_rate: float
    coupling_slope: float = float("nan")
    merged: bool = False


def kpss_lags(n):
    return int(np.floor(12.0 * (n / 100.0) ** 0.25))


def kpss_p_value(stat):
    """Log-linear interpolation of the level-KPSS table, clamped to [0.01, 0.10]."""
    crit = [c for c, _ in KPSS_TABLE]
    logp = np.log([p for _, p in KPSS_TABLE])
    return np.exp(np.interp(stat, crit, logp))


def kpss_batch(series, lags=None):
    """KPSS statistics and p-values for each row of ``series`` ``[S, T]``."""
    series = np.atleast_2d(np.asarray(series, dtype=np.float64))
    n = series.shape[1]
    if n < 20:
        raise ValueError(f"KPSS needs at least 20 observations, got {n}")
    lags = kpss_lags(n) if lags is None else int(lags)
    stats = np.asarray(kernels.kpss_statistics(np.ascontiguousarray(series), lags))
    # constant rows: zero long-run variance, stationary by convention
    stats = np.where(np.ptp(series, axis=1) == 0.0, 0.0, stats)
    return stats, kpss_p_value(stats), lags


def kpss(series, lags=None, alpha=0.05):
    stats, pvals, lags = kpss_batch(np.asarray(series, dtype=np.float64)[None], lags)
    return KpssResult(float(stats[0]), float(pvals[0]), bool(pvals[0] <= alpha), lags)


def random_graph(n, rng, edge_prob=0.2):
    """Symmetric 0/1 adjacency; a ring backbone keeps every node connected."""
    upper = np.triu(rng.random((n, n)) < edge_prob, k=1)
    a = (upper | upper.T).astype(np.float64)
    idx = np.arange(n)
    a[idx, (idx + 1) % n] = a[(idx + 1) % n, idx] = 1.0
    np.fill_diagonal(a, 0.0)
    return a


def random_weights(n, rng):
    """Random row-stochastic matrix with a zero diagonal."""
    w = rng.random((n, n))
    np.fill_diagonal(w, 0.0)
    return w / w.sum(axis=1, keepdims=True)


def enforce_forget_contraction(lstm, bound):
    """Rescale the forget-gate block so ``sigmoid(|W_fh|_inf + |W_fy|_inf + |b_f|_inf) <= bound``."""
    w_fh, w_fy, b_f = lstm.gate("f")
    total = np.abs(w_fh).sum(axis=1).max() + np.abs(w_fy).sum(axis=1).max() + np.abs(b_f).max()
    limit = float(logit(bound))
    if total > limit:
        h = lstm.hidden
        scale = limit / total
        lstm.w_x.data[:, :h] *= scale
        lstm.w_h.data[:, :h] *= scale
        lstm.b.data[:h] *= scale
    return forget_norm(lstm)


def output_bound(model):
    """Bound on ``|y|`` implied by ``|h| <= 1``: largest absolute column sum of the head plus its bias."""
    w = model.params["head.weight"].data
    b = model.params["head.bias"].data
    return float(np.max(np.abs(w).sum(axis=0) + np.abs(b)))


def forget_norm(lstm):
    w_fh, w_fy, b_f = lstm.gate("f")
    total = np.abs(w_fh).sum(axis=1).max() + np.abs(w_fy).sum(axis=1).max() + np.abs(b_f).max()
    return float(1.0 / (1.0 + np.exp(-total)))


def chain_model(kind, n, hidden, rng, forget_bound=0.9, edge_prob=0.2):
    """Random one-step model satisfying the forget-gate contraction condition."""
    cfg = ModelConfig(
        kind=kind,
        p=1,
        q=1,
        n_nodes=n,
        n_features=1,
        embed_dim=1,
        hidden_dim=hidden,
        gcn_hidden=hidden,
        max_lag=1,
        seed=int(rng.integers(0, 2**31 - 1)),
        noise=NoiseConfig(),
    )
    if kind == "GCEN":
        model = EngressionModel(cfg, adjacency=random_graph(n, rng, edge_prob))
    elif kind == "STEN":
        w = random_weights(n, rng)
        model = EngressionModel(cfg, weight_powers=[np.eye(n), w])
    else:
        model = EngressionModel(cfg)
    enforce_forget_contraction(model.lstm_layers()[0], forget_bound)
    return model


class Chain:
    """Closed-loop transition ``S_t = F(S_{t-1}, eta_t)`` for one or more parallel copies."""

    def __init__(self, model, copies=1, transition=None, hidden_noise_sigma=0.0):
        self.model = model
        self.copies = copies
        self.n = model.config.n_nodes
        self.hidden = model.config.hidden_dim
        self.lstm = model.lstm_layers()[0]
        self.head_w = model.params["head.weight"].data
        self.head_b = model.params["head.bias"].data
        self.transition = transition
        self.hidden_noise_sigma = hidden_noise_sigma

    def zero_state(self):
        c = self.copies
        return np.zeros((c, self.n)), np.zeros((c * self.n, self.hidden)), np.zeros((c * self.n, self.hidden))

    def step(self, y, h, c, eta, rng=None):
        if self.transition is not None:
            return self.transition(y, h, c, eta)
        with nn.no_grad():
            z = self.model.spatial(y[:, None, :, None]).data[:, 0]
        x = (z + eta).reshape(self.copies * self.n, -1)
        if self.hidden_noise_sigma > 0.0:
            h = h + self.hidden_noise_sigma * rng.standard_normal(h.shape)
            c = c + self.hidden_noise_sigma * rng.standard_normal(c.shape)
        h, c, _ = kernels.lstm_cell_forward(x, h, c, self.lstm.w_x.data, self.lstm.w_h.data, self.lstm.b.data)
        y = (h @ self.head_w + self.head_b).reshape(self.copies, self.n)
        return y, h, c

    def noise_shape(self):
        return (self.n, self.model.config.noise_dim)


def run_chain(model, steps, burn_in, rng, transition=None, hidden_noise_sigma=0.0):
    """Simulate ``burn_in + steps`` transitions from the zero state; returns the last ``steps`` outputs."""
    chain = Chain(model, 1, transition, hidden_noise_sigma)
    y, h, c = chain.zero_state()
    # a spawned child keeps the input-noise stream unchanged when the switch is on
    hidden_rng = rng.spawn(1)[0] if hidden_noise_sigma > 0.0 else None
    out = np.empty((steps, chain.n))
    peak = 0.0
    with np.errstate(over="ignore", invalid="ignore"):
        for t in range(burn_in + steps):
            eta = rng.standard_normal(chain.noise_shape())[None]
            y, h, c = chain.step(y, h, c, eta, hidden_rng)
            if not (np.all(np.isfinite(y)) and np.all(np.isfinite(h)) and np.all(np.isfinite(c))):
                out[max(0, t - burn_in) :] = np.nan
                return ChainRun(out, True, chain.n, float("inf"))
            peak = max(peak, float(np.max(np.abs(y))))
            if t >= burn_in:
                out[t - burn_in] = y[0]
    return ChainRun(out, False, chain.n, peak)


def couple(model, steps, rng, init=None, transition=None, tol=MERGE_TOL):
    """Two chains from ``S_0 = 0`` and a uniform(-1, 1) ``S_0'``, driven by shared noise."""
    chain = Chain(model, 2, transition)
    y, h, c = chain.zero_state()
    n, hid = chain.n, chain.hidden
    if init is None:
        y[1] = rng.uniform(-1.0, 1.0, n)
        h[n:] = rng.uniform(-1.0, 1.0, (n, hid))
        c[n:] = rng.uniform(-1.0, 1.0, (n, hid))
    else:
        y[1], h[n:], c[n:] = init

    def distance(y, h, c):
        return (
            np.linalg.norm(y[0] - y[1])
            + np.linalg.norm(h[:n] - h[n:])
            + np.linalg.norm(c[:n] - c[n:])
        )

    if distance(y, h, c) == 0.0:
        return CouplingTrial(float("nan"), float("nan"), 0, True, True, "chains merged at t=0")
    d = np.empty(steps)
    for t in range(steps):
        eta = rng.standard_normal(chain.noise_shape())
        y, h, c = chain.step(y, h, c, np.stack([eta, eta]), rng)
        d[t] = distance(y, h, c)
    return fit_contraction(d, tol)


def fit_contraction(d, tol=MERGE_TOL):
    """OLS fit of ``ln d_t = gamma t + kappa`` over the steps before ``d_t`` first drops to ``tol``."""
    d = np.asarray(d, dtype=np.float64)
    below = np.flatnonzero(d <= tol)
    merged = below.size > 0
    end = int(below[0]) if merged else d.size
    t = np.arange(1, end + 1, dtype=np.float64)
    if end < 2:
        return CouplingTrial(float("nan"), float("nan"), end, merged, False, "fit window shorter than 2 steps")
    slope, intercept = np.polyfit(t, np.log(d[:end]), 1)
    return CouplingTrial(float(slope), float(intercept), end, merged)


def _trial_rngs(seed, trials):
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(trials)]


def _trial_model(cfg, rng):
    lo, hi = cfg.node_range
    n = cfg.n_nodes if cfg.n_nodes is not None else int(rng.integers(lo, hi + 1))
    return chain_model(cfg.kind, n, cfg.hidden_dim, rng, cfg.forget_bound, cfg.edge_prob)


def simulate(cfg, transition=None, with_coupling=True):
    """Run every trial; returns per-trial records plus the raw KPSS p-values."""
    records, pvalues, runs, coupling_trials = [], [], [], []
    steps = cfg.T - cfg.burn_in
    for k, rng in enumerate(_trial_rngs(cfg.seed, cfg.trials)):
        model = _trial_model(cfg, rng)
        run = run_chain(model, steps, cfg.burn_in, rng, transition, cfg.hidden_noise_sigma)
        runs.append(run)
        if run.explosive:
            p = np.zeros(run.n_nodes)
        else:
            _, p, _ = kpss_batch(run.series.T)
        pvalues.append(p)
        rec = TrialRecord(k, cfg.kind, cfg.hidden_dim, run.n_nodes, float(np.mean(p > 0.05)))
        if with_coupling:
            ct = couple(model, cfg.T, rng, transition=transition)
            coupling_trials.append(ct)
            rec.coupling_slope = ct.slope
            rec.merged = ct.merged
        records.append(rec)
    return records, pvalues, runs, coupling_trials


def pass_rate(cfg, transition=None):
    """Share of node series (over all trials) whose KPSS p-value exceeds 0.05."""
    _, pvalues, _, _ = simulate(cfg, transition, with_coupling=False)
    allp = np.concatenate(pvalues)
    return float(np.mean(allp > 0.05))


def summarize_coupling(trials):
    used = [t for t in trials if not t.skipped and np.isfinite(t.slope)]
    if not used:
        return CouplingResult(trials, float("nan"), 0.0, 0.0)
    slopes = np.array([t.slope for t in used])
    return CouplingResult(
        trials,
        float(slopes.mean()),
        float(np.mean(slopes < 0.0)),
        float(np.mean([t.merged for t in trials if not t.skipped])),
    )


def coupling(cfg, transition=None):
    trials = [couple(_trial_model(cfg, rng), cfg.T, rng, transition=transition) for rng in _trial_rngs(cfg.seed, cfg.trials)]
    return summarize_coupling(trials)


def write_results_csv(path, records):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["trial", "kind", "hidden_dim", "n_nodes", "kpss_pass_rate", "coupling_slope", "merged"])
        for r in records:
            w.writerow([r.trial, r.kind, r.hidden_dim, r.n_nodes, repr(r.kpss_pass_rate), repr(r.coupling_slope), int(r.merged)])
