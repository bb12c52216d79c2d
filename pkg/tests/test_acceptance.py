"""Acceptance criteria 1-8.

Each test prints one ``criterion N: PASS|FAIL`` line. Run the file directly
(``python3 tests/test_acceptance.py``) for the lines alone.
"""
import sys
import tempfile
import time
from pathlib import Path

import numpy as np
import pytest

from stengression import nncore as nn
from stengression.cli import main as cli_main
from stengression.ergolab import ChainConfig, coupling, pass_rate
from stengression.explain import lag_importance
from stengression.metrics import crps, crps_ensemble, empirical_coverage, mcb, pinball_terms, pit, winkler_terms
from stengression.models import EngressionModel, ModelConfig, NoiseConfig, gcn_embed, sample_ensemble, star_embed
from stengression.spatial import morans_i
from stengression.training import PanelDataset, TrainConfig, energy_loss, make_windows, train

KINDS = ("MVEN", "GCEN", "STEN")


def _line(n, ok, detail, seconds):
    return f"criterion {n}: {'PASS' if ok else 'FAIL'} ({detail}; {seconds:.1f}s)"


# 1. ergodicity pass-rate band

def criterion_1():
    rates = {}
    for kind in KINDS:
        for hidden in (16, 32, 64):
            rates[kind, hidden] = pass_rate(ChainConfig(kind=kind, hidden_dim=hidden, trials=50, T=500, seed=0))
    ok = all(0.85 <= r <= 1.0 for r in rates.values())
    lo = min(rates, key=rates.get)
    return ok, f"KPSS pass rates in [{min(rates.values()):.3f}, {max(rates.values()):.3f}], lowest {lo[0]}/{lo[1]}"


# 2. coupling contraction

def criterion_2():
    worst = None
    ok = True
    for kind in KINDS:
        for hidden in (16, 32, 64):
            res = coupling(ChainConfig(kind=kind, hidden_dim=hidden, trials=50, T=500, seed=1))
            good = res.mean_slope < -0.1 and res.negative_share >= 0.95 and res.merged_share >= 0.90
            ok &= good
            if worst is None or res.mean_slope > worst[0]:
                worst = (res.mean_slope, kind, hidden, res.negative_share, res.merged_share)
    slope, kind, hidden, neg, merged = worst
    return ok, f"least negative mean slope {slope:.3f} ({kind}/{hidden}), negative {neg:.2f}, merged {merged:.2f}"


# 3. gradient suite

def _grad_error(loss, tensors):
    for t in tensors:
        t.requires_grad = True
        t.zero_grad()
    nn.backward(loss())
    return max(nn.max_relative_error(t.grad, nn.numerical_gradient(loss, t, h=1e-5)) for t in tensors)


def _prober(rng):
    """Scalar probe ``<z, r> + |z|^2 / 2`` with ``r`` drawn once, on first use."""
    fixed = {}

    def probe(z):
        if "r" not in fixed:
            fixed["r"] = nn.Tensor(rng.normal(size=z.shape))
        return (z * fixed["r"]).sum() + 0.5 * (z * z).sum()

    return probe


def _grad_cases(seed):
    rng = np.random.default_rng(1000 + seed)
    P = lambda *s: nn.Tensor(rng.normal(size=s), requires_grad=True)
    n = 4
    adjacency = (rng.random((n, n)) < 0.5).astype(float)
    np.fill_diagonal(adjacency, 0.0)
    ring = (np.roll(np.eye(n), 1, axis=1) + np.roll(np.eye(n), -1, axis=1)) / 2.0
    powers = [np.eye(n), ring, ring @ ring]

    x, w, b = P(5, 3), P(3, 4), P(4)
    probe = _prober(rng)
    yield "linear", lambda: probe(nn.linear(x, w, b)), [x, w, b]

    lp = nn.LstmParams(P(3, 8), P(2, 8), P(8))
    xs, h0, c0 = P(5, 3), P(5, 2), P(5, 2)
    probe = _prober(rng)
    yield "lstm step", lambda: probe(nn.concat(list(nn.lstm_step(xs, h0, c0, lp)), axis=-1)), [xs, h0, c0, *lp.tensors()]

    layers = [{"theta": P(1, 3), "self": P(1, 3), "bias": P(3)}, {"theta": P(3, 3), "self": P(3, 3), "bias": P(3)}]
    dense = (P(3, 2), P(2))
    yg = P(2, 2, n, 1)
    tensors = [yg, *dense] + [t for layer in layers for t in layer.values()]
    probe = _prober(rng)
    yield "gcn embed", lambda: probe(gcn_embed(yg, adjacency, layers, dense)), tensors

    phis = [P(1, 3) for _ in powers]
    ys = P(2, 2, n, 1)
    probe = _prober(rng)
    yield "star embed", lambda: probe(star_embed(ys, powers, phis)), [ys, *phis]

    hidden, q = P(2 * n, 5), 2
    hw, hb = P(5, q), P(q)

    head_probe = _prober(rng)

    def head():
        out = nn.matmul(hidden, hw) + hb
        return head_probe(nn.transpose(out.reshape(2, n, q, 1), (0, 2, 1, 3)))

    yield "dense head", head, [hidden, hw, hb]

    kind = KINDS[seed % 3]
    cfg = ModelConfig(kind, p=2, q=2, n_nodes=n, hidden_dim=4, embed_dim=2, gcn_hidden=3, max_lag=2, seed=seed)
    model = EngressionModel(cfg, adjacency=adjacency, weight_powers=powers)
    window = rng.normal(size=(2, 2, n, 1))
    target = rng.normal(size=(2, 2, n, 1))
    noise = rng.normal(size=(3,) + model.noise_shape(2))

    def full_loss():
        ens = nn.concat([model.forward(window, noise=noise[k]).reshape(1, 2, 2, n, 1) for k in range(3)], axis=0)
        return energy_loss(target, ens)

    yield f"energy loss ({kind})", full_loss, model.parameters()


def criterion_3():
    worst = (0.0, "")
    for seed in range(10):
        for name, loss, tensors in _grad_cases(seed):
            err = _grad_error(loss, tensors)
            if err >= worst[0]:
                worst = (err, name)
    return worst[0] < 1e-4, f"max relative error {worst[0]:.2e} ({worst[1]})"


# 4. metric oracles

def _crps_integral(members, y):
    xs = sorted(members)
    m = len(xs)
    knots = sorted(set(xs) | {y})
    total = 0.0
    for a, b in zip(knots[:-1], knots[1:]):
        f = sum(1 for v in xs if v <= a) / m
        total += (f - (1.0 if a >= y else 0.0)) ** 2 * (b - a)
    return total


def _moran_brute(x, w):
    n = len(x)
    mean = sum(x) / n
    num = sum(w[i][j] * (x[i] - mean) * (x[j] - mean) for i in range(n) for j in range(n) if i != j)
    s0 = sum(w[i][j] for i in range(n) for j in range(n) if i != j)
    return n / s0 * num / sum((v - mean) ** 2 for v in x)


def _ranks_brute(scores):
    k, n = len(scores), len(scores[0])
    out = []
    for i in range(k):
        total = 0.0
        for j in range(n):
            col = [scores[r][j] for r in range(k)]
            total += sum(1 for v in col if v < col[i]) + (sum(1 for v in col if v == col[i]) + 1) / 2.0
        out.append(total / n)
    return out


def criterion_4():
    rng = np.random.default_rng(44)
    errs = {}

    def track(name, a, b):
        errs[name] = max(errs.get(name, 0.0), float(np.max(np.abs(np.asarray(a, dtype=float) - np.asarray(b, dtype=float)))))

    for _ in range(100):
        m = int(rng.integers(1, 9))
        members = np.round(rng.normal(size=m), int(rng.integers(1, 4)))
        y = float(rng.normal())
        track("crps", crps_ensemble(y, members), _crps_integral(list(members), y))
    for _ in range(20):
        y = rng.normal(size=15)
        lo = rng.normal(size=15)
        hi = lo + rng.uniform(0, 2, size=15)
        alpha, tau = rng.uniform(0.01, 0.3), rng.uniform(0.05, 0.95)
        ref = [(b - a) + (2 / alpha) * max(a - v, 0.0) + (2 / alpha) * max(v - b, 0.0) for v, a, b in zip(y, lo, hi)]
        track("winkler", winkler_terms(y, lo, hi, alpha), ref)
        ref = [tau * (v - a) if v >= a else (1 - tau) * (a - v) for v, a in zip(y, lo)]
        track("pinball", pinball_terms(y, lo, tau), ref)
        track("coverage", empirical_coverage(y, lo, hi), sum(a <= v <= b for v, a, b in zip(y, lo, hi)) / 15)
        ens = np.round(rng.normal(size=(int(rng.integers(1, 30)), 15)), 1)
        ref = [sum(1 for e in ens[:, i] if e < y[i]) / (ens.shape[0] + 1) for i in range(15)]
        track("pit", pit(y, ens).pit_values, ref)
        w = rng.random((8, 8))
        x = rng.normal(size=8)
        track("moran", morans_i(x, w), _moran_brute(list(x), w.tolist()))
        scores = np.round(rng.normal(size=(4, 12)), 1)
        track("mcb ranks", mcb(scores).mean_ranks, _ranks_brute(scores.tolist()))
    worst = max(errs, key=errs.get)
    return errs[worst] <= 1e-9, f"worst oracle gap {errs[worst]:.1e} ({worst})"


# 5. synthetic recovery

def ring_tanh_panel(t=500, n=10, gain=0.8, self_weight=0.5, seed=0):
    rng = np.random.default_rng(seed)
    ring = (np.roll(np.eye(n), 1, axis=1) + np.roll(np.eye(n), -1, axis=1)) / 2.0
    mix = self_weight * np.eye(n) + (1.0 - self_weight) * ring
    y = np.zeros((t, n))
    for s in range(1, t):
        y[s] = np.tanh(gain * mix @ y[s - 1] + rng.normal(size=n))
    return y


def criterion_5():
    y = ring_tanh_panel()
    panel = PanelDataset.from_array(y[:, :, None], train_end=400, val_end=400)
    cfg = TrainConfig()
    model = EngressionModel(ModelConfig("MVEN", p=cfg.p, q=cfg.q, n_nodes=10))
    train(model, make_windows(panel, cfg.p, cfg.q, "train"), cfg)
    test = make_windows(panel, cfg.p, cfg.q, "test")
    actual = test.raw_targets()
    ens = sample_ensemble(model, test.inputs, m=100, rng=0, standardized=True)
    traj = ens.trajectories * panel.node_std[:, None] + panel.node_mean[:, None]
    model_crps = float(crps(traj, actual).mean())
    # climatology: per node, members resampled from that node's training values
    rng = np.random.default_rng(1)
    idx = rng.integers(0, panel.train_end, size=(100,) + actual.shape[:-1])
    clim = y[idx, np.arange(10)][..., None]
    clim_crps = float(crps(clim, actual).mean())
    lo, hi = np.quantile(traj, [0.025, 0.975], axis=0, method="hazen")
    cov = empirical_coverage(actual, lo, hi)
    ok = model_crps < clim_crps and 0.6 <= cov <= 1.0
    return ok, f"test CRPS {model_crps:.4f} vs climatology {clim_crps:.4f}, 95% coverage {cov:.3f}"


# 6. training sanity

def criterion_6():
    from test_training import ar_mixing_panel, constant_fixture

    w = constant_fixture()
    model = EngressionModel(ModelConfig("MVEN", p=3, q=2, n_nodes=3, hidden_dim=8, noise=NoiseConfig(scale=0.0)))
    train(model, w, TrainConfig(p=3, q=2, epochs=100, batch_size=8, lr=0.01, seed=0))
    mae = float(np.abs(sample_ensemble(model, w.inputs, m=5, rng=0, standardized=True).median - w.targets).mean())
    panel = PanelDataset.from_array(ar_mixing_panel(), train_end=240, val_end=260)
    cfg = ModelConfig("MVEN", p=4, q=1, n_nodes=5, hidden_dim=16, noise=NoiseConfig(mode="concat"))
    res = train(EngressionModel(cfg), make_windows(panel, 4, 1), TrainConfig(p=4, q=1, epochs=100, batch_size=16, lr=1e-3, seed=0))
    ratio = res.loss_trace[-1] / res.loss_trace[0]
    return mae < 1e-2 and ratio <= 0.5, f"constant-target MAE {mae:.2e}, AR loss ratio {ratio:.3f}"


# 7. determinism

def criterion_7():
    y = ring_tanh_panel(t=80, n=5, seed=3)
    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        with open(tmp / "panel.csv", "w") as fh:
            fh.write("timestamp," + ",".join(f"n{i}" for i in range(5)) + "\n")
            for s, row in enumerate(y):
                fh.write(f"{s}," + ",".join(repr(float(v)) for v in row) + "\n")
        with open(tmp / "coords.csv", "w") as fh:
            fh.write("node,lat,lon\n")
            for i in range(5):
                fh.write(f"n{i},{45 + 0.3 * i},{7 + 0.2 * (i % 2)}\n")
        reports = []
        for run in ("a", "b"):
            args = ["evaluate", "--panel", tmp / "panel.csv", "--coords", tmp / "coords.csv", "--kind", "STEN", "--q", "3", "--p", "4"]
            args += ["--epochs", "3", "--hidden-dim", "8", "--repeats", "4", "--m", "50", "--seed", "9", "--threads", "1", "--out", tmp / run]
            code = cli_main([str(a) for a in args])
            if code != 0:
                return False, f"evaluate exited with {code}"
            reports.append(((tmp / run / "metrics.json").read_bytes(), (tmp / run / "runs.csv").read_bytes()))
    same = reports[0] == reports[1]
    return same, f"metrics.json and runs.csv {'byte-identical' if same else 'differ'} across two runs"


# 8. explainability algebra

def criterion_8():
    from test_explain import diffusion_panel, sten

    worst = 0.0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        model = sten(n=6, max_lag=int(rng.integers(1, 5)), seed=seed, embed_dim=int(rng.integers(1, 6)))
        worst = max(worst, abs(lag_importance(model).percentages.sum() - 100.0))
    y, w = diffusion_panel(seed=0)
    panel = PanelDataset.from_array(y[:, :, None], 300, 350)
    model = sten(n=8, w=w, hidden_dim=16, seed=0, noise={"mode": "concat"})
    train(model, make_windows(panel, 1, 1, "train"), TrainConfig(p=1, q=1, epochs=40, batch_size=16, lr=1e-2, seed=0))
    pct = lag_importance(model).percentages
    worst = max(worst, abs(pct.sum() - 100.0))
    return worst <= 1e-9 and pct[1] > pct[0], f"max |sum - 100| {worst:.1e}, diffusion fixture P_0 {pct[0]:.1f} / P_1 {pct[1]:.1f}"


CRITERIA = {n: globals()[f"criterion_{n}"] for n in range(1, 9)}


def evaluate(n):
    start = time.perf_counter()
    ok, detail = CRITERIA[n]()
    return ok, _line(n, ok, detail, time.perf_counter() - start)


@pytest.mark.parametrize("n", sorted(CRITERIA))
def test_criterion(n, capsys):
    ok, line = evaluate(n)
    with capsys.disabled():
        print("\n" + line)
    assert ok, line


if __name__ == "__main__":
    sys.path.insert(0, str(Path(__file__).parent))
    failed = 0
    for n in sorted(CRITERIA):
        ok, line = evaluate(n)
        failed += not ok
        print(line, flush=True)
    sys.exit(1 if failed else 0)
