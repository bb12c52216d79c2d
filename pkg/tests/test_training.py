import itertools

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from stengression import nncore as nn
from stengression.models import EngressionModel, ModelConfig, NoiseConfig, sample_ensemble
from stengression.nncore import Tensor
from stengression.training import (
    Candidate,
    PanelDataset,
    TrainConfig,
    TrainingDivergedError,
    WindowSet,
    energy_loss,
    grid_sweep,
    make_windows,
    select_best,
    standardize,
    train,
    unstandardize,
    write_loss_trace,
)


def energy_oracle(y, ens, beta=1.0):
    m, b = ens.shape[:2]
    total = 0.0
    for i in range(b):
        acc = sum(np.linalg.norm((y[i] - ens[j, i]).ravel()) ** beta for j in range(m)) / m
        sharp = sum(
            np.linalg.norm((ens[j, i] - ens[k, i]).ravel()) ** beta for j in range(m) for k in range(m)
        ) / (2 * m * (m - 1))
        total += acc - sharp
    return total / b


def panel(t=40, n=3, seed=0, **kw):
    rng = np.random.default_rng(seed)
    return PanelDataset.from_array(rng.normal(loc=5.0, size=(t, n)), **kw)


def test_window_count_small():
    ds = panel(t=5)
    assert len(make_windows(ds, 2, 1)) == 3
    assert_array_equal(make_windows(ds, 2, 1).origins, [2, 3, 4])


def test_window_count_boundary():
    ds = panel(t=5)
    assert len(make_windows(ds, 3, 2)) == 1


@pytest.mark.parametrize("t,p,q", [(20, 3, 2), (31, 7, 4), (12, 1, 1)])
def test_window_count_formula(t, p, q):
    ds = panel(t=t)
    assert len(make_windows(ds, p, q)) == t - p - q + 1


def test_window_too_short_names_minimum():
    with pytest.raises(ValueError, match="p \\+ q = 6"):
        make_windows(panel(t=5), 4, 2)


def test_windows_overlap():
    w = make_windows(panel(t=12), 4, 2)
    for a, b in zip(w.inputs[:-1], w.inputs[1:]):
        assert_array_equal(a[1:], b[:-1])
    assert_array_equal(w.inputs[1][-1], w.targets[0][0])


def test_windows_do_not_read_past_train_end():
    raw = np.random.default_rng(1).normal(size=(30, 3))
    raw[20:] = np.nan
    ds = PanelDataset.from_array(raw, train_end=20, val_end=30)
    w = make_windows(ds, 3, 2)
    assert np.all(np.isfinite(w.inputs)) and np.all(np.isfinite(w.targets))
    assert len(w) == 20 - 3 - 2 + 1


def test_standardize_roundtrip_and_training_moments():
    raw = np.random.default_rng(2).normal(loc=3.0, scale=4.0, size=(50, 4))
    raw[35:] += 10.0
    ds = PanelDataset.from_array(raw, train_end=35, val_end=42)
    z = ds.standardized()
    assert_allclose(z[:35].mean(axis=0), 0.0, atol=1e-12)
    assert_allclose(z[:35].std(axis=0), 1.0, atol=1e-12)
    assert np.all(np.abs(z[35:].mean(axis=0)) > 1.0)
    assert_allclose(unstandardize(z, ds.node_mean, ds.node_std), ds.raw, atol=1e-12)


def test_zero_variance_node_rejected():
    raw = np.random.default_rng(3).normal(size=(10, 3))
    raw[:, 1] = 7.0
    with pytest.raises(ValueError, match="zero variance"):
        PanelDataset.from_array(raw, node_ids=["a", "b", "c"])


def test_split_order_checked():
    with pytest.raises(ValueError):
        PanelDataset.from_array(np.zeros((10, 2)), train_end=8, val_end=5)


def test_val_and_test_windows():
    ds = panel(t=40, train_end=25, val_end=32)
    val = make_windows(ds, 4, 3, "val")
    test = make_windows(ds, 4, 3, "test")
    assert val.origins[0] == 25 and val.origins[-1] + 3 <= 32
    assert test.origins[0] == 32 and test.origins[-1] + 3 == 40


def test_energy_loss_members_equal_target():
    y = np.random.default_rng(4).normal(size=(2, 3, 4, 1))
    assert energy_loss(y, np.stack([y, y, y])).item() == pytest.approx(0.0, abs=1e-15)


def test_energy_loss_scalar_examples():
    y = np.zeros((1, 1, 1, 1))
    sym = np.array([1.0, -1.0]).reshape(2, 1, 1, 1, 1)
    same = np.array([1.0, 1.0]).reshape(2, 1, 1, 1, 1)
    assert energy_loss(y, sym).item() == pytest.approx(0.0, abs=1e-15)
    assert energy_loss(y, same).item() == pytest.approx(1.0, abs=1e-15)


def test_energy_loss_needs_two_members():
    with pytest.raises(ValueError):
        energy_loss(np.zeros((1, 1, 1, 1)), np.zeros((1, 1, 1, 1, 1)))
    with pytest.raises(ValueError):
        energy_loss(np.zeros((1, 1, 1, 1)), np.zeros((2, 1, 1, 1, 1)), beta=2.0)


@pytest.mark.parametrize("beta", [0.5, 1.0, 1.5])
@pytest.mark.parametrize("seed", range(5))
def test_energy_loss_matches_direct_formula(seed, beta):
    rng = np.random.default_rng(seed)
    m = rng.integers(2, 6)
    y = rng.normal(size=(3, 2, 4, 1))
    ens = rng.normal(size=(m, 3, 2, 4, 1))
    assert energy_loss(y, ens, beta).item() == pytest.approx(energy_oracle(y, ens, beta), abs=1e-12)


def test_energy_loss_permutation_invariant():
    rng = np.random.default_rng(5)
    y = rng.normal(size=(2, 2, 3, 1))
    ens = rng.normal(size=(4, 2, 2, 3, 1))
    base = energy_loss(y, ens).item()
    for perm in itertools.permutations(range(4)):
        assert energy_loss(y, ens[list(perm)]).item() == pytest.approx(base, abs=1e-13)


def test_energy_loss_nonnegative_for_coincident_members():
    rng = np.random.default_rng(6)
    for _ in range(20):
        y = rng.normal(size=(2, 1, 3, 1))
        member = rng.normal(size=(2, 1, 3, 1))
        assert energy_loss(y, np.stack([member] * 3)).item() >= 0.0


@pytest.mark.parametrize("seed", range(5))
def test_energy_loss_gradient(seed):
    rng = np.random.default_rng(10 + seed)
    y = rng.normal(size=(2, 2, 3, 1))
    ens = Tensor(rng.normal(size=(3, 2, 2, 3, 1)), requires_grad=True)
    nn.backward(energy_loss(y, ens))
    numeric = nn.numerical_gradient(lambda: energy_loss(y, ens), ens)
    assert nn.max_relative_error(ens.grad, numeric) < 1e-5


def test_energy_loss_zero_norm_gradient_is_zero():
    y = np.zeros((1, 1, 1, 1))
    ens = Tensor(np.zeros((2, 1, 1, 1, 1)), requires_grad=True)
    nn.backward(energy_loss(y, ens))
    assert_array_equal(ens.grad, 0.0)


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(m_train=1)
    with pytest.raises(ValueError):
        TrainConfig(beta=0.0)


def constant_fixture(seed=0, n=3, p=3, q=2, samples=32):
    rng = np.random.default_rng(seed)
    inputs = rng.normal(size=(samples, p, n, 1))
    targets = np.full((samples, q, n, 1), 0.5)
    return WindowSet(inputs, targets, np.arange(samples))


def test_constant_target_converges():
    w = constant_fixture()
    cfg_m = ModelConfig("MVEN", p=3, q=2, n_nodes=3, hidden_dim=8, noise=NoiseConfig(scale=0.0))
    model = EngressionModel(cfg_m)
    res = train(model, w, TrainConfig(p=3, q=2, epochs=100, batch_size=8, lr=0.01, seed=0))
    assert len(res.loss_trace) == 100
    ens = sample_ensemble(model, w.inputs, m=5, rng=0, standardized=True)
    mae = np.abs(ens.median - w.targets).mean()
    assert mae < 1e-2, mae


def ar_mixing_panel(t=260, n=5, rho=0.99, self_weight=0.9, seed=0):
    """Persistent AR(1) panel whose nodes also mix with their ring neighbours."""
    rng = np.random.default_rng(seed)
    ring = (np.roll(np.eye(n), 1, axis=1) + np.roll(np.eye(n), -1, axis=1)) / 2.0
    mix = rho * (self_weight * np.eye(n) + (1.0 - self_weight) * ring)
    y = np.zeros((t, n))
    y[0] = rng.normal(size=n)
    for s in range(1, t):
        y[s] = mix @ y[s - 1] + rng.normal(size=n)
    return y


def test_ar_fixture_loss_halves():
    ds = PanelDataset.from_array(ar_mixing_panel(), train_end=240, val_end=260)
    w = make_windows(ds, 4, 1)
    cfg = ModelConfig("MVEN", p=4, q=1, n_nodes=5, hidden_dim=16, noise=NoiseConfig(mode="concat"))
    res = train(EngressionModel(cfg), w, TrainConfig(p=4, q=1, epochs=100, batch_size=16, lr=1e-3, seed=0))
    assert res.loss_trace[-1] <= 0.5 * res.loss_trace[0], res.loss_trace


def test_training_deterministic():
    w = constant_fixture(samples=12)

    def run():
        model = EngressionModel(ModelConfig("STEN", p=3, q=2, n_nodes=3, hidden_dim=4), weight_powers=[np.eye(3), np.full((3, 3), 0.5) - 0.5 * np.eye(3)])
        res = train(model, w, TrainConfig(p=3, q=2, epochs=3, batch_size=5, lr=0.01, seed=7))
        return res.loss_trace, model.params["head.weight"].data.copy()

    (ta, wa), (tb, wb) = run(), run()
    assert ta == tb
    assert_array_equal(wa, wb)


def test_training_attaches_standardization():
    ds = panel(t=30)
    model = EngressionModel(ModelConfig("MVEN", p=3, q=1, n_nodes=3, hidden_dim=4))
    train(model, make_windows(ds, 3, 1), TrainConfig(p=3, q=1, epochs=1))
    assert_array_equal(model.node_mean, ds.node_mean)


def test_divergence_reports_epoch_and_batch():
    w = constant_fixture(samples=8)
    w.inputs[5] = np.nan
    model = EngressionModel(ModelConfig("MVEN", p=3, q=2, n_nodes=3, hidden_dim=4))
    with pytest.raises(TrainingDivergedError, match=r"epoch 1, batch \d"):
        train(model, w, TrainConfig(p=3, q=2, epochs=2, batch_size=4))


def test_early_stopping_restores_best():
    w = constant_fixture(samples=16)
    model = EngressionModel(ModelConfig("MVEN", p=3, q=2, n_nodes=3, hidden_dim=4))
    res = train(model, w, TrainConfig(p=3, q=2, epochs=200, batch_size=8, lr=0.05, patience=3), val_windows=constant_fixture(seed=1, samples=8))
    assert res.stopped_epoch is None or res.stopped_epoch < 200
    assert len(res.val_trace) == len(res.loss_trace)


def test_write_loss_trace(tmp_path):
    path = tmp_path / "loss.csv"
    write_loss_trace(path, [1.5, 0.25])
    assert path.read_text().splitlines() == ["epoch,loss", "1,1.5", "2,0.25"]


def sweep_setup():
    ds = PanelDataset.from_array(ar_mixing_panel(t=120, n=3), train_end=100, val_end=120)
    return make_windows(ds, 3, 1), make_windows(ds, 3, 1, "val")


def mcfg(**kw):
    base = dict(kind="MVEN", p=3, q=1, n_nodes=3, hidden_dim=6)
    base.update(kw)
    return ModelConfig(**base)


def test_sweep_requires_candidates():
    tw, vw = sweep_setup()
    with pytest.raises(ValueError):
        grid_sweep([], tw, vw)


def test_sweep_single_candidate():
    tw, vw = sweep_setup()
    cand = Candidate(mcfg(), TrainConfig(p=3, q=1, epochs=2), "only")
    res = grid_sweep([cand], tw, vw, m_eval=10)
    assert res.best is cand
    assert len(res.scores) == 1 and not res.failures


def test_sweep_excludes_divergent_candidate():
    tw, vw = sweep_setup()
    good = Candidate(mcfg(), TrainConfig(p=3, q=1, epochs=2, lr=1e-3), "good")
    bad = Candidate(mcfg(), TrainConfig(p=3, q=1, epochs=2, lr=1e300), "bad")
    res = grid_sweep([bad, good], tw, vw, m_eval=10)
    assert res.best is good
    assert [f[1] for f in res.failures] == ["bad"]


def test_sweep_prefers_trained_config():
    tw, vw = sweep_setup()
    good = Candidate(mcfg(), TrainConfig(p=3, q=1, epochs=40, lr=5e-3, batch_size=16), "good")
    weak = Candidate(mcfg(), TrainConfig(p=3, q=1, epochs=1, lr=1e-6), "weak")
    res = grid_sweep([weak, good], tw, vw, m_eval=30)
    assert res.best is good


def test_select_best_tie_breaks():
    assert select_best([(1.0, 50, 0), (1.0, 20, 1), (2.0, 5, 2)]) == 1
    assert select_best([(1.0, 20, 0), (1.0, 20, 1)]) == 0
    assert select_best([(3.0, 1, 0), (0.5, 99, 1)]) == 1
