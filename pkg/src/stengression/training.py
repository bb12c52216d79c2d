"""Windowing, standardization, the energy-score loss and the training loop."""
from dataclasses import dataclass, field

import numpy as np

from . import nncore as nn
from .models import EngressionModel, NumericalError, sample_ensemble


class TrainingDivergedError(FloatingPointError):
    pass


@dataclass
class PanelDataset:
    """A ``[T, N, D]`` panel with per-node statistics taken from ``raw[:train_end]``."""

    raw: np.ndarray
    timestamps: list
    node_ids: list
    train_end: int
    val_end: int
    node_mean: np.ndarray = None
    node_std: np.ndarray = None

    def __post_init__(self):
        raw = np.asarray(self.raw, dtype=np.float64)
        if raw.ndim == 2:
            raw = raw[:, :, None]
        if raw.ndim != 3:
            raise ValueError(f"panel must be [T, N] or [T, N, D], got shape {raw.shape}")
        self.raw = raw
        t, n, _ = raw.shape
        if self.timestamps is None:
            self.timestamps = list(range(t))
        if self.node_ids is None:
            self.node_ids = [str(i) for i in range(n)]
        if len(self.timestamps) != t or len(self.node_ids) != n:
            raise ValueError("timestamps/node_ids do not match the panel shape")
        if not 0 < self.train_end <= self.val_end <= t:
            raise ValueError(f"splits must satisfy 0 < train_end <= val_end <= T, got ({self.train_end}, {self.val_end}) for T={t}")
        train = raw[: self.train_end]
        if not np.all(np.isfinite(train)):
            raise ValueError("training slice contains missing or non-finite values")
        # D = 1 is the supported target case; statistics are per node
        self.node_mean = train[:, :, 0].mean(axis=0)
        self.node_std = train[:, :, 0].std(axis=0)
        bad = np.flatnonzero(self.node_std == 0.0)
        if bad.size:
            raise ValueError(f"node {self.node_ids[bad[0]]!r} has zero variance on the training slice")

    @classmethod
    def from_array(cls, raw, train_end=None, val_end=None, timestamps=None, node_ids=None):
        t = np.asarray(raw).shape[0]
        train_end = t if train_end is None else train_end
        val_end = t if val_end is None else val_end
        return cls(raw, timestamps, node_ids, train_end, val_end)

    @property
    def shape(self):
        return self.raw.shape

    def standardized(self):
        return standardize(self.raw, self.node_mean, self.node_std)


def standardize(values, mean, std):
    """Per-node z-scores; ``values`` has the node axis second to last (``[..., N, D]``)."""
    return (np.asarray(values, dtype=np.float64) - mean[:, None]) / std[:, None]


def unstandardize(values, mean, std):
    return np.asarray(values, dtype=np.float64) * std[:, None] + mean[:, None]


@dataclass
class WindowSet:
    inputs: np.ndarray
    targets: np.ndarray
    origins: np.ndarray
    node_mean: np.ndarray = None
    node_std: np.ndarray = None

    def __len__(self):
        return self.inputs.shape[0]

    def __iter__(self):
        return iter(zip(self.inputs, self.targets))

    def subset(self, idx):
        return WindowSet(self.inputs[idx], self.targets[idx], self.origins[idx], self.node_mean, self.node_std)

    def raw_targets(self):
        if self.node_mean is None:
            return self.targets
        return unstandardize(self.targets, self.node_mean, self.node_std)


def _windows(z, p, q, first, last):
    origins = np.arange(first, last + 1)
    if origins.size == 0:
        shape = z.shape[1:]
        return np.empty((0, p) + shape), np.empty((0, q) + shape), origins
    inputs = np.stack([z[t - p : t] for t in origins])
    targets = np.stack([z[t : t + q] for t in origins])
    return inputs, targets, origins


def make_windows(panel, p, q, split="train"):
    """Overlapping standardized (input, target) pairs.

    The origin ``t`` splits a window into inputs ``[t-p, t)`` and targets
    ``[t, t+q)``. ``split`` picks which slice the targets must fall in:
    ``train`` (``[0, train_end)``), ``val`` or ``test``. Training windows
    never read beyond ``train_end``.
    """
    if p < 1 or q < 1:
        raise ValueError("p and q must be >= 1")
    t_total = panel.raw.shape[0]
    bounds = {"train": (0, panel.train_end), "val": (panel.train_end, panel.val_end), "test": (panel.val_end, t_total)}
    if split not in bounds:
        raise ValueError(f"unknown split {split!r}")
    start, end = bounds[split]
    if split == "train" and end < p + q:
        raise ValueError(f"training slice has {end} steps; at least p + q = {p + q} are required")
    z = standardize(panel.raw[:end], panel.node_mean, panel.node_std)
    inputs, targets, origins = _windows(z, p, q, max(p, start), end - q)
    return WindowSet(inputs, targets, origins, panel.node_mean, panel.node_std)


def energy_loss(targets, ensemble, beta=1.0):
    """Empirical energy score averaged over the batch.

    ``targets`` is ``[B, q, N, D]`` and ``ensemble`` ``[M, B, q, N, D]``;
    norms are taken over each flattened ``(q, N, D)`` block.
    """
    ens = nn.as_tensor(ensemble)
    if ens.ndim < 2:
        raise nn.ShapeError(f"ensemble must be [M, B, ...], got {ens.shape}")
    m, b = ens.shape[0], ens.shape[1]
    if m < 2:
        raise ValueError("energy loss needs at least 2 ensemble members")
    if not 0.0 < beta < 2.0:
        raise ValueError("beta must lie in (0, 2)")
    y = np.asarray(targets.data if isinstance(targets, nn.Tensor) else targets, dtype=np.float64)
    if y.shape != ens.shape[1:]:
        raise nn.ShapeError(f"targets shape {y.shape} does not match ensemble member shape {ens.shape[1:]}")
    flat = ens.reshape(m, b, -1)
    acc = nn.power(nn.l2_norm(flat - y.reshape(1, b, -1), axis=-1), beta).sum() / (m * b)
    pairs = []
    for j in range(m):
        for k in range(j + 1, m):
            pairs.append(nn.power(nn.l2_norm(flat[j] - flat[k], axis=-1), beta).sum())
    sharp = pairs[0]
    for term in pairs[1:]:
        sharp = sharp + term
    # ordered-pair double sum = 2 x unordered sum
    return acc - sharp * (2.0 / (2.0 * m * (m - 1) * b))


@dataclass
class TrainConfig:
    p: int = 7
    q: int = 1
    m_train: int = 2
    beta: float = 1.0
    epochs: int = 100
    batch_size: int = 32
    lr: float = 1e-3
    seed: int = 0
    patience: int = None

    def __post_init__(self):
        if self.m_train < 2:
            raise ValueError("m_train must be >= 2")
        if not 0.0 < self.beta < 2.0:
            raise ValueError("beta must lie in (0, 2)")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")


@dataclass
class TrainResult:
    model: EngressionModel
    loss_trace: list
    val_trace: list = field(default_factory=list)
    stopped_epoch: int = None


def _ensemble_forward(model, inputs, m, rng, training, dropout_rng):
    b = inputs.shape[0]
    tiled = np.broadcast_to(inputs, (m,) + inputs.shape).reshape((m * b,) + inputs.shape[1:])
    out = model.forward(tiled, rng, training=training, dropout_rng=dropout_rng)
    return out.reshape((m, b) + out.shape[1:])


def batch_loss(model, inputs, targets, cfg, rng, training=False, dropout_rng=None):
    """Energy loss of ``m_train`` noisy forward passes on one batch."""
    ens = _ensemble_forward(model, inputs, cfg.m_train, rng, training, dropout_rng)
    return energy_loss(targets, ens, cfg.beta)


def evaluate_loss(model, windows, cfg, seed=0):
    rng = np.random.default_rng(seed)
    total = 0.0
    with nn.no_grad():
        for lo in range(0, len(windows), cfg.batch_size):
            sl = slice(lo, lo + cfg.batch_size)
            loss = batch_loss(model, windows.inputs[sl], windows.targets[sl], cfg, rng)
            total += loss.item() * windows.inputs[sl].shape[0]
    return total / len(windows)


def train(model, windows, cfg, val_windows=None, log=None):
    """Fit ``model`` on ``windows`` with Adam; returns a ``TrainResult``.

    Each batch runs ``m_train`` forward passes with independent noise,
    scores them with the energy loss and takes one optimizer step. Batch
    order is reshuffled every epoch from ``cfg.seed``.
    """
    if len(windows) == 0:
        raise ValueError("no training windows")
    mc = model.config
    if windows.inputs.shape[1:] != (mc.p, mc.n_nodes, mc.n_features) or windows.targets.shape[1] != mc.q:
        raise nn.ShapeError(
            f"windows {windows.inputs.shape[1:]} -> {windows.targets.shape[1:]} do not match model p={mc.p}, q={mc.q}, N={mc.n_nodes}"
        )
    if windows.node_mean is not None:
        model.node_mean = np.asarray(windows.node_mean, dtype=np.float64)
        model.node_std = np.asarray(windows.node_std, dtype=np.float64)
    seeds = np.random.SeedSequence(cfg.seed).spawn(3)
    order_rng, noise_rng, drop_rng = (np.random.default_rng(s) for s in seeds)
    state = nn.AdamState(lr=cfg.lr)
    params = model.parameters()
    for t in params:
        t.requires_grad = True
    trace, val_trace = [], []
    best, best_params, waited, stopped = np.inf, None, 0, None
    n = len(windows)
    for epoch in range(1, cfg.epochs + 1):
        order = order_rng.permutation(n)
        total = 0.0
        for bi, lo in enumerate(range(0, n, cfg.batch_size)):
            idx = order[lo : lo + cfg.batch_size]
            try:
                # overflow is detected explicitly below, so numpy warnings are redundant
                with np.errstate(over="ignore", invalid="ignore"):
                    loss = batch_loss(model, windows.inputs[idx], windows.targets[idx], cfg, noise_rng, True, drop_rng)
                    value = loss.item()
                    if not np.isfinite(value):
                        raise TrainingDivergedError("non-finite loss")
                    for t in params:
                        t.zero_grad()
                    nn.backward(loss)
                    nn.adam_step(params, state)
            except (NumericalError, nn.NonFiniteGradientError, TrainingDivergedError) as exc:
                raise TrainingDivergedError(f"training diverged at epoch {epoch}, batch {bi + 1}: {exc}") from exc
            total += value * idx.size
        trace.append(total / n)
        if log is not None:
            log(epoch, trace[-1])
        if cfg.patience is not None:
            score = evaluate_loss(model, val_windows, cfg, cfg.seed) if val_windows is not None and len(val_windows) else trace[-1]
            val_trace.append(score)
            if score < best:
                best, waited = score, 0
                best_params = {k: t.data.copy() for k, t in model.params.items()}
            else:
                waited += 1
                if waited >= cfg.patience:
                    stopped = epoch
                    break
    if best_params is not None and stopped is not None:
        for k, t in model.params.items():
            t.data = best_params[k]
    for t in params:
        t.requires_grad = False
        t.grad = None
    return TrainResult(model, trace, val_trace, stopped)


@dataclass
class Candidate:
    model_config: object
    train_config: TrainConfig
    label: str = ""


@dataclass
class SweepResult:
    best: Candidate
    best_model: EngressionModel
    scores: list
    failures: list


def validation_crps(model, windows, m=50, seed=0):
    """Mean ensemble CRPS on ``windows`` in original units."""
    from .metrics import crps

    ens = sample_ensemble(model, windows.inputs, m=m, rng=seed, standardized=True)
    traj = ens.trajectories
    actual = windows.targets
    if model.node_mean is not None:
        traj = traj * model.node_std[:, None] + model.node_mean[:, None]
        actual = unstandardize(actual, model.node_mean, model.node_std)
    return float(np.mean(crps(traj, actual)))


def grid_sweep(candidates, train_windows, val_windows, graph=None, m_eval=50, seed=0):
    """Train every candidate and keep the one with the lowest validation CRPS.

    Ties go to the smaller parameter count, then to the earlier candidate.
    Candidates whose training diverges are recorded in ``failures``.
    """
    if not candidates:
        raise ValueError("empty candidate list")
    if len(val_windows) == 0:
        raise ValueError("validation slice has no windows")
    scores, failures, fitted = [], [], []
    for pos, cand in enumerate(candidates):
        model = EngressionModel(cand.model_config, graph=graph)
        try:
            train(model, train_windows, cand.train_config)
            score = validation_crps(model, val_windows, m_eval, seed)
            if not np.isfinite(score):
                raise TrainingDivergedError("non-finite validation CRPS")
        except (TrainingDivergedError, NumericalError) as exc:
            failures.append((pos, cand.label, str(exc)))
            continue
        scores.append((pos, cand.label, score))
        fitted.append((score, model.n_parameters(), pos, model))
    if not fitted:
        raise TrainingDivergedError(f"all {len(candidates)} candidates failed")
    _, _, pos, model = fitted[select_best([f[:3] for f in fitted])]
    return SweepResult(candidates[pos], model, scores, failures)


def select_best(entries):
    """Index of the best ``(score, n_params, position)`` entry: lowest score, then fewest parameters, then earliest."""
    return min(range(len(entries)), key=lambda i: tuple(entries[i]))


def write_loss_trace(path, trace):
    import csv

    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "loss"])
        for e, v in enumerate(trace, start=1):
            w.writerow([e, repr(float(v))])
