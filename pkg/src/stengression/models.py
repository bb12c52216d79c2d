"""Engression forecasters: MVEN, GCEN and STEN.

Every architecture shares the same tail: noise is injected into the
(spatially embedded) lookback window, an LSTM runs over the ``p`` steps
with nodes folded into the batch axis, and a dense head maps the final
hidden state to a ``q``-step forecast. Repeating a forward pass with fresh
noise draws one more trajectory from the learned predictive distribution.
"""
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import nncore as nn
from .nncore import Tensor

KINDS = ("MVEN", "GCEN", "STEN")


class NumericalError(FloatingPointError):
    pass


@dataclass
class NoiseConfig:
    distribution: str = "gaussian"
    mode: str = "additive"
    concat_dim: int = 1
    seed: int = 0
    # test hook: 0 switches the noise off
    scale: float = 1.0

    def __post_init__(self):
        if self.distribution not in ("gaussian", "uniform"):
            raise ValueError(f"unknown noise distribution {self.distribution!r}")
        if self.mode not in ("additive", "concat"):
            raise ValueError(f"unknown noise mode {self.mode!r}")
        if self.mode == "concat" and self.concat_dim < 1:
            raise ValueError("concat_dim must be >= 1 in concat mode")

    def sample(self, rng, shape):
        if self.distribution == "gaussian":
            eta = rng.standard_normal(shape)
        else:
            # unit variance, interchangeable with the Gaussian
            eta = rng.uniform(-np.sqrt(3.0), np.sqrt(3.0), size=shape)
        return eta * self.scale


def default_noise_mode(kind):
    """Concatenated noise for MVEN, additive otherwise.

    MVEN has no learned layer ahead of the noise, so additive noise would sit
    at a fixed unit scale on the standardized inputs and cap the usable
    signal. GCEN and STEN perturb a learned embedding whose scale adapts.
    """
    return "concat" if kind.upper() == "MVEN" else "additive"


@dataclass
class ModelConfig:
    kind: str
    p: int
    q: int
    n_nodes: int
    n_features: int = 1
    embed_dim: int = 4
    hidden_dim: int = 32
    lstm_layers: int = 1
    dropout: float = 0.0
    gcn_layers: int = 2
    gcn_hidden: int = 8
    aggregation: str = "mean"
    combine: str = "add"
    gcn_activation: str = "tanh"
    max_lag: int = 1
    seed: int = 0
    noise: NoiseConfig = None

    def __post_init__(self):
        self.kind = self.kind.upper()
        if self.kind not in KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}; expected one of {KINDS}")
        if self.noise is None or isinstance(self.noise, dict):
            spec = dict(self.noise or {})
            spec.setdefault("mode", default_noise_mode(self.kind))
            self.noise = NoiseConfig(**spec)
        for name in ("p", "q", "n_nodes", "n_features", "hidden_dim", "lstm_layers"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.kind != "MVEN" and self.embed_dim < 1:
            raise ValueError("embed_dim must be >= 1")
        if self.kind == "GCEN":
            if self.gcn_layers < 1:
                raise ValueError("GCEN needs at least one graph convolution layer")
            if self.aggregation not in ("mean", "sum", "max"):
                raise ValueError(f"unknown aggregation {self.aggregation!r}")
            if self.combine not in ("add", "concat"):
                raise ValueError(f"unknown combine {self.combine!r}")
            nn.activation(self.gcn_activation)
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")

    @property
    def spatial_dim(self):
        """Width of the spatial embedding fed to the noise stage (``D'``; ``D`` for MVEN)."""
        return self.n_features if self.kind == "MVEN" else self.embed_dim

    @property
    def lstm_input_dim(self):
        extra = self.noise.concat_dim if self.noise.mode == "concat" else 0
        return self.spatial_dim + extra

    @property
    def noise_dim(self):
        return self.noise.concat_dim if self.noise.mode == "concat" else self.spatial_dim


@dataclass
class ForecastEnsemble:
    trajectories: np.ndarray
    median: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    quantiles: tuple = (0.025, 0.975)
    noise: np.ndarray = None

    @property
    def size(self):
        return self.trajectories.shape[0]

    def noise_norms(self, node):
        from .explain import noise_norms

        if self.noise is None:
            raise ValueError("noise was not captured; sample with capture_noise=True")
        if not 0 <= node < self.noise.shape[-2]:
            raise IndexError(f"node index {node} out of range for {self.noise.shape[-2]} nodes")
        return noise_norms(self.noise[..., node, :])


def _check_finite(t, stage):
    if not np.all(np.isfinite(t.data)):
        raise NumericalError(f"non-finite values after {stage}")
    return t


def _as_window(y, n_features):
    y = np.asarray(y, dtype=np.float64)
    if y.ndim == 2 and n_features == 1:
        y = y[:, :, None]
    if y.ndim == 3:
        return y[None], True
    if y.ndim == 4:
        return y, False
    raise nn.ShapeError(f"window must be [p, N, D] or [B, p, N, D], got {y.shape}")


def neighbor_operator(adjacency, aggregation):
    """Dense propagation matrix for mean/sum aggregation over ``adjacency > 0``."""
    mask = (np.asarray(adjacency) > 0).astype(np.float64)
    if aggregation == "sum":
        return mask
    deg = mask.sum(axis=1, keepdims=True)
    return np.divide(mask, deg, out=np.zeros_like(mask), where=deg > 0)


def gcn_embed(y, adjacency, layers, dense, aggregation="mean", combine="add", activation="tanh"):
    """Stacked 1-hop message passing followed by a dense projection.

    ``y`` is ``[B, p, N, D]``. Each entry of ``layers`` is a dict with
    ``theta`` (neighbour transform), ``self`` (own-state transform) and
    ``bias``; ``dense`` is ``(weight, bias)``. Nodes without neighbours see
    a zero aggregate.
    """
    y = nn.as_tensor(y)
    act = nn.activation(activation)
    mask = np.asarray(adjacency) > 0
    prop = None if aggregation == "max" else Tensor(neighbor_operator(adjacency, aggregation))
    h = y
    for layer in layers:
        agg = nn.neighbor_max(h, mask) if aggregation == "max" else nn.matmul(prop, h)
        msg = nn.matmul(agg, layer["theta"])
        own = nn.matmul(h, layer["self"])
        if combine == "add":
            h = act(msg + own + layer["bias"])
        else:
            h = act(nn.concat([msg, own], axis=-1) + layer["bias"])
    weight, bias = dense
    return nn.matmul(h, weight) + bias


def star_contributions(y, weight_powers, phis):
    """Per-lag pre-activation terms ``(W^l Y_tau) Phi_l``."""
    y = nn.as_tensor(y)
    if len(phis) != len(weight_powers):
        raise nn.ShapeError(f"{len(phis)} lag matrices for {len(weight_powers)} weight powers")
    out = []
    for l, (wl, phi) in enumerate(zip(weight_powers, phis)):
        lagged = y if l == 0 else nn.matmul(Tensor(wl), y)
        out.append(nn.matmul(lagged, phi))
    return out


def star_embed(y, weight_powers, phis):
    """``ReLU(sum_l (W^l Y_tau) Phi_l)`` for every slice of ``y`` ``[B, p, N, D]``."""
    terms = star_contributions(y, weight_powers, phis)
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return nn.relu(total)


def inject_noise(z, cfg, rng=None, noise=None):
    """Perturb ``z`` additively or append noise features. Returns ``(z', eta)``."""
    z = nn.as_tensor(z)
    shape = z.shape[:-1] + ((cfg.concat_dim,) if cfg.mode == "concat" else (z.shape[-1],))
    if noise is None:
        noise = cfg.sample(rng, shape)
    elif noise.shape != shape:
        raise nn.ShapeError(f"noise shape {noise.shape} does not match expected {shape}")
    eta = Tensor(noise)
    if cfg.mode == "additive":
        return z + eta, noise
    return nn.concat([z, eta], axis=-1), noise


class EngressionModel:
    """Parameters, graph operators and standardization statistics of one forecaster."""

    def __init__(self, config, graph=None, adjacency=None, weight_powers=None, init=True):
        self.config = config
        self.adjacency = None
        self.weight_powers = None
        if config.kind == "GCEN":
            a = graph.A if graph is not None else adjacency
            if a is None:
                raise ValueError("GCEN needs an adjacency matrix")
            self.adjacency = np.asarray(a, dtype=np.float64)
            if self.adjacency.shape != (config.n_nodes, config.n_nodes):
                raise nn.ShapeError(f"adjacency shape {self.adjacency.shape} does not match {config.n_nodes} nodes")
        elif config.kind == "STEN":
            if graph is not None:
                from .spatial import weight_powers as _powers

                weight_powers = _powers(graph.W, config.max_lag)
            if weight_powers is None:
                raise ValueError("STEN needs spatial weight powers")
            self.weight_powers = [np.asarray(w, dtype=np.float64) for w in weight_powers]
            if len(self.weight_powers) != config.max_lag + 1:
                raise ValueError(f"expected {config.max_lag + 1} weight powers, got {len(self.weight_powers)}")
        self.node_mean = None
        self.node_std = None
        self.params = {}
        if init:
            self._init_params(np.random.default_rng(config.seed))

    @property
    def kind(self):
        return self.config.kind

    def _init_params(self, rng):
        cfg = self.config
        xavier = nn.xavier_init
        zeros = lambda n, name: nn.parameter(np.zeros(n), name)
        p = {}
        d, dp = cfg.n_features, cfg.embed_dim
        if cfg.kind == "GCEN":
            width = d
            for k in range(cfg.gcn_layers):
                out_w = cfg.gcn_hidden * (2 if cfg.combine == "concat" else 1)
                p[f"gcn.{k}.theta"] = xavier((width, cfg.gcn_hidden), rng, f"gcn.{k}.theta")
                p[f"gcn.{k}.self"] = xavier((width, cfg.gcn_hidden), rng, f"gcn.{k}.self")
                p[f"gcn.{k}.bias"] = zeros(out_w, f"gcn.{k}.bias")
                width = out_w
            p["gcn.dense.weight"] = xavier((width, dp), rng, "gcn.dense.weight")
            p["gcn.dense.bias"] = zeros(dp, "gcn.dense.bias")
        elif cfg.kind == "STEN":
            for l in range(cfg.max_lag + 1):
                p[f"star.phi.{l}"] = xavier((d, dp), rng, f"star.phi.{l}")
        width = cfg.lstm_input_dim
        for k in range(cfg.lstm_layers):
            lp = nn.LstmParams.init(width, cfg.hidden_dim, rng, prefix=f"lstm.{k}")
            p[f"lstm.{k}.w_x"], p[f"lstm.{k}.w_h"], p[f"lstm.{k}.b"] = lp.w_x, lp.w_h, lp.b
            width = cfg.hidden_dim
        p["head.weight"] = xavier((cfg.hidden_dim, cfg.q * d), rng, "head.weight")
        p["head.bias"] = zeros(cfg.q * d, "head.bias")
        self.params = p

    def parameters(self):
        return list(self.params.values())

    def n_parameters(self):
        return int(sum(t.size for t in self.params.values()))

    def lstm_layers(self):
        return [
            nn.LstmParams(self.params[f"lstm.{k}.w_x"], self.params[f"lstm.{k}.w_h"], self.params[f"lstm.{k}.b"])
            for k in range(self.config.lstm_layers)
        ]

    def phis(self):
        return [self.params[f"star.phi.{l}"] for l in range(self.config.max_lag + 1)]

    def gcn_layers(self):
        return [
            {"theta": self.params[f"gcn.{k}.theta"], "self": self.params[f"gcn.{k}.self"], "bias": self.params[f"gcn.{k}.bias"]}
            for k in range(self.config.gcn_layers)
        ]

    def noise_shape(self, batch):
        cfg = self.config
        return (batch, cfg.p, cfg.n_nodes, cfg.noise_dim)

    def spatial(self, y):
        cfg = self.config
        if cfg.kind == "MVEN":
            return nn.as_tensor(y)
        if cfg.kind == "GCEN":
            return gcn_embed(
                y,
                self.adjacency,
                self.gcn_layers(),
                (self.params["gcn.dense.weight"], self.params["gcn.dense.bias"]),
                cfg.aggregation,
                cfg.combine,
                cfg.gcn_activation,
            )
        return star_embed(y, self.weight_powers, self.phis())

    def forward(self, window, rng=None, noise=None, training=False, dropout_rng=None, return_noise=False):
        """One stochastic trajectory per batch row: ``[B, p, N, D] -> [B, q, N, D]``.

        ``window`` is in standardized units. Noise is drawn in a single call
        from ``rng`` unless ``noise`` is supplied explicitly.
        """
        cfg = self.config
        y = nn.as_tensor(window)
        expected = (cfg.p, cfg.n_nodes, cfg.n_features)
        if y.ndim != 4 or y.shape[1:] != expected:
            raise nn.ShapeError(f"window shape {y.shape} does not match [B, {cfg.p}, {cfg.n_nodes}, {cfg.n_features}]")
        batch = y.shape[0]
        if noise is None and rng is None:
            rng = np.random.default_rng(cfg.noise.seed)
        z = _check_finite(self.spatial(y), "spatial embedding")
        z, eta = inject_noise(z, cfg.noise, rng, noise)
        seq = nn.transpose(z, (1, 0, 2, 3)).reshape(cfg.p, batch * cfg.n_nodes, cfg.lstm_input_dim)
        rows = batch * cfg.n_nodes
        layers = self.lstm_layers()
        states = [(Tensor(np.zeros((rows, cfg.hidden_dim))), Tensor(np.zeros((rows, cfg.hidden_dim)))) for _ in layers]
        for tau in range(cfg.p):
            x = seq[tau]
            for k, lp in enumerate(layers):
                if k > 0:
                    x = nn.dropout(x, cfg.dropout, dropout_rng, training)
                h, c = nn.lstm_step(x, states[k][0], states[k][1], lp)
                states[k] = (h, c)
                x = h
        h_final = _check_finite(states[-1][0], "LSTM")
        out = nn.matmul(h_final, self.params["head.weight"]) + self.params["head.bias"]
        out = _check_finite(out, "dense head")
        out = out.reshape(batch, cfg.n_nodes, cfg.q, cfg.n_features)
        out = nn.transpose(out, (0, 2, 1, 3))
        return (out, eta) if return_noise else out

    def standardize(self, values):
        if self.node_mean is None:
            return np.asarray(values, dtype=np.float64)
        return (np.asarray(values, dtype=np.float64) - self.node_mean[:, None]) / self.node_std[:, None]

    def unstandardize(self, values):
        if self.node_mean is None:
            return np.asarray(values, dtype=np.float64)
        return np.asarray(values) * self.node_std[:, None] + self.node_mean[:, None]

    def to_dict(self):
        cfg = asdict(self.config)
        doc = {
            "format": "stengression-model",
            "version": 1,
            "config": cfg,
            "params": {name: {"shape": list(t.shape), "data": t.data.reshape(-1).tolist()} for name, t in self.params.items()},
            "adjacency": None if self.adjacency is None else self.adjacency.tolist(),
            "weight_powers": None if self.weight_powers is None else [w.tolist() for w in self.weight_powers],
            "standardization": None
            if self.node_mean is None
            else {"mean": self.node_mean.tolist(), "std": self.node_std.tolist()},
        }
        return doc

    @classmethod
    def from_dict(cls, doc):
        if doc.get("format") != "stengression-model":
            raise ValueError("not a stengression model document")
        config = ModelConfig(**doc["config"])
        model = cls(
            config,
            adjacency=doc.get("adjacency"),
            weight_powers=doc.get("weight_powers"),
            init=False,
        )
        model.params = {
            name: nn.parameter(np.array(entry["data"], dtype=np.float64).reshape(entry["shape"]), name)
            for name, entry in doc["params"].items()
        }
        stats = doc.get("standardization")
        if stats is not None:
            model.node_mean = np.array(stats["mean"], dtype=np.float64)
            model.node_std = np.array(stats["std"], dtype=np.float64)
        return model

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def trajectory_streams(seed, m):
    """Independent per-trajectory generators, deterministic in ``seed``."""
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(m)]


def _resolve_seed(rng):
    if rng is None:
        return 0
    if isinstance(rng, np.random.Generator):
        return int(rng.integers(0, 2**63 - 1))
    return int(rng)


def ensemble_quantiles(trajectories, quantiles=(0.025, 0.975)):
    """Median and band from ``[M, ...]`` trajectories (Hazen order-statistic interpolation)."""
    lo, hi = quantiles
    qs = np.quantile(trajectories, [0.5, lo, hi], axis=0, method="hazen")
    return qs[0], qs[1], qs[2]


def sample_ensemble(model, window, m=100, rng=None, quantiles=(0.025, 0.975), capture_noise=False, standardized=False, chunk=None):
    """Draw ``m`` forecast trajectories for ``window`` and summarize them.

    ``window`` is ``[p, N, D]`` (or ``[p, N]`` when D == 1, or batched
    ``[B, p, N, D]``) in original units unless ``standardized`` is set;
    trajectories come back in the same units. Each trajectory owns an
    independent noise stream spawned from ``rng`` (a seed or Generator).
    """
    if m < 1:
        raise ValueError("ensemble size must be >= 1")
    cfg = model.config
    y, single = _as_window(window, cfg.n_features)
    if not standardized and model.node_mean is not None:
        y = (y - model.node_mean[None, None, :, None]) / model.node_std[None, None, :, None]
    batch = y.shape[0]
    streams = trajectory_streams(_resolve_seed(rng), m)
    shape = model.noise_shape(batch)
    noise = np.stack([cfg.noise.sample(s, shape) for s in streams])
    chunk = chunk or max(1, 4096 // max(1, batch * cfg.n_nodes))
    outs = []
    with nn.no_grad():
        for lo in range(0, m, chunk):
            k = min(chunk, m - lo)
            tiled = np.broadcast_to(y, (k,) + y.shape).reshape((k * batch,) + y.shape[1:])
            eta = noise[lo : lo + k].reshape((k * batch,) + shape[1:])
            out = model.forward(tiled, noise=eta)
            outs.append(out.data.reshape((k, batch) + out.shape[1:]))
    traj = np.concatenate(outs, axis=0)
    if not standardized and model.node_mean is not None:
        traj = traj * model.node_std[None, None, None, :, None] + model.node_mean[None, None, None, :, None]
    if single:
        traj = traj[:, 0]
        noise = noise[:, 0]
    median, lower, upper = ensemble_quantiles(traj, quantiles)
    return ForecastEnsemble(
        trajectories=traj,
        median=median,
        lower=lower,
        upper=upper,
        quantiles=tuple(quantiles),
        noise=noise if capture_noise else None,
    )
