"""Command-line interface.

Every subcommand reads an optional JSON config (``--config``) whose keys are
the ``RunConfig`` fields; command-line flags override the file. Failures
print one ``error[<kind>]: <reason>`` line on stderr and exit with 1
(usage), 2 (data) or 3 (numeric).
"""
import argparse
import csv
import json
import os
import sys
from contextlib import contextmanager, nullcontext
from dataclasses import dataclass, fields

import numpy as np

from .ergolab import ChainConfig, simulate, summarize_coupling, write_results_csv
from .explain import lag_importance, noise_report, write_json
from .ingest import DataError, ingest
from .metrics import evaluate_ensemble, summarize_runs, write_runs_csv
from .models import EngressionModel, ModelConfig, NumericalError, sample_ensemble
from .nncore import NonFiniteGradientError
from .spatial import morans_i_series
from .training import TrainConfig, TrainingDivergedError, make_windows, train, write_loss_trace

EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 1, 2, 3

HORIZON_PRESETS = {
    "daily-30": 30,
    "daily-60": 60,
    "daily-90": 90,
    "weekly-4": 4,
    "weekly-9": 9,
    "weekly-13": 13,
    "monthly-6": 6,
    "monthly-12": 12,
    "monthly-24": 24,
}


class UsageError(Exception):
    pass


@contextmanager
def _as_usage():
    try:
        yield
    except ValueError as exc:
        raise UsageError(str(exc)) from None


@dataclass
class RunConfig:
    panel: str = None
    coords: str = None
    out: str = "runs"
    model_path: str = None
    kind: str = "STEN"
    p: int = 7
    q: int = 1
    horizon: str = None
    val_size: int = 0
    seed: int = 0
    # architecture
    hidden_dim: int = 32
    embed_dim: int = 4
    lstm_layers: int = 1
    dropout: float = 0.0
    gcn_layers: int = 2
    gcn_hidden: int = 8
    aggregation: str = "mean"
    combine: str = "add"
    gcn_activation: str = "tanh"
    max_lag: int = 1
    # noise
    noise_distribution: str = "gaussian"
    noise_mode: str = None
    noise_concat_dim: int = 1
    noise_scale: float = 1.0
    # optimization
    epochs: int = 100
    batch_size: int = 32
    lr: float = 1e-3
    m_train: int = 2
    beta: float = 1.0
    patience: int = None
    # graph
    epsilon: float = 0.1
    sigma_sq: float = None
    weight_alpha: float = 1.0
    # forecasting and evaluation
    m: int = 100
    repeats: int = 50
    alpha: float = 0.05
    origin: str = "end"
    node: str = None
    # ergodicity simulation
    hidden_dims: str = "16"
    trials: int = 200
    steps: int = 500
    burn_in: int = 50
    n_nodes: int = None

    def __post_init__(self):
        if self.horizon is not None:
            h = str(self.horizon)
            if h in HORIZON_PRESETS:
                self.q = HORIZON_PRESETS[h]
            elif h.isdigit() and int(h) > 0:
                self.q = int(h)
            else:
                raise UsageError(f"unknown horizon {h!r}; use a positive integer or one of {', '.join(HORIZON_PRESETS)}")
        self.kind = str(self.kind).upper()
        if self.m < 1 or self.repeats < 1:
            raise UsageError("m and repeats must be >= 1")

    def model_config(self, n_nodes, seed=None):
        with _as_usage():
            return self._model_config(n_nodes, seed)

    def _model_config(self, n_nodes, seed):
        return ModelConfig(
            kind=self.kind,
            p=self.p,
            q=self.q,
            n_nodes=n_nodes,
            embed_dim=self.embed_dim,
            hidden_dim=self.hidden_dim,
            lstm_layers=self.lstm_layers,
            dropout=self.dropout,
            gcn_layers=self.gcn_layers,
            gcn_hidden=self.gcn_hidden,
            aggregation=self.aggregation,
            combine=self.combine,
            gcn_activation=self.gcn_activation,
            max_lag=self.max_lag,
            seed=self.seed if seed is None else seed,
            noise=self._noise_spec(),
        )

    def _noise_spec(self):
        spec = {"distribution": self.noise_distribution, "concat_dim": self.noise_concat_dim, "scale": self.noise_scale}
        if self.noise_mode is not None:
            spec["mode"] = self.noise_mode
        return spec

    def train_config(self, seed=None):
        with _as_usage():
            return self._train_config(seed)

    def _train_config(self, seed):
        return TrainConfig(
            p=self.p,
            q=self.q,
            m_train=self.m_train,
            beta=self.beta,
            epochs=self.epochs,
            batch_size=self.batch_size,
            lr=self.lr,
            seed=self.seed if seed is None else seed,
            patience=self.patience,
        )

    def resolved_model_path(self):
        return self.model_path or os.path.join(self.out, "model.json")


_FIELD_TYPES = {"patience": int, "sigma_sq": float, "n_nodes": int, "horizon": str, "noise_mode": str}


def load_config(args):
    doc = {}
    if args.config:
        try:
            with open(args.config) as fh:
                doc = json.load(fh)
        except OSError as exc:
            raise DataError(f"cannot read config {args.config}: {exc.strerror}") from None
        except json.JSONDecodeError as exc:
            raise UsageError(f"config {args.config} is not valid JSON: {exc.msg} at line {exc.lineno}") from None
        if not isinstance(doc, dict):
            raise UsageError("config must be a JSON object")
        known = {f.name for f in fields(RunConfig)}
        unknown = sorted(set(doc) - known)
        if unknown:
            raise UsageError(f"unknown config key(s): {', '.join(unknown)}")
    for f in fields(RunConfig):
        value = getattr(args, f.name, None)
        if value is not None:
            doc[f.name] = value
    try:
        return RunConfig(**doc)
    except TypeError as exc:
        raise UsageError(str(exc)) from None


def _need(path, label):
    if not path:
        raise UsageError(f"missing --{label}")
    if not os.path.exists(path):
        raise DataError(f"{label} file not found: {path}")
    return path


def _load_panel(cfg, with_graph=None):
    panel = _need(cfg.panel, "panel")
    want_graph = cfg.kind in ("GCEN", "STEN") if with_graph is None else with_graph
    coords = _need(cfg.coords, "coords") if want_graph else None
    return ingest(
        panel,
        coords,
        q=cfg.q,
        val_size=cfg.val_size,
        epsilon=cfg.epsilon,
        sigma_sq=cfg.sigma_sq,
        alpha=cfg.weight_alpha,
        max_lag=cfg.max_lag,
    )


def _fit(cfg, panel, graph, seed):
    model = EngressionModel(cfg.model_config(panel.raw.shape[1], seed), graph=graph)
    windows = make_windows(panel, cfg.p, cfg.q, "train")
    val = make_windows(panel, cfg.p, cfg.q, "val") if cfg.val_size else None
    return train(model, windows, cfg.train_config(seed), val_windows=val)


def _load_model(cfg, n_nodes):
    path = _need(cfg.resolved_model_path(), "model-path")
    try:
        model = EngressionModel.load(path)
    except (ValueError, KeyError, TypeError) as exc:
        raise DataError(f"cannot load model {path}: {exc}") from None
    if model.config.n_nodes != n_nodes:
        raise DataError(f"model expects {model.config.n_nodes} nodes, panel has {n_nodes}")
    if model.config.q != cfg.q:
        raise UsageError(f"model was trained for q={model.config.q} but the run asks for q={cfg.q}")
    return model


def _window_at(panel, model, origin):
    p = model.config.p
    t = panel.raw.shape[0]
    if origin == "end":
        start = t
    elif origin == "test":
        start = panel.val_end
    else:
        try:
            start = int(origin)
        except ValueError:
            raise UsageError(f"origin must be 'end', 'test' or a row index, got {origin!r}") from None
    if not p <= start <= t:
        raise DataError(f"forecast origin {start} needs {p} preceding rows within a {t}-row panel")
    return panel.raw[start - p : start], start


def _write_rows(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def cmd_train(cfg):
    panel, graph = _load_panel(cfg)
    result = _fit(cfg, panel, graph, cfg.seed)
    path = cfg.resolved_model_path()
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    os.makedirs(cfg.out, exist_ok=True)
    result.model.save(path)
    write_loss_trace(os.path.join(cfg.out, "loss_trace.csv"), result.loss_trace)
    print(f"trained {cfg.kind} for {len(result.loss_trace)} epochs; final loss {result.loss_trace[-1]:.6g}; model {path}")


def cmd_forecast(cfg):
    panel, _ = _load_panel(cfg, with_graph=False)
    model = _load_model(cfg, panel.raw.shape[1])
    window, _ = _window_at(panel, model, cfg.origin)
    ens = sample_ensemble(model, window, m=cfg.m, rng=cfg.seed, quantiles=(cfg.alpha / 2, 1 - cfg.alpha / 2))
    traj = ens.trajectories[..., 0]
    nodes = panel.node_ids
    os.makedirs(cfg.out, exist_ok=True)
    _write_rows(
        os.path.join(cfg.out, "ensemble.csv"),
        ["trajectory", "step", "node", "value"],
        ([k, s + 1, nodes[i], repr(float(traj[k, s, i]))] for k in range(traj.shape[0]) for s in range(traj.shape[1]) for i in range(traj.shape[2])),
    )
    med, lo, hi = ens.median[..., 0], ens.lower[..., 0], ens.upper[..., 0]
    _write_rows(
        os.path.join(cfg.out, "summary.csv"),
        ["step", "node", "median", "lo", "hi"],
        ([s + 1, nodes[i], repr(float(med[s, i])), repr(float(lo[s, i])), repr(float(hi[s, i]))] for s in range(med.shape[0]) for i in range(med.shape[1])),
    )
    print(f"wrote {traj.shape[0]} trajectories of {traj.shape[1]} steps to {cfg.out}")


def cmd_evaluate(cfg):
    """Repeat train-and-forecast ``repeats`` times and score the test block."""
    panel, graph = _load_panel(cfg)
    fixed = _load_model(cfg, panel.raw.shape[1]) if cfg.model_path else None
    actual = panel.raw[panel.val_end :, :, 0]
    history = panel.raw[: panel.val_end, :, 0]
    reports = []
    for child in np.random.SeedSequence(cfg.seed).spawn(cfg.repeats):
        fit_seed, sample_seed = (int(v) for v in child.generate_state(2))
        model = fixed if fixed is not None else _fit(cfg, panel, graph, fit_seed).model
        window, _ = _window_at(panel, model, "test")
        ens = sample_ensemble(model, window, m=cfg.m, rng=sample_seed)
        reports.append(evaluate_ensemble(ens.trajectories, actual, history, cfg.alpha))
    summary = summarize_runs(reports)
    summary.metadata.update({"kind": cfg.kind, "seed": cfg.seed, "retrained": fixed is None})
    os.makedirs(cfg.out, exist_ok=True)
    summary.to_json(os.path.join(cfg.out, "metrics.json"))
    write_runs_csv(os.path.join(cfg.out, "runs.csv"), reports)
    mean = summary.values["mean"]
    print(f"{cfg.kind}: crps {mean['crps']:.6g}, coverage {mean['coverage']:.3f} over {cfg.repeats} runs")


def cmd_simulate(cfg):
    try:
        hidden = [int(h) for h in str(cfg.hidden_dims).split(",") if h.strip()]
    except ValueError:
        raise UsageError(f"hidden dims must be comma-separated integers, got {cfg.hidden_dims!r}") from None
    os.makedirs(cfg.out, exist_ok=True)
    records = []
    for h in hidden:
        with _as_usage():
            chain = ChainConfig(kind=cfg.kind, n_nodes=cfg.n_nodes, hidden_dim=h, T=cfg.steps, burn_in=cfg.burn_in, trials=cfg.trials, seed=cfg.seed)
        recs, pvalues, _, trials = simulate(chain)
        records.extend(recs)
        rate = float(np.mean(np.concatenate(pvalues) > 0.05))
        coup = summarize_coupling(trials)
        print(f"{chain.kind} hidden={h}: kpss pass rate {rate:.3f}, mean slope {coup.mean_slope:.3f}, merged {coup.merged_share:.2f}")
    write_results_csv(os.path.join(cfg.out, "ergodicity.csv"), records)


def _node_index(node, ids):
    if node is None:
        return 0
    if node in ids:
        return ids.index(node)
    raise DataError(f"unknown node {node!r}")


def cmd_explain(cfg):
    panel, _ = _load_panel(cfg, with_graph=False)
    model = _load_model(cfg, panel.raw.shape[1])
    idx = _node_index(cfg.node, panel.node_ids)
    window, _ = _window_at(panel, model, cfg.origin)
    ens = sample_ensemble(model, window, m=cfg.m, rng=cfg.seed, capture_noise=True)
    os.makedirs(cfg.out, exist_ok=True)
    ref = "explain_trajectories.csv"
    traj = ens.trajectories[:, :, idx, 0]
    _write_rows(
        os.path.join(cfg.out, ref),
        ["trajectory", "step", "value"],
        ([k, s + 1, repr(float(traj[k, s]))] for k in range(traj.shape[0]) for s in range(traj.shape[1])),
    )
    doc = {"noise": noise_report(ens, idx, ref)}
    doc["noise"]["node"] = panel.node_ids[idx]
    doc["lags"] = lag_importance(model).to_dict()["lags"] if model.kind == "STEN" else None
    write_json(os.path.join(cfg.out, "explain.json"), doc)
    print(f"wrote explainability report for node {panel.node_ids[idx]!r}")


def cmd_moran(cfg):
    panel, graph = _load_panel(cfg, with_graph=True)
    series = morans_i_series(panel.raw[:, :, 0], graph.W)
    os.makedirs(cfg.out, exist_ok=True)
    _write_rows(os.path.join(cfg.out, "morans_i.csv"), ["timestamp", "morans_i"], ([t, repr(float(v))] for t, v in zip(panel.timestamps, series)))
    print(f"mean Moran's I {np.nanmean(series):.4f} over {len(series)} steps")


COMMANDS = {
    "train": cmd_train,
    "forecast": cmd_forecast,
    "evaluate": cmd_evaluate,
    "simulate": cmd_simulate,
    "explain": cmd_explain,
    "moran": cmd_moran,
}


HELP = {
    "train": "fit a model and write model.json plus loss_trace.csv",
    "forecast": "sample an ensemble and write ensemble.csv plus summary.csv",
    "evaluate": "run the repeated test protocol and write metrics.json plus runs.csv",
    "simulate": "run ergodicity chains and write ergodicity.csv",
    "explain": "write noise magnitudes and lag importances to explain.json",
    "moran": "write Moran's I per time step to morans_i.csv",
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser():
    parser = _Parser(prog="stengression", description="Spatiotemporal engression forecasting.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    for name in COMMANDS:
        cmd = sub.add_parser(name, help=HELP[name])
        cmd.add_argument("--config", help="JSON file with RunConfig keys")
        cmd.add_argument("--threads", type=int, help="cap BLAS/OpenMP threads (1 gives bit-identical output)")
        for f in fields(RunConfig):
            kind = _FIELD_TYPES.get(f.name, type(f.default) if f.default is not None else str)
            cmd.add_argument("--" + f.name.replace("_", "-"), dest=f.name, type=kind, default=None)
    return parser


def _fail(kind, code, message):
    text = " ".join(str(message).split())
    print(f"error[{kind}]: {text}", file=sys.stderr)
    return code


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        if not args.command:
            raise UsageError("a subcommand is required: " + ", ".join(COMMANDS))
        cfg = load_config(args)
        if args.threads is not None and args.threads < 1:
            raise UsageError("--threads must be >= 1")
        if args.threads is not None:
            from threadpoolctl import threadpool_limits

            limit = threadpool_limits(limits=args.threads)
        else:
            limit = nullcontext()
        with limit:
            COMMANDS[args.command](cfg)
    except UsageError as exc:
        return _fail("usage", EXIT_USAGE, exc)
    except (TrainingDivergedError, NumericalError, NonFiniteGradientError, FloatingPointError) as exc:
        return _fail("numeric", EXIT_NUMERIC, exc)
    except (DataError, OSError) as exc:
        return _fail("data", EXIT_DATA, exc)
    except ValueError as exc:
        return _fail("data", EXIT_DATA, exc)
    return 0


if __name__ == "__main__":
    sys.exit(main())
