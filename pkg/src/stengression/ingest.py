"""Panel and coordinate CSV loading."""
import csv
import math

import numpy as np

from .spatial import build_graph, read_coords
from .training import PanelDataset


class DataError(ValueError):
    pass


def read_panel(path):
    """Parse a ``timestamp,<node1>,...`` CSV into ``(timestamps, node_ids, values[T, N])``."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[0].strip().lower() != "timestamp":
            raise DataError(f"{path}: header must start with 'timestamp'")
        nodes = [h.strip() for h in header[1:]]
        if not nodes:
            raise DataError(f"{path}: no node columns")
        if len(set(nodes)) != len(nodes):
            dup = next(n for n in nodes if nodes.count(n) > 1)
            raise DataError(f"{path}: duplicate node column {dup!r}")
        stamps, rows = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise DataError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            vals = []
            for col, cell in zip(nodes, row[1:]):
                text = cell.strip()
                if not text:
                    raise DataError(f"{path}:{lineno}: missing value in column {col!r}")
                try:
                    v = float(text)
                except ValueError:
                    raise DataError(f"{path}:{lineno}: non-numeric value {text!r} in column {col!r}") from None
                if not math.isfinite(v):
                    raise DataError(f"{path}:{lineno}: non-finite value {text!r} in column {col!r}")
                vals.append(v)
            stamps.append(row[0].strip())
            rows.append(vals)
    if not rows:
        raise DataError(f"{path}: no data rows")
    return stamps, nodes, np.array(rows, dtype=np.float64)


def match_coords(coords, node_ids):
    """Reorder ``coords`` to follow ``node_ids``; both sets must agree."""
    by_name = {c.node_id: c for c in coords}
    missing = [n for n in node_ids if n not in by_name]
    if missing:
        raise DataError(f"coordinates missing for node(s): {', '.join(missing)}")
    extra = sorted(set(by_name) - set(node_ids))
    if extra:
        raise DataError(f"coordinates given for unknown node(s): {', '.join(extra)}")
    return [by_name[n] for n in node_ids]


def split_points(t, q, val_size=0):
    """Test is the final ``q`` rows, validation the ``val_size`` rows before it."""
    train_end = t - q - val_size
    if train_end < 1:
        raise DataError(f"panel has {t} rows; q={q} plus val_size={val_size} leaves no training rows")
    return train_end, t - q


def ingest(panel_csv, coords_csv=None, q=1, val_size=0, epsilon=0.1, sigma_sq=None, alpha=1.0, max_lag=1):
    """Load the panel and (optionally) build the graph from matched coordinates."""
    stamps, nodes, values = read_panel(panel_csv)
    train_end, val_end = split_points(values.shape[0], q, val_size)
    try:
        panel = PanelDataset(values, stamps, nodes, train_end, val_end)
    except ValueError as exc:
        raise DataError(str(exc)) from None
    graph = None
    if coords_csv is not None:
        try:
            coords = match_coords(read_coords(coords_csv), nodes)
            graph = build_graph(coords, sigma_sq=sigma_sq, epsilon=epsilon, alpha=alpha, max_lag=max_lag)
        except DataError:
            raise
        except ValueError as exc:
            raise DataError(str(exc)) from None
    return panel, graph
