"""Geographic graph construction and spatial autocorrelation.

Distances are great-circle (Haversine) kilometres. Two graph views are
built from the same coordinates: a thresholded Gaussian-kernel adjacency
for graph convolutions and a row-normalized inverse-distance weights
matrix (plus its powers) for spatial-lag layers.
"""
import csv
from dataclasses import dataclass, field

import numpy as np

EARTH_RADIUS_KM = 6371.0


@dataclass(frozen=True)
class NodeCoords:
    node_id: str
    lat: float
    lon: float

    def __post_init__(self):
        _check_latlon(self.lat, self.lon, self.node_id)


@dataclass
class GraphSpec:
    A: np.ndarray
    W: np.ndarray
    sigma_sq: float
    epsilon: float
    alpha: float
    max_lag: int
    W_powers: list = field(default_factory=list)
    node_ids: tuple = ()

    @property
    def n_nodes(self):
        return self.A.shape[0]


def _check_latlon(lat, lon, label="point"):
    lat = np.asarray(lat, dtype=float)
    lon = np.asarray(lon, dtype=float)
    if not (np.all(np.isfinite(lat)) and np.all(np.isfinite(lon))):
        raise ValueError(f"{label}: non-finite coordinate")
    if np.any(np.abs(lat) > 90.0):
        raise ValueError(f"{label}: latitude outside [-90, 90]")
    if np.any(np.abs(lon) > 180.0):
        raise ValueError(f"{label}: longitude outside [-180, 180]")


def haversine(a, b, radius=EARTH_RADIUS_KM):
    """Great-circle distance in km between two ``NodeCoords`` (or ``(lat, lon)`` pairs)."""
    if radius <= 0:
        raise ValueError("radius must be positive")
    lat1, lon1 = (a.lat, a.lon) if isinstance(a, NodeCoords) else a
    lat2, lon2 = (b.lat, b.lon) if isinstance(b, NodeCoords) else b
    _check_latlon([lat1, lat2], [lon1, lon2])
    return float(_haversine_matrix(np.array([lat1]), np.array([lon1]), np.array([lat2]), np.array([lon2]), radius)[0, 0])


def _haversine_matrix(lat1, lon1, lat2, lon2, radius):
    p1 = np.radians(lat1)[:, None]
    p2 = np.radians(lat2)[None, :]
    dphi = p1 - p2
    dlmb = np.radians(lon1)[:, None] - np.radians(lon2)[None, :]
    h = np.sin(dphi / 2.0) ** 2 + np.cos(p1) * np.cos(p2) * np.sin(dlmb / 2.0) ** 2
    return 2.0 * radius * np.arcsin(np.sqrt(np.clip(h, 0.0, 1.0)))


def distance_matrix(coords, radius=EARTH_RADIUS_KM):
    """Symmetric ``[N, N]`` Haversine distance matrix with a zero diagonal."""
    lat = np.array([c.lat for c in coords], dtype=float)
    lon = np.array([c.lon for c in coords], dtype=float)
    _check_latlon(lat, lon, "coordinates")
    d = _haversine_matrix(lat, lon, lat, lon, radius)
    d = 0.5 * (d + d.T)
    np.fill_diagonal(d, 0.0)
    return d


def default_sigma_sq(dist):
    """Square of the median off-diagonal pairwise distance."""
    iu = np.triu_indices_from(dist, k=1)
    med = float(np.median(dist[iu]))
    return med * med if med > 0 else 1.0


def build_adjacency(coords, sigma_sq=None, epsilon=0.1, radius=EARTH_RADIUS_KM, dist=None):
    """Thresholded Gaussian-kernel adjacency ``exp(-d^2 / sigma_sq)``; entries below ``epsilon`` are 0."""
    if len(coords) < 2:
        raise ValueError("adjacency needs at least 2 nodes")
    if not 0.0 <= epsilon < 1.0:
        raise ValueError("epsilon must lie in [0, 1)")
    d = distance_matrix(coords, radius) if dist is None else dist
    if sigma_sq is None:
        sigma_sq = default_sigma_sq(d)
    if sigma_sq <= 0:
        raise ValueError("sigma_sq must be positive")
    a = np.exp(-(d * d) / sigma_sq)
    a[a < epsilon] = 0.0
    np.fill_diagonal(a, 0.0)
    return a


def weight_powers(w, max_lag):
    powers = [np.eye(w.shape[0])]
    for _ in range(max_lag):
        powers.append(powers[-1] @ w)
    return powers


def build_weights(coords, alpha=1.0, max_lag=1, radius=EARTH_RADIUS_KM, dist=None):
    """Row-normalized inverse-distance weights ``1 / d^alpha`` and powers ``[W^0 .. W^L]``."""
    if max_lag < 0:
        raise ValueError("max_lag must be >= 0")
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    d = distance_matrix(coords, radius) if dist is None else dist
    n = d.shape[0]
    off = ~np.eye(n, dtype=bool)
    if np.any(d[off] == 0.0):
        i, j = np.argwhere((d == 0.0) & off)[0]
        raise ValueError(
            f"coincident nodes {coords[i].node_id!r} and {coords[j].node_id!r}: "
            "inverse-distance weights are undefined; deduplicate coordinates"
        )
    w = np.zeros_like(d)
    w[off] = 1.0 / d[off] ** alpha
    rows = w.sum(axis=1, keepdims=True)
    w = np.divide(w, rows, out=np.zeros_like(w), where=rows > 0)
    return w, weight_powers(w, max_lag)


def build_graph(coords, sigma_sq=None, epsilon=0.1, alpha=1.0, max_lag=1, radius=EARTH_RADIUS_KM):
    d = distance_matrix(coords, radius)
    if sigma_sq is None:
        sigma_sq = default_sigma_sq(d)
    a = build_adjacency(coords, sigma_sq, epsilon, radius, dist=d)
    w, powers = build_weights(coords, alpha, max_lag, radius, dist=d)
    return GraphSpec(
        A=a,
        W=w,
        sigma_sq=float(sigma_sq),
        epsilon=float(epsilon),
        alpha=float(alpha),
        max_lag=int(max_lag),
        W_powers=powers,
        node_ids=tuple(c.node_id for c in coords),
    )


def morans_i(values, w):
    """Global Moran's I of ``values`` under weights ``w`` (diagonal ignored)."""
    y = np.asarray(values, dtype=float)
    w = np.asarray(w, dtype=float)
    n = y.shape[0]
    if n < 2:
        raise ValueError("Moran's I needs at least 2 nodes")
    if w.shape != (n, n):
        raise ValueError(f"weights shape {w.shape} does not match {n} values")
    w = w.copy()
    np.fill_diagonal(w, 0.0)
    z = y - y.mean()
    denom_var = float(z @ z)
    if denom_var == 0.0:
        raise ValueError("undefined Moran's I for constant field")
    total = w.sum()
    if total == 0.0:
        raise ValueError("undefined Moran's I for zero total weight")
    return float(n * (z @ w @ z) / (total * denom_var))


def morans_i_series(panel, w):
    """Moran's I per time slice of a ``[T, N]`` panel; constant slices give NaN."""
    panel = np.asarray(panel, dtype=float)
    out = np.full(panel.shape[0], np.nan)
    for t, row in enumerate(panel):
        if np.ptp(row) > 0.0:
            out[t] = morans_i(row, w)
    return out


def read_coords(path):
    """Read a ``node,lat,lon`` CSV into a list of ``NodeCoords`` (file order)."""
    coords = []
    seen = set()
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = [h.strip().lower() for h in next(reader, [])]
        if header[:3] != ["node", "lat", "lon"]:
            raise ValueError(f"{path}: expected header 'node,lat,lon', got {','.join(header)!r}")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) < 3:
                raise ValueError(f"{path}:{lineno}: expected 3 fields")
            node = row[0].strip()
            try:
                lat, lon = float(row[1]), float(row[2])
            except ValueError:
                raise ValueError(f"{path}:{lineno}: non-numeric coordinate for node {node!r}") from None
            if node in seen:
                raise ValueError(f"{path}:{lineno}: duplicate node id {node!r}")
            seen.add(node)
            coords.append(NodeCoords(node, lat, lon))
    return coords
