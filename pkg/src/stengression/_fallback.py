"""Pure numpy implementations of the hot kernels.

The KPSS and CRPS functions mirror ``_kernels.pyx`` and are used when the
compiled extension is unavailable or ``STENGRESSION_PURE_PYTHON=1`` is set.
The LSTM cell is always served from here.
"""
import numpy as np
from scipy.special import expit


def lstm_cell_forward(x, h, c, w_x, w_h, b):
    """Fused LSTM cell without taping.

    Returns ``(h_new, c_new, gates)`` where ``gates`` holds the activated
    forget, input, output and candidate blocks side by side, ``[R, 4H]``.
    """
    hidden = h.shape[1]
    pre = x @ w_x + h @ w_h + b
    gates = np.empty_like(pre)
    gates[:, : 3 * hidden] = expit(pre[:, : 3 * hidden])
    gates[:, 3 * hidden :] = np.tanh(pre[:, 3 * hidden :])
    f = gates[:, :hidden]
    i = gates[:, hidden : 2 * hidden]
    o = gates[:, 2 * hidden : 3 * hidden]
    g = gates[:, 3 * hidden :]
    c_new = i * g + f * c
    h_new = o * np.tanh(c_new)
    return h_new, c_new, gates


def kpss_statistics(series, lags):
    """Level-stationarity KPSS statistic for each row of ``series``."""
    series = np.atleast_2d(np.asarray(series, dtype=np.float64))
    n = series.shape[1]
    resid = series - series.mean(axis=1, keepdims=True)
    partial = np.cumsum(resid, axis=1)
    eta = np.sum(partial * partial, axis=1) / (n * n)
    lrv = np.sum(resid * resid, axis=1)
    for k in range(1, lags + 1):
        weight = 1.0 - k / (lags + 1.0)
        lrv += 2.0 * weight * np.sum(resid[:, k:] * resid[:, :-k], axis=1)
    lrv /= n
    out = np.zeros(series.shape[0])
    ok = lrv > 0.0
    out[ok] = eta[ok] / lrv[ok]
    return out


def crps_ensemble(members, actual):
    """Sample CRPS per column; ``members`` is ``[M, C]`` and ``actual`` ``[C]``."""
    members = np.asarray(members, dtype=np.float64)
    actual = np.asarray(actual, dtype=np.float64)
    m = members.shape[0]
    xs = np.sort(members, axis=0)
    accuracy = np.mean(np.abs(xs - actual[None, :]), axis=0)
    ranks = 2.0 * np.arange(1, m + 1) - m - 1.0
    spread = ranks @ xs / (m * m)
    return accuracy - spread
