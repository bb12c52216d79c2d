"""Backend selection for the hot kernels (KPSS statistics and ensemble CRPS).

The compiled extension is preferred; set ``STENGRESSION_PURE_PYTHON=1``
before import to force the numpy fallback. ``BACKEND`` names the choice.
"""
import os

from . import _fallback as fallback

compiled = None
if os.environ.get("STENGRESSION_PURE_PYTHON", "") != "1":
    try:
        from . import _kernels as compiled
    except ImportError:
        compiled = None

_impl = compiled if compiled is not None else fallback
BACKEND = "compiled" if compiled is not None else "python"

# numpy's vectorized exp/tanh beat scalar libm calls at chain sizes, so the
# LSTM cell has no compiled variant
lstm_cell_forward = fallback.lstm_cell_forward
kpss_statistics = _impl.kpss_statistics
crps_ensemble = _impl.crps_ensemble

__all__ = [
    "BACKEND",
    "compiled",
    "crps_ensemble",
    "fallback",
    "kpss_statistics",
    "lstm_cell_forward",
]
