"""Post-hoc explainability: per-trajectory noise magnitudes and spatial-lag importances."""
import json
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class LagImportance:
    frobenius: np.ndarray
    percentages: np.ndarray

    def to_dict(self):
        return {
            "lags": [
                {"l": l, "frob": float(f), "pct": float(p)}
                for l, (f, p) in enumerate(zip(self.frobenius, self.percentages))
            ]
        }


def noise_norms(noise):
    """Frobenius norm of each trajectory's ``[p, D']`` noise block.

    ``noise`` is ``[M, p, D']`` for a single node; the result has length M.
    """
    eta = np.asarray(noise, dtype=float)
    if eta.ndim < 2:
        raise ValueError(f"expected [M, ...] noise, got shape {eta.shape}")
    return np.sqrt(np.sum(eta.reshape(eta.shape[0], -1) ** 2, axis=1))


def lag_importance(model_or_phis):
    """Relative importance of each spatial lag from the STAR mixing matrices."""
    if hasattr(model_or_phis, "phis"):
        if model_or_phis.kind != "STEN":
            raise ValueError(f"lag importance needs a STEN model, got {model_or_phis.kind}")
        phis = [p.data for p in model_or_phis.phis()]
    else:
        phis = [np.asarray(p, dtype=float) for p in model_or_phis]
    frob = np.array([np.linalg.norm(p) for p in phis])
    total = frob.sum()
    if not np.isfinite(total) or total == 0.0:
        raise ValueError("all lag matrices are zero; importances are undefined")
    pct = 100.0 * frob / total
    return LagImportance(frob, pct)


def noise_report(ensemble, node, trajectories_ref=None):
    norms = ensemble.noise_norms(node)
    return {"node": node, "noise_norms": [float(v) for v in norms], "trajectories_ref": trajectories_ref}


def write_json(path, doc):
    text = json.dumps(doc, indent=2, sort_keys=True) + "\n"
    with open(path, "w") as fh:
        fh.write(text)
    return text
