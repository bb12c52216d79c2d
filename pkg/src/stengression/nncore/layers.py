"""Layer kinds: linear maps, the LSTM cell, dropout and Xavier initialization."""
from dataclasses import dataclass

import numpy as np

from .. import kernels
from .tensor import ShapeError, Tensor, _accum, _make, as_tensor, matmul

GATES = ("f", "i", "o", "c")


def xavier_init(shape, rng, name=None):
    """Glorot-uniform tensor on ``±sqrt(6 / (fan_in + fan_out))``.

    For 2-D shapes ``(fan_in, fan_out)`` follows the ``x @ W`` convention;
    1-D shapes use their length for both fans.
    """
    shape = tuple(int(s) for s in shape)
    if len(shape) == 0:
        raise ValueError("xavier_init needs at least one dimension")
    if len(shape) == 1:
        fan_in = fan_out = shape[0]
    else:
        receptive = int(np.prod(shape[:-2])) if len(shape) > 2 else 1
        fan_in, fan_out = shape[-2] * receptive, shape[-1] * receptive
    if fan_in + fan_out == 0 or min(shape) == 0:
        raise ValueError(f"xavier_init: zero fan for shape {shape}")
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True, name=name)


def parameter(array, name):
    return Tensor(np.array(array, dtype=np.float64), requires_grad=True, name=name)


def linear(x, weight, bias=None):
    """``x @ weight + bias`` over the last axis of ``x``."""
    out = matmul(x, weight) if x.ndim >= 2 else matmul(x.reshape(1, -1), weight)
    return out + bias if bias is not None else out


@dataclass
class LstmParams:
    """One LSTM layer with gate blocks packed column-wise in the order f, i, o, c.

    ``w_x[:, block]`` is the transpose of the per-gate input matrix (``W_fy``
    etc.), ``w_h[:, block]`` the transpose of the hidden matrix (``W_fh``...).
    """

    w_x: Tensor  # [D_in, 4H]
    w_h: Tensor  # [H, 4H]
    b: Tensor  # [4H]

    @property
    def hidden(self):
        return self.w_h.shape[0]

    @property
    def input_dim(self):
        return self.w_x.shape[0]

    def gate(self, gate):
        """Return ``(W_gh, W_gy, b_g)`` for gate ``gate`` in matrix-vector orientation."""
        k = GATES.index(gate)
        h = self.hidden
        cols = slice(k * h, (k + 1) * h)
        return self.w_h.data[:, cols].T, self.w_x.data[:, cols].T, self.b.data[cols]

    def tensors(self):
        return [self.w_x, self.w_h, self.b]

    def validate(self):
        h = self.hidden
        if self.w_h.shape != (h, 4 * h) or self.w_x.shape[1] != 4 * h or self.b.shape != (4 * h,):
            raise ShapeError(
                f"inconsistent LSTM parameter shapes w_x={self.w_x.shape}, "
                f"w_h={self.w_h.shape}, b={self.b.shape}"
            )

    @classmethod
    def init(cls, input_dim, hidden, rng, prefix="lstm"):
        # Xavier per gate block so fans reflect the individual gate matrices
        w_x = np.concatenate(
            [xavier_init((input_dim, hidden), rng).data for _ in GATES], axis=1
        )
        w_h = np.concatenate([xavier_init((hidden, hidden), rng).data for _ in GATES], axis=1)
        return cls(
            parameter(w_x, f"{prefix}.w_x"),
            parameter(w_h, f"{prefix}.w_h"),
            parameter(np.zeros(4 * hidden), f"{prefix}.b"),
        )


def lstm_step(x, h, c, params):
    """One LSTM cell update for a batch of rows.

    ``x`` is ``[R, D_in]``, ``h`` and ``c`` are ``[R, H]``. Returns ``(h', c')``.
    The cell is a single tape node with an analytic backward pass.
    """
    x, h, c = as_tensor(x), as_tensor(h), as_tensor(c)
    hidden = params.hidden
    if x.ndim != 2 or x.shape[1] != params.input_dim:
        raise ShapeError(f"lstm_step: input shape {x.shape} does not match w_x {params.w_x.shape}")
    if h.shape != (x.shape[0], hidden) or c.shape != h.shape:
        raise ShapeError(f"lstm_step: state shapes h={h.shape}, c={c.shape} vs hidden {hidden}")
    w_x, w_h, b = params.w_x, params.w_h, params.b
    h_new, c_new, gates = kernels.lstm_cell_forward(x.data, h.data, c.data, w_x.data, w_h.data, b.data)
    tanh_c = np.tanh(c_new)
    both = np.concatenate([h_new, c_new], axis=1)

    def backward(g):
        dh = g[:, :hidden]
        dc = g[:, hidden:]
        f = gates[:, :hidden]
        i = gates[:, hidden : 2 * hidden]
        o = gates[:, 2 * hidden : 3 * hidden]
        cand = gates[:, 3 * hidden :]
        dc_total = dc + dh * o * (1.0 - tanh_c * tanh_c)
        dpre = np.concatenate(
            [
                dc_total * c.data * f * (1.0 - f),
                dc_total * cand * i * (1.0 - i),
                dh * tanh_c * o * (1.0 - o),
                dc_total * i * (1.0 - cand * cand),
            ],
            axis=1,
        )
        if x.requires_grad:
            _accum(x, dpre @ w_x.data.T)
        if h.requires_grad:
            _accum(h, dpre @ w_h.data.T)
        if c.requires_grad:
            _accum(c, dc_total * f)
        if w_x.requires_grad:
            _accum(w_x, x.data.T @ dpre)
        if w_h.requires_grad:
            _accum(w_h, h.data.T @ dpre)
        if b.requires_grad:
            _accum(b, dpre.sum(axis=0))

    out = _make(both, (x, h, c, w_x, w_h, b), backward)
    return out[:, :hidden], out[:, hidden:]


def dropout(x, rate, rng, training):
    """Inverted dropout; identity outside training or at rate 0."""
    if not training or rate <= 0.0:
        return x
    keep = rng.random(x.shape) >= rate
    return x * (keep / (1.0 - rate))
