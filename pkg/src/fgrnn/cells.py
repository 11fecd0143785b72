"""Vanilla RNN and LSTM cells and sequence unrolling.

Weights use the (out, in) layout.  LSTM gates are fused into one block of
4h rows ordered input, forget, output, candidate.  Cells take 1-D vectors or
(batch, dim) matrices; vectors are promoted to one-row matrices internally
so that both forms go through the same BLAS kernels.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


def _check(op: str, name: str, got: int, want: int):
    if got != want:
        raise ad.ShapeError(f"{op}: {name} has dimension {got}, expected {want}")


def _rows(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 1:
        return ad.reshape(x, (1, x.shape[0])), True
    return x, False


def _unrows(x: Tensor, vec: bool) -> Tensor:
    return ad.reshape(x, (x.shape[-1],)) if vec else x


class RnnCell:
    """``h_t = tanh(W_ih x + b_ih + W_hh h + b_hh)``."""

    family = "rnn"

    def __init__(self, input_dim: int, hidden_dim: int, rng: np.random.Generator | None = None,
                 dtype=ad.DEFAULT_DTYPE, prefix: str = ""):
        self.input_dim = input_dim
        self.hidden_dim = hidden_dim
        rng = rng if rng is not None else np.random.default_rng(0)
        h = hidden_dim
        self.W_ih = ad.parameter(ad.init_matrix(rng, (h, input_dim), input_dim, dtype), f"{prefix}W_ih")
        self.b_ih = ad.parameter(np.zeros(h, dtype), f"{prefix}b_ih")
        self.W_hh = ad.parameter(ad.init_matrix(rng, (h, h), h, dtype), f"{prefix}W_hh")
        self.b_hh = ad.parameter(np.zeros(h, dtype), f"{prefix}b_hh")
        self.prefix = prefix

    def parameters(self) -> dict[str, Tensor]:
        p = self.prefix
        return {f"{p}W_ih": self.W_ih, f"{p}b_ih": self.b_ih, f"{p}W_hh": self.W_hh, f"{p}b_hh": self.b_hh}

    def zero_state(self, batch: int | None = None) -> tuple[Tensor]:
        shape = (self.hidden_dim,) if batch is None else (batch, self.hidden_dim)
        return (Tensor(np.zeros(shape, self.W_hh.dtype)),)

    def step(self, x: Tensor, h: Tensor) -> Tensor:
        _check("rnn_step", "x_t", x.shape[-1], self.input_dim)
        _check("rnn_step", "h_prev", h.shape[-1], self.hidden_dim)
        x, vec = _rows(x)
        h, _ = _rows(h)
        pre = ad.affine(x, self.W_ih, self.b_ih) + ad.affine(h, self.W_hh, self.b_hh)
        return _unrows(ad.tanh(pre), vec)

    def __call__(self, x, state):
        return (self.step(x, state[0]),)


class LstmCell:
    """Standard LSTM; ``c = f*c_prev + i*g`` and ``h = o*tanh(c)``."""

    family = "lstm"

    def __init__(self, input_dim: int, hidden_dim: int, rng: np.random.Generator | None = None,
                 dtype=ad.DEFAULT_DTYPE, prefix: str = ""):
        self.input_dim = input_dim
        self.hidden_dim = hidden_dim
        rng = rng if rng is not None else np.random.default_rng(0)
        h = hidden_dim
        self.W_ih = ad.parameter(ad.init_matrix(rng, (4 * h, input_dim), input_dim, dtype), f"{prefix}W_ih")
        self.b_ih = ad.parameter(np.zeros(4 * h, dtype), f"{prefix}b_ih")
        self.W_hh = ad.parameter(ad.init_matrix(rng, (4 * h, h), h, dtype), f"{prefix}W_hh")
        self.b_hh = ad.parameter(np.zeros(4 * h, dtype), f"{prefix}b_hh")
        self.prefix = prefix

    def parameters(self) -> dict[str, Tensor]:
        p = self.prefix
        return {f"{p}W_ih": self.W_ih, f"{p}b_ih": self.b_ih, f"{p}W_hh": self.W_hh, f"{p}b_hh": self.b_hh}

    def gate_view(self, which: str) -> slice:
        """Rows of the fused weight belonging to gate ``i``, ``f``, ``o`` or ``g``."""
        k = "ifog".index(which)
        h = self.hidden_dim
        return slice(k * h, (k + 1) * h)

    def zero_state(self, batch: int | None = None) -> tuple[Tensor, Tensor]:
        shape = (self.hidden_dim,) if batch is None else (batch, self.hidden_dim)
        dt = self.W_hh.dtype
        return Tensor(np.zeros(shape, dt)), Tensor(np.zeros(shape, dt))

    def gates(self, x: Tensor, h: Tensor) -> tuple[Tensor, Tensor, Tensor, Tensor]:
        """Input, forget, output gate activations and candidate, on row matrices."""
        hd = self.hidden_dim
        pre = ad.affine(x, self.W_ih, self.b_ih) + ad.affine(h, self.W_hh, self.b_hh)
        sig = ad.sigmoid(pre[..., : 3 * hd])
        cand = ad.tanh(pre[..., 3 * hd:])
        return sig[..., :hd], sig[..., hd: 2 * hd], sig[..., 2 * hd:], cand

    def step(self, x: Tensor, h: Tensor, c: Tensor) -> tuple[Tensor, Tensor]:
        _check("lstm_step", "x_t", x.shape[-1], self.input_dim)
        _check("lstm_step", "h_prev", h.shape[-1], self.hidden_dim)
        _check("lstm_step", "c_prev", c.shape[-1], self.hidden_dim)
        x, vec = _rows(x)
        h, _ = _rows(h)
        c, _ = _rows(c)
        i, f, o, g = self.gates(x, h)
        c_new = f * c + i * g
        h_new = o * ad.tanh(c_new)
        return _unrows(h_new, vec), _unrows(c_new, vec)

    def __call__(self, x, state):
        return self.step(x, state[0], state[1])


def rnn_step(params: RnnCell, x_t: Tensor, h_prev: Tensor) -> Tensor:
    return params.step(ad.as_tensor(x_t, params.W_hh.dtype), ad.as_tensor(h_prev, params.W_hh.dtype))


def lstm_step(params: LstmCell, x_t: Tensor, h_prev: Tensor, c_prev: Tensor) -> tuple[Tensor, Tensor]:
    dt = params.W_hh.dtype
    return params.step(ad.as_tensor(x_t, dt), ad.as_tensor(h_prev, dt), ad.as_tensor(c_prev, dt))


@dataclass
class CellTrace:
    """Hidden (and, for LSTM, cell) states after every step of an unroll."""

    h: list[Tensor] = field(default_factory=list)
    c: list[Tensor] | None = None

    def __len__(self):
        return len(self.h)

    @property
    def final_state(self) -> tuple[Tensor, ...]:
        return (self.h[-1],) if self.c is None else (self.h[-1], self.c[-1])

    def __add__(self, other: "CellTrace") -> "CellTrace":
        if (self.c is None) != (other.c is None):
            raise ValueError("cannot join an RNN trace with an LSTM trace")
        c = None if self.c is None else self.c + other.c
        return CellTrace(self.h + other.h, c)


def unroll(cell: RnnCell | LstmCell, xs: Sequence[Tensor], state: tuple[Tensor, ...] | None = None) -> CellTrace:
    """Run ``cell`` over ``xs``, threading state; starts from zeros unless ``state`` is given."""
    if len(xs) == 0:
        raise ValueError("unroll: empty input sequence")
    dt = cell.W_hh.dtype
    xs = [ad.as_tensor(x, dt) for x in xs]
    if state is None:
        state = cell.zero_state(None if xs[0].ndim == 1 else xs[0].shape[0])
    trace = CellTrace(c=[] if cell.family == "lstm" else None)
    for x in xs:
        state = cell(x, state)
        trace.h.append(state[0])
        if trace.c is not None:
            trace.c.append(state[1])
    return trace
