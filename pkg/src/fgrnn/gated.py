"""Fixation-gated recurrent architectures.

Two families share one gating convention: a per-token duration decides how
much of the recurrent state is recomputed.

* FGP (parallel): K independent components; component k is updated iff
  ``k <= d_t``.  Components are stored stacked as one (K, batch, h) tensor
  and advanced with batched matmuls.
* FGL (layer): L stacked layers; layer l is updated iff ``l <= d_t``.

Hard gates are integer schedules and carry untouched state with ``where``,
which copies values bit for bit.  Soft gates turn a real duration into
per-component coefficients ``alpha = sigmoid((k - 1 - d) * s)`` and blend
``(1 - alpha) * update + alpha * previous``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .cells import LstmCell, RnnCell


# ---------------------------------------------------------------------------
# gate schedules
# ---------------------------------------------------------------------------

@dataclass
class GateSchedule:
    """Per-token gate signal for a (time, batch) block of tokens.

    ``hard`` values are integers in ``{1..n}``; ``soft`` values are a real
    tensor of normalized durations, deliberately left unclamped.
    """

    mode: str
    values: np.ndarray | Tensor
    n: int
    s: float = 4.0

    def __post_init__(self):
        if self.mode == "hard":
            vals = np.asarray(self.values)
            if vals.dtype.kind not in "iu":
                if not np.all(np.equal(np.mod(vals, 1), 0)):
                    raise ValueError("hard gate values must be integers")
                vals = vals.astype(np.int64)
            if vals.size and (vals.min() < 1 or vals.max() > self.n):
                raise ValueError(f"hard gate values must lie in 1..{self.n}, got range "
                                 f"[{vals.min()}, {vals.max()}]")
            self.values = vals
        elif self.mode == "soft":
            self.values = ad.as_tensor(self.values)
        else:
            raise ValueError(f"unknown gate mode {self.mode!r}")

    def __len__(self):
        return self.values.shape[0]

    @property
    def shape(self):
        return self.values.shape

    def at(self, t: int) -> "StepGate":
        if self.mode == "hard":
            d = np.atleast_1d(self.values[t])
            return StepGate(mask=hard_mask(d, self.n))
        return StepGate(alpha=gate_coefficients(self.values[t], self.n, self.s))


@dataclass
class StepGate:
    """Gate for one timestep: a boolean mask (n, B, 1) or coefficients (n, B, 1).

    ``None`` for both means fully active.
    """

    mask: np.ndarray | None = None
    alpha: Tensor | None = None

    def layer(self, l: int) -> "StepGate":
        if self.mask is not None:
            return StepGate(mask=self.mask[l])
        if self.alpha is not None:
            return StepGate(alpha=self.alpha[l])
        return self

    def apply(self, new: Tensor, old: Tensor) -> Tensor:
        if self.mask is not None:
            if not self.mask.any():
                return old
            return ad.where(self.mask, new, old)
        if self.alpha is not None:
            return soft_gate_combine(new, old, self.alpha)
        return new


def hard_mask(d: np.ndarray, n: int) -> np.ndarray:
    """Boolean (n, B, 1) mask with entry k true iff ``k + 1 <= d[b]``."""
    d = np.asarray(d)
    return (np.arange(1, n + 1)[:, None, None] <= d[None, :, None])


def gate_coefficients(d_bar, n: int, s: float = 4.0) -> Tensor:
    """``alpha^k = sigmoid((k - 1 - d_bar) * s)`` for k = 1..n.

    ``d_bar`` of shape (B,) gives (n, B, 1); a scalar gives (n,).
    """
    d_bar = ad.as_tensor(d_bar)
    offsets = Tensor(np.arange(n, dtype=d_bar.dtype))
    if d_bar.ndim == 0:
        return ad.sigmoid((offsets - d_bar) * s)
    offsets = ad.reshape(offsets, (n, 1, 1))
    d3 = ad.reshape(d_bar, (1,) + d_bar.shape + (1,))
    return ad.sigmoid((offsets - d3) * s)


def soft_gate_combine(candidate: Tensor, h_prev: Tensor, alpha) -> Tensor:
    """``(1 - alpha) * candidate + alpha * h_prev``."""
    candidate = ad.as_tensor(candidate)
    h_prev = ad.as_tensor(h_prev, candidate.dtype)
    alpha = ad.as_tensor(alpha, candidate.dtype)
    return (1 - alpha) * candidate + alpha * h_prev


# ---------------------------------------------------------------------------
# state containers
# ---------------------------------------------------------------------------

@dataclass
class ComponentBank:
    """States of K parallel components, stacked as (K, batch, h)."""

    h: Tensor
    c: Tensor | None = None

    @property
    def k(self) -> int:
        return self.h.shape[0]

    def components(self) -> list[Tensor]:
        return [self.h[k] for k in range(self.k)]

    def concat(self) -> Tensor:
        """(batch, K*h) in component order."""
        k, b, h = self.h.shape
        return ad.reshape(ad.transpose(self.h, (1, 0, 2)), (b, k * h))

    def detach(self) -> "ComponentBank":
        return ComponentBank(self.h.detach(), None if self.c is None else self.c.detach())


@dataclass
class LayerBank:
    """States of L stacked layers, one (batch, h) tensor per layer."""

    h: list[Tensor]
    c: list[Tensor] | None = None

    def components(self) -> list[Tensor]:
        return list(self.h)

    def concat(self) -> Tensor:
        return self.h[0] if len(self.h) == 1 else ad.concat(self.h, axis=-1)

    def detach(self) -> "LayerBank":
        return LayerBank([t.detach() for t in self.h],
                         None if self.c is None else [t.detach() for t in self.c])


# ---------------------------------------------------------------------------
# shared run loop
# ---------------------------------------------------------------------------

class Recurrent:
    """Common driver: ``run`` advances ``step`` over a list of per-step inputs."""

    gated = True
    n_gates = 1

    def parameters(self) -> dict[str, Tensor]:
        raise NotImplementedError

    def run(self, xs: Sequence[Tensor], state=None, schedule: GateSchedule | None = None):
        if len(xs) == 0:
            raise ValueError("run: empty input sequence")
        if state is None:
            state = self.zero_state(xs[0].shape[0])
        if schedule is not None and len(schedule) != len(xs):
            raise ValueError(f"gate schedule length {len(schedule)} != sequence length {len(xs)}")
        outs = []
        for t, x in enumerate(xs):
            gate = schedule.at(t) if schedule is not None else StepGate()
            state = self.step(x, state, gate)
            outs.append(self.output(state))
        return outs, state


# ---------------------------------------------------------------------------
# fixation-guided parallel
# ---------------------------------------------------------------------------

class FgpRnn(Recurrent):
    """K parallel tanh RNN components over a shared input."""

    family = "rnn"

    def __init__(self, input_dim: int, hidden_dim: int, k: int, rng: np.random.Generator | None = None,
                 dtype=ad.DEFAULT_DTYPE, prefix: str = ""):
        self.input_dim, self.hidden_dim, self.k = input_dim, hidden_dim, k
        self.n_gates = k
        rng = rng if rng is not None else np.random.default_rng(0)
        g = self._gate_rows() * hidden_dim
        self.W_ih = ad.parameter(ad.init_matrix(rng, (k, g, input_dim), input_dim, dtype), f"{prefix}W_ih")
        self.b_ih = ad.parameter(np.zeros((k, 1, g), dtype), f"{prefix}b_ih")
        self.W_hh = ad.parameter(ad.init_matrix(rng, (k, g, hidden_dim), hidden_dim, dtype), f"{prefix}W_hh")
        self.b_hh = ad.parameter(np.zeros((k, 1, g), dtype), f"{prefix}b_hh")
        self.prefix = prefix

    @staticmethod
    def _gate_rows() -> int:
        return 1

    @classmethod
    def from_cells(cls, cells: Sequence, prefix: str = ""):
        """Bank built from K vanilla cells, copying their weights."""
        first = cells[0]
        m = cls(first.input_dim, first.hidden_dim, len(cells), dtype=first.W_hh.dtype, prefix=prefix)
        m.W_ih.data = np.stack([c.W_ih.data for c in cells])
        m.b_ih.data = np.stack([c.b_ih.data[None, :] for c in cells])
        m.W_hh.data = np.stack([c.W_hh.data for c in cells])
        m.b_hh.data = np.stack([c.b_hh.data[None, :] for c in cells])
        return m

    @property
    def output_dim(self) -> int:
        return self.k * self.hidden_dim

    def parameters(self) -> dict[str, Tensor]:
        p = self.prefix
        return {f"{p}W_ih": self.W_ih, f"{p}b_ih": self.b_ih, f"{p}W_hh": self.W_hh, f"{p}b_hh": self.b_hh}

    def zero_state(self, batch: int) -> ComponentBank:
        z = np.zeros((self.k, batch, self.hidden_dim), self.W_hh.dtype)
        return ComponentBank(Tensor(z))

    def _preact(self, x: Tensor, h: Tensor) -> Tensor:
        if x.shape[-1] != self.input_dim:
            raise ad.ShapeError(f"fgp step: input dimension {x.shape[-1]} != {self.input_dim}")
        return ad.affine(x, self.W_ih, self.b_ih) + ad.affine(h, self.W_hh, self.b_hh)

    def step(self, x: Tensor, bank: ComponentBank, gate: StepGate) -> ComponentBank:
        cand = ad.tanh(self._preact(x, bank.h))
        return ComponentBank(gate.apply(cand, bank.h))

    def output(self, bank: ComponentBank) -> Tensor:
        return bank.concat()


class FgpLstm(FgpRnn):
    """K parallel LSTM components; the gate freezes only the cell state.

    Gates and ``h = o * tanh(c)`` are recomputed for every component at every
    step, so a frozen component still emits a fresh hidden state.
    """

    family = "lstm"

    @staticmethod
    def _gate_rows() -> int:
        return 4

    def zero_state(self, batch: int) -> ComponentBank:
        z = np.zeros((self.k, batch, self.hidden_dim), self.W_hh.dtype)
        return ComponentBank(Tensor(z), Tensor(z.copy()))

    def step(self, x: Tensor, bank: ComponentBank, gate: StepGate) -> ComponentBank:
        hd = self.hidden_dim
        pre = self._preact(x, bank.h)
        sig = ad.sigmoid(pre[..., : 3 * hd])
        g = ad.tanh(pre[..., 3 * hd:])
        i, f, o = sig[..., :hd], sig[..., hd: 2 * hd], sig[..., 2 * hd:]
        c_full = f * bank.c + i * g
        c_new = gate.apply(c_full, bank.c)
        return ComponentBank(o * ad.tanh(c_new), c_new)


@dataclass
class StackProjection:
    """Affine map from a layer's concatenated bank to the next layer's input."""

    W_oh: Tensor
    b_oh: Tensor

    def __call__(self, bank_out: Tensor) -> Tensor:
        if bank_out.shape[-1] != self.W_oh.shape[1]:
            raise ad.ShapeError(f"stack projection: input dimension {bank_out.shape[-1]} "
                                f"!= {self.W_oh.shape[1]}")
        return ad.affine(bank_out, self.W_oh, self.b_oh)


class StackedFgp(Recurrent):
    """Stacked FGP layers with a projection between consecutive layers.

    Every layer is gated by the same duration at a given step.
    """

    def __init__(self, input_dim: int, hidden_dim: int, k: int, n_layers: int, family: str = "rnn",
                 proj_dim: int | None = None, rng: np.random.Generator | None = None,
                 dtype=ad.DEFAULT_DTYPE, prefix: str = ""):
        if n_layers < 1:
            raise ValueError("stacked FGP needs at least one layer")
        rng = rng if rng is not None else np.random.default_rng(0)
        cls = FgpLstm if family == "lstm" else FgpRnn
        self.family, self.k, self.hidden_dim, self.n_layers = family, k, hidden_dim, n_layers
        self.n_gates = k
        self.input_dim = input_dim
        self.proj_dim = proj_dim or hidden_dim
        self.layers: list[FgpRnn] = []
        self.projections: list[StackProjection] = []
        in_dim = input_dim
        for l in range(n_layers):
            self.layers.append(cls(in_dim, hidden_dim, k, rng, dtype, prefix=f"{prefix}l{l}."))
            if l < n_layers - 1:
                fan = k * hidden_dim
                self.projections.append(StackProjection(
                    ad.parameter(ad.init_matrix(rng, (self.proj_dim, fan), fan, dtype), f"{prefix}l{l}.W_oh"),
                    ad.parameter(np.zeros(self.proj_dim, dtype), f"{prefix}l{l}.b_oh")))
                in_dim = self.proj_dim

    @property
    def output_dim(self) -> int:
        return self.k * self.hidden_dim

    def parameters(self) -> dict[str, Tensor]:
        out = {}
        for l, layer in enumerate(self.layers):
            out.update(layer.parameters())
            if l < len(self.projections):
                pr = self.projections[l]
                out[pr.W_oh.name] = pr.W_oh
                out[pr.b_oh.name] = pr.b_oh
        return out

    def zero_state(self, batch: int) -> list[ComponentBank]:
        return [layer.zero_state(batch) for layer in self.layers]

    def step(self, x: Tensor, banks: list[ComponentBank], gate: StepGate) -> list[ComponentBank]:
        new = []
        inp = x
        for l, layer in enumerate(self.layers):
            bank = layer.step(inp, banks[l], gate)
            new.append(bank)
            if l < len(self.projections):
                inp = self.projections[l](bank.concat())
        return new

    def output(self, banks: list[ComponentBank]) -> Tensor:
        return banks[-1].concat()


# ---------------------------------------------------------------------------
# fixation-guided layers
# ---------------------------------------------------------------------------

class Fgl(Recurrent):
    """L stacked cells; layer l runs iff ``l <= d_t``.

    For LSTM layers both ``c`` and ``h`` of an inactive layer are carried.
    """

    def __init__(self, input_dim: int, hidden_dim: int, n_layers: int, family: str = "rnn",
                 rng: np.random.Generator | None = None, dtype=ad.DEFAULT_DTYPE, prefix: str = ""):
        rng = rng if rng is not None else np.random.default_rng(0)
        cls = LstmCell if family == "lstm" else RnnCell
        self.family, self.hidden_dim, self.n_layers = family, hidden_dim, n_layers
        self.n_gates = n_layers
        self.input_dim = input_dim
        self.cells = [cls(input_dim if l == 0 else hidden_dim, hidden_dim, rng, dtype, prefix=f"{prefix}l{l}.")
                      for l in range(n_layers)]

    @property
    def output_dim(self) -> int:
        return self.n_layers * self.hidden_dim

    def parameters(self) -> dict[str, Tensor]:
        out = {}
        for cell in self.cells:
            out.update(cell.parameters())
        return out

    def zero_state(self, batch: int) -> LayerBank:
        states = [cell.zero_state(batch) for cell in self.cells]
        h = [s[0] for s in states]
        c = [s[1] for s in states] if self.family == "lstm" else None
        return LayerBank(h, c)

    def step(self, x: Tensor, bank: LayerBank, gate: StepGate) -> LayerBank:
        hs, cs = [], [] if bank.c is not None else None
        inp = x
        for l, cell in enumerate(self.cells):
            lg = gate.layer(l)
            if lg.mask is not None and not lg.mask.any():
                # nothing in the batch reaches this layer or any above it
                hs.extend(bank.h[l:])
                if cs is not None:
                    cs.extend(bank.c[l:])
                break
            if cs is None:
                h_new = lg.apply(cell.step(inp, bank.h[l]), bank.h[l])
            else:
                h_full, c_full = cell.step(inp, bank.h[l], bank.c[l])
                cs.append(lg.apply(c_full, bank.c[l]))
                h_new = lg.apply(h_full, bank.h[l])
            hs.append(h_new)
            inp = h_new
        return LayerBank(hs, cs)

    def output(self, bank: LayerBank) -> Tensor:
        return bank.concat()


class Vanilla(Recurrent):
    """Ungated stacked RNN/LSTM; the output is the top layer's hidden state."""

    gated = False

    def __init__(self, input_dim: int, hidden_dim: int, n_layers: int = 1, family: str = "rnn",
                 rng: np.random.Generator | None = None, dtype=ad.DEFAULT_DTYPE, prefix: str = ""):
        rng = rng if rng is not None else np.random.default_rng(0)
        cls = LstmCell if family == "lstm" else RnnCell
        self.family, self.hidden_dim, self.n_layers = family, hidden_dim, n_layers
        self.input_dim = input_dim
        self.cells = [cls(input_dim if l == 0 else hidden_dim, hidden_dim, rng, dtype, prefix=f"{prefix}l{l}.")
                      for l in range(n_layers)]

    @property
    def output_dim(self) -> int:
        return self.hidden_dim

    def parameters(self) -> dict[str, Tensor]:
        out = {}
        for cell in self.cells:
            out.update(cell.parameters())
        return out

    def zero_state(self, batch: int) -> LayerBank:
        states = [cell.zero_state(batch) for cell in self.cells]
        return LayerBank([s[0] for s in states], [s[1] for s in states] if self.family == "lstm" else None)

    def step(self, x: Tensor, bank: LayerBank, gate: StepGate | None = None) -> LayerBank:
        hs, cs = [], [] if bank.c is not None else None
        inp = x
        for l, cell in enumerate(self.cells):
            if cs is None:
                h = cell.step(inp, bank.h[l])
            else:
                h, c = cell.step(inp, bank.h[l], bank.c[l])
                cs.append(c)
            hs.append(h)
            inp = h
        return LayerBank(hs, cs)

    def output(self, bank: LayerBank) -> Tensor:
        return bank.h[-1]

    def run(self, xs, state=None, schedule=None):
        return super().run(xs, state, None)


def detach_state(state):
    if isinstance(state, list):
        return [s.detach() for s in state]
    return state.detach()


# ---------------------------------------------------------------------------
# single-sequence step functions
# ---------------------------------------------------------------------------

def _check_gate(d_t: int, n: int) -> np.ndarray:
    d = np.atleast_1d(np.asarray(d_t))
    if d.dtype.kind not in "iu" or d.min() < 1 or d.max() > n:
        raise ValueError(f"gate value {d_t!r} outside 1..{n}")
    return d


def _as_rows(x, dtype) -> Tensor:
    x = ad.as_tensor(x, dtype)
    return ad.reshape(x, (1, x.shape[0])) if x.ndim == 1 else x


def fgp_rnn_step(model: FgpRnn, bank: ComponentBank, x_t, d_t) -> ComponentBank:
    """Advance an FGP RNN bank by one token with hard duration ``d_t``."""
    d = _check_gate(d_t, model.k)
    return model.step(_as_rows(x_t, model.W_hh.dtype), bank, StepGate(mask=hard_mask(d, model.k)))


def fgp_lstm_step(model: FgpLstm, bank: ComponentBank, x_t, d_t) -> ComponentBank:
    d = _check_gate(d_t, model.k)
    return model.step(_as_rows(x_t, model.W_hh.dtype), bank, StepGate(mask=hard_mask(d, model.k)))


def fgl_rnn_step(model: Fgl, bank: LayerBank, x_t, d_t) -> LayerBank:
    d = _check_gate(d_t, model.n_layers)
    return model.step(_as_rows(x_t, model.cells[0].W_hh.dtype), bank, StepGate(mask=hard_mask(d, model.n_layers)))


fgl_lstm_step = fgl_rnn_step


def stacked_fgp_forward(model: StackedFgp, xs: Sequence, schedule: GateSchedule,
                        state: list[ComponentBank] | None = None) -> list[list[ComponentBank]]:
    """Run a stacked FGP model; returns, per layer, the bank after every step."""
    dt = model.layers[0].W_hh.dtype
    xs = [_as_rows(x, dt) for x in xs]
    if len(schedule) != len(xs):
        raise ValueError(f"gate schedule length {len(schedule)} != sequence length {len(xs)}")
    state = state if state is not None else model.zero_state(xs[0].shape[0])
    traces: list[list[ComponentBank]] = [[] for _ in model.layers]
    for t, x in enumerate(xs):
        state = model.step(x, state, schedule.at(t))
        for l, bank in enumerate(state):
            traces[l].append(bank)
    return traces
