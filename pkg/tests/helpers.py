"""Builders shared by the model tests and the acceptance suite."""

import numpy as np

from fgrnn import autodiff as ad
from fgrnn.autodiff import Tensor
from fgrnn.fixation import FixationTarget, variance_weighted_mse
from fgrnn.gated import FgpLstm, FgpRnn, Fgl, GateSchedule, StackedFgp
from fgrnn.tasks import ModelSpec, TaskModel, lm_forward, token_nll

F64 = np.float64

# name -> (builder(rng, in_dim, h), gate count, soft?)
VARIANTS = {
    "fgp_rnn_hard": (lambda r, i, h: FgpRnn(i, h, 3, r, F64), 3, False),
    "fgp_rnn_soft": (lambda r, i, h: FgpRnn(i, h, 3, r, F64), 3, True),
    "fgp_lstm_hard": (lambda r, i, h: FgpLstm(i, h, 3, r, F64), 3, False),
    "fgp_lstm_soft": (lambda r, i, h: FgpLstm(i, h, 3, r, F64), 3, True),
    "stacked_fgp_rnn_hard": (lambda r, i, h: StackedFgp(i, h, 2, 2, "rnn", 4, r, F64), 2, False),
    "stacked_fgp_lstm_soft": (lambda r, i, h: StackedFgp(i, h, 2, 2, "lstm", None, r, F64), 2, True),
    "fgl_rnn_hard": (lambda r, i, h: Fgl(i, h, 3, "rnn", r, F64), 3, False),
    "fgl_rnn_soft": (lambda r, i, h: Fgl(i, h, 3, "rnn", r, F64), 3, True),
    "fgl_lstm_hard": (lambda r, i, h: Fgl(i, h, 3, "lstm", r, F64), 3, False),
    "fgl_lstm_soft": (lambda r, i, h: Fgl(i, h, 3, "lstm", r, F64), 3, True),
}


def unroll_grad_errors(name: str, seed: int, steps: int = 5, batch: int = 2, in_dim: int = 3,
                       hidden: int = 3) -> dict[str, float]:
    """Finite-difference check of a 5-step unroll of one variant, 64-bit."""
    build, n, soft = VARIANTS[name]
    r = np.random.default_rng(seed)
    model = build(r, in_dim, hidden)
    xs = [ad.parameter(r.standard_normal((batch, in_dim)), f"x{t}") for t in range(steps)]
    tensors = dict(model.parameters())
    tensors.update({x.name: x for x in xs})
    if soft:
        d_bar = ad.parameter(r.uniform(-0.5, n + 0.5, size=(steps, batch)), "d_bar")
        tensors["d_bar"] = d_bar
        schedule = lambda: GateSchedule("soft", d_bar, n, 4.0)
    else:
        fixed = GateSchedule("hard", r.integers(1, n + 1, size=(steps, batch)), n)
        schedule = lambda: fixed
    probes = [Tensor(r.standard_normal((batch, model.output_dim))) for _ in range(steps)]

    def loss():
        outs, _ = model.run(xs, None, schedule())
        total = (outs[0] * probes[0]).sum()
        for o, w in zip(outs[1:], probes[1:]):
            total = total + (o * w).sum()
        return total

    return ad.check_gradients(loss, tensors)


def adaptive_path_grad_errors(seed: int, lam: float = 0.3, cell: str = "lstm", family: str = "fgp") -> dict[str, float]:
    """End-to-end check: embedding -> adaptive FP -> normalized soft gates -> LM loss (+ fixation loss)."""
    r = np.random.default_rng(seed)
    spec = ModelSpec(family=family, cell=cell, hidden_dim=3, emb_dim=3, vocab_size=7, k_components=3,
                     n_layers=2 if family == "fgl" else 1, adaptive_fp=True)
    model = TaskModel(spec, r, F64)
    tokens = r.integers(0, 7, size=(5, 2))
    targets = r.integers(0, 7, size=(5, 2))
    fix_ids = r.integers(0, 7, size=(4, 2))
    var = r.uniform(0.1, 1.0, size=(4, 2))
    var[1, 0] = np.inf
    target = FixationTarget(r.standard_normal((4, 2)), var, np.ones((4, 2), bool))

    def loss():
        out = lm_forward(model, tokens)
        l1 = token_nll(out.log_probs, targets)
        if lam == 0:
            return l1
        d_hat, _ = model.fp.predict_ids(fix_ids)
        return l1 + lam * variance_weighted_mse(d_hat, target, 0.1)

    return ad.check_gradients(loss, model.parameters())
