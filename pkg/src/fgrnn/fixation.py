"""Fixation-duration prediction: the frozen pretrained predictor, the adaptive
predictor trained through the host model, duration normalization and the
multi-task losses.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .cells import LstmCell
from .gated import Vanilla
from .vocab import Vocab


# ---------------------------------------------------------------------------
# normalization of predicted durations
# ---------------------------------------------------------------------------

Z95 = 1.96


@dataclass
class DurationBatchStats:
    mean: float
    std: float
    k: int


def normalize_durations(d_hat, k: int, mask: np.ndarray | None = None, floor: float = 1e-5,
                        stats: DurationBatchStats | None = None) -> tuple[Tensor, DurationBatchStats]:
    """Map raw predictions so that mean -> K/2 and mean +/- 1.96 std -> K / 0.

    Without ``stats`` the mean and (population) standard deviation are taken
    over the unmasked entries of this batch and stay inside the graph, so
    gradients flow through them.  With ``stats`` they are treated as
    constants.  The std is floored at ``floor``.
    """
    d_hat = ad.as_tensor(d_hat)
    if stats is not None:
        mean = Tensor(np.asarray(stats.mean, d_hat.dtype))
        std = Tensor(np.asarray(max(stats.std, floor), d_hat.dtype))
    else:
        if mask is None:
            mean = d_hat.mean()
            centered = d_hat - mean
            var = (centered * centered).mean()
        else:
            w = np.asarray(mask, d_hat.dtype)
            w = w / w.sum()
            mean = (d_hat * w).sum()
            centered = d_hat - mean
            var = (centered * centered * w).sum()
        std = ad.sqrt(ad.maximum(var, floor * floor))
        stats = DurationBatchStats(float(mean.data), float(std.data), k)
    d_bar = ((d_hat - mean) / std + Z95) / (2 * Z95) * float(k)
    return d_bar, DurationBatchStats(stats.mean, max(stats.std, floor), k)


class RunningDurationStats:
    """Exponential moving average of batch mean/std, an alternative to per-batch stats."""

    def __init__(self, k: int, momentum: float = 0.1):
        self.k = k
        self.momentum = momentum
        self.mean: float | None = None
        self.std: float | None = None

    def update(self, batch: DurationBatchStats) -> DurationBatchStats:
        if self.mean is None:
            self.mean, self.std = batch.mean, batch.std
        else:
            m = self.momentum
            self.mean = (1 - m) * self.mean + m * batch.mean
            self.std = (1 - m) * self.std + m * batch.std
        return DurationBatchStats(self.mean, self.std, self.k)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

@dataclass
class FixationTarget:
    """Per-token expected duration and variance; ``inf`` variance means "any value"."""

    mean: np.ndarray
    var: np.ndarray
    mask: np.ndarray | None = None

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.var = np.asarray(self.var, dtype=np.float64)
        finite = np.isfinite(self.var)
        if np.any(self.var[finite] < 0):
            raise ValueError("fixation variance must be non-negative")
        if np.any(np.isnan(self.var)):
            raise ValueError("fixation variance must not be NaN")


def variance_weighted_mse(pred, target: FixationTarget, eps: float = 0.1) -> Tensor:
    """``sum (E[d] - pred)^2 / (Var[d] + eps)``; infinite-variance and masked tokens add 0."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    pred = ad.as_tensor(pred)
    if pred.shape != target.mean.shape:
        raise ad.ShapeError(f"variance_weighted_mse: prediction {pred.shape} vs target {target.mean.shape}")
    keep = np.isfinite(target.var)
    if target.mask is not None:
        keep &= np.asarray(target.mask, dtype=bool)
    weight = np.zeros_like(target.var)
    weight[keep] = 1.0 / (target.var[keep] + eps)
    mean = np.where(keep, target.mean, 0.0)
    diff = Tensor(mean.astype(pred.dtype)) - pred
    return (diff * diff * Tensor(weight.astype(pred.dtype))).sum()


def joint_loss(task_loss: Tensor, fixation_loss: Tensor | None, lam: float) -> Tensor:
    """``L1 + lambda * L2``."""
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    if fixation_loss is None or lam == 0:
        return task_loss
    return task_loss + fixation_loss * lam


# ---------------------------------------------------------------------------
# fixed (pretrained, frozen) predictor
# ---------------------------------------------------------------------------

def pad_batch(seqs: Sequence[np.ndarray], pad: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Right-pad integer sequences to (T, B); returns ids and a boolean mask."""
    t = max(len(s) for s in seqs)
    ids = np.full((t, len(seqs)), pad, dtype=np.int64)
    mask = np.zeros((t, len(seqs)), dtype=bool)
    for b, s in enumerate(seqs):
        ids[: len(s), b] = s
        mask[: len(s), b] = True
    return ids, mask


class FixedFpModel:
    """Embedding -> one-layer LSTM -> FC-tanh-FC, one real duration per token."""

    def __init__(self, vocab: Vocab, emb_dim: int = 50, hidden_dim: int = 100, fc_dim: int = 100,
                 k: int = 12, rng: np.random.Generator | None = None, dtype=ad.DEFAULT_DTYPE):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.vocab = vocab
        self.k = k
        self.dims = {"emb_dim": emb_dim, "hidden_dim": hidden_dim, "fc_dim": fc_dim}
        self.embedding = ad.parameter(ad.init_matrix(rng, (len(vocab), emb_dim), emb_dim, dtype), "embedding")
        self.lstm = LstmCell(emb_dim, hidden_dim, rng, dtype, prefix="lstm.")
        self.fc1_W = ad.parameter(ad.init_matrix(rng, (fc_dim, hidden_dim), hidden_dim, dtype), "fc1_W")
        self.fc1_b = ad.parameter(np.zeros(fc_dim, dtype), "fc1_b")
        self.fc2_W = ad.parameter(ad.init_matrix(rng, (1, fc_dim), fc_dim, dtype), "fc2_W")
        self.fc2_b = ad.parameter(np.zeros(1, dtype), "fc2_b")

    def parameters(self) -> dict[str, Tensor]:
        out = {"embedding": self.embedding}
        out.update(self.lstm.parameters())
        out.update(fc1_W=self.fc1_W, fc1_b=self.fc1_b, fc2_W=self.fc2_W, fc2_b=self.fc2_b)
        return out

    def forward(self, ids: np.ndarray) -> Tensor:
        """(T, B) token ids -> (T, B) predicted durations."""
        t_len, batch = ids.shape
        h, c = self.lstm.zero_state(batch)
        outs = []
        for t in range(t_len):
            h, c = self.lstm.step(ad.embedding(self.embedding, ids[t]), h, c)
            outs.append(h)
        hid = ad.tanh(ad.affine(ad.stack(outs), self.fc1_W, self.fc1_b))
        return ad.reshape(ad.affine(hid, self.fc2_W, self.fc2_b), (t_len, batch))

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name, p in sorted(self.parameters().items()):
            h.update(name.encode())
            h.update(np.ascontiguousarray(p.data).tobytes())
        return h.hexdigest()

    def save(self, path, seed: int | None = None):
        ad.save_checkpoint(path, self.parameters(), {
            "kind": "fixed_fp", "vocab": self.vocab.itos[1:], "k": self.k, "seed": seed, **self.dims})

    @classmethod
    def load(cls, path) -> "FixedFpModel":
        arrays, header = ad.load_checkpoint(path)
        dtype = arrays["embedding"].dtype
        model = cls(Vocab(header["vocab"]), header["emb_dim"], header["hidden_dim"], header["fc_dim"],
                    header["k"], dtype=dtype)
        for name, p in model.parameters().items():
            p.data = arrays[name]
        model.freeze()
        return model

    def freeze(self):
        for p in self.parameters().values():
            p.requires_grad = False


def predict_fixations_fixed(model: FixedFpModel, tokens: Sequence[str]) -> np.ndarray:
    """One real duration per token, from the model's own vocabulary (unknowns allowed)."""
    if len(tokens) == 0:
        return np.zeros(0)
    ids = model.vocab.encode(tokens)[:, None]
    with ad.no_grad():
        return model.forward(ids).data[:, 0].astype(np.float64)


def durations_to_gates(durations: np.ndarray, k: int, source_k: int | None = None) -> np.ndarray:
    """Round real durations to the nearest integer and clamp to 1..k.

    When the predictor was trained on ``source_k`` bins and ``source_k != k``
    the values are first mapped linearly from [1, source_k] onto [1, k].
    """
    d = np.asarray(durations, dtype=np.float64)
    if source_k is not None and source_k != k and source_k > 1:
        d = 1 + (d - 1) * (k - 1) / (source_k - 1)
    return np.clip(np.rint(d), 1, k).astype(np.int64)


@dataclass
class FpHyper:
    epochs: int = 20
    lr: float = 0.001
    batch_size: int = 16
    emb_dim: int = 50
    hidden_dim: int = 100
    fc_dim: int = 100
    k: int = 12
    min_freq: int = 1
    clip: float = 5.0
    seed: int = 0


@dataclass
class FpReport:
    train_mse: list[float] = field(default_factory=list)
    test_l1: list[float] = field(default_factory=list)
    test_mse: list[float] = field(default_factory=list)


def _pairs(items) -> list[tuple[Sequence[str], Sequence]]:
    """Accept prepared rows (dicts with tokens/bin) or (tokens, bins) pairs."""
    return [(it["tokens"], it["bin"]) if isinstance(it, dict) else tuple(it) for it in items]


def _fp_eval(model: FixedFpModel, sents: Sequence[tuple[Sequence[str], Sequence[float]]]) -> tuple[float, float]:
    abs_err = sq_err = 0.0
    n = 0
    for tokens, target in sents:
        pred = predict_fixations_fixed(model, tokens)
        diff = pred - np.asarray(target, dtype=np.float64)
        abs_err += float(np.abs(diff).sum())
        sq_err += float((diff * diff).sum())
        n += len(tokens)
    return abs_err / n, sq_err / n


def pretrain_fixed_fp(train: Sequence[tuple[Sequence[str], Sequence[int]]],
                      test: Sequence[tuple[Sequence[str], Sequence[int]]] = (),
                      hyper: FpHyper | None = None, dtype=ad.DEFAULT_DTYPE) -> tuple[FixedFpModel, FpReport]:
    """Fit the fixed predictor with token-level MSE on discretized durations.

    ``train``/``test`` hold (tokens, bins) per sentence, or prepared rows.  The output bias
    starts at the mean training target.  The returned model is frozen.
    """
    hyper = hyper or FpHyper()
    train, test = _pairs(train), _pairs(test)
    if not train:
        raise ValueError("empty fixation corpus")
    streams = ad.RngStreams(hyper.seed)
    vocab = Vocab.build((t for toks, _ in train for t in toks), hyper.min_freq)
    model = FixedFpModel(vocab, hyper.emb_dim, hyper.hidden_dim, hyper.fc_dim, hyper.k, streams["init"], dtype)
    all_targets = np.concatenate([np.asarray(b, dtype=np.float64) for _, b in train])
    model.fc2_b.data[:] = all_targets.mean()
    params = model.parameters()
    opt = ad.AdamState(lr=hyper.lr)
    encoded = [(vocab.encode(toks), np.asarray(b, dtype=np.float64)) for toks, b in train]
    report = FpReport()
    shuffle = streams["batching"]
    for _ in range(hyper.epochs):
        order = shuffle.permutation(len(encoded))
        total, count = 0.0, 0
        for start in range(0, len(order), hyper.batch_size):
            chunk = [encoded[i] for i in order[start: start + hyper.batch_size]]
            ids, mask = pad_batch([c[0] for c in chunk])
            target = np.zeros(ids.shape, dtype=dtype)
            for b, (_, tb) in enumerate(chunk):
                target[: len(tb), b] = tb
            pred = model.forward(ids)
            w = mask.astype(dtype) / mask.sum()
            diff = pred - Tensor(target)
            loss = (diff * diff * Tensor(w)).sum()
            for p in params.values():
                p.grad = None
            ad.backprop(loss)
            grads = {k: (p.grad if p.grad is not None else np.zeros_like(p.data)) for k, p in params.items()}
            ad.clip_grad_norm(grads, hyper.clip)
            ad.adam_step(opt, params, grads)
            total += float(loss.data) * mask.sum()
            count += int(mask.sum())
        report.train_mse.append(total / count)
        if test:
            l1, mse = _fp_eval(model, test)
            report.test_l1.append(l1)
            report.test_mse.append(mse)
    model.freeze()
    return model, report


# ---------------------------------------------------------------------------
# adaptive predictor
# ---------------------------------------------------------------------------

class AdaptiveFpModel:
    """Recurrent trunk mirroring the host model, on the host's embedding.

    ``embedding`` is the host's own tensor object, not a copy.  The trunk is
    an ungated stack with the host's cell family and layer count; a linear
    head maps its top hidden state to one raw duration per token.
    """

    def __init__(self, embedding: Tensor, family: str, n_layers: int, hidden_dim: int,
                 rng: np.random.Generator | None = None, dtype=ad.DEFAULT_DTYPE, prefix: str = "fp."):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.embedding = embedding
        self.trunk = Vanilla(embedding.shape[1], hidden_dim, n_layers, family, rng, dtype, prefix=f"{prefix}trunk.")
        self.head_W = ad.parameter(ad.init_matrix(rng, (1, hidden_dim), hidden_dim, dtype), f"{prefix}head_W")
        self.head_b = ad.parameter(np.zeros(1, dtype), f"{prefix}head_b")
        self.hidden_dim = hidden_dim

    def parameters(self) -> dict[str, Tensor]:
        """Own parameters; the shared embedding is reported by the host."""
        out = dict(self.trunk.parameters())
        out[self.head_W.name] = self.head_W
        out[self.head_b.name] = self.head_b
        return out

    def run(self, xs: Sequence[Tensor], state=None) -> tuple[Tensor, object]:
        """Embedded inputs (list of (B, E)) -> raw durations (T, B) and trunk state."""
        outs, state = self.trunk.run(xs, state)
        d = ad.affine(ad.stack(outs), self.head_W, self.head_b)
        return ad.reshape(d, d.shape[:2]), state

    def predict_ids(self, ids: np.ndarray, state=None) -> tuple[Tensor, object]:
        xs = [ad.embedding(self.embedding, ids[t]) for t in range(ids.shape[0])]
        return self.run(xs, state)
