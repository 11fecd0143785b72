"""Language-modelling and sentiment tasks on top of the gated recurrent cores.

The pieces compose as ``embedding -> core (gated by a schedule) -> head``.
Gate schedules come from human fixations, a frozen fixed predictor, an
adaptive predictor trained with the task, or one of the artificial
baselines (random, random per type, full, frequency rank).
"""

from __future__ import annotations

import json
import math
import time
import zlib
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import RunConfig
from .eyetrack import (SentenceRecord, RawFixationCorpus, SplitSpec, load_prepared, prepare,
                       split_train_test, synth_fixation_corpus, word_tokenize)
from .fixation import (AdaptiveFpModel, DurationBatchStats, FixationTarget, FixedFpModel, RunningDurationStats,
                       durations_to_gates, joint_loss, normalize_durations, pad_batch,
                       variance_weighted_mse)
from .gated import FgpLstm, FgpRnn, Fgl, GateSchedule, StackedFgp, Vanilla, detach_state
from .vocab import EOS, Vocab

ARTIFICIAL_KINDS = {"random": "random", "randombt": "random_bt", "random_bt": "random_bt",
                    "full": "full", "freq": "freq"}


class TrainingDiverged(RuntimeError):
    def __init__(self, metrics: "RunMetrics"):
        super().__init__(f"training diverged at epoch {len(metrics.epochs) + 1}")
        self.metrics = metrics


# ---------------------------------------------------------------------------
# model specification and parameter counting
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ModelSpec:
    family: str  # vanilla | fgp | fgl
    cell: str  # rnn | lstm
    hidden_dim: int
    emb_dim: int
    vocab_size: int
    k_components: int = 4
    n_layers: int = 1
    proj_dim: int = 0
    adaptive_fp: bool = False
    task: str = "lm"
    n_classes: int = 2
    s: float = 4.0
    norm_stats: str = "batch"
    dropout_embed: float = 0.0
    dropout_other: float = 0.0

    def __post_init__(self):
        if self.family not in ("vanilla", "fgp", "fgl"):
            raise ValueError(f"unknown model family {self.family!r}")
        if self.cell not in ("rnn", "lstm"):
            raise ValueError(f"unknown cell {self.cell!r}")
        if self.adaptive_fp and self.family == "vanilla":
            raise ValueError("an ungated model has no use for an adaptive predictor")

    @classmethod
    def from_config(cls, cfg: RunConfig, vocab_size: int, hidden_dim: int | None = None) -> "ModelSpec":
        return cls(family=cfg.family, cell=cfg.cell, hidden_dim=hidden_dim or cfg.hidden_dim or 1,
                   emb_dim=cfg.emb_dim, vocab_size=vocab_size, k_components=cfg.k_components,
                   n_layers=cfg.n_layers, proj_dim=cfg.proj_dim, adaptive_fp=cfg.gate_source == "adaptive",
                   task=cfg.task, s=cfg.s, norm_stats=cfg.norm_stats,
                   dropout_embed=cfg.dropout_embed, dropout_other=cfg.dropout_other)

    def with_hidden(self, hidden_dim: int) -> "ModelSpec":
        return ModelSpec(**{**self.__dict__, "hidden_dim": hidden_dim})

    @property
    def n_gates(self) -> int:
        return {"vanilla": 0, "fgp": self.k_components, "fgl": self.n_layers}[self.family]

    @property
    def output_dim(self) -> int:
        return {"vanilla": 1, "fgp": self.k_components, "fgl": self.n_layers}[self.family] * self.hidden_dim

    @property
    def fp_hidden(self) -> int:
        return self.hidden_dim


def _cell_count(cell: str, input_dim: int, hidden_dim: int) -> int:
    rows = (4 if cell == "lstm" else 1) * hidden_dim
    return rows * input_dim + rows + rows * hidden_dim + rows


def _stack_count(cell: str, input_dim: int, hidden_dim: int, n_layers: int) -> int:
    return _cell_count(cell, input_dim, hidden_dim) + (n_layers - 1) * _cell_count(cell, hidden_dim, hidden_dim)


def core_parameter_count(spec: ModelSpec) -> int:
    h, e, k = spec.hidden_dim, spec.emb_dim, spec.k_components
    if spec.family != "fgp":
        return _stack_count(spec.cell, e, h, spec.n_layers)
    total = k * _cell_count(spec.cell, e, h)
    p = spec.proj_dim or h
    for _ in range(spec.n_layers - 1):
        total += p * k * h + p + k * _cell_count(spec.cell, p, h)
    return total


def count_parameters(spec: ModelSpec) -> int:
    """Trainable parameters, excluding the embedding table and its tied output use."""
    e, d = spec.emb_dim, spec.output_dim
    total = core_parameter_count(spec)
    if spec.task == "lm":
        total += e * d + e + spec.vocab_size
    else:
        total += e * d + e + spec.n_classes * e + spec.n_classes
    if spec.adaptive_fp:
        total += _stack_count(spec.cell, e, spec.fp_hidden, spec.n_layers) + spec.fp_hidden + 1
    return total


def fit_hidden_dim(spec: ModelSpec, budget: int) -> int:
    """Largest hidden size whose parameter count stays within ``budget``."""
    if count_parameters(spec.with_hidden(1)) > budget:
        raise ValueError(f"budget {budget} is below the minimum "
                         f"{count_parameters(spec.with_hidden(1))} for this variant")
    lo, hi = 1, 2
    while count_parameters(spec.with_hidden(hi)) <= budget:
        lo, hi = hi, hi * 2
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if count_parameters(spec.with_hidden(mid)) <= budget:
            lo = mid
        else:
            hi = mid
    return lo


def build_core(spec: ModelSpec, rng: np.random.Generator, dtype=ad.DEFAULT_DTYPE, prefix: str = "core."):
    e, h = spec.emb_dim, spec.hidden_dim
    if spec.family == "vanilla":
        return Vanilla(e, h, spec.n_layers, spec.cell, rng, dtype, prefix=prefix)
    if spec.family == "fgl":
        return Fgl(e, h, spec.n_layers, spec.cell, rng, dtype, prefix=prefix)
    if spec.n_layers == 1:
        cls = FgpLstm if spec.cell == "lstm" else FgpRnn
        return cls(e, h, spec.k_components, rng, dtype, prefix=prefix)
    return StackedFgp(e, h, spec.k_components, spec.n_layers, spec.cell, spec.proj_dim or None,
                      rng, dtype, prefix=prefix)


# ---------------------------------------------------------------------------
# heads and the composed model
# ---------------------------------------------------------------------------

class LmHead:
    """FC-tanh into embedding space, then logits against the embedding table itself."""

    def __init__(self, embedding: Tensor, in_dim: int, rng: np.random.Generator, dtype=ad.DEFAULT_DTYPE):
        vocab_size, emb_dim = embedding.shape
        self.embedding = embedding
        self.fc_W = ad.parameter(ad.init_matrix(rng, (emb_dim, in_dim), in_dim, dtype), "head.fc_W")
        self.fc_b = ad.parameter(np.zeros(emb_dim, dtype), "head.fc_b")
        self.out_b = ad.parameter(np.zeros(vocab_size, dtype), "head.out_b")

    @property
    def output_weight(self) -> Tensor:
        return self.embedding

    def parameters(self) -> dict[str, Tensor]:
        return {"head.fc_W": self.fc_W, "head.fc_b": self.fc_b, "head.out_b": self.out_b}

    def __call__(self, o: Tensor) -> Tensor:
        return ad.affine(ad.tanh(ad.affine(o, self.fc_W, self.fc_b)), self.embedding, self.out_b)


class SentimentHead:
    def __init__(self, in_dim: int, emb_dim: int, n_classes: int, rng: np.random.Generator,
                 dtype=ad.DEFAULT_DTYPE):
        self.fc_W = ad.parameter(ad.init_matrix(rng, (emb_dim, in_dim), in_dim, dtype), "head.fc_W")
        self.fc_b = ad.parameter(np.zeros(emb_dim, dtype), "head.fc_b")
        self.out_W = ad.parameter(ad.init_matrix(rng, (n_classes, emb_dim), emb_dim, dtype), "head.out_W")
        self.out_b = ad.parameter(np.zeros(n_classes, dtype), "head.out_b")

    def parameters(self) -> dict[str, Tensor]:
        return {"head.fc_W": self.fc_W, "head.fc_b": self.fc_b, "head.out_W": self.out_W,
                "head.out_b": self.out_b}

    def __call__(self, o: Tensor) -> Tensor:
        return ad.affine(ad.tanh(ad.affine(o, self.fc_W, self.fc_b)), self.out_W, self.out_b)


class TaskModel:
    """Embedding, gated core, optional adaptive predictor and a task head."""

    def __init__(self, spec: ModelSpec, rng: np.random.Generator | None = None, dtype=ad.DEFAULT_DTYPE):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.spec = spec
        self.dtype = np.dtype(dtype)
        self.embedding = ad.parameter(
            ad.init_matrix(rng, (spec.vocab_size, spec.emb_dim), spec.emb_dim, dtype), "embedding")
        self.core = build_core(spec, rng, dtype)
        self.fp = (AdaptiveFpModel(self.embedding, spec.cell, spec.n_layers, spec.fp_hidden, rng, dtype)
                   if spec.adaptive_fp else None)
        if spec.task == "lm":
            self.head = LmHead(self.embedding, self.core.output_dim, rng, dtype)
        else:
            self.head = SentimentHead(self.core.output_dim, spec.emb_dim, spec.n_classes, rng, dtype)
        self.duration_stats = RunningDurationStats(max(spec.n_gates, 1))

    def parameters(self) -> dict[str, Tensor]:
        out = {"embedding": self.embedding}
        out.update(self.core.parameters())
        if self.fp is not None:
            out.update(self.fp.parameters())
        out.update(self.head.parameters())
        return out

    def counted_parameters(self) -> dict[str, Tensor]:
        return {k: v for k, v in self.parameters().items() if k != "embedding"}

    def zero_state(self, batch: int):
        fp_state = self.fp.trunk.zero_state(batch) if self.fp is not None else None
        return self.core.zero_state(batch), fp_state

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.parameters().items()}

    def restore(self, arrays: dict[str, np.ndarray]):
        for k, p in self.parameters().items():
            p.data = arrays[k].astype(p.data.dtype, copy=True)


def _detach(state):
    core, fp = state
    return detach_state(core), (detach_state(fp) if fp is not None else None)


def _encode(model: TaskModel, ids: np.ndarray, gates, state, mask, training: bool, rng):
    """Shared trunk: per-step embeddings, gate schedule, core unroll."""
    spec = model.spec
    ids = np.asarray(ids)
    t_len, batch = ids.shape
    xs = [ad.embedding(model.embedding, ids[t]) for t in range(t_len)]
    if training and spec.dropout_embed > 0:
        xs = [ad.dropout(x, spec.dropout_embed, rng) for x in xs]
    core_state, fp_state = state if state is not None else model.zero_state(batch)
    schedule = d_hat = d_bar = None
    if model.fp is not None:
        d_hat, fp_state = model.fp.run(xs, fp_state)
        if spec.norm_stats == "running":
            running = model.duration_stats
            if training or running.mean is None:
                _, batch_stats = normalize_durations(d_hat.detach(), spec.n_gates, mask)
                stats = running.update(batch_stats) if training else batch_stats
            else:
                stats = DurationBatchStats(running.mean, running.std, spec.n_gates)
            d_bar, _ = normalize_durations(d_hat, spec.n_gates, mask, stats=stats)
        else:
            d_bar, _ = normalize_durations(d_hat, spec.n_gates, mask)
        schedule = GateSchedule("soft", d_bar, spec.n_gates, spec.s)
    elif gates is not None:
        if not model.core.gated:
            raise ValueError("an ungated model does not take a gate schedule")
        gates = np.asarray(gates)
        if gates.shape != ids.shape:
            raise ValueError(f"gate schedule shape {gates.shape} does not match tokens {ids.shape}")
        schedule = GateSchedule("hard", gates, spec.n_gates)
    elif model.core.gated:
        raise ValueError("a fixation-guided model needs a gate schedule")
    outs, core_state = model.core.run(xs, core_state, schedule)
    h = ad.stack(outs)
    if training and spec.dropout_other > 0:
        h = ad.dropout(h, spec.dropout_other, rng)
    return h, (core_state, fp_state), d_hat, d_bar


@dataclass
class LmOutput:
    log_probs: Tensor  # (T, B, V)
    state: tuple
    d_hat: Tensor | None = None
    d_bar: Tensor | None = None


def lm_forward(model: TaskModel, tokens: np.ndarray, gates: np.ndarray | None = None, state=None,
               training: bool = False, rng: np.random.Generator | None = None) -> LmOutput:
    """Next-token log-probabilities for a (T, B) block of token ids.

    Position t sees tokens 0..t only.  ``gates`` is a (T, B) integer block for
    hard-gated models; adaptive models derive their own soft gates.
    """
    h, state, d_hat, d_bar = _encode(model, tokens, gates, state, None, training, rng)
    return LmOutput(ad.log_softmax(model.head(h), axis=-1), state, d_hat, d_bar)


def token_nll(log_probs: Tensor, targets: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of ``targets`` (any shape) under ``log_probs`` (..., V)."""
    targets = np.asarray(targets)
    if targets.size == 0:
        raise ValueError("no target tokens")
    index = tuple(np.indices(targets.shape)) + (targets,)
    return -ad.getitem(log_probs, index).mean()


def perplexity(log_probs, targets) -> float:
    """``exp`` of the mean negative log-likelihood over all target positions."""
    lp = log_probs.data if isinstance(log_probs, Tensor) else np.asarray(log_probs)
    targets = np.asarray(targets)
    if targets.size == 0:
        raise ValueError("perplexity of an empty target set")
    if lp.shape[:-1] != targets.shape:
        raise ValueError(f"log-prob shape {lp.shape} does not align with targets {targets.shape}")
    picked = np.take_along_axis(lp, targets[..., None], axis=-1)[..., 0]
    return float(np.exp(-picked.astype(np.float64).mean()))


@dataclass
class SentimentOutput:
    log_probs: Tensor  # (B, C)
    d_hat: Tensor | None = None
    d_bar: Tensor | None = None

    @property
    def probs(self) -> np.ndarray:
        return np.exp(self.log_probs.data)

    @property
    def predictions(self) -> np.ndarray:
        return np.argmax(self.log_probs.data, axis=-1)


def sentiment_forward(model: TaskModel, tokens: np.ndarray, lengths: Sequence[int] | None = None,
                      gates: np.ndarray | None = None, training: bool = False,
                      rng: np.random.Generator | None = None) -> SentimentOutput:
    """Class log-probabilities from the state after each sentence's last token.

    ``tokens`` is right-padded (T, B); every sentence starts from a zero state.
    """
    tokens = np.asarray(tokens)
    t_len, batch = tokens.shape
    lengths = np.full(batch, t_len) if lengths is None else np.asarray(lengths)
    mask = np.arange(t_len)[:, None] < lengths[None, :]
    if gates is not None:
        gates = np.where(mask, gates, 1)
    h, _, d_hat, d_bar = _encode(model, tokens, gates, None, mask, training, rng)
    final = ad.getitem(h, (lengths - 1, np.arange(batch)))
    return SentimentOutput(ad.log_softmax(model.head(final), axis=-1), d_hat, d_bar)


def accuracy(preds, labels) -> float:
    preds, labels = np.asarray(preds), np.asarray(labels)
    if labels.size == 0:
        raise ValueError("accuracy of an empty label set")
    if not np.isin(labels, (0, 1)).all():
        raise ValueError("labels must be 0 or 1")
    if preds.shape != labels.shape:
        raise ValueError(f"prediction shape {preds.shape} != label shape {labels.shape}")
    return float(np.mean(preds == labels))


# ---------------------------------------------------------------------------
# artificial fixations
# ---------------------------------------------------------------------------

def _type_draw(token, k: int, seed: int) -> int:
    ss = np.random.SeedSequence([seed, zlib.crc32(str(token).encode())])
    return int(np.random.Generator(np.random.Philox(ss)).integers(1, k + 1))


def frequency_buckets(freq_table: dict, k: int) -> dict:
    """Token type -> 1..k by frequency rank; the most frequent types get 1."""
    ranked = sorted(freq_table, key=lambda t: (-freq_table[t], str(t)))
    n = len(ranked)
    return {t: r * k // n + 1 for r, t in enumerate(ranked)}


def artificial_fixations(kind: str, tokens, k: int, seed: int = 0, freq_table: dict | None = None,
                         purpose: str = "train") -> np.ndarray:
    """Integer gate values in 1..k, one per token.

    ``random`` draws i.i.d. per position; ``purpose`` picks the stream so
    different data splits get independent draws.  ``random_bt`` draws one
    value per token type, keyed by the type itself, so every occurrence in
    every split agrees.  ``freq`` gives types missing from the table k.
    """
    name = ARTIFICIAL_KINDS.get(kind.lower())
    if name is None:
        raise ValueError(f"unknown artificial fixation kind {kind!r}")
    if k < 1:
        raise ValueError("k must be >= 1")
    arr = np.asarray(tokens)
    if name == "full":
        return np.full(arr.shape, k, dtype=np.int64)
    if name == "random":
        rng = ad.RngStreams(seed).fresh(f"fixations/random/{purpose}")
        return rng.integers(1, k + 1, size=arr.shape).astype(np.int64)
    types, inverse = np.unique(arr.reshape(-1), return_inverse=True)
    if name == "random_bt":
        values = np.array([_type_draw(t, k, seed) for t in types.tolist()], dtype=np.int64)
    else:
        if freq_table is None:
            raise ValueError("freq fixations need a frequency table")
        buckets = frequency_buckets(freq_table, k)
        values = np.array([buckets.get(t, k) for t in types.tolist()], dtype=np.int64)
    return values[inverse].reshape(arr.shape)


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------

def sample_segment_length(rng: np.random.Generator, mean: int = 100) -> int:
    """Mostly ``N(m, 5)``, else ``N(m/2, 5)``, with m chosen so the mixture mean is ``mean``."""
    base = mean / 0.975
    centre = base if rng.random() < 0.95 else base / 2
    return int(np.clip(round(rng.normal(centre, 5.0)), 10, 2 * mean))


@dataclass
class Segment:
    index: int
    start: int
    stop: int
    inputs: np.ndarray  # (L, B)
    targets: np.ndarray  # (L, B)
    carry: bool


@dataclass
class BatchPlan:
    """A token stream laid out as ``batch_size`` parallel rows cut into segments."""

    inputs: np.ndarray  # (B, N)
    targets: np.ndarray  # (B, N)
    bounds: list[tuple[int, int]]

    @property
    def batch_size(self) -> int:
        return self.inputs.shape[0]

    @property
    def carry(self) -> list[bool]:
        return [i > 0 for i in range(len(self.bounds))]

    def __len__(self):
        return len(self.bounds)

    def layout(self, aligned) -> np.ndarray:
        """Arrange a per-token array aligned with the input stream like ``inputs``."""
        b, n = self.inputs.shape
        return np.asarray(aligned)[: b * n].reshape(b, n)

    def __iter__(self) -> Iterator[Segment]:
        for i, (s, e) in enumerate(self.bounds):
            yield Segment(i, s, e, self.inputs[:, s:e].T, self.targets[:, s:e].T, i > 0)


def make_batches(stream, batch_size: int, mean_len: int = 100, seed=0,
                 fixed_len: int | None = None) -> BatchPlan:
    stream = np.asarray(stream)
    n = (len(stream) - 1) // batch_size
    if n < 1:
        raise ValueError(f"stream of {len(stream)} tokens is too short for {batch_size} rows")
    inputs = stream[: batch_size * n].reshape(batch_size, n)
    targets = stream[1: batch_size * n + 1].reshape(batch_size, n)
    rng = np.random.default_rng(seed)
    bounds = []
    pos = 0
    while pos < n:
        length = fixed_len or sample_segment_length(rng, mean_len)
        bounds.append((pos, min(pos + length, n)))
        pos += length
    return BatchPlan(inputs, targets, bounds)


# ---------------------------------------------------------------------------
# synthetic corpora
# ---------------------------------------------------------------------------

def synth_lm_stream(n_tokens: int, vocab_size: int = 500, seed: int = 0, branching: int = 4) -> list[str]:
    """Second-order Markov text over ``t0..t{V-1}``.

    The successor of a token is drawn from ``branching`` candidates with
    Zipf weights; the candidate set depends on the previous token and on a
    binary class of the token before it.  Every type appears in several
    candidate sets, so all types occur.
    """
    rng = np.random.default_rng(seed)
    n_ctx = 2 * vocab_size
    reps = -(-n_ctx * branching // vocab_size)
    pool = np.concatenate([rng.permutation(vocab_size) for _ in range(reps)])[: n_ctx * branching]
    pool = pool.reshape(n_ctx, branching)
    weights = 1.0 / np.arange(1, branching + 1)
    klass = rng.integers(0, 2, size=vocab_size)
    picks = rng.choice(branching, size=n_tokens, p=weights / weights.sum())
    seq = np.empty(n_tokens, dtype=np.int64)
    seq[:2] = rng.integers(0, vocab_size, size=2)[: min(2, n_tokens)]
    for t in range(2, n_tokens):
        seq[t] = pool[2 * seq[t - 1] + klass[seq[t - 2]], picks[t]]
    return [f"t{i}" for i in seq.tolist()]


def synth_sentiment_rows(n_sentences: int, vocab_size: int = 64, k: int = 4, seed: int = 0,
                         noise: float = 0.1) -> list[dict]:
    """Labelled sentences with fixations; labels follow cue-word majority.

    The top eighth of the vocabulary (the longest latent durations) are
    positive cues, the next eighth negative cues.  Sentences with a tied
    cue count are dropped, so fewer than ``n_sentences`` rows may return.
    """
    corpus = synth_fixation_corpus(vocab_size, n_sentences, 3, noise, seed)
    eighth = max(1, vocab_size // 8)
    pos = {f"w{i}" for i in range(vocab_size - eighth, vocab_size)}
    neg = {f"w{i}" for i in range(vocab_size - 2 * eighth, vocab_size - eighth)}
    kept = []
    for sent in corpus.sentences:
        score = sum(w in pos for w in sent.words) - sum(w in neg for w in sent.words)
        if score:
            kept.append(SentenceRecord(sent.corpus_id, sent.sentence_id, sent.words, sent.trt_ms,
                                       int(score > 0)))
    prepared = prepare(RawFixationCorpus(kept), k, SplitSpec(0.8, seed))
    return ([{**r, "split": "train"} for r in prepared["train"]]
            + [{**r, "split": "test"} for r in prepared["test"]])


# ---------------------------------------------------------------------------
# data loading
# ---------------------------------------------------------------------------

def _read_rows(path) -> list[dict]:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                rows.append(json.loads(line))
    return rows


def _read_lm_file(path) -> tuple[list[str], np.ndarray | None]:
    """Plain text (one sentence per line) or prepared JSONL rows with bins."""
    tokens: list[str] = []
    if str(path).endswith(".jsonl"):
        bins: list[int] = []
        for row in _read_rows(path):
            tokens.extend(row["tokens"] + [EOS])
            if "bin" in row:
                bins.extend(row["bin"] + [1])
        return tokens, (np.asarray(bins, dtype=np.int64) if len(bins) == len(tokens) else None)
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            words = line.split()
            if words:
                tokens.extend(words + [EOS])
    return tokens, None


@dataclass
class LmData:
    vocab: Vocab
    ids: dict[str, np.ndarray]
    tokens: dict[str, list[str]]
    bins: dict[str, np.ndarray | None]


def load_lm_data(cfg: RunConfig) -> LmData:
    if cfg.synth_tokens:
        toks = synth_lm_stream(cfg.synth_tokens, cfg.synth_vocab, cfg.data_seed)
        a, b = int(0.8 * len(toks)), int(0.9 * len(toks))
        tokens = {"train": toks[:a], "valid": toks[a:b], "test": toks[b:]}
        bins = {s: None for s in tokens}
    else:
        tokens, bins = {}, {}
        for split, path in (("train", cfg.train_path), ("valid", cfg.valid_path), ("test", cfg.test_path)):
            if not path:
                raise ValueError(f"missing {split}_path")
            tokens[split], bins[split] = _read_lm_file(path)
    vocab = Vocab.build(tokens["train"], cfg.min_freq)
    return LmData(vocab, {s: vocab.encode(t) for s, t in tokens.items()}, tokens, bins)


@dataclass
class SentimentData:
    vocab: Vocab
    rows: dict[str, list[dict]]


def _row_tokens(row: dict) -> list[str]:
    if "tokens" in row:
        return list(row["tokens"])
    return [t for w in row["text"].split() for t in word_tokenize(w)]


def load_sentiment_data(cfg: RunConfig) -> SentimentData:
    rows = _read_rows(cfg.data_path)
    for i, row in enumerate(rows, 1):
        if row.get("label") not in (0, 1):
            raise ValueError(f"{cfg.data_path}:{i}: label must be 0 or 1")
        row["tokens"] = _row_tokens(row)
    if any("split" in r for r in rows):
        parts = {"train": [r for r in rows if r.get("split", "train") == "train"],
                 "test": [r for r in rows if r.get("split") == "test"]}
    else:
        train, test = split_train_test(rows, SplitSpec(1 - cfg.test_fraction, cfg.data_seed))
        parts = {"train": train, "test": test}
    vocab = Vocab.build((t for r in parts["train"] for t in r["tokens"]), cfg.min_freq)
    return SentimentData(vocab, parts)


def fixation_frequency_table(cfg: RunConfig, fallback_tokens: Sequence[str]) -> Counter:
    if cfg.freq_table == "train":
        return Counter(fallback_tokens)
    prepared = load_prepared(cfg.fixation_corpus)
    return Counter(t for part in prepared.values() for row in part for t in row["tokens"])


def predict_stream_fixed(fp: FixedFpModel, tokens: Sequence[str], chunk: int = 100) -> np.ndarray:
    """Fixed-predictor durations over a long stream, run as independent chunks."""
    ids = fp.vocab.encode(tokens)
    n = len(ids)
    rows = -(-n // chunk)
    padded = np.zeros(rows * chunk, dtype=np.int64)
    padded[:n] = ids
    with ad.no_grad():
        out = fp.forward(padded.reshape(rows, chunk).T).data
    return out.T.reshape(-1)[:n].astype(np.float64)


def gate_values(cfg: RunConfig, spec: ModelSpec, tokens: Sequence[str], purpose: str,
                human: Sequence | None = None, freq_table: dict | None = None,
                fixed_fp: FixedFpModel | None = None) -> np.ndarray | None:
    """Hard gate values for a token sequence, or None for ungated/adaptive models."""
    src, n = cfg.gate_source, spec.n_gates
    if src in ("none", "adaptive"):
        return None
    if src == "human":
        if human is None:
            raise ValueError("gate_source=human needs fixation bins in the data")
        vals = np.asarray(human, dtype=np.int64)
        if vals.size and (vals.min() < 1 or vals.max() > n):
            raise ValueError(f"human fixation bins span {vals.min()}..{vals.max()}, model has {n} gates")
        return vals
    if src == "fixed_fp":
        return durations_to_gates(predict_stream_fixed(fixed_fp, tokens), n, fixed_fp.k)
    return artificial_fixations(src, list(tokens), n, cfg.seed, freq_table, purpose)


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

@dataclass
class RunMetrics:
    run_id: str
    task: str
    seed: int
    param_count: int
    hidden_dim: int
    metric: str  # perplexity | accuracy
    epochs: list[dict] = field(default_factory=list)
    final: dict = field(default_factory=dict)
    status: str = "running"
    wall_time: float = 0.0
    model: object = field(default=None, repr=False, compare=False)

    def records(self) -> list[dict]:
        base = {"run_id": self.run_id, "task": self.task, "seed": self.seed,
                "param_count": self.param_count, "hidden_dim": self.hidden_dim}
        out = [{"record": "epoch", **base, **e} for e in self.epochs]
        out.append({"record": "final", **base, "status": self.status, "metric": self.metric, **self.final})
        return out

    def write(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            for rec in self.records():
                fh.write(json.dumps(rec, sort_keys=True) + "\n")

    @classmethod
    def read(cls, path) -> list[dict]:
        return _read_rows(path)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def _dtype(cfg: RunConfig):
    return np.float64 if cfg.precision == "float64" else np.float32


def _grads(params: dict[str, Tensor], loss: Tensor) -> dict[str, np.ndarray]:
    for p in params.values():
        p.grad = None
    ad.backprop(loss)
    return {k: (p.grad if p.grad is not None else np.zeros_like(p.data)) for k, p in params.items()}


class FixationBatches:
    """Fixation sentences encoded with the task vocabulary, targets standardized.

    Means are shifted and scaled to zero mean, unit deviation over tokens
    with finite variance; variances are scaled by the same factor squared.
    """

    def __init__(self, rows: Sequence[dict], vocab: Vocab, batch_size: int, rng: np.random.Generator):
        if not rows:
            raise ValueError("empty fixation corpus")
        self.rng = rng
        self.batch_size = batch_size
        self.items = []
        finite = []
        for row in rows:
            var = np.array([math.inf if v is None else v for v in row["var"]], dtype=np.float64)
            mean = np.asarray(row["mean"], dtype=np.float64)
            self.items.append((vocab.encode(row["tokens"]), mean, var))
            finite.append(mean[np.isfinite(var)])
        pool = np.concatenate(finite)
        self.mu = float(pool.mean()) if pool.size else 0.0
        self.sigma = float(pool.std()) if pool.size and pool.std() > 0 else 1.0

    def sample(self) -> tuple[np.ndarray, FixationTarget]:
        pick = self.rng.choice(len(self.items), size=min(self.batch_size, len(self.items)), replace=False)
        chosen = [self.items[i] for i in pick]
        ids, mask = pad_batch([c[0] for c in chosen])
        mean = np.zeros(ids.shape)
        var = np.full(ids.shape, math.inf)
        for b, (_, m, v) in enumerate(chosen):
            mean[: len(m), b] = (m - self.mu) / self.sigma
            var[: len(v), b] = v / self.sigma ** 2
        return ids, FixationTarget(mean, var, mask)


def build_model(cfg: RunConfig, vocab_size: int, rng: np.random.Generator) -> TaskModel:
    template = ModelSpec.from_config(cfg, vocab_size)
    hidden = cfg.hidden_dim or fit_hidden_dim(template, cfg.param_budget)
    return TaskModel(template.with_hidden(hidden), rng, _dtype(cfg))


def _nonfinite(x: float) -> bool:
    return not math.isfinite(x)


def _exp(nll: float) -> float:
    return math.exp(nll) if nll < 700 else math.inf


def _save(model: TaskModel, path, cfg: RunConfig, vocab: Vocab, epoch: int):
    ad.save_checkpoint(path, model.parameters(), {
        "kind": "task_model", "config": cfg.canonical(), "vocab": vocab.itos[1:],
        "hidden_dim": model.spec.hidden_dim, "epoch": epoch})


def evaluate_lm(model: TaskModel, ids: np.ndarray, gates: np.ndarray | None, batch_size: int,
                seq_len: int) -> dict:
    plan = make_batches(ids, batch_size, seq_len, fixed_len=seq_len)
    laid = plan.layout(gates) if gates is not None else None
    state = None
    total, count = 0.0, 0
    with ad.no_grad():
        for seg in plan:
            g = laid[:, seg.start: seg.stop].T if laid is not None else None
            out = lm_forward(model, seg.inputs, g, state)
            picked = np.take_along_axis(out.log_probs.data, seg.targets[..., None], axis=-1)
            total -= float(picked.astype(np.float64).sum())
            count += seg.targets.size
            state = out.state
    nll = total / count
    return {"nll": nll, "perplexity": _exp(nll), "n_tokens": count}


def _lm_gates(cfg, spec, data: LmData, fixed_fp):
    freq = fixation_frequency_table(cfg, data.tokens["train"]) if cfg.gate_source == "freq" else None
    return {s: gate_values(cfg, spec, data.tokens[s], s, data.bins[s], freq, fixed_fp) for s in data.ids}


def train_lm(cfg: RunConfig, out_dir=None) -> RunMetrics:
    started = time.perf_counter()
    streams = ad.RngStreams(cfg.seed)
    data = load_lm_data(cfg)
    model = build_model(cfg, len(data.vocab), streams["init"])
    fixed_fp = FixedFpModel.load(cfg.fp_checkpoint) if cfg.gate_source == "fixed_fp" else None
    fp_checksum = fixed_fp.checksum() if fixed_fp else None
    gates = _lm_gates(cfg, model.spec, data, fixed_fp)
    fix_batches = None
    if cfg.lambda_ > 0:
        rows = load_prepared(cfg.fixation_corpus)["train"]
        fix_batches = FixationBatches(rows, data.vocab, cfg.fix_batch_size or cfg.batch_size, streams["multitask"])
    params = model.parameters()
    opt = ad.AdamState(lr=cfg.lr)
    metrics = RunMetrics(cfg.run_id(), "lm", cfg.seed, sum(p.data.size for p in model.counted_parameters().values()),
                         model.spec.hidden_dim, "perplexity")
    out = Path(out_dir) if out_dir else None
    best, best_valid = model.snapshot(), math.inf
    train_ids = data.ids["train"]
    for epoch in range(1, cfg.epochs + 1):
        plan = make_batches(train_ids, cfg.batch_size, cfg.mean_seq_len, seed=[cfg.seed, epoch])
        laid = plan.layout(gates["train"]) if gates["train"] is not None else None
        state = None
        l1_sum = l2_sum = 0.0
        n_steps = 0
        diverged = False
        for seg in plan:
            g = laid[:, seg.start: seg.stop].T if laid is not None else None
            fwd = lm_forward(model, seg.inputs, g, state, training=True, rng=streams["dropout"])
            l1 = token_nll(fwd.log_probs, seg.targets)
            l2 = None
            if fix_batches is not None:
                fids, target = fix_batches.sample()
                d_hat, _ = model.fp.predict_ids(fids)
                l2 = variance_weighted_mse(d_hat, target, cfg.epsilon)
            loss = joint_loss(l1, l2, cfg.lambda_)
            if _nonfinite(float(loss.data)):
                diverged = True
                break
            grads = _grads(params, loss)
            ad.clip_grad_norm(grads, cfg.clip)
            try:
                ad.adam_step(opt, params, grads)
            except ad.NonFiniteGradient:
                diverged = True
                break
            state = _detach(fwd.state)
            l1_sum += float(l1.data)
            l2_sum += float(l2.data) if l2 is not None else 0.0
            n_steps += 1
        if diverged:
            model.restore(best)
            metrics.status = "diverged"
            metrics.wall_time = time.perf_counter() - started
            if out:
                metrics.write(out / "metrics.jsonl")
            raise TrainingDiverged(metrics)
        valid = evaluate_lm(model, data.ids["valid"], gates["valid"], cfg.eval_batch_size, cfg.mean_seq_len)
        rec = {"epoch": epoch, "train_loss": l1_sum / max(n_steps, 1),
               "train_perplexity": _exp(l1_sum / max(n_steps, 1)),
               "valid_nll": valid["nll"], "valid_perplexity": valid["perplexity"]}
        if fix_batches is not None:
            rec["train_fixation_loss"] = l2_sum / max(n_steps, 1)
        if model.fp is not None and model.duration_stats.mean is not None:
            rec["duration_mean"], rec["duration_std"] = model.duration_stats.mean, model.duration_stats.std
        metrics.epochs.append(rec)
        if valid["nll"] < best_valid:
            best_valid = valid["nll"]
            best = model.snapshot()
            if out:
                _save(model, out / "checkpoint.npz", cfg, data.vocab, epoch)
    model.restore(best)
    test = evaluate_lm(model, data.ids["test"], gates["test"], cfg.eval_batch_size, cfg.mean_seq_len)
    metrics.final = {"best_valid_nll": best_valid, "best_valid_perplexity": _exp(best_valid),
                     "test_nll": test["nll"], "test_perplexity": test["perplexity"],
                     "n_test_tokens": test["n_tokens"], "vocab_size": len(data.vocab)}
    if fp_checksum is not None:
        metrics.final["fixed_fp_unchanged"] = fixed_fp.checksum() == fp_checksum
    metrics.status = "ok"
    metrics.wall_time = time.perf_counter() - started
    metrics.model = model
    return metrics


def _sentiment_batches(rows, vocab, gates, batch_size, rng=None):
    order = rng.permutation(len(rows)) if rng is not None else np.arange(len(rows))
    for s in range(0, len(order), batch_size):
        idx = order[s: s + batch_size]
        ids, mask = pad_batch([vocab.encode(rows[i]["tokens"]) for i in idx])
        lengths = mask.sum(axis=0)
        g = None
        if gates is not None:
            g = np.ones(ids.shape, dtype=np.int64)
            for b, i in enumerate(idx):
                g[: len(gates[i]), b] = gates[i]
        yield ids, lengths, g, np.array([rows[i]["label"] for i in idx])


def _sentiment_gates(cfg, spec, data: SentimentData, fixed_fp):
    train_tokens = [t for r in data.rows["train"] for t in r["tokens"]]
    freq = fixation_frequency_table(cfg, train_tokens) if cfg.gate_source == "freq" else None
    out = {}
    for split, rows in data.rows.items():
        if spec.family == "vanilla" or cfg.gate_source == "adaptive":
            out[split] = None
            continue
        out[split] = [gate_values(cfg, spec, r["tokens"], f"{split}/{i}", r.get("bin"), freq, fixed_fp)
                      for i, r in enumerate(rows)]
    return out


def evaluate_sentiment(model: TaskModel, rows, vocab, gates, batch_size: int = 64) -> dict:
    preds, labels = [], []
    with ad.no_grad():
        for ids, lengths, g, y in _sentiment_batches(rows, vocab, gates, batch_size):
            preds.append(sentiment_forward(model, ids, lengths, g).predictions)
            labels.append(y)
    return {"accuracy": accuracy(np.concatenate(preds), np.concatenate(labels)), "n": len(rows)}


def train_sentiment(cfg: RunConfig, out_dir=None) -> RunMetrics:
    started = time.perf_counter()
    streams = ad.RngStreams(cfg.seed)
    data = load_sentiment_data(cfg)
    model = build_model(cfg, len(data.vocab), streams["init"])
    fixed_fp = FixedFpModel.load(cfg.fp_checkpoint) if cfg.gate_source == "fixed_fp" else None
    gates = _sentiment_gates(cfg, model.spec, data, fixed_fp)
    fix_batches = None
    if cfg.lambda_ > 0:
        rows = load_prepared(cfg.fixation_corpus)["train"]
        fix_batches = FixationBatches(rows, data.vocab, cfg.fix_batch_size or cfg.batch_size, streams["multitask"])
    params = model.parameters()
    opt = ad.AdamState(lr=cfg.lr)
    metrics = RunMetrics(cfg.run_id(), "sentiment", cfg.seed,
                         sum(p.data.size for p in model.counted_parameters().values()),
                         model.spec.hidden_dim, "accuracy")
    out = Path(out_dir) if out_dir else None
    best, best_acc, best_epoch = model.snapshot(), -1.0, 0
    for epoch in range(1, cfg.epochs + 1):
        l1_sum = l2_sum = 0.0
        n_steps = 0
        for ids, lengths, g, y in _sentiment_batches(data.rows["train"], data.vocab, gates["train"],
                                                     cfg.batch_size, streams["batching"]):
            fwd = sentiment_forward(model, ids, lengths, g, training=True, rng=streams["dropout"])
            l1 = -ad.getitem(fwd.log_probs, (np.arange(len(y)), y)).mean()
            l2 = None
            if fix_batches is not None:
                fids, target = fix_batches.sample()
                d_hat, _ = model.fp.predict_ids(fids)
                l2 = variance_weighted_mse(d_hat, target, cfg.epsilon)
            loss = joint_loss(l1, l2, cfg.lambda_)
            grads = _grads(params, loss) if math.isfinite(float(loss.data)) else None
            try:
                if grads is None:
                    raise ad.NonFiniteGradient("loss")
                ad.clip_grad_norm(grads, cfg.clip)
                ad.adam_step(opt, params, grads)
            except ad.NonFiniteGradient:
                model.restore(best)
                metrics.status = "diverged"
                metrics.wall_time = time.perf_counter() - started
                if out:
                    metrics.write(out / "metrics.jsonl")
                raise TrainingDiverged(metrics) from None
            l1_sum += float(l1.data)
            l2_sum += float(l2.data) if l2 is not None else 0.0
            n_steps += 1
        test = evaluate_sentiment(model, data.rows["test"], data.vocab, gates["test"])
        train_eval = evaluate_sentiment(model, data.rows["train"], data.vocab, gates["train"])
        rec = {"epoch": epoch, "train_loss": l1_sum / max(n_steps, 1), "train_accuracy": train_eval["accuracy"],
               "test_accuracy": test["accuracy"]}
        if fix_batches is not None:
            rec["train_fixation_loss"] = l2_sum / max(n_steps, 1)
        metrics.epochs.append(rec)
        if test["accuracy"] > best_acc:
            best_acc, best_epoch, best = test["accuracy"], epoch, model.snapshot()
            if out:
                _save(model, out / "checkpoint.npz", cfg, data.vocab, epoch)
    model.restore(best)
    metrics.final = {"best_test_accuracy": best_acc, "best_epoch": best_epoch, "n_test": len(data.rows["test"]),
                     "vocab_size": len(data.vocab)}
    metrics.status = "ok"
    metrics.wall_time = time.perf_counter() - started
    metrics.model = model
    return metrics


def train(cfg: RunConfig, out_dir=None) -> RunMetrics:
    """Run one configured training job; writes a checkpoint into ``out_dir`` if given."""
    return (train_lm if cfg.task == "lm" else train_sentiment)(cfg, out_dir)


def evaluate_checkpoint(cfg: RunConfig, checkpoint) -> dict:
    """Rebuild the model from a checkpoint and score it on the test split."""
    arrays, header = ad.load_checkpoint(checkpoint)
    vocab = Vocab(header["vocab"])
    cfg = cfg.replace(hidden_dim=header["hidden_dim"])
    model = TaskModel(ModelSpec.from_config(cfg, len(vocab)), np.random.default_rng(0), _dtype(cfg))
    model.restore(arrays)
    fixed_fp = FixedFpModel.load(cfg.fp_checkpoint) if cfg.gate_source == "fixed_fp" else None
    if cfg.task == "lm":
        data = load_lm_data(cfg)
        data = LmData(vocab, {s: vocab.encode(t) for s, t in data.tokens.items()}, data.tokens, data.bins)
        gates = _lm_gates(cfg, model.spec, data, fixed_fp)
        res = evaluate_lm(model, data.ids["test"], gates["test"], cfg.eval_batch_size, cfg.mean_seq_len)
        return {"task": "lm", "test_nll": res["nll"], "test_perplexity": res["perplexity"],
                "n_test_tokens": res["n_tokens"]}
    data = load_sentiment_data(cfg)
    data = SentimentData(vocab, data.rows)
    gates = _sentiment_gates(cfg, model.spec, data, fixed_fp)
    res = evaluate_sentiment(model, data.rows["test"], vocab, gates["test"])
    return {"task": "sentiment", "test_accuracy": res["accuracy"], "n_test": res["n"]}
