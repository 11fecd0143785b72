"""Eye-tracking data: interchange I/O, subject aggregation, K-quantile bins,
token alignment, train/test splits and synthetic corpora.

Interchange format: one JSON object per line::

    {"corpus_id": "zuco1", "sentence_id": "17", "words": ["The", "cat."],
     "trt_ms": [[212.0, 0.0], [180.5, 240.0]]}

``trt_ms`` holds one array per subject, aligned with ``words``; 0 marks a
skipped word.  An optional ``label`` field carries a sentence label.
"""

from __future__ import annotations

import json
import math
import re
from collections import defaultdict
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Sequence

import numpy as np


class SchemaError(ValueError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


@dataclass
class SentenceRecord:
    corpus_id: str
    sentence_id: str
    words: list[str]
    trt_ms: list[list[float]]
    label: int | None = None

    @property
    def n_subjects(self) -> int:
        return len(self.trt_ms)


@dataclass
class RawFixationCorpus:
    sentences: list[SentenceRecord] = field(default_factory=list)

    @property
    def corpus_ids(self) -> list[str]:
        return sorted({s.corpus_id for s in self.sentences})

    def __len__(self):
        return len(self.sentences)


@dataclass(frozen=True)
class FixationRecord:
    token: str
    mean: float
    var: float
    bin: int | None = None
    corpus_id: str = ""


@dataclass
class SplitSpec:
    train_fraction: float = 0.75
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.train_fraction < 1:
            raise ValueError(f"train fraction must lie in (0, 1), got {self.train_fraction}")


# ---------------------------------------------------------------------------
# interchange I/O
# ---------------------------------------------------------------------------

def _parse_line(obj, lineno: int) -> SentenceRecord:
    if not isinstance(obj, dict):
        raise SchemaError(lineno, "record must be a JSON object")
    for key in ("corpus_id", "sentence_id", "words", "trt_ms"):
        if key not in obj:
            raise SchemaError(lineno, f"missing field {key!r}")
    words = obj["words"]
    if not isinstance(words, list) or not all(isinstance(w, str) for w in words) or not words:
        raise SchemaError(lineno, "'words' must be a non-empty array of strings")
    trt = obj["trt_ms"]
    if not isinstance(trt, list) or not trt:
        raise SchemaError(lineno, "'trt_ms' must be a non-empty array of per-subject arrays")
    subjects = []
    for i, row in enumerate(trt):
        if not isinstance(row, list) or len(row) != len(words):
            raise SchemaError(lineno, f"subject {i} has {len(row) if isinstance(row, list) else '?'} "
                                      f"values for {len(words)} words")
        vals = []
        for v in row:
            if v is None:
                v = 0.0
            if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v) or v < 0:
                raise SchemaError(lineno, f"subject {i}: durations must be non-negative numbers, got {v!r}")
            vals.append(v)
        subjects.append(vals)
    label = obj.get("label")
    if label is not None and (isinstance(label, bool) or not isinstance(label, int)):
        raise SchemaError(lineno, f"'label' must be an integer, got {label!r}")
    return SentenceRecord(str(obj["corpus_id"]), str(obj["sentence_id"]), list(words), subjects, label)


def load_corpus(path) -> RawFixationCorpus:
    """Read and validate an interchange file; missing durations (null) become 0."""
    sentences = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise SchemaError(lineno, f"invalid JSON ({exc.msg})") from None
            sentences.append(_parse_line(obj, lineno))
    if not sentences:
        raise SchemaError(0, "corpus file contains no records")
    return RawFixationCorpus(sentences)


def save_corpus(corpus: RawFixationCorpus, path):
    with open(path, "w", encoding="utf-8") as fh:
        for s in corpus.sentences:
            obj = {"corpus_id": s.corpus_id, "sentence_id": s.sentence_id, "words": s.words, "trt_ms": s.trt_ms}
            if s.label is not None:
                obj["label"] = s.label
            fh.write(json.dumps(obj, ensure_ascii=False) + "\n")


# ---------------------------------------------------------------------------
# aggregation and discretization
# ---------------------------------------------------------------------------

def aggregate_subjects(corpus: RawFixationCorpus, normalization: str = "corpus_mean") -> list[list[FixationRecord]]:
    """Per-word mean and population variance of normalized durations.

    ``corpus_mean`` divides every duration by the mean over all subjects and
    words of its corpus.  ``subject_mean`` divides each subject's durations by
    that subject's own mean within the corpus (subjects are identified by
    their position in ``trt_ms``).
    """
    if normalization not in ("corpus_mean", "subject_mean"):
        raise ValueError(f"unknown normalization {normalization!r}")
    totals: dict = defaultdict(float)
    counts: dict = defaultdict(int)
    for s in corpus.sentences:
        if not s.trt_ms:
            raise ValueError(f"sentence {s.sentence_id} has no subjects")
        for j, row in enumerate(s.trt_ms):
            key = s.corpus_id if normalization == "corpus_mean" else (s.corpus_id, j)
            totals[key] += float(sum(row))
            counts[key] += len(row)
    means = {}
    for key, tot in totals.items():
        if tot <= 0:
            raise ValueError(f"corpus {key!r} has only zero durations; mean undefined")
        means[key] = tot / counts[key]

    out = []
    for s in corpus.sentences:
        rows = []
        for j, row in enumerate(s.trt_ms):
            key = s.corpus_id if normalization == "corpus_mean" else (s.corpus_id, j)
            rows.append(np.asarray(row, dtype=np.float64) / means[key])
        mat = np.stack(rows)
        mu = mat.mean(axis=0)
        var = mat.var(axis=0)
        out.append([FixationRecord(w, float(m), float(v), None, s.corpus_id)
                    for w, m, v in zip(s.words, mu, var)])
    return out


def quantile_bins(values: Sequence[float], k: int) -> np.ndarray:
    """Bins 1..k splitting the sorted values into k near-equal-count groups.

    Equal values always share a bin: a group boundary that would separate a
    tie moves forward to the next strictly greater value.
    """
    if k < 2:
        raise ValueError("K must be at least 2")
    vals = np.asarray(values, dtype=np.float64)
    n = vals.size
    if n < k:
        raise ValueError(f"need at least K={k} values, got {n}")
    order = np.argsort(vals, kind="stable")
    srt = vals[order]
    bins_sorted = np.empty(n, dtype=np.int64)
    start = 0
    for j in range(1, k + 1):
        end = n if j == k else (j * n) // k
        end = max(end, start)
        while 0 < end < n and srt[end] == srt[end - 1]:
            end += 1
        bins_sorted[start:end] = j
        start = end
        if start >= n:
            break
    out = np.empty(n, dtype=np.int64)
    out[order] = bins_sorted
    return out


def quantile_discretize(records: Sequence[FixationRecord], k: int) -> list[FixationRecord]:
    bins = quantile_bins([r.mean for r in records], k)
    return [replace(r, bin=int(b)) for r, b in zip(records, bins)]


def discretize_sentences(sentences: Sequence[Sequence[FixationRecord]], k: int) -> list[list[FixationRecord]]:
    """Quantile bins computed over all records of all sentences jointly."""
    flat = [r for s in sentences for r in s]
    binned = iter(quantile_discretize(flat, k))
    return [[next(binned) for _ in s] for s in sentences]


# ---------------------------------------------------------------------------
# tokenization alignment
# ---------------------------------------------------------------------------

_CLITIC = re.compile(r"(?i)(?<=\w)(n't|'(?:m|s|re|ve|ll|d))$")
_TOKEN = re.compile(r"n't|'\w+|\w+(?:-\w+)*|\.\.\.|[^\w\s]")


def word_tokenize(word: str) -> list[str]:
    """Split a presented word into task tokens (punctuation and clitics apart).

    ``"hello!" -> ["hello", "!"]``, ``"I'm" -> ["I", "'m"]``, ``"..." -> ["..."]``.
    """
    tokens = []
    for piece in word.split():
        m = _CLITIC.search(piece)
        if m and m.start() > 0:
            tokens.extend(_TOKEN.findall(piece[: m.start()]))
            tokens.append(m.group(1))
        else:
            tokens.extend(_TOKEN.findall(piece))
    return tokens


def is_punctuation(token: str) -> bool:
    return not any(ch.isalnum() for ch in token)


def align_tokens(record: FixationRecord, tokenizer: Callable[[str], list[str]] = word_tokenize) -> list[FixationRecord]:
    """Spread one word's fixation over its task tokens.

    Tokens with a word character inherit the word's duration, variance and
    bin; pure punctuation gets duration 1 (bin 1) and infinite variance.
    """
    tokens = tokenizer(record.token)
    if not tokens:
        raise ValueError(f"tokenizer produced no tokens for {record.token!r}")
    out = []
    for tok in tokens:
        if is_punctuation(tok):
            out.append(FixationRecord(tok, 1.0, math.inf, None if record.bin is None else 1, record.corpus_id))
        else:
            out.append(replace(record, token=tok))
    return out


def align_sentence(records: Sequence[FixationRecord], tokenizer=word_tokenize) -> list[FixationRecord]:
    return [t for r in records for t in align_tokens(r, tokenizer)]


# ---------------------------------------------------------------------------
# splits and synthetic data
# ---------------------------------------------------------------------------

def split_train_test(items: Sequence, spec: SplitSpec) -> tuple[list, list]:
    """Shuffled sentence-level partition; ``round(fraction * n)`` items go to train."""
    n = len(items)
    perm = np.random.default_rng(spec.seed).permutation(n)
    n_train = int(round(spec.train_fraction * n))
    return [items[i] for i in perm[:n_train]], [items[i] for i in perm[n_train:]]


def synth_latent_durations(vocab_size: int, low: float = 100.0, high: float = 400.0) -> np.ndarray:
    """Latent duration (ms) of synthetic word ``w{i}``: evenly spaced over [low, high]."""
    if vocab_size == 1:
        return np.array([low])
    return np.linspace(low, high, vocab_size)


def synth_fixation_corpus(vocab_size: int, n_sentences: int, n_subjects: int, noise: float = 0.0,
                          seed: int = 0, min_len: int = 5, max_len: int = 15,
                          corpus_id: str = "synth") -> RawFixationCorpus:
    """Sentences over words ``w0..w{V-1}`` with a latent duration per word.

    Tokens are drawn from back-to-back random permutations of the vocabulary,
    so every word occurs equally often (up to one) and K-quantile bins over
    the occurrences stay balanced whenever K divides V.  Subject j reads word
    v for ``latent[v] * (1 + noise * z)`` ms, z standard normal, floored at 0.
    """
    if min(vocab_size, n_sentences, n_subjects) < 1:
        raise ValueError("vocab size, sentence count and subject count must be positive")
    rng = np.random.default_rng(seed)
    lengths = rng.integers(min_len, max_len + 1, size=n_sentences)
    total = int(lengths.sum())
    reps = -(-total // vocab_size)
    stream = np.concatenate([rng.permutation(vocab_size) for _ in range(reps)])[:total]
    latent = synth_latent_durations(vocab_size)
    sentences = []
    pos = 0
    for i, n in enumerate(lengths):
        ids = stream[pos: pos + n]
        pos += n
        base = latent[ids]
        trt = []
        for _ in range(n_subjects):
            z = rng.standard_normal(n)
            trt.append([float(v) for v in np.maximum(base * (1 + noise * z), 0.0)])
        sentences.append(SentenceRecord(corpus_id, str(i), [f"w{j}" for j in ids], trt))
    return RawFixationCorpus(sentences)


def prepare(corpus: RawFixationCorpus, k: int, split: SplitSpec, tokenizer=word_tokenize,
            normalization: str = "corpus_mean") -> dict[str, list[dict]]:
    """Full pipeline: aggregate, K-quantile bins, align tokens, split by sentence."""
    aggregated = aggregate_subjects(corpus, normalization)
    binned = discretize_sentences(aggregated, k)
    rows = []
    for sent, recs in zip(corpus.sentences, binned):
        toks = align_sentence(recs, tokenizer)
        rows.append({
            "corpus_id": sent.corpus_id,
            "sentence_id": sent.sentence_id,
            "tokens": [t.token for t in toks],
            "mean": [t.mean for t in toks],
            "var": [None if math.isinf(t.var) else t.var for t in toks],
            "bin": [t.bin for t in toks],
            **({"label": sent.label} if sent.label is not None else {}),
        })
    train, test = split_train_test(rows, split)
    return {"train": train, "test": test}


def save_prepared(prepared: dict[str, list[dict]], path):
    with open(path, "w", encoding="utf-8") as fh:
        for part in ("train", "test"):
            for row in prepared[part]:
                fh.write(json.dumps({"split": part, **row}, ensure_ascii=False) + "\n")


def load_prepared(path) -> dict[str, list[dict]]:
    out: dict[str, list[dict]] = {"train": [], "test": []}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            row = json.loads(line)
            part = row.pop("split", "train")
            if part not in out:
                raise SchemaError(lineno, f"unknown split {part!r}")
            row["var"] = [math.inf if v is None else v for v in row["var"]]
            out[part].append(row)
    return out
