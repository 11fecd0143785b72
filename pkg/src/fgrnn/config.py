"""Flat ``key = value`` run configuration.

Lines starting with ``#`` and blank lines are ignored.  Every key must be a
field of :class:`RunConfig`; values are coerced to the field's type.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, fields
from pathlib import Path

TASKS = ("lm", "sentiment")
VARIANTS = ("vanilla_rnn", "vanilla_lstm", "fgp_rnn", "fgp_lstm", "fgl_rnn", "fgl_lstm")
GATE_SOURCES = ("none", "human", "fixed_fp", "adaptive", "random", "random_bt", "full", "freq")


class ConfigError(ValueError):
    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


@dataclass
class RunConfig:
    task: str = "lm"
    variant: str = "fgp_lstm"
    k_components: int = 4
    n_layers: int = 1
    hidden_dim: int = 0
    param_budget: int = 0
    emb_dim: int = 64
    proj_dim: int = 0
    gate_source: str = "full"
    # multi-task weight and eps of the variance-weighted loss
    lambda_: float = 0.0
    s: float = 4.0
    epsilon: float = 0.1
    norm_stats: str = "batch"
    lr: float = 0.001
    batch_size: int = 64
    eval_batch_size: int = 10
    mean_seq_len: int = 100
    epochs: int = 10
    seed: int = 0
    dropout_embed: float = 0.5
    dropout_other: float = 0.25
    clip: float = 5.0
    min_freq: int = 2
    precision: str = "float32"
    # data
    train_path: str = ""
    valid_path: str = ""
    test_path: str = ""
    data_path: str = ""
    test_fraction: float = 0.2
    data_seed: int = 0
    synth_tokens: int = 0
    synth_vocab: int = 500
    fixation_corpus: str = ""
    fix_batch_size: int = 0
    fp_checkpoint: str = ""
    freq_table: str = "fixation"

    def validate(self) -> "RunConfig":
        def bad(key, msg):
            raise ConfigError(key, msg)

        if self.task not in TASKS:
            bad("task", f"must be one of {TASKS}")
        if self.variant not in VARIANTS:
            bad("variant", f"must be one of {VARIANTS}")
        if self.gate_source not in GATE_SOURCES:
            bad("gate_source", f"must be one of {GATE_SOURCES}")
        vanilla = self.variant.startswith("vanilla")
        if vanilla and self.gate_source != "none":
            bad("gate_source", "vanilla models take no gate source (use 'none')")
        if not vanilla and self.gate_source == "none":
            bad("gate_source", "fixation-guided variants need a gate source")
        if self.hidden_dim <= 0 and self.param_budget <= 0:
            bad("hidden_dim", "set hidden_dim or param_budget")
        if self.k_components < 1:
            bad("k_components", "must be >= 1")
        if self.n_layers < 1:
            bad("n_layers", "must be >= 1")
        if self.lambda_ < 0:
            bad("lambda", "must be >= 0")
        if self.lambda_ > 0 and self.gate_source != "adaptive":
            bad("lambda", "multi-task training needs gate_source=adaptive")
        if self.lambda_ > 0 and not self.fixation_corpus:
            bad("fixation_corpus", "multi-task training needs a fixation corpus")
        if self.s <= 1:
            bad("s", "steepness must exceed 1")
        if self.epsilon <= 0:
            bad("epsilon", "must be positive")
        if self.norm_stats not in ("batch", "running"):
            bad("norm_stats", "must be 'batch' or 'running'")
        for key in ("dropout_embed", "dropout_other"):
            if not 0 <= getattr(self, key) < 1:
                bad(key, "must lie in [0, 1)")
        if self.precision not in ("float32", "float64"):
            bad("precision", "must be float32 or float64")
        if self.gate_source == "fixed_fp" and not self.fp_checkpoint:
            bad("fp_checkpoint", "gate_source=fixed_fp needs a fixed FP checkpoint")
        if self.freq_table not in ("fixation", "train"):
            bad("freq_table", "must be 'fixation' or 'train'")
        if self.gate_source == "freq" and self.freq_table == "fixation" and not self.fixation_corpus:
            bad("fixation_corpus", "gate_source=freq needs a fixation corpus frequency table")
        if self.task == "lm" and not (self.synth_tokens or self.train_path):
            bad("train_path", "LM runs need train_path or synth_tokens")
        if self.task == "sentiment" and not self.data_path:
            bad("data_path", "sentiment runs need data_path")
        return self

    @property
    def cell(self) -> str:
        return self.variant.split("_")[1]

    @property
    def family(self) -> str:
        return self.variant.split("_")[0]

    def canonical(self) -> dict:
        out = {}
        for f in fields(self):
            out[_external(f.name)] = getattr(self, f.name)
        return out

    def run_id(self) -> str:
        blob = json.dumps(self.canonical(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:12]

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **{_internal(k): v for k, v in changes.items()}).validate()

    def to_text(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in self.canonical().items())


def _internal(key: str) -> str:
    return "lambda_" if key == "lambda" else key


def _external(name: str) -> str:
    return "lambda" if name == "lambda_" else name


_FIELDS = {f.name: f for f in fields(RunConfig)}


def _coerce(key: str, raw: str, typ):
    typ = typ if isinstance(typ, type) else {"int": int, "float": float, "str": str}[typ]
    try:
        if typ is int:
            return int(raw)
        if typ is float:
            return float(raw)
    except ValueError:
        raise ConfigError(key, f"expected {typ.__name__}, got {raw!r}") from None
    return raw


def parse_config(text: str, overrides: dict | None = None) -> RunConfig:
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}", f"expected 'key = value', got {line!r}")
        key, raw = (part.strip() for part in line.split("=", 1))
        values[key] = raw
    values.update({k: str(v) for k, v in (overrides or {}).items()})
    kwargs = {}
    for key, raw in values.items():
        name = _internal(key)
        if name not in _FIELDS:
            raise ConfigError(key, "unknown config key")
        kwargs[name] = _coerce(key, raw, _FIELDS[name].type)
    return RunConfig(**kwargs).validate()


def load_config(path, overrides: dict | None = None) -> RunConfig:
    return parse_config(Path(path).read_text(encoding="utf-8"), overrides)
