"""Run directories, experiment matrices, heatmaps and run comparison."""

from __future__ import annotations

import html
import itertools
import json
import statistics
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .config import RunConfig, load_config
from .tasks import RunMetrics, TrainingDiverged, train


# ---------------------------------------------------------------------------
# single runs
# ---------------------------------------------------------------------------

def run_experiment(config: RunConfig | str | Path, out_root, overrides: dict | None = None) -> RunMetrics:
    """Train, evaluate and write ``<out_root>/<run_id>/``.

    The run directory holds ``config.txt``, ``metrics.jsonl`` (one record per
    epoch plus a final record), ``checkpoint.npz`` and ``timing.json``.  Wall
    time lives only in ``timing.json`` so metrics files compare byte for byte.
    A diverged run keeps its partial metrics and re-raises.
    """
    cfg = config if isinstance(config, RunConfig) else load_config(config, overrides)
    if isinstance(config, RunConfig) and overrides:
        cfg = cfg.replace(**overrides)
    run_dir = Path(out_root) / cfg.run_id()
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.txt").write_text(cfg.to_text(), encoding="utf-8")
    try:
        metrics = train(cfg, run_dir)
    except TrainingDiverged as err:
        _finish(err.metrics, cfg, run_dir)
        raise
    _finish(metrics, cfg, run_dir)
    return metrics


def _finish(metrics: RunMetrics, cfg: RunConfig, run_dir: Path):
    metrics.final["config"] = cfg.canonical()
    metrics.write(run_dir / "metrics.jsonl")
    (run_dir / "timing.json").write_text(json.dumps({"wall_time_s": metrics.wall_time}) + "\n")


# ---------------------------------------------------------------------------
# matrices
# ---------------------------------------------------------------------------

@dataclass
class ExperimentMatrix:
    base: RunConfig
    variants: Sequence[str]
    gate_sources: Sequence[str]
    seeds: Sequence[int]
    out_dir: str | Path
    jobs: int = 1
    extra: dict = field(default_factory=dict)

    def expand(self) -> list[RunConfig]:
        """Cross product, with ungated variants collapsed onto gate source ``none``."""
        cells, seen = [], set()
        for variant, source, seed in itertools.product(self.variants, self.gate_sources, self.seeds):
            if variant.startswith("vanilla"):
                source = "none"
            elif source == "none":
                continue
            cfg = self.base.replace(variant=variant, gate_source=source, seed=seed, **self.extra)
            if cfg.run_id() not in seen:
                seen.add(cfg.run_id())
                cells.append(cfg)
        return cells


def _run_cell(cfg: RunConfig, out_dir: str) -> tuple[str, str]:
    try:
        run_experiment(cfg, out_dir)
        return cfg.run_id(), "ok"
    except TrainingDiverged:
        return cfg.run_id(), "diverged"


def run_matrix(matrix: ExperimentMatrix) -> list[tuple[str, str]]:
    """Run every cell, each in its own worker process when ``jobs > 1``."""
    cells = matrix.expand()
    out = str(matrix.out_dir)
    if matrix.jobs <= 1:
        return [_run_cell(c, out) for c in cells]
    with ProcessPoolExecutor(max_workers=matrix.jobs) as pool:
        return list(pool.map(_run_cell, cells, [out] * len(cells)))


# ---------------------------------------------------------------------------
# heatmaps
# ---------------------------------------------------------------------------

@dataclass
class HeatmapTrack:
    name: str
    values: Sequence[float]
    rescale: str = "linear"  # linear | rank


@dataclass
class HeatmapDoc:
    tokens: Sequence[str]
    tracks: Sequence[HeatmapTrack]
    caption: str = ""

    def __post_init__(self):
        for tr in self.tracks:
            if len(tr.values) != len(self.tokens):
                raise ValueError(f"track {tr.name!r} has {len(tr.values)} values for {len(self.tokens)} tokens")


def average_ranks(values: Sequence[float]) -> np.ndarray:
    """0-based ranks, ties sharing the mean of their positions."""
    v = np.asarray(values, dtype=np.float64)
    order = np.argsort(v, kind="stable")
    ranks = np.empty(len(v))
    i = 0
    while i < len(v):
        j = i
        while j + 1 < len(v) and v[order[j + 1]] == v[order[i]]:
            j += 1
        ranks[order[i: j + 1]] = (i + j) / 2
        i = j + 1
    return ranks


def track_intensity(track: HeatmapTrack) -> np.ndarray:
    """Per-token intensity in [0, 1]; a constant track maps to 0.5 throughout."""
    v = np.asarray(track.values, dtype=np.float64)
    if track.rescale == "rank":
        v = average_ranks(v)
    elif track.rescale != "linear":
        raise ValueError(f"unknown rescaling {track.rescale!r}")
    if v.size == 0:
        return v
    finite = np.isfinite(v)
    lo, hi = (v[finite].min(), v[finite].max()) if finite.any() else (0.0, 0.0)
    if hi == lo:
        return np.full(v.shape, 0.5)
    return np.clip(np.where(finite, (v - lo) / (hi - lo), 1.0), 0.0, 1.0)


_LIGHT = (255, 255, 255)
_DEEP = (8, 48, 107)
# xterm-256 blues from pale to deep
_ANSI_RAMP = (231, 195, 189, 153, 117, 111, 75, 69, 33, 27, 26, 19)


def _rgb(x: float) -> str:
    c = [round(a + (b - a) * x) for a, b in zip(_LIGHT, _DEEP)]
    return "#{:02x}{:02x}{:02x}".format(*c)


def _render_html(doc: HeatmapDoc) -> str:
    parts = ["<!DOCTYPE html>", '<html><head><meta charset="utf-8"><title>fixation heatmap</title></head>',
             '<body style="font-family: monospace; background: #ffffff;">']
    if doc.caption:
        parts.append(f'<p style="font-weight: bold;">{html.escape(doc.caption)}</p>')
    for tr in doc.tracks:
        parts.append(f'<div style="margin: 4px 0;"><span style="display: inline-block; width: 8em;">'
                     f'{html.escape(tr.name)}</span>')
        for tok, x in zip(doc.tokens, track_intensity(tr)):
            fg = "#ffffff" if x > 0.55 else "#000000"
            parts.append(f'<span style="background-color: {_rgb(x)}; color: {fg}; padding: 0 2px;">'
                         f'{html.escape(tok)}</span>')
        parts.append("</div>")
    parts.append("</body></html>")
    return "\n".join(parts) + "\n"


def _render_ansi(doc: HeatmapDoc) -> str:
    lines = [doc.caption] if doc.caption else []
    width = max((len(t.name) for t in doc.tracks), default=0)
    for tr in doc.tracks:
        cells = []
        for tok, x in zip(doc.tokens, track_intensity(tr)):
            code = _ANSI_RAMP[min(int(x * len(_ANSI_RAMP)), len(_ANSI_RAMP) - 1)]
            fg = 231 if x > 0.55 else 16
            cells.append(f"\x1b[38;5;{fg};48;5;{code}m {tok} \x1b[0m")
        lines.append(f"{tr.name.ljust(width)}  " + "".join(cells))
    return "\n".join(lines) + "\n"


def render_heatmap(doc: HeatmapDoc, fmt: str = "html", path=None) -> str:
    if fmt == "html":
        text = _render_html(doc)
    elif fmt == "ansi":
        text = _render_ansi(doc)
    else:
        raise ValueError(f"unknown heatmap format {fmt!r}")
    if path is not None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
    return text


# ---------------------------------------------------------------------------
# comparison
# ---------------------------------------------------------------------------

FINAL_METRIC = {"lm": "test_perplexity", "sentiment": "best_test_accuracy"}


@dataclass
class SummaryRow:
    group: dict
    task: str
    metric: str
    n: int
    mean: float
    median: float
    min: float
    values: list[float]

    def as_dict(self) -> dict:
        return {**self.group, "task": self.task, "metric": self.metric, "n": self.n,
                "mean": self.mean, "median": self.median, "min": self.min, "values": self.values}


def _final_record(path) -> dict:
    finals = [r for r in RunMetrics.read(path) if r.get("record") == "final"]
    if not finals:
        raise ValueError(f"{path}: no final record")
    return finals[-1]


def compare_runs(paths: Sequence, group_by: Sequence[str] = ()) -> list[SummaryRow]:
    """Group final metrics by config keys and summarise each group."""
    if not paths:
        raise ValueError("compare_runs needs at least one metrics file")
    groups: dict[tuple, list[dict]] = {}
    for p in paths:
        rec = _final_record(p)
        cfg = rec.get("config", {})
        key = tuple(cfg.get(k, rec.get(k)) for k in group_by)
        groups.setdefault(key, []).append(rec)
    rows = []
    for key, recs in sorted(groups.items(), key=lambda kv: tuple(str(x) for x in kv[0])):
        tasks = {r["task"] for r in recs}
        if len(tasks) != 1:
            raise ValueError(f"group {dict(zip(group_by, key))} mixes tasks {sorted(tasks)}")
        task = tasks.pop()
        metric = FINAL_METRIC[task]
        values = [float(r[metric]) for r in recs]
        rows.append(SummaryRow(dict(zip(group_by, key)), task, metric, len(values),
                               statistics.fmean(values), statistics.median(values), min(values), values))
    return rows


def format_summary(rows: Sequence[SummaryRow], group_by: Sequence[str] = ()) -> str:
    header = list(group_by) + ["task", "metric", "n", "mean", "median", "min"]
    body = [[str(r.group[k]) for k in group_by] + [r.task, r.metric, str(r.n), f"{r.mean:.4f}",
                                                   f"{r.median:.4f}", f"{r.min:.4f}"] for r in rows]
    widths = [max(len(h), *(len(b[i]) for b in body)) if body else len(h) for i, h in enumerate(header)]
    lines = ["  ".join(h.ljust(w) for h, w in zip(header, widths))]
    lines.append("  ".join("-" * w for w in widths))
    lines += ["  ".join(c.ljust(w) for c, w in zip(b, widths)) for b in body]
    return "\n".join(lines) + "\n"
