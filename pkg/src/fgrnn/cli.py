"""``fgrnn`` command line: prep, pretrain-fp, train, eval, matrix, heatmap, compare."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .config import ConfigError, RunConfig, load_config
from .eyetrack import SplitSpec, load_corpus, load_prepared, prepare, save_corpus, save_prepared, synth_fixation_corpus
from .fixation import FpHyper, pretrain_fixed_fp, predict_fixations_fixed, FixedFpModel, normalize_durations
from .reporting import (ExperimentMatrix, HeatmapDoc, HeatmapTrack, compare_runs, format_summary,
                        render_heatmap, run_experiment, run_matrix)
from .tasks import ModelSpec, TaskModel, TrainingDiverged, evaluate_checkpoint
from .vocab import Vocab


def _overrides(pairs) -> dict:
    out = {}
    for pair in pairs or ():
        if "=" not in pair:
            raise ConfigError(pair, "override must look like key=value")
        k, v = pair.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _csv(text: str) -> list[str]:
    return [t.strip() for t in text.split(",") if t.strip()]


def cmd_synth(args):
    corpus = synth_fixation_corpus(args.vocab, args.sentences, args.subjects, args.noise, args.seed)
    save_corpus(corpus, args.out)
    print(f"wrote {len(corpus)} sentences to {args.out}")


def cmd_prep(args):
    corpus = load_corpus(args.input)
    prepared = prepare(corpus, args.k, SplitSpec(args.split, args.seed), normalization=args.normalization)
    save_prepared(prepared, args.out)
    print(f"train {len(prepared['train'])} / test {len(prepared['test'])} sentences -> {args.out}")


def cmd_pretrain_fp(args):
    prepared = load_prepared(args.input)
    hyper = FpHyper(epochs=args.epochs, lr=args.lr, batch_size=args.batch_size, emb_dim=args.emb_dim,
                    hidden_dim=args.hidden_dim, fc_dim=args.fc_dim, k=args.k, seed=args.seed)
    model, report = pretrain_fixed_fp(prepared["train"], prepared["test"], hyper)
    model.save(args.out, seed=args.seed)
    summary = {"train_mse": report.train_mse[-1], "test_l1": report.test_l1[-1] if report.test_l1 else None,
               "test_mse": report.test_mse[-1] if report.test_mse else None, "checksum": model.checksum()}
    print(json.dumps(summary, sort_keys=True))


def _load(args) -> RunConfig:
    overrides = _overrides(args.set)
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    return load_config(args.config, overrides)


def cmd_train(args):
    cfg = _load(args)
    metrics = run_experiment(cfg, args.out)
    print(json.dumps({"run_id": metrics.run_id, "dir": str(Path(args.out) / metrics.run_id),
                      **{k: v for k, v in metrics.final.items() if k != "config"}}, sort_keys=True))


def cmd_eval(args):
    cfg = _load(args)
    print(json.dumps(evaluate_checkpoint(cfg, args.checkpoint), sort_keys=True))


def cmd_matrix(args):
    base = _load(args)
    matrix = ExperimentMatrix(base, _csv(args.variants), _csv(args.gate_sources),
                              [int(s) for s in _csv(args.seeds)], args.out, args.jobs)
    results = run_matrix(matrix)
    for run_id, status in results:
        print(f"{run_id}\t{status}")
    return 0 if all(s == "ok" for _, s in results) else 3


def _model_track(run_dir: Path, tokens: list[str]) -> HeatmapTrack:
    cfg = load_config(run_dir / "config.txt")
    if cfg.gate_source != "adaptive":
        raise ValueError("model fixations need a run trained with gate_source=adaptive")
    arrays, header = ad.load_checkpoint(run_dir / "checkpoint.npz")
    vocab = Vocab(header["vocab"])
    spec = ModelSpec.from_config(cfg, len(vocab), header["hidden_dim"])
    model = TaskModel(spec, np.random.default_rng(0), arrays["embedding"].dtype)
    model.restore(arrays)
    with ad.no_grad():
        d_hat, _ = model.fp.predict_ids(vocab.encode(tokens)[:, None])
        d_bar, _ = normalize_durations(d_hat, spec.n_gates)
    return HeatmapTrack("model", [float(x) for x in d_bar.data[:, 0]], "linear")


def cmd_heatmap(args):
    prepared = load_prepared(args.input)
    rows = prepared["train"] + prepared["test"]
    if not 0 <= args.index < len(rows):
        raise IndexError(f"sentence index {args.index} out of range (0..{len(rows) - 1})")
    row = rows[args.index]
    tracks = [HeatmapTrack("human", [float(m) for m in row["mean"]], "rank")]
    if args.fp_checkpoint:
        fp = FixedFpModel.load(args.fp_checkpoint)
        tracks.append(HeatmapTrack("fixed FP", [float(x) for x in predict_fixations_fixed(fp, row["tokens"])]))
    if args.run_dir:
        tracks.append(_model_track(Path(args.run_dir), row["tokens"]))
    doc = HeatmapDoc(row["tokens"], tracks, args.caption or f"{row['corpus_id']} {row['sentence_id']}")
    text = render_heatmap(doc, args.format, args.out)
    if not args.out:
        sys.stdout.write(text)


def cmd_compare(args):
    group_by = _csv(args.group_by) if args.group_by else []
    paths = []
    for p in args.paths:
        p = Path(p)
        paths.extend(sorted(p.glob("*/metrics.jsonl")) if p.is_dir() else [p])
    rows = compare_runs(paths, group_by)
    sys.stdout.write(format_summary(rows, group_by))
    if args.json:
        Path(args.json).write_text(json.dumps([r.as_dict() for r in rows], indent=2, sort_keys=True) + "\n")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="fgrnn", description="Fixation-gated recurrent models.")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic raw fixation corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--vocab", type=int, default=48)
    p.add_argument("--sentences", type=int, default=400)
    p.add_argument("--subjects", type=int, default=3)
    p.add_argument("--noise", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("prep", help="aggregate, discretize, align and split a fixation corpus")
    p.add_argument("--input", required=True)
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--split", type=float, default=0.75)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--normalization", choices=("corpus_mean", "subject_mean"), default="corpus_mean")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_prep)

    p = sub.add_parser("pretrain-fp", help="fit and freeze the fixed fixation predictor")
    p.add_argument("--input", required=True, help="prepared corpus from 'prep'")
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--lr", type=float, default=0.001)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--emb-dim", type=int, default=50)
    p.add_argument("--hidden-dim", type=int, default=100)
    p.add_argument("--fc-dim", type=int, default=100)
    p.add_argument("--k", type=int, default=12)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_pretrain_fp)

    for name, fn, helptext in (("train", cmd_train, "train one configured run"),
                               ("eval", cmd_eval, "score a checkpoint on the test split"),
                               ("matrix", cmd_matrix, "run variants x gate sources x seeds")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--config", required=True)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
        p.set_defaults(fn=fn)
        if name == "train":
            p.add_argument("--out", default="runs")
        elif name == "eval":
            p.add_argument("--checkpoint", required=True)
        else:
            p.add_argument("--variants", required=True)
            p.add_argument("--gate-sources", required=True)
            p.add_argument("--seeds", default="0,1,2")
            p.add_argument("--out", default="runs")
            p.add_argument("--jobs", type=int, default=1)

    p = sub.add_parser("heatmap", help="render human/model fixations over one sentence")
    p.add_argument("--input", required=True, help="prepared corpus")
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--format", choices=("html", "ansi"), default="html")
    p.add_argument("--fp-checkpoint")
    p.add_argument("--run-dir", help="run directory of an adaptive-gate model")
    p.add_argument("--caption")
    p.add_argument("--out")
    p.set_defaults(fn=cmd_heatmap)

    p = sub.add_parser("compare", help="summarise final metrics of finished runs")
    p.add_argument("paths", nargs="+", help="metrics.jsonl files or run roots")
    p.add_argument("--group-by", default="")
    p.add_argument("--json")
    p.set_defaults(fn=cmd_compare)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args) or 0
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return 2
    except TrainingDiverged as err:
        print(f"error: {err}; partial metrics kept", file=sys.stderr)
        return 3
    except (ValueError, OSError, IndexError, KeyError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
