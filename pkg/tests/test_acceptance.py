"""Acceptance suite: one test per criterion, each printing a single PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -v`` or ``python tests/test_acceptance.py``.
The desk-scale language-model experiment (criterion 7) dominates the runtime.
"""

import math
import statistics
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from fgrnn import autodiff as ad
from fgrnn.autodiff import Tensor
from fgrnn.cells import LstmCell, RnnCell, unroll
from fgrnn.config import load_config
from fgrnn.eyetrack import (FixationRecord, SplitSpec, align_tokens, prepare, quantile_bins, split_train_test,
                            synth_fixation_corpus)
from fgrnn.fixation import (FixationTarget, FpHyper, normalize_durations, pretrain_fixed_fp,
                            variance_weighted_mse)
from fgrnn.gated import Fgl, FgpLstm, FgpRnn, GateSchedule, StackedFgp, gate_coefficients
from fgrnn.reporting import HeatmapDoc, HeatmapTrack, render_heatmap, run_experiment
from fgrnn.tasks import ModelSpec, TaskModel, count_parameters, fit_hidden_dim, train

from helpers import VARIANTS, adaptive_path_grad_errors, unroll_grad_errors
from test_autodiff import OPERATORS

ROOT = Path(__file__).resolve().parents[1]
F64 = np.float64


# 1 -------------------------------------------------------------------------

def test_criterion_01_gradient_suite(report):
    started = time.perf_counter()
    op_worst = 0.0
    for name, build in OPERATORS.items():
        for seed in range(5):
            a, b, fn = build(np.random.default_rng(seed))
            w = Tensor(np.random.default_rng(seed + 99).standard_normal(fn().shape))
            tensors = {"a": a} if b is None else {"a": a, "b": b}
            op_worst = max(op_worst, *ad.check_gradients(lambda: (fn() * w).sum(), tensors).values())
    model_worst, worst_name = 0.0, ""
    for name in VARIANTS:
        for seed in range(2):
            err = max(unroll_grad_errors(name, seed).values())
            if err > model_worst:
                model_worst, worst_name = err, name
    for cell, family in (("lstm", "fgp"), ("rnn", "fgp"), ("lstm", "fgl")):
        for lam in (0.3, 0.0):
            err = max(adaptive_path_grad_errors(5, lam, cell, family).values())
            if err > model_worst:
                model_worst, worst_name = err, f"adaptive {family}_{cell} lambda={lam}"
    elapsed = time.perf_counter() - started
    ok = op_worst < 1e-6 and model_worst < 1e-4 and elapsed < 120
    report(1, "gradient suite", ok, f"operators {op_worst:.1e} < 1e-6; models {model_worst:.1e} < 1e-4 "
                                    f"(worst {worst_name}); {elapsed:.0f}s < 120s")
    assert ok


# 2 -------------------------------------------------------------------------

def _bitwise(xs, ys):
    return all(x.data.tobytes() == y.data.tobytes() for x, y in zip(xs, ys))


def test_criterion_02_degeneration(report):
    failures = 0
    ones = GateSchedule("hard", np.ones((20, 1), dtype=np.int64), 1)
    for seed in range(100):
        r = np.random.default_rng(seed)
        xs = [Tensor(r.standard_normal((1, 3))) for _ in range(20)]
        rnn, lstm = RnnCell(3, 4, r, F64), LstmCell(3, 4, r, F64)
        fgp_rnn_out, _ = FgpRnn.from_cells([rnn]).run(xs, None, ones)
        failures += not _bitwise(fgp_rnn_out, unroll(rnn, xs).h)
        ref = unroll(lstm, xs)
        fgp_lstm = FgpLstm.from_cells([lstm])
        bank = fgp_lstm.zero_state(1)
        for t, x in enumerate(xs):
            bank = fgp_lstm.step(x, bank, ones.at(t))
            failures += bank.h.data[0].tobytes() != ref.h[t].data.tobytes()
            failures += bank.c.data[0].tobytes() != ref.c[t].data.tobytes()
        for family in ("rnn", "lstm"):
            fgl = Fgl(3, 4, 1, family, r, F64)
            out, _ = fgl.run(xs, None, ones)
            failures += not _bitwise(out, unroll(fgl.cells[0], xs).h)
    report(2, "degeneration equivalence", failures == 0,
           f"FGP/FGL RNN+LSTM at one component vs vanilla, 100 x 20 steps, {failures} mismatches")
    assert failures == 0


# 3 -------------------------------------------------------------------------

def _carried(model, state):
    """Per-gate-index arrays that must pass through unchanged above the gate."""
    if isinstance(model, StackedFgp):
        return [[(b.c if b.c is not None else b.h).data[k] for b in state] for k in range(model.k)]
    if isinstance(model, FgpLstm):
        return [[state.c.data[k]] for k in range(model.k)]
    if isinstance(model, FgpRnn):
        return [[state.h.data[k]] for k in range(model.k)]
    return [[state.h[l].data] + ([state.c[l].data] if state.c is not None else []) for l in range(model.n_layers)]


def test_criterion_03_pass_through(report):
    r = np.random.default_rng(0)
    models = [FgpRnn(3, 4, 4, r, F64), FgpLstm(3, 4, 4, r, F64), StackedFgp(3, 4, 3, 2, "rnn", 5, r, F64),
              StackedFgp(3, 4, 3, 2, "lstm", None, r, F64), Fgl(3, 4, 4, "rnn", r, F64), Fgl(3, 4, 4, "lstm", r, F64)]
    checked = violations = 0
    for i in range(1000):
        model = models[i % len(models)]
        n = model.n_gates
        steps, batch = 6, 3
        sched = GateSchedule("hard", r.integers(1, n + 1, size=(steps, batch)), n)
        state = model.zero_state(batch)
        for t in range(steps):
            x = Tensor(r.standard_normal((batch, 3)))
            new = model.step(x, state, sched.at(t))
            before, after = _carried(model, state), _carried(model, new)
            for b in range(batch):
                for k in range(sched.values[t, b], n):
                    for old, cur in zip(before[k], after[k]):
                        checked += 1
                        violations += old[b].tobytes() != cur[b].tobytes()
            state = new
    ok = violations == 0 and checked > 0
    report(3, "pass-through exactness", ok, f"1000 schedules over 6 hard variants, {checked} carried vectors, "
                                           f"{violations} changed")
    assert ok


# 4 -------------------------------------------------------------------------

def test_criterion_04_hard_soft_consistency(report):
    worst = 0.0
    for seed in range(20):
        r = np.random.default_rng(seed)
        k = 4
        model = FgpRnn(3, 5, k, r, F64)
        xs = [Tensor(r.standard_normal((2, 3))) for _ in range(20)]
        hard = r.integers(1, k + 1, size=(20, 2))
        soft = hard - 0.5
        a, _ = model.run(xs, None, GateSchedule("hard", np.ceil(soft).astype(np.int64), k))
        b, _ = model.run(xs, None, GateSchedule("soft", soft, k, s=50.0))
        worst = max(worst, max(float(np.max(np.abs(x.data - y.data))) for x, y in zip(a, b)))
    ok = worst <= 1e-3
    report(4, "hard/soft consistency", ok, f"s=50, half-integer durations, max abs diff {worst:.1e} <= 1e-3")
    assert ok


# 5 -------------------------------------------------------------------------

def test_criterion_05_scalar_oracles(report):
    z = np.random.default_rng(0).standard_normal(101)
    batch = 2.0 + 0.5 * (z - z.mean()) / z.std()
    _, stats = normalize_durations(Tensor(batch), 12)
    probes, _ = normalize_durations(Tensor(np.array([2.0, 2.0 + 1.96 * 0.5, 2.5])), 12, stats=stats)
    mid, top, one = probes.data
    norm_err = max(abs(mid - 6.0), abs(top - 12.0), abs(one - 9.061224489795919))

    table = {0.5: [0.11920, 0.88080, 0.99753, 0.99995], 2.5: [4.54e-5, 0.00247, 0.11920, 0.88080]}
    gate_err = max(float(np.max(np.abs(gate_coefficients(d, 4, 4.0).data - np.array(v)))) for d, v in table.items())

    hand = float(variance_weighted_mse(Tensor(np.array([3.0])), FixationTarget([2.0], [1.0]), 0.1).data)
    inf_term = float(variance_weighted_mse(Tensor(np.array([123.0])), FixationTarget([2.0], [math.inf])).data)
    ok = norm_err < 1e-9 and gate_err < 1e-5 and abs(hand - 1 / 1.1) < 1e-9 and inf_term == 0.0
    report(5, "scalar oracles", ok, f"normalize err {norm_err:.1e}, gate table err {gate_err:.1e}, "
                                    f"weighted mse {hand:.6f}, infinite-variance term {inf_term}")
    assert ok


# 6 -------------------------------------------------------------------------

def test_criterion_06_preprocessing(report):
    r = np.random.default_rng(0)
    balance = order = True
    for _ in range(500):
        n, k = int(r.integers(2, 300)), int(r.integers(2, 13))
        if n < k:
            continue
        vals = r.permutation(r.standard_normal(n) * 100 + np.arange(n) * 1e-3)
        bins = quantile_bins(vals, k)
        counts = np.bincount(bins, minlength=k + 1)[1:]
        balance &= counts.max() - counts.min() <= 1
        order &= bool(np.all(np.diff(bins[np.argsort(vals)]) >= 0))
    hello = [(t.token, t.mean, t.var) for t in align_tokens(FixationRecord("hello!", 1.2, 0.0))]
    punct = hello == [("hello", 1.2, 0.0), ("!", 1.0, math.inf)]
    items = list(range(101))
    tr, te = split_train_test(items, SplitSpec(0.75, 9))
    split = (sorted(tr + te) == items and not set(tr) & set(te) and len(tr) == 76
             and (tr, te) == split_train_test(items, SplitSpec(0.75, 9)))
    ok = balance and order and punct and split
    report(6, "preprocessing properties", ok,
           f"bin balance {balance}, order {order}, punctuation rule {punct}, deterministic 75/25 partition {split}")
    assert ok


# 7 -------------------------------------------------------------------------

DESK_SEEDS = (0, 1, 2)


def _desk_runs():
    base = load_config(ROOT / "configs" / "desk_lm.txt")
    adaptive = base.replace(gate_source="adaptive")
    vocab = base.synth_vocab + 1
    budget = count_parameters(ModelSpec.from_config(adaptive, vocab))
    vanilla = base.replace(variant="vanilla_lstm", gate_source="none", hidden_dim=0, param_budget=budget)
    arms = {"full": base, "random": base.replace(gate_source="random"), "adaptive": adaptive, "vanilla": vanilla}
    out = {name: [] for name in arms}
    params = {}
    for seed in DESK_SEEDS:
        for name, cfg in arms.items():
            m = train(cfg.replace(seed=seed))
            out[name].append(m.final["test_perplexity"])
            params[name] = m.param_count
    return out, params


def test_criterion_07_desk_language_model(report):
    started = time.perf_counter()
    ppl, params = _desk_runs()
    elapsed = time.perf_counter() - started
    uniform = 500.0
    med = {k: statistics.median(v) for k, v in ppl.items()}
    beats = all(p * 5 <= uniform for v in ppl.values() for p in v)
    full_wins = sum(f < r for f, r in zip(ppl["full"], ppl["random"]))
    order = med["full"] <= med["random"] and full_wins >= 2
    adaptive = med["adaptive"] <= 1.10 * med["vanilla"]
    ok = beats and order and adaptive and elapsed < 15 * 60
    detail = ("median test ppl " + ", ".join(f"{k} {v:.2f}" for k, v in med.items())
              + f"; full beats random in {full_wins}/3 seeds; adaptive/vanilla {med['adaptive'] / med['vanilla']:.3f}"
              + f" (params {params['adaptive']} vs {params['vanilla']}); {elapsed / 60:.1f} min")
    report(7, "desk-scale LM experiment", ok, detail)
    assert beats, ppl
    assert order, ppl
    assert adaptive, ppl
    assert elapsed < 15 * 60


# 8 -------------------------------------------------------------------------

def test_criterion_08_multitask_mechanics(report):
    leaks = 0
    for seed in range(10):
        r = np.random.default_rng(seed)
        spec = ModelSpec(family="fgp", cell="lstm", hidden_dim=4, emb_dim=5, vocab_size=13, k_components=3,
                         adaptive_fp=True)
        model = TaskModel(spec, r, F64)
        ids = r.integers(0, 13, size=(6, 3))
        target = FixationTarget(r.standard_normal((6, 3)), r.uniform(0.1, 1, (6, 3)))
        (variance_weighted_mse(model.fp.predict_ids(ids)[0], target) * 0.3).backward()
        fp_names = set(model.fp.parameters())
        for name, p in model.parameters().items():
            if name not in fp_names and name != "embedding":
                leaks += p.grad is not None and bool(np.any(p.grad))

    from fgrnn.tasks import lm_forward, token_nll

    def task_grads(norm_stats):
        r = np.random.default_rng(42)
        model = TaskModel(ModelSpec(family="fgp", cell="lstm", hidden_dim=4, emb_dim=5, vocab_size=13,
                                    k_components=3, adaptive_fp=True, norm_stats=norm_stats), r, F64)
        if norm_stats == "running":
            lm_forward(model, r.integers(0, 13, (7, 2)), training=True, rng=r)
        token_nll(lm_forward(model, r.integers(0, 13, (7, 2))).log_probs, r.integers(0, 13, (7, 2))).backward()
        return {n: (0.0 if p.grad is None else float(np.abs(p.grad).max())) for n, p in model.fp.parameters().items()}

    batch, running = task_grads("batch"), task_grads("running")
    # per-batch standardization cancels any constant offset of the raw durations,
    # so the output bias alone has no influence on the gates in that mode
    dead = [n for n, g in batch.items() if g == 0.0 and n != "fp.head_b"]
    bias_ok = batch["fp.head_b"] <= 1e-12 and running["fp.head_b"] > 0
    dead_running = [n for n, g in running.items() if g == 0.0]
    ok = leaks == 0 and not dead and not dead_running and bias_ok
    report(8, "multi-task mechanics", ok,
           f"host params touched by fixation loss: {leaks}; at lambda=0 predictor params without task gradient: "
           f"{len(dead)} (batch stats, output bias excluded as shift-invariant, |g|={batch['fp.head_b']:.0e}), "
           f"{len(dead_running)} (running stats)")
    assert ok


# 9 -------------------------------------------------------------------------

def test_criterion_09_fixed_fp_learnability(report):
    corpus = synth_fixation_corpus(48, 300, 3, noise=0.0, seed=0)
    prepared = prepare(corpus, 12, SplitSpec(0.75, 0))
    _, rep = pretrain_fixed_fp(prepared["train"], prepared["test"], FpHyper(epochs=20, k=12, seed=0))
    l1 = rep.test_l1[-1]
    ok = l1 < 0.2
    report(9, "fixed FP learnability", ok, f"held-out L1 {l1:.3f} < 0.2 after 20 epochs (MSE {rep.test_mse[-1]:.3f})")
    assert ok


# 10 ------------------------------------------------------------------------

AUDIT_SPECS = [
    dict(family="vanilla", cell="rnn"), dict(family="vanilla", cell="lstm", n_layers=2),
    dict(family="fgp", cell="rnn"), dict(family="fgp", cell="lstm"),
    dict(family="fgp", cell="rnn", n_layers=2), dict(family="fgp", cell="lstm", n_layers=3, proj_dim=40),
    dict(family="fgl", cell="rnn", n_layers=3), dict(family="fgl", cell="lstm", n_layers=4),
    dict(family="fgp", cell="lstm", adaptive_fp=True), dict(family="fgl", cell="rnn", n_layers=3, adaptive_fp=True),
    dict(family="fgp", cell="rnn", task="sentiment"), dict(family="fgl", cell="lstm", n_layers=2, task="sentiment"),
]


def test_criterion_10_determinism_and_tooling(report, tmp_path):
    from test_reporting import TINY, TestHeatmap
    from fgrnn.config import parse_config
    cfg = parse_config(TINY)
    a = run_experiment(cfg, tmp_path / "a")
    run_experiment(cfg, tmp_path / "b")
    same = ((tmp_path / "a" / a.run_id / "metrics.jsonl").read_bytes()
            == (tmp_path / "b" / a.run_id / "metrics.jsonl").read_bytes())

    golden = True
    for fmt in ("html", "ansi"):
        out = tmp_path / f"h.{fmt}"
        render_heatmap(TestHeatmap().doc(), fmt, out)
        golden &= out.read_bytes() == (ROOT / "tests" / "golden" / f"heatmap.{fmt}").read_bytes()

    mismatches = []
    for kw in AUDIT_SPECS:
        spec = ModelSpec(hidden_dim=1, emb_dim=64, vocab_size=5000, k_components=4, **kw)
        spec = spec.with_hidden(fit_hidden_dim(spec, 1_000_000))
        model = TaskModel(spec, np.random.default_rng(0), np.float32)
        path = tmp_path / "audit.npz"
        ad.save_checkpoint(path, model.parameters())
        arrays, _ = ad.load_checkpoint(path)
        enumerated = sum(v.size for k, v in arrays.items() if k != "embedding")
        if enumerated != count_parameters(spec) or count_parameters(spec) > 1_000_000:
            mismatches.append((kw, enumerated, count_parameters(spec)))
    ok = same and golden and not mismatches
    report(10, "determinism and tooling", ok, f"identical metrics {same}, golden heatmaps {golden}, "
                                              f"parameter audit {len(AUDIT_SPECS) - len(mismatches)}/"
                                              f"{len(AUDIT_SPECS)} variants at 1M budget")
    assert ok, mismatches


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v", "-p", "no:cacheprovider"]))
