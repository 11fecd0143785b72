import math

import numpy as np
import pytest

from fgrnn import autodiff as ad
from fgrnn.autodiff import Tensor
from fgrnn.config import RunConfig
from fgrnn.eyetrack import SplitSpec, prepare, synth_fixation_corpus
from fgrnn.fixation import (FixationTarget, FixedFpModel, FpHyper, RunningDurationStats, durations_to_gates,
                            joint_loss, normalize_durations, pad_batch, predict_fixations_fixed,
                            pretrain_fixed_fp, variance_weighted_mse)
from fgrnn.tasks import ModelSpec, TaskModel, lm_forward, token_nll, train_lm

F64 = np.float64


def around(mean, std, n=64, seed=0):
    """A batch with exactly the given population mean and std."""
    z = np.random.default_rng(seed).standard_normal(n)
    z = (z - z.mean()) / z.std()
    return mean + std * z


class TestNormalize:
    def test_design_points(self):
        batch = around(3.0, 2.0)
        probe = np.concatenate([batch, [3.0, 3.0 + 1.96 * 2.0, 3.0 + 2.0]])
        # the three probes shift the stats, so feed the batch stats explicitly
        _, stats = normalize_durations(Tensor(batch), 12)
        d_bar, _ = normalize_durations(Tensor(probe), 12, stats=stats)
        assert abs(stats.mean - 3.0) < 1e-12 and abs(stats.std - 2.0) < 1e-12
        mid, top, one_sd = d_bar.data[-3:]
        assert abs(mid - 6.0) < 1e-9
        assert abs(top - 12.0) < 1e-9
        assert abs(one_sd - 2.96 / 3.92 * 12) < 1e-9 and abs(one_sd - 9.06122) < 1e-5

    def test_in_batch_stats_map_mean_to_midpoint(self):
        d = np.array([1.0, 2.0, 3.0, 4.0, 5.0])
        d_bar, stats = normalize_durations(Tensor(d), 4)
        assert stats.mean == 3.0 and math.isclose(stats.std, math.sqrt(2.0))
        assert abs(d_bar.data[2] - 2.0) < 1e-12

    @pytest.mark.parametrize("shift,scale", [(5.0, 1.0), (-3.0, 0.25), (100.0, 7.5)])
    def test_affine_invariance(self, shift, scale, rng):
        d = rng.standard_normal((7, 3))
        a, _ = normalize_durations(Tensor(d), 6)
        b, _ = normalize_durations(Tensor(d * scale + shift), 6)
        assert np.max(np.abs(a.data - b.data)) < 1e-6

    def test_mask_ignores_padding(self):
        d = np.array([[1.0, 2.0], [3.0, 1e6]])
        mask = np.array([[True, True], [True, False]])
        _, stats = normalize_durations(Tensor(d), 4, mask)
        assert stats.mean == 2.0

    def test_constant_batch_stays_finite(self):
        d_bar, stats = normalize_durations(Tensor(np.full(5, 2.5)), 4)
        assert stats.std == 1e-5 and np.all(d_bar.data == 2.0)

    def test_gradient_through_batch_stats(self):
        r = np.random.default_rng(0)
        d = ad.parameter(r.standard_normal(6))
        w = Tensor(r.standard_normal(6))
        errs = ad.check_gradients(lambda: (normalize_durations(d, 4)[0] * w).sum(), {"d": d})
        assert errs["d"] < 1e-6

    def test_running_stats_average(self):
        from fgrnn.fixation import DurationBatchStats
        run = RunningDurationStats(4, momentum=0.5)
        run.update(DurationBatchStats(0.0, 2.0, 4))
        s = run.update(DurationBatchStats(2.0, 4.0, 4))
        assert (s.mean, s.std) == (1.0, 3.0)


class TestLosses:
    def test_hand_value(self):
        loss = variance_weighted_mse(Tensor(np.array([3.0])), FixationTarget([2.0], [1.0]), 0.1)
        assert abs(float(loss.data) - 1 / 1.1) < 1e-9 and abs(float(loss.data) - 0.909091) < 1e-6

    def test_perfect_prediction_is_zero(self, rng):
        m = rng.standard_normal(5)
        assert float(variance_weighted_mse(Tensor(m), FixationTarget(m, np.ones(5))).data) == 0.0

    def test_infinite_variance_contributes_exactly_zero(self):
        target = FixationTarget([1.0, 2.0], [math.inf, 0.5])
        a = variance_weighted_mse(Tensor(np.array([1e9, 2.0])), target)
        b = ad.parameter(np.array([-7.0, 2.0]))
        loss = variance_weighted_mse(b, target)
        loss.backward()
        assert float(a.data) == 0.0 and float(loss.data) == 0.0 and b.grad[0] == 0.0

    def test_negative_variance_rejected(self):
        with pytest.raises(ValueError):
            FixationTarget([1.0], [-0.5])

    def test_joint_loss(self):
        assert float(joint_loss(Tensor(2.0), Tensor(1.0), 0.3).data) == pytest.approx(2.3, abs=1e-12)
        l1 = Tensor(2.0)
        assert joint_loss(l1, Tensor(5.0), 0.0) is l1
        with pytest.raises(ValueError):
            joint_loss(l1, l1, -1.0)


def _toy(seed):
    r = np.random.default_rng(seed)
    spec = ModelSpec(family="fgp", cell="lstm", hidden_dim=3, emb_dim=4, vocab_size=9, k_components=3,
                     adaptive_fp=True)
    model = TaskModel(spec, r, F64)
    tokens, targets = r.integers(0, 9, (6, 2)), r.integers(0, 9, (6, 2))
    fix_ids = r.integers(0, 9, (5, 3))
    target = FixationTarget(r.standard_normal((5, 3)), r.uniform(0.1, 2, (5, 3)))
    return model, tokens, targets, fix_ids, target


def _host_params(model):
    fp = set(model.fp.parameters())
    return {k: p for k, p in model.parameters().items() if k not in fp and k != "embedding"}


class TestMultiTask:
    @pytest.mark.parametrize("seed", range(5))
    def test_fixation_loss_never_reaches_host_parameters(self, seed):
        model, tokens, targets, fix_ids, target = _toy(seed)
        d_hat, _ = model.fp.predict_ids(fix_ids)
        variance_weighted_mse(d_hat, target).backward()
        for name, p in _host_params(model).items():
            assert p.grad is None or not np.any(p.grad), name
        assert any(np.any(p.grad) for p in model.fp.parameters().values())

    def test_joint_gradient_on_host_equals_task_gradient(self):
        model, tokens, targets, fix_ids, target = _toy(7)
        host = _host_params(model)

        def grads(with_l2):
            for p in model.parameters().values():
                p.grad = None
            l1 = token_nll(lm_forward(model, tokens).log_probs, targets)
            l2 = variance_weighted_mse(model.fp.predict_ids(fix_ids)[0], target) if with_l2 else None
            joint_loss(l1, l2, 0.3).backward()
            return {k: p.grad.copy() for k, p in host.items()}

        only, joint = grads(False), grads(True)
        assert all(only[k].tobytes() == joint[k].tobytes() for k in host)

    def test_task_loss_alone_trains_adaptive_predictor(self):
        model, tokens, targets, _, _ = _toy(3)
        token_nll(lm_forward(model, tokens).log_probs, targets).backward()
        for name, p in model.fp.parameters().items():
            assert p.grad is not None and np.any(p.grad != 0), name

    def test_embedding_is_shared_object(self):
        model, *_ = _toy(0)
        assert model.fp.embedding is model.parameters()["embedding"]
        model.parameters()["embedding"].data[4] = 123.0
        emb = ad.embedding(model.fp.embedding, np.array([4]))
        assert np.all(emb.data == 123.0)


@pytest.fixture(scope="module")
def fitted_fp():
    corpus = synth_fixation_corpus(24, 160, 2, seed=1)
    prepared = prepare(corpus, 6, SplitSpec(0.75, 0))
    hyper = FpHyper(epochs=12, lr=0.005, emb_dim=16, hidden_dim=24, fc_dim=24, k=6, seed=0)
    model, report = pretrain_fixed_fp(prepared["train"], prepared["test"], hyper, F64)
    return model, report, prepared


class TestFixedFp:
    def test_learns_and_correlates(self, fitted_fp):
        model, report, prepared = fitted_fp
        assert report.train_mse[-1] < report.train_mse[0]
        pred = np.concatenate([predict_fixations_fixed(model, r["tokens"]) for r in prepared["train"]])
        tgt = np.concatenate([r["bin"] for r in prepared["train"]]).astype(float)
        assert np.corrcoef(pred, tgt)[0, 1] > 0.7

    def test_output_length_and_unknown_symmetry(self, fitted_fp):
        model, _, _ = fitted_fp
        assert len(predict_fixations_fixed(model, ["w1", "w2", "w3"])) == 3
        a = predict_fixations_fixed(model, ["zzz", "qqq", "xx"])
        b = predict_fixations_fixed(model, ["foo", "bar", "baz"])
        assert a.tobytes() == b.tobytes()

    def test_frozen_and_round_trip(self, fitted_fp, tmp_path):
        model, _, _ = fitted_fp
        assert not any(p.requires_grad for p in model.parameters().values())
        model.save(tmp_path / "fp.npz", seed=0)
        back = FixedFpModel.load(tmp_path / "fp.npz")
        assert back.checksum() == model.checksum()
        assert back.vocab.itos == model.vocab.itos and back.k == model.k

    def test_constant_target_converges(self):
        rows = [(["a", "b", "c"], [3, 3, 3])] * 8
        model, report = pretrain_fixed_fp(rows, rows, FpHyper(epochs=60, emb_dim=4, hidden_dim=4, fc_dim=4,
                                                                k=4, batch_size=4), F64)
        assert report.test_l1[-1] < 1e-3

    def test_empty_corpus_rejected(self):
        with pytest.raises(ValueError):
            pretrain_fixed_fp([], [])

    def test_checksum_unchanged_by_downstream_training(self, fitted_fp, tmp_path):
        model, _, _ = fitted_fp
        path = tmp_path / "fp.npz"
        model.save(path, seed=0)
        before = path.read_bytes()
        cfg = RunConfig(task="lm", variant="fgp_rnn", gate_source="fixed_fp", fp_checkpoint=str(path),
                        k_components=3, hidden_dim=8, emb_dim=8, synth_tokens=1500, synth_vocab=30,
                        epochs=1, batch_size=4, mean_seq_len=20, eval_batch_size=4, precision="float64",
                        min_freq=1)
        metrics = train_lm(cfg)
        assert metrics.final["fixed_fp_unchanged"] is True
        assert FixedFpModel.load(path).checksum() == model.checksum() and path.read_bytes() == before


def test_durations_to_gates_rounds_and_clamps():
    assert durations_to_gates(np.array([-3.0, 1.4, 2.6, 99.0]), 4).tolist() == [1, 1, 3, 4]
    assert durations_to_gates(np.array([1.0, 12.0, 7.0]), 4, source_k=12).tolist() == [1, 4, 3]


def test_pad_batch():
    ids, mask = pad_batch([np.array([1, 2, 3]), np.array([4])])
    assert ids.T.tolist() == [[1, 2, 3], [4, 0, 0]]
    assert mask.T.tolist() == [[True] * 3, [True, False, False]]
