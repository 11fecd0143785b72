import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from fgrnn import autodiff as ad
from fgrnn.autodiff import Tensor


def p64(rng, *shape, low=-1.0, high=1.0):
    return ad.parameter(rng.uniform(low, high, size=shape), dtype=np.float64)


def weighted(t: Tensor, rng) -> Tensor:
    """Generic scalar of ``t``: a random linear functional."""
    return (t * Tensor(rng.standard_normal(t.shape))).sum()


OPERATORS = {
    "add": lambda r: ((a := p64(r, 3, 4)), (b := p64(r, 4)), lambda: a + b),
    "sub": lambda r: ((a := p64(r, 3, 4)), (b := p64(r, 3, 1)), lambda: a - b),
    "mul": lambda r: ((a := p64(r, 2, 3)), (b := p64(r, 2, 3)), lambda: a * b),
    "div": lambda r: ((a := p64(r, 2, 3)), (b := p64(r, 3, low=0.5, high=2.0)), lambda: a / b),
    "neg": lambda r: ((a := p64(r, 4)), None, lambda: -a),
    "tanh": lambda r: ((a := p64(r, 3, 3)), None, lambda: ad.tanh(a)),
    "sigmoid": lambda r: ((a := p64(r, 3, 3, low=-3, high=3)), None, lambda: ad.sigmoid(a)),
    "exp": lambda r: ((a := p64(r, 5)), None, lambda: ad.exp(a)),
    "log": lambda r: ((a := p64(r, 5, low=0.5, high=3)), None, lambda: ad.log(a)),
    "sqrt": lambda r: ((a := p64(r, 5, low=0.5, high=3)), None, lambda: ad.sqrt(a)),
    "softmax": lambda r: ((a := p64(r, 2, 5)), None, lambda: ad.softmax(a)),
    "log_softmax": lambda r: ((a := p64(r, 2, 5)), None, lambda: ad.log_softmax(a)),
    "matmul": lambda r: ((a := p64(r, 3, 4)), (b := p64(r, 4, 2)), lambda: a @ b),
    "matmul_batched": lambda r: ((a := p64(r, 2, 3, 4)), (b := p64(r, 4, 2)), lambda: a @ b),
    "affine": lambda r: ((a := p64(r, 3, 4)), (b := p64(r, 2, 4)), lambda: ad.affine(a, b)),
    "affine_stacked": lambda r: ((a := p64(r, 3, 4)), (b := p64(r, 2, 5, 4)), lambda: ad.affine(a, b)),
    "reshape": lambda r: ((a := p64(r, 2, 6)), None, lambda: ad.reshape(a, (3, 4))),
    "transpose": lambda r: ((a := p64(r, 2, 3, 4)), None, lambda: ad.transpose(a, (2, 0, 1))),
    "getitem_basic": lambda r: ((a := p64(r, 4, 5)), None, lambda: a[1:3, ::2]),
    "getitem_fancy": lambda r: ((a := p64(r, 4, 5)), None, lambda: a[np.array([0, 2, 2]), np.array([1, 1, 4])]),
    "concat": lambda r: ((a := p64(r, 2, 3)), (b := p64(r, 4, 3)), lambda: ad.concat([a, b], 0)),
    "stack": lambda r: ((a := p64(r, 2, 3)), (b := p64(r, 2, 3)), lambda: ad.stack([a, b], 1)),
    "sum_axis": lambda r: ((a := p64(r, 3, 4)), None, lambda: a.sum(axis=1, keepdims=True)),
    "mean": lambda r: ((a := p64(r, 3, 4)), None, lambda: a.mean(axis=0)),
    "where": lambda r: ((a := p64(r, 3, 4)), (b := p64(r, 3, 4)),
                        lambda: ad.where(np.arange(12).reshape(3, 4) % 3 == 0, a, b)),
    "maximum": lambda r: ((a := p64(r, 6, low=0.2, high=1)), None, lambda: ad.maximum(a * Tensor(
        np.array([1.0, -1.0, 1.0, -1.0, 1.0, -1.0])), 0.0)),
    "embedding": lambda r: ((a := p64(r, 6, 3)), None, lambda: ad.embedding(a, np.array([[0, 5], [5, 2]]))),
}


@pytest.mark.parametrize("name", sorted(OPERATORS))
def test_operator_gradients_match_finite_differences(name):
    worst = 0.0
    for seed in range(20):
        r = np.random.default_rng(seed)
        a, b, fn = OPERATORS[name](r)
        probe = np.random.default_rng(seed + 1000)
        out_shape = fn().shape
        w = Tensor(probe.standard_normal(out_shape))
        tensors = {"a": a} if b is None else {"a": a, "b": b}
        errs = ad.check_gradients(lambda: (fn() * w).sum(), tensors)
        worst = max(worst, *errs.values())
    assert worst < 1e-6, f"{name}: relative error {worst:.2e}"


def test_broadcast_add_matches_numpy_and_unbroadcasts_gradient(rng):
    a = ad.parameter(rng.standard_normal((3, 1, 4)))
    b = ad.parameter(rng.standard_normal((5, 1)))
    out = a + b
    assert np.array_equal(out.data, a.data + b.data)
    out.sum().backward()
    assert a.grad.shape == a.shape and np.allclose(a.grad, 5.0)
    assert b.grad.shape == b.shape and np.allclose(b.grad, 12.0)


def test_shape_errors_name_the_operator():
    with pytest.raises(ad.ShapeError, match="matmul"):
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    with pytest.raises(ad.ShapeError, match="add"):
        Tensor(np.ones((2, 3))) + Tensor(np.ones((4,)))
    with pytest.raises(ad.ShapeError, match="affine"):
        ad.affine(Tensor(np.ones(3)), Tensor(np.ones((2, 4))))


def test_affine_worked_example():
    out = ad.affine(Tensor(np.array([1.0, 1.0])), Tensor(np.array([[1.0, 2.0], [3.0, 4.0]])),
                    Tensor(np.array([0.5, -0.5])))
    assert out.data.tolist() == [3.5, 6.5]


def test_sigmoid_is_exactly_half_at_zero_and_finite_at_extremes():
    s = ad.sigmoid(Tensor(np.array([0.0, -1e4, 1e4])))
    assert s.data[0] == 0.5
    assert np.all(np.isfinite(s.data)) and s.data[1] == 0.0 and s.data[2] == 1.0


def test_log_softmax_stable_for_large_logits():
    lp = ad.log_softmax(Tensor(np.array([[1000.0, 0.0, -1000.0]])))
    assert np.all(np.isfinite(lp.data))
    assert math.isclose(np.exp(lp.data).sum(), 1.0, abs_tol=1e-12)


def test_shared_subexpression_gradients_accumulate():
    x = ad.parameter(np.array([2.0]))
    y = x * x + x * x
    y.sum().backward()
    assert x.grad.tolist() == [8.0]


def test_where_copies_values_bit_for_bit(rng):
    a = Tensor(rng.standard_normal((4, 3)))
    b = Tensor(rng.standard_normal((4, 3)))
    mask = rng.random((4, 1)) < 0.5
    out = ad.where(mask, a, b)
    expect = np.where(mask, a.data, b.data)
    assert out.data.tobytes() == expect.tobytes()


def test_no_grad_builds_no_graph():
    x = ad.parameter(np.ones(3))
    with ad.no_grad():
        y = ad.tanh(x) * 2
    assert not y.requires_grad and y._parents == ()


class TestGraphApi:
    def _graph(self):
        w = ad.parameter(np.array([[1.0, 2.0], [3.0, 4.0]]), "w")
        unused = ad.parameter(np.ones(3), "unused")
        return ad.Graph(lambda ins, ps: {"y": ad.affine(ins["x"], ps["w"])}, {"w": w, "unused": unused})

    def test_backward_before_forward_raises(self):
        g = self._graph()
        with pytest.raises(RuntimeError):
            ad.backward_grads(g, Tensor(np.array(1.0)))

    def test_non_scalar_loss_raises(self):
        g = self._graph()
        out = ad.forward_eval(g, {"x": np.array([1.0, 1.0])})
        with pytest.raises(ad.ShapeError):
            ad.backward_grads(g, out["y"])

    def test_unused_parameter_gets_zero_gradient(self):
        g = self._graph()
        out = ad.forward_eval(g, {"x": np.array([1.0, -1.0])})
        grads = ad.backward_grads(g, out["y"].sum())
        assert grads["w"].tolist() == [[1.0, -1.0], [1.0, -1.0]]
        assert grads["unused"].tolist() == [0.0, 0.0, 0.0]

    def test_foreign_loss_rejected(self):
        g = self._graph()
        ad.forward_eval(g, {"x": np.array([1.0, 1.0])})
        other = (ad.parameter(np.ones(2)) * 2).sum()
        with pytest.raises(RuntimeError):
            ad.backward_grads(g, other)


class TestAdam:
    def test_single_step_matches_hand_computation(self):
        p = ad.parameter(np.array([1.0, -2.0]))
        state = ad.AdamState(lr=0.1)
        ad.adam_step(state, {"p": p}, {"p": np.array([0.5, -0.25])})
        # first bias-corrected step moves each coordinate by lr * sign(g)
        assert np.allclose(p.data, [0.9, -1.9], atol=1e-7)

    def test_non_finite_gradient_leaves_parameters_untouched(self):
        p = ad.parameter(np.array([1.0, 2.0]))
        q = ad.parameter(np.array([3.0]))
        state = ad.AdamState()
        with pytest.raises(ad.NonFiniteGradient) as info:
            ad.adam_step(state, {"p": p, "q": q}, {"p": np.array([0.1, 0.1]), "q": np.array([np.nan])})
        assert info.value.name == "q"
        assert p.data.tolist() == [1.0, 2.0] and state.step == 0

    def test_clip_grad_norm(self):
        grads = {"a": np.array([3.0, 0.0]), "b": np.array([4.0])}
        norm = ad.clip_grad_norm(grads, 1.0)
        assert norm == 5.0
        total = math.sqrt(sum(float((g ** 2).sum()) for g in grads.values()))
        assert math.isclose(total, 1.0, rel_tol=1e-9)


def test_checkpoint_round_trip_is_bitwise(tmp_path, rng):
    params = {"w": ad.parameter(rng.standard_normal((3, 4)).astype(np.float32)),
              "b": ad.parameter(rng.standard_normal(4))}
    path = tmp_path / "ck.npz"
    ad.save_checkpoint(path, params, {"seed": 7})
    arrays, header = ad.load_checkpoint(path)
    assert header["seed"] == 7 and sorted(header["precision"]) == ["float32", "float64"]
    for k, p in params.items():
        assert arrays[k].dtype == p.data.dtype
        assert arrays[k].tobytes() == p.data.tobytes()


def test_rng_streams_are_independent_and_reproducible():
    a, b = ad.RngStreams(3), ad.RngStreams(3)
    a["init"].random(100)  # draws on one purpose leave the others alone
    assert a["dropout"].random(5).tolist() == b["dropout"].random(5).tolist()
    assert ad.RngStreams(3).fresh("x").random(3).tolist() == ad.RngStreams(3).fresh("x").random(3).tolist()
    assert ad.RngStreams(3)["x"].random() != ad.RngStreams(4)["x"].random()


@given(rate=st.floats(0.0, 0.9), seed=st.integers(0, 10_000))
def test_dropout_mask_is_inverted_and_binary(rate, seed):
    m = ad.sample_dropout_mask((200,), rate, np.random.default_rng(seed), dtype=np.float64)
    vals = set(np.unique(m).tolist())
    assert vals <= {0.0, 1.0 / (1 - rate)}


def test_dropout_rate_one_rejected():
    with pytest.raises(ValueError):
        ad.sample_dropout_mask((3,), 1.0, np.random.default_rng(0))


def test_relative_error_zero_when_both_vanish():
    assert ad.relative_error(np.zeros(3), np.zeros(3)) == 0.0
    assert ad.relative_error(np.array([1.0, 0.0]), np.array([1.0, 0.0])) == 0.0
