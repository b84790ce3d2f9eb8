import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sentvec import autodiff as ad
from sentvec.autodiff import NonFiniteError, ShapeError, Tape, Tensor, backward, grad_check

from gradcases import OP_NAMES, check_op, p64


# ---------------------------------------------------------------- forward


def test_softmax_symmetric():
    y = ad.forward_op("softmax", Tensor(np.zeros(2)), axis=-1)
    np.testing.assert_array_equal(y.data, [0.5, 0.5])


def test_cross_entropy_uniform_is_log_v():
    logits = Tensor(np.zeros((3, 4)))
    out = ad.forward_op("cross_entropy", logits, np.array([0, 2, 3]))
    assert abs(float(out.data) - math.log(4)) < 1e-12
    assert abs(float(out.data) - 1.386294) < 1e-6


def test_matmul_identity():
    a = np.random.default_rng(0).standard_normal((5, 3))
    out = ad.forward_op("matmul", Tensor(a), Tensor(np.eye(3)))
    np.testing.assert_array_equal(out.data, a)


def test_softmax_rows_sum_to_one():
    x = np.random.default_rng(1).standard_normal((6, 7, 5)).astype(np.float32) * 10
    for axis in (0, 1, -1):
        y = ad.softmax(Tensor(x), axis=axis)
        assert np.all(np.abs(y.data.sum(axis=axis) - 1) < 1e-6)


def test_layernorm_moments():
    x = np.random.default_rng(2).standard_normal((8, 16)) * 3 + 5
    y = ad.layernorm(Tensor(x)).data
    assert np.all(np.abs(y.mean(axis=-1)) < 1e-6)
    assert np.all(np.abs(y.var(axis=-1) - 1) < 1e-5)


def test_unknown_axis_rejected():
    with pytest.raises(ShapeError):
        ad.softmax(Tensor(np.zeros((2, 3))), axis=2)
    with pytest.raises(ShapeError):
        ad.layernorm(Tensor(np.zeros((2, 3))), axis=-3)


def test_shape_mismatch_rejected():
    with pytest.raises(ShapeError):
        ad.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))))
    with pytest.raises(ShapeError):
        ad.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4,))))
    with pytest.raises(ShapeError):
        ad.cross_entropy(Tensor(np.zeros((2, 3))), np.array([0, 1, 2]))


def test_nonfinite_output_is_error():
    with pytest.raises(NonFiniteError), np.errstate(over="ignore"):
        ad.mul(Tensor(np.array([1e300])), Tensor(np.array([1e300])))


def test_cross_entropy_all_ignored_is_error():
    with pytest.raises(ShapeError):
        ad.cross_entropy(Tensor(np.zeros((2, 3))), np.array([0, 0]), ignore_id=0)


def test_cross_entropy_ignores_padding_rows():
    rng = np.random.default_rng(3)
    logits = rng.standard_normal((4, 5))
    full = ad.cross_entropy(Tensor(logits[:2]), np.array([1, 3])).data
    padded = ad.cross_entropy(Tensor(logits), np.array([1, 3, 0, 0]), ignore_id=0).data
    assert abs(float(full) - float(padded)) < 1e-12


def test_unknown_kind():
    with pytest.raises(ValueError):
        ad.forward_op("conv", Tensor(np.zeros(1)))


# ---------------------------------------------------------------- backward


def test_sum_gradient_is_ones():
    x = Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
    with Tape() as tape:
        loss = ad.sum(x)
    g = backward(tape, loss, {"x": x})
    np.testing.assert_array_equal(g["x"], [1, 1, 1])


def test_zero_times_f_gives_zero_grad():
    x = Tensor(np.array([0.5, 2.0]), requires_grad=True)
    with Tape() as tape:
        loss = ad.scale(ad.sum(ad.gelu(x)), 0.0)
    g = backward(tape, loss, {"x": x})
    np.testing.assert_array_equal(g["x"], [0, 0])


def test_unreachable_param_gets_zero_grad():
    x = Tensor(np.ones(3), requires_grad=True)
    y = Tensor(np.ones((2, 2)), requires_grad=True)
    with Tape() as tape:
        loss = ad.sum(ad.mul(x, x))
    g = backward(tape, loss, {"x": x, "y": y})
    np.testing.assert_array_equal(g["y"], np.zeros((2, 2)))


def test_backward_rejects_non_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        y = ad.mul(x, x)
    with pytest.raises(ShapeError):
        backward(tape, y)


def test_tape_visits_each_node_once():
    calls = []
    x = Tensor(np.array([2.0]), requires_grad=True)

    def tracked(t, tag):
        def fn(g):
            calls.append(tag)
            return (g,)

        return ad.record_op(tag, t.data.copy(), (t,), fn)

    with Tape() as tape:
        a = tracked(x, "a")
        b = tracked(a, "b")
        loss = ad.sum(ad.add(b, a))
    backward(tape, loss, {"x": x})
    assert calls == ["b", "a"]
    assert len(tape) == 4


def test_mlp_cross_entropy_matches_finite_differences():
    rng = np.random.default_rng(4)
    params = {
        "w1": p64(rng, 5, 7),
        "b1": p64(rng, 7),
        "w2": p64(rng, 7, 4),
        "b2": p64(rng, 4),
    }
    x = rng.standard_normal((6, 5))
    y = rng.integers(4, size=6)

    def f(p):
        h = ad.gelu(ad.add(ad.matmul(Tensor(x), p["w1"]), p["b1"]))
        return ad.cross_entropy(ad.add(ad.matmul(h, p["w2"]), p["b2"]), y)

    rep = grad_check(f, params, step=1e-4, tol=1e-4)
    assert rep.passed, rep
    assert rep.max_rel_error < 1e-4


def test_grad_check_squared_norm_exact():
    rng = np.random.default_rng(5)
    params = {"p": p64(rng, 4, 3)}
    rep = grad_check(lambda p: ad.sum(ad.mul(p["p"], p["p"])), params, step=1e-4)
    assert rep.max_rel_error < 1e-6


def test_grad_check_softmax_cross_entropy():
    rng = np.random.default_rng(6)
    params = {"z": p64(rng, 5, 9)}
    t = rng.integers(9, size=5)
    rep = grad_check(lambda p: ad.cross_entropy(p["z"], t), params, tol=1e-4)
    assert rep.passed


def test_grad_check_reports_corrupted_gradient():
    rng = np.random.default_rng(7)
    params = {"good": p64(rng, 3), "bad": p64(rng, 3)}

    def doubled_square(t):
        def fn(g):
            return (2.0 * (2.0 * t.data) * g,)  # off by a factor of two

        return ad.record_op("bad_square", t.data * t.data, (t,), fn)

    def f(p):
        return ad.add(ad.sum(ad.mul(p["good"], p["good"])), ad.sum(doubled_square(p["bad"])))

    rep = grad_check(f, params)
    assert not rep.passed
    assert rep.failing_param == "bad"
    assert rep.max_rel_error > 0.3


def test_grad_check_rejects_bad_step_and_non_scalar():
    params = {"p": Tensor(np.ones(2), requires_grad=True)}
    with pytest.raises(ValueError):
        grad_check(lambda p: ad.sum(p["p"]), params, step=0.0)
    with pytest.raises(ShapeError):
        grad_check(lambda p: ad.mul(p["p"], p["p"]), params)


def test_embedding_gather_unused_rows_have_zero_grad():
    rng = np.random.default_rng(8)
    table = p64(rng, 10, 4)
    ids = np.array([[1, 3], [3, 7]])
    with Tape() as tape:
        loss = ad.sum(ad.mul(ad.embedding_gather(table, ids), Tensor(rng.standard_normal((2, 2, 4)))))
    g = backward(tape, loss, {"t": table})["t"]
    unused = [i for i in range(10) if i not in (1, 3, 7)]
    assert np.all(g[unused] == 0.0)
    assert np.all(g[[1, 3, 7]] != 0.0)


@pytest.mark.parametrize("name", OP_NAMES)
def test_every_op_passes_grad_check_on_ten_draws(name):
    for seed in range(10):
        rep = check_op(name, seed)
        assert rep.passed, (name, seed, rep)


# ---------------------------------------------------------------- determinism / ordering


def test_lr_sum_trailing_zeros_bitwise():
    rng = np.random.default_rng(9)
    x = rng.standard_normal((5, 7)).astype(np.float32)
    padded = np.concatenate([x, np.zeros((5, 4), np.float32)], axis=1)
    assert np.array_equal(ad.lr_sum(x, 1), ad.lr_sum(padded, 1))


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 6), st.integers(1, 9), st.integers(0, 2**31 - 1))
def test_softmax_invariant_under_shift(rows, cols, seed):
    x = np.random.default_rng(seed).standard_normal((rows, cols))
    a = ad.softmax(Tensor(x)).data
    b = ad.softmax(Tensor(x + 3.0)).data
    assert np.allclose(a, b, atol=1e-12)
    assert np.allclose(a.sum(axis=-1), 1.0, atol=1e-12)


def test_no_record_context_records_nothing():
    x = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        with ad.no_record():
            ad.sum(ad.mul(x, x))
        assert len(tape) == 0
