import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from digrec import autodiff as ad
from digrec.autodiff import Param, Tape, Tensor
from digrec.gradcheck import finite_diff_grad, rel_error, scalar_fd
from digrec.layers import BatchNorm, Linear, batchnorm_forward, linear_forward
from digrec.optim import AdamState, adam_step


def tape_grad(build, *params):
    for p in params:
        p.zero_grad()
    with Tape() as tape:
        loss = build()
    tape.backward(loss)
    return [p.grad.copy() for p in params]


def check_grad(build, *params, tol=1e-4):
    grads = tape_grad(build, *params)
    for p, g in zip(params, grads):
        fd = finite_diff_grad(lambda: float(build().value), p, h=1e-4)
        assert rel_error(g.ravel(), fd) < tol, p.name


# ------------------------------------------------------------- linear / bce

def test_linear_identity():
    out = linear_forward(Tensor([[1.0, 2.0]]), Tensor(np.eye(2)), Tensor([0.0, 0.0]))
    np.testing.assert_array_equal(out.value, [[1.0, 2.0]])


def test_linear_hand_value():
    out = linear_forward(Tensor([[1.0, 1.0]]), Tensor([[2.0], [3.0]]), Tensor([1.0]))
    assert out.value.tolist() == [[6.0]]


def test_linear_zero_input_gives_bias():
    W = np.random.default_rng(0).normal(size=(2, 1))
    out = linear_forward(Tensor([[0.0, 0.0]]), Tensor(W), Tensor([5.0]))
    assert out.value.tolist() == [[5.0]]


def test_linear_shape_mismatch():
    with pytest.raises(ValueError):
        linear_forward(Tensor(np.ones((1, 3))), Tensor(np.ones((2, 2))), Tensor(np.zeros(2)))


@pytest.mark.parametrize("z,y,expected", [([0.0], [1], math.log(2)), ([0.0, 0.0], [0, 1], math.log(2)),
                                          ([2.0], [1], math.log1p(math.exp(-2.0)))])
def test_bce_values(z, y, expected):
    assert float(ad.bce_with_logits(Tensor(z), y).value) == pytest.approx(expected, abs=1e-12)


def test_bce_hand_value_for_logit_two():
    assert float(ad.bce_with_logits(Tensor([2.0]), [1]).value) == pytest.approx(0.1269, abs=1e-4)


def test_bce_rejects_bad_input():
    with pytest.raises(ValueError):
        ad.bce_with_logits(Tensor(np.zeros(0)), [])
    with pytest.raises(ValueError):
        ad.bce_with_logits(Tensor([0.0]), [0.5])


def test_bce_stable_for_huge_logits():
    v = float(ad.bce_with_logits(Tensor([800.0, -800.0]), [1, 0]).value)
    assert v == 0.0
    v = float(ad.bce_with_logits(Tensor([800.0]), [0]).value)
    assert v == pytest.approx(800.0)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, 5, elements=st.floats(-50, 50)), arrays(np.int64, 5, elements=st.integers(0, 1)))
def test_bce_non_negative(z, y):
    assert float(ad.bce_with_logits(Tensor(z), y).value) >= 0.0


# -------------------------------------------------------------- batchnorm

def test_batchnorm_two_rows():
    bn = BatchNorm(1)
    out = batchnorm_forward(Tensor([[1.0], [-1.0]]), bn, train=True)
    np.testing.assert_allclose(out.value, [[1.0], [-1.0]], atol=1e-5)


def test_batchnorm_infer_identity_stats():
    bn = BatchNorm(3)
    x = np.random.default_rng(0).normal(size=(4, 3))
    out = batchnorm_forward(Tensor(x), bn, train=False)
    np.testing.assert_allclose(out.value, x / np.sqrt(1 + 1e-5))


def test_batchnorm_constant_column():
    bn = BatchNorm(2)
    bn.beta.value[...] = [0.5, -0.5]
    out = batchnorm_forward(Tensor(np.full((5, 2), 3.0)), bn, train=True)
    np.testing.assert_allclose(out.value, np.tile([0.5, -0.5], (5, 1)))


def test_batchnorm_needs_two_rows():
    with pytest.raises(ValueError):
        batchnorm_forward(Tensor(np.ones((1, 2))), BatchNorm(2), train=True)


def test_batchnorm_running_stats_momentum():
    bn = BatchNorm(1, momentum=0.9)
    batchnorm_forward(Tensor([[1.0], [3.0]]), bn, train=True)
    assert bn.running_mean[0] == pytest.approx(0.2)
    assert bn.running_var[0] == pytest.approx(0.9 + 0.1 * 2.0)


def test_batchnorm_infer_ignores_batch():
    bn = BatchNorm(2)
    bn.running_mean[...] = [1.0, 2.0]
    bn.running_var[...] = [4.0, 9.0]
    a = batchnorm_forward(Tensor([[1.0, 2.0], [5.0, 5.0]]), bn, train=False).value
    b = batchnorm_forward(Tensor([[1.0, 2.0], [-7.0, 0.0]]), bn, train=False).value
    np.testing.assert_array_equal(a[0], b[0])


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (8, 3), elements=st.floats(-100, 100)))
def test_batchnorm_standardizes(x):
    if (x.std(axis=0) < 1e-2).any():
        return
    out = ad.batchnorm_train(Tensor(x), Tensor(np.ones(3)), Tensor(np.zeros(3)), 1e-5)[0].value
    assert np.abs(out.mean(axis=0)).max() < 1e-6
    assert np.abs(out.var(axis=0) - 1.0).max() < 1e-5


# ------------------------------------------------------------------ adam

def test_adam_zero_grad_no_move():
    p = Param(np.array([1.0, -2.0]), "p")
    adam_step({"p": p}, AdamState())
    np.testing.assert_array_equal(p.value, [1.0, -2.0])


def test_adam_first_step_size():
    p = Param(np.array([0.5]), "p")
    p.grad[...] = 1.0
    adam_step({"p": p}, AdamState(lr=1e-3))
    assert p.value[0] == pytest.approx(0.5 - 1e-3, abs=1e-9)


def test_adam_repeated_steps_monotone():
    p = Param(np.array([0.0, 0.0]), "p")
    st_ = AdamState(lr=0.01)
    trail = [p.value.copy()]
    for _ in range(2):
        p.grad[...] = [1.0, -3.0]
        adam_step({"p": p}, st_)
        trail.append(p.value.copy())
    assert trail[0][0] > trail[1][0] > trail[2][0]
    assert trail[0][1] < trail[1][1] < trail[2][1]
    assert st_.step == 2


def test_adam_aborts_on_nan_before_moving():
    a, b = Param(np.array([1.0]), "a"), Param(np.array([2.0]), "b")
    a.grad[...] = 1.0
    b.grad[...] = np.nan
    with pytest.raises(FloatingPointError, match="b"):
        adam_step({"a": a, "b": b}, AdamState())
    assert a.value[0] == 1.0 and b.value[0] == 2.0


def test_adam_skips_frozen():
    p = Param(np.array([1.0]), "p", trainable=False)
    p.grad[...] = 5.0
    adam_step({"p": p}, AdamState())
    assert p.value[0] == 1.0


# ------------------------------------------------------- finite differences

def test_fd_square():
    assert scalar_fd(lambda p: p * p, 3.0) == pytest.approx(6.0, abs=1e-6)


def test_fd_sigmoid():
    assert scalar_fd(lambda p: float(ad.sigmoid(p)), 0.0) == pytest.approx(0.25, abs=1e-8)


def test_fd_rejects_bad_step():
    with pytest.raises(ValueError):
        finite_diff_grad(lambda: 0.0, Param(np.zeros(1), "p"), h=0.0)


# ----------------------------------------------------- per-op gradient checks

def _p(rng, shape, name):
    return Param(rng.normal(size=shape), name)


def test_grad_elementwise_and_matmul(rng):
    a, b, w = _p(rng, (4, 3), "a"), _p(rng, (1, 3), "b"), _p(rng, (3, 2), "w")
    check_grad(lambda: ad.sum_all(ad.mul(ad.relu(a + b) - ad.scale(a, 0.3), a) @ w), a, b, w)


def test_grad_concat_take_bag(rng):
    t = _p(rng, (6, 3), "t")
    u = _p(rng, (4, 2), "u")
    idx = np.array([[0, 1, 1], [5, 2, 0], [3, 3, 3], [4, 0, 1]])
    mask = np.array([[1, 1, 0], [1, 0, 0], [1, 1, 1], [0, 0, 0]], dtype=float)

    def f():
        x = ad.concat([ad.bag_mean(t, idx, mask), ad.take_rows(t, idx[:, 0]), u])
        return ad.sum_all(ad.mul(x, x))

    check_grad(f, t, u)


def test_grad_norms_and_means(rng):
    a = _p(rng, (5, 4), "a")
    check_grad(lambda: ad.mean_all(ad.row_sq_norm(a)), a)


def test_grad_batchnorm_train(rng):
    x, g, b = _p(rng, (6, 3), "x"), _p(rng, (3,), "g"), _p(rng, (3,), "b")
    c = rng.normal(size=(6, 3))
    check_grad(lambda: ad.sum_all(ad.mul(ad.batchnorm_train(x, g, b, 1e-5)[0], Tensor(c))), x, g, b)


def test_grad_batchnorm_infer(rng):
    x, g, b = _p(rng, (4, 3), "x"), _p(rng, (3,), "g"), _p(rng, (3,), "b")
    c = rng.normal(size=(4, 3))
    mean, var = rng.normal(size=3), rng.uniform(0.5, 2, size=3)
    check_grad(lambda: ad.sum_all(ad.mul(ad.batchnorm_infer(x, g, b, mean, var, 1e-5), Tensor(c))),
               x, g, b)


def test_grad_bce(rng):
    z = _p(rng, (7, 1), "z")
    y = rng.integers(0, 2, size=7)
    check_grad(lambda: ad.bce_with_logits(z, y), z)


def test_grad_linear_layer(rng):
    lin = Linear(3, 2, rng)
    x = _p(rng, (4, 3), "x")
    check_grad(lambda: ad.sum_all(ad.relu(lin(x))), x, lin.W, lin.b)


# ---------------------------------------------------------- stop gradient

def test_stop_gradient_blocks_flow(rng):
    a = _p(rng, (3, 2), "a")
    b = _p(rng, (3, 2), "b")
    ga, gb = tape_grad(lambda: ad.sum_all(ad.mul(ad.stop_gradient(a), b)), a, b)
    assert np.all(ga == 0.0)
    np.testing.assert_array_equal(gb, a.value)


def test_frozen_param_grad_is_exact_zero(rng):
    a = Param(rng.normal(size=(3, 2)), "a", trainable=False)
    b = _p(rng, (3, 2), "b")
    tape_grad(lambda: ad.sum_all(ad.mul(a, b)), a, b)
    assert np.array_equal(a.grad, np.zeros_like(a.grad))


def test_one_contribution_per_use(rng):
    a = _p(rng, (2, 2), "a")
    (g,) = tape_grad(lambda: ad.sum_all(a + a), a)
    np.testing.assert_array_equal(g, np.full((2, 2), 2.0))


def test_backward_requires_scalar(rng):
    a = _p(rng, (2, 2), "a")
    with Tape() as tape:
        out = a + a
    with pytest.raises(ValueError):
        tape.backward(out)


def test_non_finite_output_raises():
    with pytest.raises(ad.NonFiniteError):
        ad.scale(Tensor([1.0]), float("inf"))


def test_no_tape_records_nothing(rng):
    a = _p(rng, (2, 2), "a")
    out = ad.sum_all(a)
    assert not out.requires_grad
