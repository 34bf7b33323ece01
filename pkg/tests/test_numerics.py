import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from kgat.numerics import (
    Adam,
    Affine,
    EmptySupportError,
    NumericError,
    Parameter,
    Tensor,
    concat,
    cosine,
    cosine_matrix,
    embedding,
    exp,
    gradcheck,
    log_clamped,
    lr_schedule,
    masked_softmax,
    no_grad,
    relu,
    softmax,
)

finite = st.floats(-3, 3, allow_nan=False, width=64)


def numeric_grad(f, x, eps=1e-6):
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        old = x[i]
        x[i] = old + eps
        hi = f()
        x[i] = old - eps
        lo = f()
        x[i] = old
        g[i] = (hi - lo) / (2 * eps)
    return g


def check_op(build, *shapes, seed=0, tol=1e-6):
    rng = np.random.default_rng(seed)
    params = [Parameter(rng.normal(size=s), f"x{i}") for i, s in enumerate(shapes)]
    w = rng.normal(size=build(*params).shape)
    loss = (build(*params) * w).sum()
    loss.backward()
    for p in params:
        num = numeric_grad(lambda: float((build(*params).value * w).sum()), p.value)
        np.testing.assert_allclose(p.grad, num, atol=tol, rtol=tol)


@pytest.mark.parametrize("build, shapes", [
    (lambda a, b: a + b, [(3, 4), (4,)]),
    (lambda a, b: a - b, [(2, 3), (2, 3)]),
    (lambda a, b: a * b, [(3, 1), (1, 4)]),
    (lambda a, b: a / (b * b + 1.0), [(3,), (3,)]),
    (lambda a, b: a @ b, [(2, 3, 4), (4, 5)]),
    (lambda a: a.sum(axis=1, keepdims=True), [(3, 4)]),
    (lambda a: a.reshape(6, 2).swapaxes(0, 1), [(3, 4)]),
    (lambda a: a[1:, ::2], [(3, 4)]),
    (lambda a: a.expand_dims(1).broadcast_to((3, 2, 4)), [(3, 4)]),
    (lambda a, b: concat([a, b], axis=-1), [(2, 3), (2, 2)]),
    (lambda a: exp(a), [(5,)]),
    (lambda a: relu(a + 0.05), [(7,)]),
    (lambda a: cosine(a, a), [(4, 3)]),
    (lambda a, b: cosine(a, b), [(2, 3, 5), (2, 4, 5)]),
])
def test_op_gradients(build, shapes):
    check_op(build, *shapes)


def test_masked_softmax_gradient_and_zeros():
    mask = np.array([[True, False, True], [True, True, True]])
    check_op(lambda a: masked_softmax(a, mask, axis=-1), (2, 3))
    out = masked_softmax(Tensor(np.ones((2, 3))), mask).value
    assert out[0, 1] == 0.0
    np.testing.assert_allclose(out.sum(-1), 1.0)


def test_masked_softmax_empty_support():
    with pytest.raises(EmptySupportError, match="empty support"):
        masked_softmax(Tensor(np.zeros((2, 3))), np.array([[True, True, True], [False] * 3]))


@given(arrays(np.float64, st.integers(1, 8), elements=st.floats(-50, 50)))
def test_softmax_is_a_distribution(v):
    p = softmax(v)
    assert abs(p.sum() - 1) < 1e-12
    assert np.all(p >= 0)


def test_softmax_rejects_non_finite():
    with pytest.raises(NumericError):
        softmax([0.0, np.inf])


def test_cosine_zero_row_is_zero():
    M = cosine_matrix(np.zeros((1, 3)), np.ones((2, 3)))
    assert np.all(M == 0.0)


@given(arrays(np.float64, (3, 4), elements=finite), arrays(np.float64, (2, 4), elements=finite))
def test_cosine_bounded(a, b):
    M = cosine_matrix(a, b)
    assert np.all(np.abs(M) <= 1.0)


def test_embedding_gradient_accumulates_repeats():
    table = Parameter(np.arange(6.0).reshape(3, 2), "t")
    embedding(table, np.array([2, 0, 2])).sum().backward()
    np.testing.assert_array_equal(table.grad, [[1, 1], [0, 0], [2, 2]])


def test_embedding_out_of_range():
    with pytest.raises(IndexError):
        embedding(Parameter(np.zeros((3, 2)), "t"), np.array([3]))


def test_log_clamped_floor():
    x = Parameter(np.array([1e-20, 2.0]), "x")
    y = log_clamped(x, 1e-12)
    assert y.value[0] == pytest.approx(math.log(1e-12))
    y.sum().backward()
    assert x.grad[0] == 0.0 and x.grad[1] == pytest.approx(0.5)


def test_no_grad_builds_no_graph():
    p = Parameter(np.ones(2), "p")
    with no_grad():
        y = (p * 2.0).sum()
    assert y._parents == ()


def test_affine_shapes():
    layer = Affine.init("a", 3, 2, np.random.default_rng(0))
    assert layer(Tensor(np.ones((5, 3)))).shape == (5, 2)


def test_adam_first_step_moves_by_lr():
    p = Parameter(np.array([1.0, -1.0]), "p")
    p.grad = np.array([0.5, -2.0])
    Adam().step([p], 0.1)
    # bias-corrected first step is lr * sign(g) up to eps
    np.testing.assert_allclose(p.value, [0.9, -0.9], atol=1e-6)


def test_adam_rejects_non_finite_gradient():
    p = Parameter(np.zeros(2), "weights")
    p.grad = np.array([0.0, np.nan])
    with pytest.raises(NumericError, match="weights"):
        Adam().step([p], 0.1)


def test_lr_schedule_shape():
    total, peak = 100, 1.0
    lrs = [lr_schedule(s, total, peak, 0.1) for s in range(total + 1)]
    assert lrs[0] == 0.0
    assert lrs[10] == peak
    assert lrs[5] == pytest.approx(0.5)
    assert lrs[100] == 0.0
    assert lrs[55] == pytest.approx(0.5)
    assert all(a <= b for a, b in zip(lrs[:11], lrs[1:11]))
    assert all(a >= b for a, b in zip(lrs[10:], lrs[11:]))


def test_gradcheck_passes_on_correct_gradient():
    p = Parameter(np.random.default_rng(0).normal(size=(3, 2)), "p")
    res = gradcheck(lambda: (cosine(p, p) * 3.0).sum() + (p * p).sum(), [p])
    assert res[0].passed and res[0].max_rel_error < 1e-6


def test_gradcheck_catches_a_wrong_gradient():
    p = Parameter(np.array([0.3, -0.7]), "p")

    def bad_square():
        return Tensor(p.value ** 2, (p,), lambda g: (g * p.value,))  # should be 2 g x

    res = gradcheck(lambda: bad_square().sum(), [p])
    assert not res[0].passed
    assert res[0].max_rel_error == pytest.approx(0.5)
