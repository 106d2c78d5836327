import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from session_coder import numerics as nx
from session_coder.numerics import (
    DegenerateInputError,
    GradTape,
    Parameter,
    ShapeError,
    TapeError,
    finite_diff_check,
    glorot_init,
)


def _param(rng, *shape, name="p"):
    return Parameter(rng.normal(size=shape), name)


def test_elementwise_and_matmul_gradients(rng):
    a = _param(rng, 3, 4, name="a")
    b = _param(rng, 4, 2, name="b")
    c = _param(rng, 2, name="c")  # broadcast over rows

    def f():
        h = nx.tanh(nx.matmul(a, b) + c)
        return nx.reduce_sum(nx.square(h) * nx.sigmoid(h) - h)

    assert finite_diff_check(f, [a, b, c]) < 1e-7


def test_batched_matmul_broadcast_gradient(rng):
    x = _param(rng, 2, 3, 4, name="x")
    w = _param(rng, 4, 5, name="w")
    assert finite_diff_check(lambda: nx.reduce_sum(nx.relu(nx.matmul(x, w) + 0.1)), [x, w]) < 1e-7


def test_concat_stack_index_transpose_gradients(rng):
    a = _param(rng, 2, 3, name="a")
    b = _param(rng, 2, 2, name="b")

    def f():
        c = nx.concat([a, b], axis=-1)
        s = nx.stack([c, c * 2.0], axis=0)
        t = nx.transpose(s, (0, 2, 1))
        return nx.reduce_sum(nx.square(nx.index(t, (slice(None), slice(1, 4)))))

    assert finite_diff_check(f, [a, b]) < 1e-7


def test_log_and_clip_gradients(rng):
    p = Parameter(rng.uniform(0.2, 0.8, size=5), "p")
    assert finite_diff_check(lambda: nx.reduce_sum(nx.log(nx.clip(p, 1e-12, 1.0))), [p]) < 1e-7


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 5\)"):
        nx.matmul(np.zeros((2, 3)), np.zeros((4, 5)))


def test_backward_twice_raises(rng):
    p = _param(rng, 3)
    with GradTape() as tape:
        loss = nx.reduce_sum(p * p)
    tape.backward(loss)
    with pytest.raises(TapeError):
        tape.backward(loss)


def test_non_scalar_loss_raises(rng):
    p = _param(rng, 3)
    with GradTape() as tape:
        y = p * 2.0
    with pytest.raises(TapeError):
        tape.backward(y)


def test_parameter_grads_accumulate_across_tapes(rng):
    p = Parameter(np.array([1.0, 2.0]), "p")
    for _ in range(2):
        with GradTape() as tape:
            loss = nx.reduce_sum(p * 3.0)
        tape.backward(loss)
    np.testing.assert_array_equal(p.grad, [6.0, 6.0])


def test_sigmoid_is_finite_at_extremes():
    y = nx.sigmoid(np.array([-1000.0, 0.0, 1000.0])).data
    np.testing.assert_array_equal(y, [0.0, 0.5, 1.0])


def test_masked_softmax_zeros_and_normalization():
    scores = np.array([[1.0, 2.0, 3.0, 50.0]])
    mask = np.array([[1, 1, 1, 0]])
    y = nx.masked_softmax(scores, mask).data
    e = np.exp([1.0, 2.0, 3.0])
    np.testing.assert_allclose(y[0, :3], e / e.sum(), rtol=0, atol=1e-15)
    assert y[0, 3] == 0.0


def test_masked_softmax_ignores_masked_scores():
    mask = np.array([1, 1, 0, 0])
    a = nx.masked_softmax(np.array([0.3, -0.2, 7.0, -9.0]), mask).data
    b = nx.masked_softmax(np.array([0.3, -0.2, -1e6, 1e6]), mask).data
    np.testing.assert_array_equal(a, b)


def test_masked_softmax_gradient(rng):
    s = _param(rng, 2, 5)
    mask = np.array([[1, 1, 1, 0, 0], [1, 1, 1, 1, 1]])
    w = rng.normal(size=(2, 5))
    assert finite_diff_check(lambda: nx.reduce_sum(nx.masked_softmax(s, mask) * w), [s]) < 1e-7


def test_masked_softmax_all_masked_row_raises():
    with pytest.raises(DegenerateInputError):
        nx.masked_softmax(np.zeros((2, 3)), np.array([[1, 0, 0], [0, 0, 0]]))


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 12), st.integers(0, 2**31 - 1))
def test_masked_softmax_sums_to_one(T, seed):
    r = np.random.default_rng(seed)
    n_valid = int(r.integers(1, T + 1))
    mask = np.zeros(T)
    mask[:n_valid] = 1
    y = nx.masked_softmax(r.normal(scale=30.0, size=T), mask).data
    assert abs(y.sum() - 1.0) <= 1e-12
    assert np.all(y[n_valid:] == 0.0)


def test_glorot_init_bounds_and_determinism():
    w = glorot_init((64, 10), 3)
    limit = np.sqrt(6.0 / 74.0)
    assert w.shape == (64, 10)
    assert np.abs(w).max() <= limit
    np.testing.assert_array_equal(w, glorot_init((64, 10), 3))
    assert not np.array_equal(w, glorot_init((64, 10), 4))


def test_finite_diff_check_detects_wrong_gradient(rng):
    p = _param(rng, 3)

    def broken():
        # forward is x^2 but the recorded gradient is that of x
        return nx._emit(np.array((p.data ** 2).sum()), (p,), lambda g: (g * np.ones(3),))

    assert finite_diff_check(broken, [p]) > 1e-2
