import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from prcl import autodiff as ad
from prcl.autodiff import Tensor, TapeGraph


def half_sq(w, x, t):
    r = ad.sub(ad.mul(w, x), t)
    return ad.mul(Tensor(0.5), ad.mul(r, r))


def away_from_zero(rng, shape, margin=1e-3):
    """Uniform draws rejected near 0 so ReLU kinks stay out of reach of the FD step."""
    x = rng.uniform(-1, 1, shape)
    bad = np.abs(x) < margin
    while bad.any():
        x[bad] = rng.uniform(-1, 1, bad.sum())
        bad = np.abs(x) < margin
    return x


# -- evaluate / backward ----------------------------------------------------

def test_evaluate_half_square():
    g = TapeGraph(half_sq)
    assert g.evaluate({"w": 2.0, "x": 1.0, "t": 0.0}).item() == 2.0


def test_evaluate_identity_scalar():
    g = TapeGraph(lambda a: a)
    assert g.evaluate({"a": 3.5}).item() == 3.5


def test_uniform_softmax_is_ln2():
    g = TapeGraph(lambda z: ad.softmax_cross_entropy(z, [0]))
    assert g.evaluate({"z": [[0.0, 0.0]]}).item() == pytest.approx(math.log(2), abs=1e-15)


def test_backward_half_square():
    g = TapeGraph(half_sq)
    g.evaluate({"w": 2.0, "x": 1.0, "t": 0.0})
    grads = g.backward()
    assert grads["w"] == 2.0
    assert grads["x"] == 4.0


def test_constant_graph_has_zero_gradients():
    g = TapeGraph(lambda a: Tensor(7.0))
    g.evaluate({"a": np.ones(3)})
    assert np.array_equal(g.backward()["a"], np.zeros(3))


def test_backward_before_evaluate():
    with pytest.raises(ad.GraphError):
        TapeGraph(half_sq).backward()


def test_non_scalar_sink():
    with pytest.raises(ad.GraphError):
        TapeGraph(lambda a: a).evaluate({"a": np.ones(2)})


def test_shape_error_names_the_node():
    g = TapeGraph(lambda a, b: ad.total(ad.matmul(a, b)))
    with pytest.raises(ad.ShapeError, match="matmul"):
        g.evaluate({"a": np.ones((2, 3)), "b": np.ones((4, 1))})


def test_nonfinite_input_rejected():
    with pytest.raises(ValueError):
        Tensor([1.0, np.nan])


def test_marked_intermediate_gradient():
    def f(x):
        h = ad.mark("h", ad.mul(x, Tensor(3.0)))
        return ad.total(ad.mul(h, h))

    g = TapeGraph(f)
    g.evaluate({"x": np.array([1.0, 2.0])})
    grads = g.backward()
    assert np.array_equal(grads["h"], [6.0, 12.0])
    assert np.array_equal(grads["x"], [18.0, 36.0])


def three_layer(x, w1, b1, w2, b2, w3, b3):
    h = ad.relu(ad.bias_add(ad.matmul(x, w1), b1))
    h = ad.relu(ad.bias_add(ad.matmul(h, w2), b2))
    return ad.softmax_cross_entropy(ad.bias_add(ad.matmul(h, w3), b3), [0, 1, 2, 1, 0])


def test_three_layer_net_matches_finite_differences():
    rng = np.random.default_rng(3)
    shapes = [(5, 4), (4, 6), (6,), (6, 5), (5,), (5, 3), (3,)]
    arrays = [rng.standard_normal(s) for s in shapes]
    assert ad.gradcheck(three_layer, arrays, seed=1) <= 1e-5


# -- oracles ----------------------------------------------------------------

def test_finite_diff_examples():
    assert np.allclose(ad.finite_diff_grad(lambda x: 0.5 * x @ x, [1.0, 2.0]), [1, 2], atol=1e-9)
    assert np.array_equal(ad.finite_diff_grad(lambda x: 4.0, [1.0, 2.0]), [0, 0])
    assert np.allclose(ad.finite_diff_grad(lambda x: x[0] * x[1], [3.0, 4.0]), [4, 3], atol=1e-9)


def test_finite_diff_rejects_bad_step_and_nonfinite():
    with pytest.raises(ValueError):
        ad.finite_diff_grad(lambda x: 0.0, [1.0], step=0)
    with pytest.raises(FloatingPointError):
        ad.finite_diff_grad(lambda x: math.inf, [1.0])


def half_norm(w):
    return ad.mul(Tensor(0.5), ad.total(ad.mul(w, w)))


def diag_quad(w):
    return ad.mul(Tensor(0.5), ad.total(ad.mul(Tensor([1.0, 2.0, 3.0]), ad.mul(w, w))))


def test_hvp_identity_and_diagonal():
    v = np.array([0.3, -1.2, 2.0])
    assert np.allclose(ad.hvp(half_norm, np.ones(3), v), v, atol=1e-12)
    assert np.allclose(ad.hvp(diag_quad, np.zeros(3), np.ones(3)), [1, 2, 3], atol=1e-12)


def test_hvp_dimension_mismatch():
    with pytest.raises(ValueError):
        ad.hvp(half_norm, np.ones(3), np.ones(2))


def three_layer_like(x, p, y):
    return ad.softmax_cross_entropy(ad.matmul(ad.relu(ad.matmul(Tensor(x), p[0])), p[1]), y)


def test_hvp_columns_match_full_fd_hessian():
    rng = np.random.default_rng(0)
    x = away_from_zero(rng, (6, 3))
    y = [0, 1, 1, 0, 1, 0]
    n = 25

    def loss_of(w):
        return three_layer_like(x, [Tensor(w[:15].reshape(3, 5)), Tensor(w[15:].reshape(5, 2))], y).item()

    def grad_of(w):
        w1, w2 = Tensor(w[:15].reshape(3, 5)), Tensor(w[15:].reshape(5, 2))
        g = TapeGraph(lambda a, b: three_layer_like(x, [a, b], y))
        g.evaluate({"a": w1, "b": w2})
        gr = g.backward()
        return np.concatenate([gr["a"].ravel(), gr["b"].ravel()])

    w = rng.standard_normal(n)
    H = np.column_stack([ad.hvp(None, w, e, grad_fn=grad_of) for e in np.eye(n)])
    # oracle: second differences of the loss itself
    s = 1e-4
    fd = np.empty((n, n))
    for i in range(n):
        for j in range(n):
            ei, ej = np.eye(n)[i] * s, np.eye(n)[j] * s
            fd[i, j] = (loss_of(w + ei + ej) - loss_of(w + ei - ej)
                        - loss_of(w - ei + ej) + loss_of(w - ei - ej)) / (4 * s * s)
    assert np.allclose(H, fd, atol=1e-4)


# -- properties -------------------------------------------------------------

@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.1, 10.0))
def test_backward_linear_in_seed(seed, c):
    rng = np.random.default_rng(seed)
    arrays = [rng.standard_normal(s) for s in [(5, 4), (4, 6), (6,), (6, 5), (5,), (5, 3), (3,)]]
    names = ["x", "w1", "b1", "w2", "b2", "w3", "b3"]
    g = TapeGraph(lambda **kw: three_layer(*[kw[k] for k in names]))
    g.evaluate(dict(zip(names, arrays)))
    base = g.backward()
    scaled = g.backward(seed=c)
    for k in names:
        ref = c * base[k]
        assert np.linalg.norm(scaled[k] - ref) <= 1e-13 * np.linalg.norm(ref)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_hvp_symmetric(seed):
    rng = np.random.default_rng(seed)
    x = away_from_zero(rng, (4, 3))
    y = [0, 1, 0, 1]

    def grad_of(w):
        g = TapeGraph(lambda a, b: three_layer_like(x, [a, b], y))
        g.evaluate({"a": w[:12].reshape(3, 4), "b": w[12:].reshape(4, 2)})
        gr = g.backward()
        return np.concatenate([gr["a"].ravel(), gr["b"].ravel()])

    w = rng.standard_normal(20)
    u, v = rng.standard_normal(20), rng.standard_normal(20)
    assert abs(u @ ad.hvp(None, w, v, grad_fn=grad_of) - v @ ad.hvp(None, w, u, grad_fn=grad_of)) <= 1e-6


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_reevaluation_bit_identical(seed):
    rng = np.random.default_rng(seed)
    arrays = [rng.standard_normal(s) for s in [(5, 4), (4, 6), (6,), (6, 5), (5,), (5, 3), (3,)]]
    names = ["x", "w1", "b1", "w2", "b2", "w3", "b3"]
    g = TapeGraph(lambda **kw: three_layer(*[kw[k] for k in names]))
    a = g.evaluate(dict(zip(names, arrays))).item()
    ga = g.backward()
    b = g.evaluate(dict(zip(names, arrays))).item()
    gb = g.backward()
    assert a == b
    assert all(np.array_equal(ga[k], gb[k]) for k in names)


@pytest.mark.parametrize("stride,pad,k", [(1, 1, 3), (2, 1, 3), (1, 0, 1), (2, 0, 1)])
def test_conv_gradcheck(stride, pad, k):
    rng = np.random.default_rng(stride * 10 + pad + k)
    x = rng.standard_normal((2, 3, 5, 5))
    w = rng.standard_normal((4, 3, k, k))
    assert ad.gradcheck(lambda a, b: ad.conv2d(a, b, stride, pad), [x, w]) <= 1e-5


def test_relu_derivative_at_zero_is_zero():
    g = TapeGraph(lambda x: ad.total(ad.relu(x)))
    g.evaluate({"x": np.array([-1.0, 0.0, 2.0])})
    assert np.array_equal(g.backward()["x"], [0.0, 0.0, 1.0])
