import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from compgen import autodiff as ad
from compgen.autodiff import AdamState, ShapeError, Tape, Tensor, adam_step, grad_check, jacobian_fd


def random_mlp_loss(rng, widths, batch):
    """Loss closure over a flat parameter vector for an ELU MLP with MSE."""
    shapes = []
    for a, b in zip(widths[:-1], widths[1:]):
        shapes += [(a, b), (b,)]
    sizes = [int(np.prod(s)) for s in shapes]
    x = rng.normal(size=(batch, widths[0]))
    y = rng.normal(size=(batch, widths[-1]))

    def f(theta):
        parts, off = [], 0
        for s, n in zip(shapes, sizes):
            parts.append(ad.reshape(theta[off:off + n], s))
            off += n
        h = x
        for i in range(0, len(parts), 2):
            h = ad.matmul(h, parts[i]) + parts[i + 1]
            if i < len(parts) - 2:
                h = ad.elu(h)
        return ad.sq_error(h, y) * (1.0 / batch)

    theta = np.concatenate([rng.uniform(-1, 1, n) / np.sqrt(s[0]) for s, n in zip(shapes, sizes)])
    return f, theta


def test_elu_values():
    out = ad.elu(np.array([0.0, -50.0, 2.0])).data
    assert out[0] == 0.0
    assert out[1] == pytest.approx(-1.0, abs=1e-15)
    assert out[2] == 2.0


def test_softmax_symmetric():
    np.testing.assert_array_equal(ad.softmax(np.zeros(2)).data, [0.5, 0.5])


def test_matmul_identity():
    a = np.array([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(ad.matmul(a, np.eye(2)).data, a)


def test_shape_errors_name_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        ad.matmul(np.zeros((2, 3)), np.zeros((2, 3)))
    with pytest.raises(ShapeError, match=r"\(3,\).*\(4,\)"):
        ad.add(np.zeros(3), np.zeros(4))


def test_square_grad():
    tape = Tape()
    x = tape.param(3.0)
    g = tape.backward(x * x)
    assert g[x] == 6.0


def test_sum_of_softmax_has_zero_grad():
    tape = Tape()
    v = tape.param(np.array([0.3, -1.2, 2.0]))
    g = tape.backward(ad.sum_(ad.softmax(v)))
    np.testing.assert_allclose(g[v], 0.0, atol=1e-15)


def test_backward_rejects_non_scalar():
    tape = Tape()
    v = tape.param(np.ones(3))
    with pytest.raises(ValueError, match="scalar"):
        tape.backward(v * 2.0)


def test_backward_is_repeatable_and_shapes_match():
    rng = np.random.default_rng(1)
    tape = Tape()
    w = tape.param(rng.normal(size=(4, 3)))
    b = tape.param(rng.normal(size=3))
    loss = ad.mean(ad.sigmoid(ad.linear(rng.normal(size=(5, 4)), w, b)))
    g1 = tape.backward(loss)
    g2 = tape.backward(loss)
    for t in (w, b):
        assert g1[t].tobytes() == g2[t].tobytes()
    for node, g in zip(tape.nodes, tape.grads):
        assert g is not None and g.shape == node.shape


def test_tape_is_topological():
    tape = Tape()
    x = tape.param(np.ones((2, 2)))
    y = ad.elu(x @ x) + x
    ad.sum_(y)
    for node in tape.nodes:
        for p in node.parents:
            if p.node_id is not None:
                assert p.node_id < node.node_id


def test_constants_are_not_recorded():
    tape = Tape()
    x = tape.param(np.ones(3))
    c = ad.elu(Tensor(np.ones(3)))
    assert c.node_id is None
    y = x + c
    assert y.node_id == 1 and len(tape) == 2


@pytest.mark.parametrize("op", ["add", "sub", "mul", "div", "elu", "sigmoid", "softmax0", "softmax1",
                                "sum", "mean", "sq_error", "matmul", "linear", "getitem", "fancy",
                                "stack", "zscore", "square"])
def test_primitive_matches_finite_differences(op):
    rng = np.random.default_rng(abs(hash(op)) % 2**32)
    worst = 0.0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        other = rng.normal(size=(3, 4))
        w = rng.normal(size=(4, 2))
        fns = {
            "add": lambda t: ad.sum_(ad.square(t + other)),
            "sub": lambda t: ad.sum_(ad.square(other - t)),
            "mul": lambda t: ad.sum_(t * other),
            "div": lambda t: ad.sum_(ad.div(other, t * t + 1.0)),
            "elu": lambda t: ad.sum_(ad.elu(t) * other),
            "sigmoid": lambda t: ad.sum_(ad.sigmoid(t) * other),
            "softmax0": lambda t: ad.sum_(ad.softmax(t, axis=0) * other),
            "softmax1": lambda t: ad.sum_(ad.softmax(t, axis=1) * other),
            "sum": lambda t: ad.sum_(ad.square(ad.sum_(t, axis=0))),
            "mean": lambda t: ad.sum_(ad.square(ad.mean(t, axis=1))),
            "sq_error": lambda t: ad.sq_error(t, other),
            "matmul": lambda t: ad.sum_(ad.square(t @ w)),
            "linear": lambda t: ad.sum_(ad.square(ad.linear(t, w, other[0, :2]))),
            "getitem": lambda t: ad.sum_(ad.square(t[1:, ::2])),
            "fancy": lambda t: ad.sum_(ad.square(t[np.array([[0], [2]]), np.array([[1, 1, 3]])]) * 1.5),
            "stack": lambda t: ad.sum_(ad.stack([t, t * other], axis=1) * rng_const),
            "zscore": lambda t: ad.sum_(ad.zscore(t, axis=0) * other),
            "square": lambda t: ad.sum_(ad.square(t) * other),
        }
        rng_const = rng.normal(size=(3, 2, 4))
        theta = rng.normal(size=(3, 4))
        worst = max(worst, grad_check(fns[op], theta, h=1e-5))
    assert worst < 1e-6, worst


def test_zscore_with_floor_active():
    # finite differences would leave the floored region, so compare to the closed form
    x = np.tile(np.array([[1.0, 2.0, 3.0]]), (4, 1))
    w = np.arange(12.0).reshape(4, 3)
    tape = Tape()
    t = tape.param(x)
    g = tape.backward(ad.sum_(ad.zscore(t, axis=0, floor=1e-6) * w))[t]
    np.testing.assert_allclose(g, (w - w.mean(axis=0)) / 1e-6)


def test_mlp_gradients_match_finite_differences():
    rng = np.random.default_rng(7)
    f, theta = random_mlp_loss(rng, [3, 5, 2], 4)
    assert grad_check(f, theta, h=1e-5) < 1e-6


def test_grad_check_quadratic_and_constant():
    assert grad_check(lambda t: ad.sum_(t * t), np.array([1.0, 2.0])) < 1e-9
    assert grad_check(lambda t: ad.sum_(t * 0.0) + 3.0, np.array([1.0, 2.0])) == 0.0


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 5)),
              elements=st.floats(-700, 700, allow_nan=False)),
       st.integers(0, 1))
def test_softmax_normalizes(x, axis):
    s = ad.softmax(x, axis=axis).data
    assert np.all(np.isfinite(s))
    np.testing.assert_allclose(s.sum(axis=axis), 1.0, atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, 6, elements=st.floats(-1e3, 1e3, allow_nan=False)))
def test_forward_ops_stay_finite(x):
    for out in (ad.elu(x), ad.sigmoid(x), ad.softmax(x), ad.zscore(x, axis=0)):
        assert np.all(np.isfinite(out.data))


def test_adam_first_step():
    theta = np.array([0.0])
    state = AdamState.zeros(1, lr=1e-3)
    adam_step(state, theta, np.array([1.0]))
    assert state.step == 1
    assert theta[0] == pytest.approx(-1e-3 / (1 + 1e-8), rel=1e-12)


def test_adam_two_steps_monotone():
    theta = np.array([0.0])
    state = AdamState.zeros(1)
    adam_step(state, theta, np.array([1.0]))
    first = theta[0]
    adam_step(state, theta, np.array([1.0]))
    # m_hat = v_hat = 1 at every step under constant g = 1
    assert theta[0] < first < 0
    assert theta[0] == pytest.approx(-2e-3 / (1 + 1e-8), rel=1e-12)


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, 5, elements=st.floats(-10, 10)), st.integers(1, 20))
def test_adam_zero_gradient_is_identity(theta, steps):
    before = theta.copy()
    state = AdamState.zeros(5)
    for _ in range(steps):
        adam_step(state, theta, np.zeros(5))
        assert np.all(state.v >= 0)
    assert state.step == steps
    np.testing.assert_array_equal(theta, before)


def test_adam_rejects_nan():
    with pytest.raises(FloatingPointError, match="index 1"):
        adam_step(AdamState.zeros(2), np.zeros(2), np.array([0.0, np.nan]))


def test_jacobian_linear_is_exact():
    A = np.array([[1.0, -2.0, 0.5], [3.0, 0.0, 4.0]])
    np.testing.assert_allclose(jacobian_fd(lambda z: A @ z, np.array([0.1, 0.2, 0.3])), A, atol=1e-10)


def test_jacobian_product():
    J = jacobian_fd(lambda z: np.array([z[0] * z[1], z[0]]), np.array([2.0, 3.0]), h=1e-5)
    np.testing.assert_allclose(J, [[3.0, 2.0], [1.0, 0.0]], atol=1e-9)


def test_jacobian_reports_non_finite_coordinate():
    def f(z):
        with np.errstate(invalid="ignore"):
            return np.sqrt(z[1:])
    with pytest.raises(FloatingPointError, match="coordinate 1"):
        jacobian_fd(f, np.array([1.0, 0.0]))


def test_batched_jacobian_agrees():
    rng = np.random.default_rng(0)
    W = rng.normal(size=(3, 5))

    def f(z):
        return np.tanh(z @ W)

    Z = rng.normal(size=(4, 3))
    Jb = ad.jacobian_fd_batch(f, Z)
    for i in range(4):
        np.testing.assert_allclose(Jb[i], jacobian_fd(f, Z[i]), atol=1e-12)
