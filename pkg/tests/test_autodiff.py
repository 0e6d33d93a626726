import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from htqe import autodiff as ad


def fd_grad(f, x, eps=1e-6):
    """Central differences of a numpy -> float function."""
    g = np.zeros_like(x)
    flat, gf = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        up = f(x)
        flat[i] = orig - eps
        down = f(x)
        flat[i] = orig
        gf[i] = (up - down) / (2 * eps)
    return g


def rel_err(a, b):
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)))


def test_matmul_identity_and_zero():
    out = ad.matmul(ad.Tensor(np.eye(2)), ad.Tensor([[3.0, 4.0], [5.0, 6.0]]))
    np.testing.assert_array_equal(out.data, [[3, 4], [5, 6]])
    np.testing.assert_array_equal(ad.matmul(ad.Tensor([[1.0, 2.0]]), ad.Tensor([[0.0], [0.0]])).data, [[0]])


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ad.ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        ad.matmul(ad.Tensor(np.ones((2, 3))), ad.Tensor(np.ones((2, 3))))


def test_matmul_gradient_matches_finite_differences():
    rng = np.random.default_rng(0)
    a0, b0 = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
    a, b = ad.parameter(a0.copy()), ad.parameter(b0.copy())
    ad.sum(ad.matmul(a, b)).backward()
    assert rel_err(a.grad, fd_grad(lambda x: (x @ b0).sum(), a0.copy())) < 1e-6
    assert rel_err(b.grad, fd_grad(lambda x: (a0 @ x).sum(), b0.copy())) < 1e-6


def test_elementwise_values():
    np.testing.assert_array_equal(ad.relu(ad.Tensor([-1.0, 0.0, 2.0])).data, [0, 0, 2])
    assert ad.tanh(ad.Tensor([0.0])).data[0] == 0.0
    assert ad.elementwise("sigmoid", ad.Tensor([0.0])).data[0] == 0.5
    with pytest.raises(ValueError):
        ad.elementwise("cosh", ad.Tensor([0.0]))


def test_relu_subgradient_at_zero_is_zero():
    x = ad.parameter([0.0, 1.0, -1.0])
    ad.sum(ad.relu(x)).backward()
    np.testing.assert_array_equal(x.grad, [0, 1, 0])


def test_binary_ops_reject_mismatched_shapes():
    for op in ("add", "mul", "sub"):
        with pytest.raises(ad.ShapeError):
            ad.elementwise(op, ad.Tensor(np.ones(3)), ad.Tensor(np.ones((3, 1))))


def test_scalar_with_tensor_is_allowed():
    x = ad.parameter([1.0, 2.0])
    ad.sum(x * 3.0 + 1.0).backward()
    np.testing.assert_array_equal(x.grad, [3, 3])


@pytest.mark.parametrize("name", ["relu", "tanh", "sigmoid", "square"])
@pytest.mark.parametrize("seed", range(3))
def test_unary_gradients(name, seed):
    rng = np.random.default_rng(seed)
    shape = tuple(rng.integers(1, 5, size=rng.integers(1, 3)))
    x0 = rng.normal(size=shape) * 1.5
    x0[np.abs(x0) < 1e-3] = 0.5  # keep relu off its kink
    w = rng.normal(size=shape)
    fn = getattr(ad, name)
    ref = {"relu": lambda z: np.maximum(z, 0), "tanh": np.tanh,
           "sigmoid": lambda z: 1 / (1 + np.exp(-z)), "square": np.square}[name]
    x = ad.parameter(x0.copy())
    ad.sum(fn(x) * ad.constant(w)).backward()
    assert rel_err(x.grad, fd_grad(lambda z: float((ref(z) * w).sum()), x0.copy())) < 1e-6


@pytest.mark.parametrize("op", ["add", "sub", "mul"])
def test_binary_gradients(op):
    rng = np.random.default_rng(5)
    a0, b0, w = rng.normal(size=(3, 2)), rng.normal(size=(3, 2)), rng.normal(size=(3, 2))
    ref = {"add": np.add, "sub": np.subtract, "mul": np.multiply}[op]
    a, b = ad.parameter(a0.copy()), ad.parameter(b0.copy())
    ad.sum(ad.elementwise(op, a, b) * ad.constant(w)).backward()
    assert rel_err(a.grad, fd_grad(lambda z: float((ref(z, b0) * w).sum()), a0.copy())) < 1e-6
    assert rel_err(b.grad, fd_grad(lambda z: float((ref(a0, z) * w).sum()), b0.copy())) < 1e-6


def test_softmax_examples():
    np.testing.assert_allclose(ad.softmax(ad.Tensor([0.0, 0.0])).data, [0.5, 0.5])
    for c in (-7.0, 0.0, 123.4):
        np.testing.assert_allclose(ad.softmax(ad.Tensor([c] * 4)).data, [0.25] * 4)
    big = ad.softmax(ad.Tensor([1000.0, 0.0])).data
    assert np.all(np.isfinite(big)) and big[0] == pytest.approx(1.0) and big[1] == pytest.approx(0.0)
    with pytest.raises(ad.ShapeError):
        ad.softmax(ad.Tensor(np.zeros(0)))


def test_softmax_mask_gives_exact_zero():
    y = ad.softmax(ad.Tensor([[1.0, 2.0, 3.0]]), mask=[[True, False, True]], axis=1).data
    assert y[0, 1] == 0.0
    assert abs(y.sum() - 1) < 1e-12
    with pytest.raises(ValueError):
        ad.softmax(ad.Tensor([[1.0, 2.0]]), mask=[[False, False]], axis=1)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=12))
def test_softmax_is_simplex_point(values):
    y = ad.softmax(ad.Tensor(values)).data
    assert np.all(y > 0) and np.all(y <= 1)
    assert abs(y.sum() - 1.0) < 1e-9


def test_softmax_gradient():
    rng = np.random.default_rng(2)
    x0, w = rng.normal(size=6), rng.normal(size=6)

    def ref(z):
        e = np.exp(z - z.max())
        return float((e / e.sum() * w).sum())

    x = ad.parameter(x0.copy())
    ad.sum(ad.softmax(x) * ad.constant(w)).backward()
    assert rel_err(x.grad, fd_grad(ref, x0.copy())) < 1e-6


def test_concat():
    out = ad.concat([ad.Tensor([[1.0, 2.0]]), ad.Tensor([[3.0, 4.0]])], axis=1)
    np.testing.assert_array_equal(out.data, [[1, 2, 3, 4]])
    single = ad.Tensor([[1.0, 2.0]])
    assert ad.concat([single], axis=0) is single
    a, b = ad.parameter(np.ones((2, 2))), ad.parameter(np.ones((2, 3)))
    ad.sum(ad.concat([a, b], axis=1)).backward()
    np.testing.assert_array_equal(a.grad, np.ones((2, 2)))
    np.testing.assert_array_equal(b.grad, np.ones((2, 3)))
    with pytest.raises(ad.ShapeError):
        ad.concat([ad.Tensor(np.ones((2, 2))), ad.Tensor(np.ones((3, 3)))], axis=1)


def test_backward_calculus_examples():
    x = ad.parameter(3.0)
    (x * x).backward()
    assert x.grad == 6.0
    y = ad.parameter(1.0)
    (y + y).backward()
    assert y.grad == 2.0


def test_backward_requires_scalar():
    with pytest.raises(ad.ShapeError):
        ad.parameter([1.0, 2.0]).backward()


def test_fan_out_equals_sum_of_consumers():
    rng = np.random.default_rng(4)
    x0 = rng.normal(size=(2, 3))
    w1, w2 = rng.normal(size=(3, 2)), rng.normal(size=(2, 3))

    def grad(build):
        x = ad.parameter(x0.copy())
        build(x).backward()
        return x.grad

    g1 = grad(lambda x: ad.sum(ad.tanh(x @ ad.constant(w1))))
    g2 = grad(lambda x: ad.sum(ad.sigmoid(x) * ad.constant(w2)))
    both = grad(lambda x: ad.sum(ad.tanh(x @ ad.constant(w1))) + ad.sum(ad.sigmoid(x) * ad.constant(w2)))
    np.testing.assert_allclose(both, g1 + g2, rtol=1e-14, atol=1e-15)


def test_replaying_a_graph_is_bitwise_identical():
    rng = np.random.default_rng(6)
    x0 = rng.normal(size=(4, 3))

    def run():
        x = ad.parameter(x0.copy())
        loss = ad.sum(ad.softmax(ad.reshape(ad.tanh(x), (12,))) * ad.constant(np.arange(12.0)))
        loss.backward()
        return loss.data.copy(), x.grad

    (l1, g1), (l2, g2) = run(), run()
    assert l1.tobytes() == l2.tobytes() and g1.tobytes() == g2.tobytes()


def test_shape_ops_gradients():
    rng = np.random.default_rng(7)
    x0 = rng.normal(size=(2, 3, 4))
    w = rng.normal(size=(4, 3, 2))
    x = ad.parameter(x0.copy())
    ad.sum(ad.transpose(x, (2, 1, 0)) * ad.constant(w)).backward()
    assert rel_err(x.grad, fd_grad(lambda z: float((z.transpose(2, 1, 0) * w).sum()), x0.copy())) < 1e-6

    b0 = rng.normal(size=(1, 4))
    wb = rng.normal(size=(3, 4))
    b = ad.parameter(b0.copy())
    ad.sum(ad.expand(b, (3, 4)) * ad.constant(wb)).backward()
    np.testing.assert_allclose(b.grad, wb.sum(axis=0, keepdims=True))
    with pytest.raises(ad.ShapeError):
        ad.expand(ad.Tensor(np.ones((2, 4))), (3, 4))

    table0 = rng.normal(size=(5, 2))
    t = ad.parameter(table0.copy())
    ad.sum(ad.take_rows(t, [[0, 2], [2, 2]])).backward()
    np.testing.assert_array_equal(t.grad[:, 0], [1, 0, 3, 0, 0])


def test_gradient_check_quadratic_is_exact():
    x = ad.parameter([1.5, -2.0, 0.25])
    err = ad.gradient_check(lambda: ad.sum(ad.square(x)) * 0.5 + ad.sum(x * 3.0), [x])
    assert err < 1e-9


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_gradient_check_rejects_non_finite():
    x = ad.parameter([1.0])

    def f():
        return x * (1e308 if x.data[0] != 1.0 else 1.0) * 1e308

    with pytest.raises(FloatingPointError):
        ad.gradient_check(f, [x])
