import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from fwens import tensor as T
from fwens.errors import ConfigError, DomainError, GraphError, NumericError, ShapeError
from fwens.tensor import Tensor

finite = st.floats(-5, 5, allow_nan=False, width=64)


def naive_matmul(a, b):
    m, k = a.shape
    _, n = b.shape
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            for t in range(k):
                out[i, j] += a[i, t] * b[t, j]
    return out


class TestConstruction:
    def test_zero_extent_rejected(self):
        with pytest.raises(ShapeError):
            Tensor(np.zeros((0, 3)))

    @pytest.mark.parametrize("bad", [np.nan, np.inf, -np.inf])
    def test_non_finite_rejected(self, bad):
        with pytest.raises(NumericError):
            Tensor([1.0, bad])

    def test_default_dtype_is_float32(self):
        assert Tensor([1, 2]).dtype == np.float32

    def test_float64_array_keeps_dtype(self):
        assert Tensor(np.ones(2)).dtype == np.float64

    def test_default_dtype_context(self):
        with T.default_dtype(np.float64):
            assert Tensor([1]).dtype == np.float64
        assert Tensor([1]).dtype == np.float32

    def test_unsupported_dtype(self):
        with pytest.raises(ValueError):
            T.set_default_dtype(np.int32)


class TestMatmul:
    def test_identity(self):
        x = Tensor([[1.0, 2], [3, 4]])
        np.testing.assert_array_equal(T.matmul(Tensor(np.eye(2)), x).data, x.data)

    def test_dot(self):
        assert T.matmul(Tensor([[1.0, 2]]), Tensor([[3.0], [4]])).data.tolist() == [[11.0]]

    def test_triple_loop_oracle(self, rng):
        a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
        np.testing.assert_allclose((Tensor(a) @ Tensor(b)).data, naive_matmul(a, b), rtol=1e-6)

    def test_random_shapes(self, rng):
        for _ in range(100):
            m, k, n = rng.integers(1, 17, size=3)
            a, b = rng.normal(size=(m, k)), rng.normal(size=(k, n))
            np.testing.assert_allclose((Tensor(a) @ Tensor(b)).data, naive_matmul(a, b), rtol=1e-6, atol=1e-12)

    def test_mismatch_names_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 2\)"):
            Tensor(np.ones((2, 3))) @ Tensor(np.ones((4, 2)))


class TestElementwise:
    def test_hadamard_identity(self):
        x = Tensor([[1.0, 2], [3, 4]])
        assert T.mul(x, Tensor(np.ones((2, 2)))).data.tolist() == [[1, 2], [3, 4]]

    def test_hadamard(self):
        out = T.hadamard(Tensor([[1.0, 2], [3, 4]]), Tensor([[2.0, 0], [0, 2]]))
        assert out.data.tolist() == [[2, 0], [0, 8]]

    def test_exp_log_inverse(self, rng):
        with T.default_dtype(np.float64):
            x = Tensor(rng.uniform(0.1, 5, size=20))
            np.testing.assert_allclose(T.exp(T.log(x)).data, x.data, rtol=1e-6)

    def test_log_domain(self):
        with pytest.raises(DomainError):
            T.log(Tensor([1.0, 0.0]))

    def test_div_by_zero(self):
        with pytest.raises(DomainError):
            Tensor([1.0]) / Tensor([0.0])

    def test_tag_dispatch(self):
        assert T.elementwise("add", Tensor([1.0]), 2.0).item() == 3.0
        assert T.elementwise("exp", Tensor([0.0])).item() == 1.0
        with pytest.raises(ValueError):
            T.elementwise("nope", Tensor([1.0]))

    def test_broadcast_trailing_only(self):
        assert (Tensor(np.ones((2, 3))) + Tensor(np.ones(3))).shape == (2, 3)
        with pytest.raises(ShapeError):
            Tensor(np.ones((2, 3))) + Tensor(np.ones(2))


class TestSoftmax:
    def test_uniform(self):
        np.testing.assert_allclose(T.softmax_rows(Tensor([[0.0, 0, 0, 0]])).data, [[0.25] * 4])

    def test_no_overflow(self):
        out = T.softmax_rows(Tensor([[1000.0, 0.0]])).data
        assert np.isfinite(out).all() and out[0, 0] == pytest.approx(1.0) and out[0, 1] < 1e-300 + 1e-30

    def test_direct_formula(self):
        z = np.array([[1.0, 2.0, 3.0]])
        np.testing.assert_allclose(T.softmax_rows(Tensor(z)).data, np.exp(z) / np.exp(z).sum(), rtol=1e-9)

    @pytest.mark.parametrize("t", [0.0, -1.0])
    def test_bad_temperature(self, t):
        with pytest.raises(ConfigError):
            T.softmax_rows(Tensor([[1.0, 2.0]]), temperature=t)

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, (3, 5), elements=st.floats(-50, 50)))
    def test_rows_sum_to_one(self, z):
        np.testing.assert_allclose(T.softmax_rows(Tensor(z)).data.sum(1), 1.0, atol=1e-6)


class TestBackward:
    def test_sum_grad_is_ones(self, rng):
        x = Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True)
        x.sum().backward()
        np.testing.assert_array_equal(x.grad, np.ones((2, 3, 4)))

    def test_square_grad(self, rng):
        x = Tensor(rng.normal(size=5), requires_grad=True)
        (x * x).sum().backward()
        np.testing.assert_allclose(x.grad, 2 * x.data)

    def test_non_scalar(self):
        with pytest.raises(GraphError):
            (Tensor(np.ones(3), requires_grad=True) * 2.0).backward()

    def test_second_backward_errors(self):
        x = Tensor(np.ones(3), requires_grad=True)
        y = (x * x).sum()
        y.backward()
        with pytest.raises(GraphError):
            y.backward()

    def test_shared_subexpression_visited_once(self):
        x = Tensor(np.array([3.0]), requires_grad=True)
        y = x * x
        (y + y).sum().backward()
        np.testing.assert_allclose(x.grad, [12.0])

    def test_no_grad_records_nothing(self):
        x = Tensor(np.ones(2), requires_grad=True)
        with T.no_grad():
            y = x * 2.0
        assert y.node is None

    def test_deterministic(self, rng):
        a = rng.normal(size=(4, 4)).astype(np.float32)
        r1 = T.softmax(Tensor(a) @ Tensor(a), -1).data
        r2 = T.softmax(Tensor(a) @ Tensor(a), -1).data
        assert r1.tobytes() == r2.tobytes()


def _instances(rng, n=10):
    return [np.random.default_rng(rng.integers(1 << 30)) for _ in range(n)]


UNARY_OPS = {
    "exp": lambda x: T.exp(x).sum(),
    "log": lambda x: T.log(x * x + 1.0).sum(),
    "neg": lambda x: (-x).sum(),
    "power": lambda x: T.power(x * x + 1.0, 1.5).sum(),
    "gelu": lambda x: T.gelu(x).sum(),
    "relu": lambda x: (T.relu(x) * x).sum(),
    "tanh_free_softmax": lambda x: (T.softmax(x, -1) * Tensor(np.arange(x.shape[-1], dtype=float))).sum(),
    "log_softmax": lambda x: (T.log_softmax(x, -1) * Tensor(np.linspace(-1, 1, x.shape[-1]))).sum(),
    "mean": lambda x: (T.mean(x, axis=0) ** 2).sum(),
    "sum_axis": lambda x: (T.tsum(x, axis=1, keepdims=True) * x).sum(),
    "reshape": lambda x: (T.reshape(x, (-1,)) * Tensor(np.arange(x.size, dtype=float))).sum(),
    "transpose": lambda x: (T.transpose(x) @ x).sum(),
    "getitem": lambda x: (x[1:, ::2] ** 2).sum(),
    "broadcast_to": lambda x: (T.broadcast_to(x[:1], x.shape) * x).sum(),
}


@pytest.mark.parametrize("name", sorted(UNARY_OPS))
def test_gradcheck_unary(name, rng):
    f = UNARY_OPS[name]
    for r in _instances(rng):
        x = r.normal(size=(3, 4))
        if name == "relu":
            x = np.where(np.abs(x) < 1e-3, 0.5, x)
        assert T.gradcheck(f, x) < 1e-4


BINARY_OPS = {
    "add": lambda a, b: ((a + b) * a).sum(),
    "sub": lambda a, b: ((a - b) * b).sum(),
    "mul": lambda a, b: (a * b * a).sum(),
    "div": lambda a, b: (a / (b * b + 1.0)).sum(),
    "matmul": lambda a, b: ((a @ T.transpose(b)) ** 2).sum(),
    "broadcast_add": lambda a, b: ((a + b[0]) ** 2).sum(),
}


@pytest.mark.parametrize("name", sorted(BINARY_OPS))
def test_gradcheck_binary(name, rng):
    for r in _instances(rng):
        a, b = r.normal(size=(3, 4)), r.normal(size=(3, 4))
        assert T.gradcheck(BINARY_OPS[name], [a, b]) < 1e-4


def test_gradcheck_layer_norm(rng):
    for r in _instances(rng):
        x, g, b = r.normal(size=(3, 6)), r.normal(size=6), r.normal(size=6)
        w = Tensor(r.normal(size=(3, 6)))
        assert T.gradcheck(lambda x, g, b: (T.layer_norm(x, g, b) * w).sum(), [x, g, b]) < 1e-4


def test_gradcheck_embedding_and_take_last(rng):
    for r in _instances(rng):
        ids = r.integers(0, 5, size=(2, 3))
        tgt = r.integers(0, 4, size=(2, 3))
        w = r.normal(size=(5, 4))
        f = lambda w: T.take_last(T.log_softmax(T.embedding(w, ids), -1), tgt).sum()
        assert T.gradcheck(f, w) < 1e-4


def test_gradcheck_batched_matmul(rng):
    for r in _instances(rng):
        a, b = r.normal(size=(2, 3, 4)), r.normal(size=(2, 4, 5))
        assert T.gradcheck(lambda a, b: ((a @ b) ** 2).sum(), [a, b]) < 1e-4


def test_gradcheck_sum_is_exact(rng):
    assert T.gradcheck(lambda x: x.sum(), rng.normal(size=(4, 3))) < 1e-10


def test_gradcheck_sum_softmax_zero_gradient(rng):
    # the true gradient is exactly 0, so relative error needs an absolute floor
    err = T.gradcheck(lambda x: T.softmax_rows(x).sum(), rng.normal(size=(3, 5)), floor=1.0)
    assert err < 1e-7


def test_gradcheck_two_layer_cross_entropy(rng):
    W1, W2 = rng.normal(size=(6, 8)) * 0.5, rng.normal(size=(8, 4)) * 0.5
    tgt = rng.integers(0, 4, size=5)

    def f(x, W1, W2):
        h = T.gelu(x @ W1)
        return -T.take_last(T.log_softmax(h @ W2, -1), tgt).mean()

    assert T.gradcheck(f, [rng.normal(size=(5, 6)), W1, W2]) < 1e-4


def test_three_layer_composition(rng):
    Ws = [rng.normal(size=(4, 4)) * 0.7 for _ in range(3)]

    def f(x, a, b, c):
        for W in (a, b, c):
            x = T.gelu(x @ W)
        return (x * x).mean()

    assert T.gradcheck(f, [rng.normal(size=(2, 4)), *Ws]) < 1e-4


def test_gradcheck_nonfinite_raises():
    with pytest.raises(NumericError):
        T.gradcheck(lambda x: T.exp(x * 1000.0).sum(), np.array([1.0]))


@settings(max_examples=25, deadline=None)
@given(arrays(np.float64, (2, 3), elements=finite), arrays(np.float64, (3,), elements=finite))
def test_unbroadcast_grad_shape(a, b):
    ta, tb = Tensor(a, requires_grad=True), Tensor(b, requires_grad=True)
    (ta * tb).sum().backward()
    assert tb.grad.shape == (3,)
    np.testing.assert_allclose(tb.grad, a.sum(0))
