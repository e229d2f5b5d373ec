"""Tensor engine: forward values against independent oracles, gradients
against central finite differences, stop-gradient and determinism contracts."""

import math

import numpy as np
import pytest

from doprompt import tensor as T
from doprompt.tensor import ShapeError, Tensor

from conftest import central_diff, check_gradient, rel_error


def series_erf(x: float, terms: int = 40) -> float:
    """erf via its Maclaurin series; independent of scipy."""
    total = 0.0
    for n in range(terms):
        total += (-1) ** n * x ** (2 * n + 1) / (math.factorial(n) * (2 * n + 1))
    return 2.0 / math.sqrt(math.pi) * total


# ---------------------------------------------------------------------------
# matmul


def test_matmul_identity():
    eye = Tensor(np.eye(2))
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    out = T.matmul(eye, a)
    np.testing.assert_allclose(out.data, [[1, 2], [3, 4]])


def test_matmul_all_ones_sum():
    out = T.matmul(Tensor([[1.0, 1.0]]), Tensor([[1.0], [1.0]]))
    np.testing.assert_allclose(out.data, [[2.0]])


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 2\)"):
        T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 2))))


def test_matmul_gradient_finite_difference_32bit():
    rng = np.random.default_rng(0)
    a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    b = Tensor(rng.normal(size=(4, 2)), requires_grad=True)
    loss = T.tensor_sum(T.matmul(a, b))
    T.backward(loss)

    def f():
        return float(np.matmul(a.data, b.data).sum())

    for p in (a, b):
        numeric = central_diff(f, p.data, h=1e-3)
        assert rel_error(p.grad, numeric) < 1e-3


# ---------------------------------------------------------------------------
# softmax


def test_softmax_symmetry():
    out = T.softmax(Tensor([0.0, 0.0, 0.0]), axis=-1)
    np.testing.assert_allclose(out.data, [1 / 3, 1 / 3, 1 / 3], atol=1e-7)


def test_softmax_exp_log_identity():
    out = T.softmax(Tensor([math.log(1), math.log(2), math.log(3)]), axis=-1)
    np.testing.assert_allclose(out.data, [1 / 6, 1 / 3, 1 / 2], atol=1e-6)


def test_softmax_large_inputs_no_overflow():
    out = T.softmax(Tensor([1000.0, 0.0]), axis=-1)
    assert np.all(np.isfinite(out.data))
    np.testing.assert_allclose(out.data, [1.0, 0.0], atol=1e-6)


@pytest.mark.parametrize("seed", range(5))
def test_softmax_rows_on_simplex(seed):
    rng = np.random.default_rng(seed)
    out = T.softmax(Tensor(rng.normal(scale=5.0, size=(4, 7))), axis=-1)
    assert np.all(out.data > 0) and np.all(out.data < 1)
    np.testing.assert_allclose(out.data.sum(axis=-1), 1.0, atol=1e-6)


# ---------------------------------------------------------------------------
# layer norm


def test_layer_norm_constant_row_is_zero():
    g = Tensor(np.ones(4))
    b = Tensor(np.zeros(4))
    out = T.layer_norm(Tensor([[3.0, 3.0, 3.0, 3.0]]), g, b)
    np.testing.assert_allclose(out.data, 0.0, atol=1e-6)


def test_layer_norm_already_normalized():
    g = Tensor(np.ones(2))
    b = Tensor(np.zeros(2))
    out = T.layer_norm(Tensor([[1.0, -1.0]]), g, b, eps=1e-12)
    np.testing.assert_allclose(out.data, [[1.0, -1.0]], atol=1e-5)


def test_layer_norm_matches_direct_formula():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(2, 6))
    gamma = rng.normal(size=6)
    beta = rng.normal(size=6)
    out = T.layer_norm(Tensor(x), Tensor(gamma), Tensor(beta), eps=1e-5)
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    expected = gamma * (x - mu) / np.sqrt(var + 1e-5) + beta
    np.testing.assert_allclose(out.data, expected, atol=1e-6)


# ---------------------------------------------------------------------------
# gelu


def test_gelu_zero():
    assert T.gelu(Tensor(0.0)).item() == 0.0


def test_gelu_saturating_tail():
    assert abs(T.gelu(Tensor(-10.0)).item()) < 1e-9


def test_gelu_at_one_matches_erf_series():
    phi_1 = 0.5 * (1.0 + series_erf(1.0 / math.sqrt(2.0)))
    assert abs(T.gelu(Tensor(1.0)).item() - 1.0 * phi_1) < 1e-6
    assert abs(1.0 * phi_1 - 0.8413) < 5e-4


@pytest.mark.parametrize("x", [-2.0, -0.5, 0.3, 1.7])
def test_gelu_matches_erf_series_pointwise(x):
    expected = x * 0.5 * (1.0 + series_erf(x / math.sqrt(2.0)))
    assert abs(T.gelu(Tensor(x)).item() - expected) < 1e-6


# ---------------------------------------------------------------------------
# cross entropy


def test_cross_entropy_uniform_logits():
    logits = Tensor(np.zeros((2, 4)))
    loss = T.cross_entropy(logits, np.array([0, 3]))
    assert abs(loss.item() - math.log(4)) < 1e-6


def test_cross_entropy_saturated_correct_prediction():
    logits = np.zeros((1, 3))
    logits[0, 1] = 1e4
    assert T.cross_entropy(Tensor(logits), np.array([1])).item() < 1e-6


def test_cross_entropy_matches_hand_evaluation():
    rng = np.random.default_rng(7)
    logits = rng.normal(size=(2, 3))
    targets = np.array([2, 0])
    loss = T.cross_entropy(Tensor(logits), targets)
    expected = 0.0
    for i, t in enumerate(targets):
        row = logits[i]
        expected += -(row[t] - np.log(np.exp(row).sum()))
    expected /= 2
    assert abs(loss.item() - expected) < 1e-6


def test_cross_entropy_target_out_of_range():
    with pytest.raises(IndexError):
        T.cross_entropy(Tensor(np.zeros((2, 3))), np.array([0, 3]))


# ---------------------------------------------------------------------------
# backward

def test_backward_quadratic():
    x = Tensor([1.0, -2.0, 3.0], requires_grad=True)
    loss = T.tensor_sum(x * x)
    T.backward(loss)
    np.testing.assert_allclose(x.grad, 2 * x.data, atol=1e-6)


def test_backward_requires_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ValueError, match="scalar"):
        T.backward(x * 2.0)


def test_backward_accumulates_on_shared_input():
    x = Tensor([2.0], requires_grad=True)
    loss = T.tensor_sum(x * 3.0) + T.tensor_sum(x * 5.0)
    T.backward(loss)
    np.testing.assert_allclose(x.grad, [8.0])


def test_backward_two_layer_mlp_finite_difference():
    with T.default_dtype("float64"):
        rng = np.random.default_rng(11)
        params = {
            "w1": Tensor(rng.normal(size=(4, 5)), requires_grad=True),
            "b1": Tensor(rng.normal(size=5), requires_grad=True),
            "w2": Tensor(rng.normal(size=(5, 2)), requires_grad=True),
            "b2": Tensor(rng.normal(size=2), requires_grad=True),
        }
        x = rng.normal(size=(3, 4))
        y = np.array([0, 1, 0])

        def build():
            h = T.gelu(T.matmul(Tensor(x), params["w1"]) + params["b1"])
            return T.cross_entropy(T.matmul(h, params["w2"]) + params["b2"], y)

        check_gradient(build, params, h=1e-6, tol=1e-6)


# ---------------------------------------------------------------------------
# detach


def test_detach_preserves_values():
    x = Tensor([1.0, 2.0], requires_grad=True)
    d = T.detach(x)
    np.testing.assert_array_equal(d.data, x.data)
    assert not d.requires_grad


def test_detach_blocks_gradient():
    x = Tensor([1.0, 2.0], requires_grad=True)
    loss = T.tensor_sum(T.detach(x) * 3.0)
    T.backward(loss)
    assert x.grad is None


def test_detach_mixed_graph_gradient_is_one():
    # y = x + detach(x): only the live branch contributes, dy/dx = 1 not 2
    with T.default_dtype("float64"):
        x = Tensor([1.5], requires_grad=True)
        loss = T.tensor_sum(x + T.detach(x))
        T.backward(loss)
        np.testing.assert_allclose(x.grad, [1.0])

        def f():
            return float(x.data[0] + 1.5)  # detached copy frozen at its value

        numeric = central_diff(f, x.data, h=1e-6)
        np.testing.assert_allclose(x.grad, numeric, atol=1e-6)


# ---------------------------------------------------------------------------
# dropout and no_grad


def test_dropout_eval_is_identity():
    x = Tensor(np.ones((4, 4)), requires_grad=True)
    out = T.dropout(x, 0.5, np.random.default_rng(0), train=False)
    assert out is x


def test_dropout_deterministic_given_seed():
    x = Tensor(np.ones((8, 8)))
    a = T.dropout(x, 0.3, np.random.default_rng(5), train=True)
    b = T.dropout(x, 0.3, np.random.default_rng(5), train=True)
    np.testing.assert_array_equal(a.data, b.data)


def test_no_grad_records_nothing():
    x = Tensor([1.0], requires_grad=True)
    with T.no_grad():
        y = x * 2.0
    assert not y.requires_grad and y._parents == ()


# ---------------------------------------------------------------------------
# op-by-op gradient checks (64-bit)

OPS = {
    "add": lambda a, b: a + b,
    "sub": lambda a, b: a - b,
    "mul": lambda a, b: a * b,
    "div": lambda a, b: a / (b * b + 1.0),
    "matmul": lambda a, b: T.matmul(a, T.transpose(b, (1, 0))),
    "exp": lambda a, b: T.exp(a),
    "log": lambda a, b: T.log(a * a + 1.0),
    "softmax": lambda a, b: T.softmax(a, axis=-1),
    "gelu": lambda a, b: T.gelu(a),
    "reshape": lambda a, b: T.reshape(a, (6, 2)),
    "transpose": lambda a, b: T.transpose(a, (1, 0)),
    "broadcast": lambda a, b: T.broadcast_to(T.reshape(a, (3, 1, 4)), (3, 5, 4)),
    "concat": lambda a, b: T.concat([a, b], axis=1),
    "getitem": lambda a, b: a[1:, :2],
    "sum_axis": lambda a, b: T.tensor_sum(a, axis=0),
    "mean_axis": lambda a, b: T.mean(a, axis=1),
    "clamp": lambda a, b: T.clamp_min(a, 0.1),
}


@pytest.mark.parametrize("name", sorted(OPS))
@pytest.mark.parametrize("seed", [0, 1])
def test_op_gradients_64bit(name, seed):
    with T.default_dtype("float64"):
        rng = np.random.default_rng(seed)
        a = Tensor(rng.normal(size=(3, 4)) + 2.0, requires_grad=True)
        b = Tensor(rng.normal(size=(3, 4)) + 2.0, requires_grad=True)

        def build():
            out = OPS[name](a, b)
            return T.tensor_sum(out * out)

        check_gradient(build, {"a": a, "b": b}, h=1e-6, tol=1e-6)


def test_layer_norm_gradient_64bit():
    with T.default_dtype("float64"):
        rng = np.random.default_rng(2)
        x = Tensor(rng.normal(size=(3, 6)), requires_grad=True)
        g = Tensor(rng.normal(size=6) + 1.0, requires_grad=True)
        b = Tensor(rng.normal(size=6), requires_grad=True)

        def build():
            out = T.layer_norm(x, g, b)
            return T.tensor_sum(out * out)

        check_gradient(build, {"x": x, "g": g, "b": b}, h=1e-6, tol=1e-6)


def test_cross_entropy_gradient_64bit():
    with T.default_dtype("float64"):
        rng = np.random.default_rng(4)
        logits = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
        y = np.array([0, 2, 1, 1])

        def build():
            return T.cross_entropy(logits, y)

        check_gradient(build, {"logits": logits}, h=1e-6, tol=1e-6)


# ---------------------------------------------------------------------------
# determinism and dtype plumbing


def test_forward_deterministic():
    rng = np.random.default_rng(9)
    x = rng.normal(size=(3, 3))
    a = T.softmax(T.matmul(Tensor(x), Tensor(x)), axis=-1).data
    b = T.softmax(T.matmul(Tensor(x), Tensor(x)), axis=-1).data
    np.testing.assert_array_equal(a, b)


def test_default_dtype_switch():
    assert Tensor([1.0]).dtype == np.float32
    with T.default_dtype("float64"):
        assert Tensor([1.0]).dtype == np.float64
    assert Tensor([1.0]).dtype == np.float32


def test_ops_preserve_float32():
    x = Tensor(np.ones((2, 2)))
    for out in (T.gelu(x), T.softmax(x, -1), x * 2.0, T.mean(x), T.exp(x)):
        assert out.dtype == np.float32, out
