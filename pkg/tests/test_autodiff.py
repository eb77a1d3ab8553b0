import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from prefopt import autodiff as ad
from prefopt.autodiff import Tensor
from prefopt.errors import ContractError, NumericalError, ShapeError

from conftest import leaf

finite = st.floats(-2.0, 2.0, allow_nan=False, allow_infinity=False)


def test_matmul_identity_and_projector():
    m = Tensor([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(ad.matmul(Tensor(np.eye(2)), m).data, m.data)
    out = ad.matmul(Tensor([[1.0, 0.0], [0.0, 0.0]]), Tensor([[5.0, 6.0], [7.0, 8.0]]))
    assert np.array_equal(out.data, [[5.0, 6.0], [0.0, 0.0]])


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 2\)"):
        ad.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 2))))


def test_matmul_gradient_matches_finite_differences(rng):
    a, b = leaf(rng.uniform(-2, 2, (3, 4))), leaf(rng.uniform(-2, 2, (4, 2)))
    err = ad.finite_diff_check(lambda p: ad.sum(ad.matmul(p[0], p[1])), [a, b], step=1e-4)
    assert err < 1e-3


def test_matmul_backward_formula(rng):
    a, b = leaf(rng.normal(size=(3, 4))), leaf(rng.normal(size=(4, 2)))
    ad.backward(ad.sum(ad.matmul(a, b)))
    g = np.ones((3, 2))
    assert np.allclose(a.grad, g @ b.data.T)
    assert np.allclose(b.grad, a.data.T @ g)


def test_log_softmax_closed_forms():
    out = ad.log_softmax(Tensor(np.zeros(16))).data
    assert np.allclose(out, -math.log(16), atol=1e-15)
    assert out[0] == pytest.approx(-2.772588722239781, abs=1e-12)
    two = ad.log_softmax(Tensor([0.0, math.log(3.0)])).data
    assert two == pytest.approx([-math.log(4.0), math.log(0.75)], abs=1e-15)


def test_log_softmax_gradient(rng):
    x = leaf(rng.uniform(-2, 2, 7))
    w = Tensor(rng.uniform(-1, 1, 7))
    assert ad.finite_diff_check(lambda p: ad.sum(ad.log_softmax(p[0]) * w), [x]) < 1e-3


def test_log_softmax_rejects_non_finite():
    with pytest.raises(NumericalError):
        ad.log_softmax(Tensor([0.0, np.inf]))


@given(hnp.arrays(np.float64, st.integers(1, 12), elements=st.floats(-1e3, 1e3)))
def test_log_softmax_rows_normalise(row):
    assert abs(np.exp(ad.log_softmax(Tensor(row)).data).sum() - 1.0) < 1e-9


def test_scalar_activations():
    assert ad.sigmoid(Tensor(0.0)).item() == 0.5
    assert ad.log_sigmoid(Tensor(0.0)).item() == pytest.approx(-math.log(2.0), abs=1e-15)
    v = ad.log_sigmoid(Tensor(-50.0)).item()
    assert math.isfinite(v) and v == pytest.approx(-50.0, abs=1e-20)
    assert ad.log_sigmoid(Tensor(800.0)).item() == 0.0
    assert ad.sigmoid(Tensor(-800.0)).item() == 0.0


def test_elementwise_shape_mismatch():
    with pytest.raises(ShapeError):
        ad.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4,))))
    with pytest.raises(ShapeError):
        ad.gather_rows(Tensor(np.zeros((3, 2))), [0, 3])


def test_gelu_matches_tanh_form():
    x = np.linspace(-3, 3, 13)
    ref = 0.5 * x * (1 + np.tanh(math.sqrt(2 / math.pi) * (x + 0.044715 * x ** 3)))
    assert np.allclose(ad.gelu(Tensor(x)).data, ref, rtol=1e-14, atol=1e-15)


def test_backward_of_sum_and_mean():
    x = leaf(np.arange(6.0).reshape(2, 3))
    ad.backward(ad.sum(x))
    assert np.array_equal(x.grad, np.ones((2, 3)))
    y = leaf(np.arange(5.0))
    ad.backward(ad.mean(y))
    assert np.array_equal(y.grad, np.full(5, 1 / 5))


def test_backward_requires_scalar_root():
    x = leaf(np.ones(3))
    with pytest.raises(ContractError):
        ad.backward(x * 2.0)


def test_repeated_backward_accumulates(rng):
    x = leaf(rng.normal(size=4))
    ad.backward(ad.sum(x * x))
    first = x.grad.copy()
    ad.backward(ad.sum(x * x))
    assert np.array_equal(x.grad, 2 * first)


def test_two_graph_copies_double_the_gradient(rng):
    data = rng.normal(size=(3, 5))

    def graph(x):
        return ad.sum(ad.log_softmax(ad.gelu(x)) * ad.sigmoid(x))

    x = leaf(data)
    ad.backward(graph(x))
    single = x.grad.copy()
    y = leaf(data)
    ad.backward(ad.add(graph(y), graph(y)))
    assert np.array_equal(y.grad, 2 * single)


def test_shared_subexpression_visits_node_once(rng):
    x = leaf(rng.normal(size=3))
    h = ad.gelu(x)
    ad.backward(ad.sum(h * h))
    expected = leaf(x.data.copy())
    ad.backward(ad.sum(ad.mul(ad.gelu(expected), ad.gelu(expected))))
    assert np.allclose(x.grad, expected.grad, rtol=1e-14)


def test_composite_embedding_pipeline(rng):
    table = leaf(rng.uniform(-2, 2, (6, 4)))
    w = leaf(rng.uniform(-2, 2, (4, 5)))
    ids = np.array([0, 3, 3, 5])
    targets = np.array([1, 4, 0, 2])

    def fn(p):
        logits = ad.matmul(ad.gather_rows(p[0], ids), p[1])
        return ad.mean(ad.pick(ad.log_softmax(logits), targets))

    assert ad.finite_diff_check(fn, [table, w]) < 1e-3


def test_no_grad_records_nothing(rng):
    x = leaf(rng.normal(size=3))
    with ad.no_grad():
        y = ad.sum(x * x)
    assert y.op is None and not y.requires_grad


@given(hnp.arrays(np.float64, (2, 3), elements=finite), hnp.arrays(np.float64, (2, 3), elements=finite))
def test_random_op_gradients(a, b):
    pa, pb = leaf(a), leaf(b)

    def fn(p):
        return ad.sum(ad.softplus(p[0]) * ad.sigmoid(p[1]) + ad.gelu(p[0] - p[1]))

    assert ad.finite_diff_check(fn, [pa, pb]) < 1e-3


def test_forward_is_bit_reproducible(rng):
    data = rng.normal(size=(4, 6))
    runs = [ad.log_softmax(ad.gelu(Tensor(data))).data.tobytes() for _ in range(3)]
    assert len(set(runs)) == 1


# finite_diff_check itself


def test_finite_diff_quadratic():
    p = leaf(3.0)
    err = ad.finite_diff_check(lambda q: q[0] * q[0], [p], step=1e-4)
    assert p.grad == 6.0
    assert err < 1e-6


def test_finite_diff_constant_function():
    p = leaf([1.0, 2.0])
    assert ad.finite_diff_check(lambda q: ad.sum(q[0] * 0.0), [p]) == 0.0


def test_finite_diff_rejects_non_finite_output():
    p = leaf([1.0])
    with pytest.raises(NumericalError):
        ad.finite_diff_check(lambda q: ad.sum(q[0] * np.inf), [p])


def test_finite_diff_rejects_bad_step():
    with pytest.raises(ContractError):
        ad.finite_diff_check(lambda q: ad.sum(q[0]), [leaf([1.0])], step=0.0)


def test_finite_diff_subsample_probes_at_least_64(rng):
    calls = []
    p = leaf(rng.normal(size=200))

    def fn(q):
        calls.append(1)
        return ad.sum(q[0] * q[0])

    ad.finite_diff_check(fn, [p], sample=10)
    # one analytic pass plus two evaluations per probed coordinate
    assert len(calls) == 1 + 2 * 64


def test_relative_error_floor():
    assert ad.relative_error(np.array([0.0]), np.array([1e-12]))[0] == pytest.approx(1e-4)
