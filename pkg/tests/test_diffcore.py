import math

import numpy as np
import pytest

from mmt import diffcore as dc
from mmt.diffcore import Tensor, backward, grad_check
from mmt.errors import NumericError, ShapeError


def test_matmul_identity():
    eye = Tensor(np.eye(2))
    m = Tensor([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_allclose(dc.matmul(eye, m).data, m.data)


def test_matmul_orthogonal_vectors():
    out = dc.matmul(Tensor([[1.0, 0.0]]), Tensor([[0.0], [1.0]]))
    np.testing.assert_allclose(out.data, [[0.0]])


def test_matmul_hand_value():
    out = dc.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[5.0], [6.0]]))
    np.testing.assert_allclose(out.data, [[17.0], [39.0]])


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 2\)"):
        dc.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 2))))


def test_matmul_gradient_rules():
    a = Tensor([[1.0, 2.0], [3.0, 4.0]], requires_grad=True)
    b = Tensor([[5.0], [6.0]], requires_grad=True)
    backward(dc.matmul(a, b).sum())
    g = np.ones((2, 1))
    np.testing.assert_allclose(a.grad, g @ b.data.T)
    np.testing.assert_allclose(b.grad, a.data.T @ g)


def test_row_softmax_symmetry():
    np.testing.assert_allclose(dc.row_softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5])


def test_row_softmax_large_inputs_stable():
    np.testing.assert_allclose(dc.row_softmax(Tensor([1000.0, 1000.0])).data, [0.5, 0.5])


def test_row_softmax_closed_form():
    out = dc.row_softmax(Tensor([math.log(2.0), 0.0]))
    np.testing.assert_allclose(out.data, [2.0 / 3.0, 1.0 / 3.0], rtol=1e-12)


def test_row_softmax_nan_rejected():
    with pytest.raises(NumericError):
        dc.row_softmax(Tensor([np.nan, 0.0]))


def test_row_softmax_rows_sum_to_one_and_shift_invariant():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(6, 9))
    y = dc.row_softmax(Tensor(x)).data
    np.testing.assert_allclose(y.sum(axis=1), np.ones(6), atol=1e-12)
    shifted = dc.row_softmax(Tensor(x + 3.7)).data
    np.testing.assert_allclose(y, shifted, atol=1e-12)


def test_l2_distance_values():
    assert dc.l2_distance(Tensor([1.0, 2.0]), Tensor([1.0, 2.0])).item() == 0.0
    assert dc.l2_distance(Tensor([0.0, 0.0]), Tensor([3.0, 4.0])).item() == pytest.approx(5.0)
    out = dc.l2_distance(Tensor([1.0, 1.0]), Tensor([2.0, 3.0]))
    assert out.item() == pytest.approx(math.sqrt(5.0), abs=1e-12)


def test_l2_distance_dimension_mismatch():
    with pytest.raises(ShapeError):
        dc.l2_distance(Tensor([1.0, 2.0]), Tensor([1.0, 2.0, 3.0]))


def test_l2_distance_gradient_finite_at_coincident_points():
    a = Tensor([1.0, 2.0], requires_grad=True)
    b = Tensor([1.0, 2.0])
    backward(dc.l2_distance(a, b))
    np.testing.assert_allclose(a.grad, [0.0, 0.0])


def test_backward_polynomial():
    x = Tensor([3.0], requires_grad=True)
    backward((x * x).sum())
    np.testing.assert_allclose(x.grad, [6.0])


def test_backward_relu_mask():
    x = Tensor([-1.0, 2.0], requires_grad=True)
    backward(dc.relu(x).sum())
    np.testing.assert_allclose(x.grad, [0.0, 1.0])


def test_backward_softmax_cross_entropy_closed_form():
    z = Tensor([0.3, -1.2, 2.0], requires_grad=True)
    onehot = np.array([0.0, 0.0, 1.0])
    probs = dc.row_softmax(z)
    loss = -dc.tsum(dc.mul(Tensor(onehot), dc.log_clipped(probs)))
    backward(loss)
    np.testing.assert_allclose(z.grad, probs.data - onehot, atol=1e-10)

    def f(t):
        return -dc.tsum(dc.mul(Tensor(onehot), dc.log_clipped(dc.row_softmax(t))))

    assert grad_check(f, z) < 1e-6


def test_backward_requires_scalar():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ShapeError):
        backward(x * x)


def test_backward_twice_accumulates_double():
    x = Tensor([1.5, -0.5], requires_grad=True)
    with dc.new_tape():
        loss = (x * x).sum()
        backward(loss)
        once = x.grad.copy()
        backward(loss)
    np.testing.assert_allclose(x.grad, 2.0 * once)


def test_grad_of_unused_parameter_stays_zero():
    used = Tensor([2.0], requires_grad=True)
    unused = Tensor([5.0], requires_grad=True)
    backward((used * used).sum())
    np.testing.assert_allclose(unused.grad, [0.0])


def test_no_grad_detaches():
    x = Tensor([1.0], requires_grad=True)
    with dc.no_grad():
        y = x * x
    assert not y.requires_grad
    assert y.grad is None


def test_grad_check_square():
    assert grad_check(lambda t: (t * t).sum(), Tensor([3.0]), eps=1e-5) < 1e-6


def test_grad_check_constant():
    assert grad_check(lambda t: Tensor(4.0), Tensor([1.0, 2.0])) == 0.0


def test_grad_check_rejects_bad_eps():
    with pytest.raises(ValueError):
        grad_check(lambda t: (t * t).sum(), Tensor([1.0]), eps=0.0)


def _composite(t):
    # touches most primitives in one scalar-valued map
    h = dc.tanh(dc.matmul(t, Tensor(np.linspace(-0.5, 0.5, 12).reshape(4, 3))))
    p = dc.row_softmax(h)
    picked = dc.take_rows(p, [1, 0])
    s = dc.sigmoid(dc.tsum(picked, axis=1))
    d = dc.row_l2_distance(h, dc.relu(h + 0.1))
    return dc.tmean(dc.log_clipped(s)) + dc.tsum(d) + dc.exp(dc.tmean(t)) + dc.tsum(dc.sqrt(dc.clip(t * t + 1.0, 0.5, 50.0)))


@pytest.mark.parametrize("seed", range(4))
def test_grad_check_composite_random_points(seed):
    rng = np.random.default_rng(seed)
    point = Tensor(rng.normal(size=(2, 4)))
    assert grad_check(_composite, point) < 1e-4


def test_grad_check_every_primitive_100_random_points():
    cases = {
        "add": lambda t: dc.tsum(t + Tensor(np.full(t.data.shape, 0.3))),
        "sub": lambda t: dc.tsum(1.0 - t),
        "mul": lambda t: dc.tsum(t * t),
        "neg": lambda t: dc.tsum(-t),
        "matmul": lambda t: dc.tsum(dc.matmul(t, Tensor(np.arange(12.0).reshape(4, 3)))),
        "tanh": lambda t: dc.tsum(dc.tanh(t)),
        "sigmoid": lambda t: dc.tsum(dc.sigmoid(t)),
        "exp": lambda t: dc.tsum(dc.exp(t)),
        "log": lambda t: dc.tsum(dc.log(t * t + 1.0)),
        "sqrt": lambda t: dc.tsum(dc.sqrt(t * t + 1.0)),
        "relu": lambda t: dc.tsum(dc.relu(t)),
        "clip": lambda t: dc.tsum(dc.clip(t, -0.9, 0.9)),
        "sum_axis": lambda t: dc.tsum(dc.tsum(t, axis=1) * Tensor([1.0, -2.0])),
        "mean": lambda t: dc.tmean(t),
        "softmax": lambda t: dc.tsum(dc.take_rows(dc.row_softmax(t), [0]) * Tensor(np.arange(4.0))),
        "take_rows": lambda t: dc.tsum(dc.take_rows(t, [1, 1, 0])),
        "row_l2": lambda t: dc.tsum(dc.row_l2_distance(t, Tensor(np.ones(t.data.shape)))),
    }
    rng = np.random.default_rng(42)
    worst = 0.0
    for i in range(100):
        point = Tensor(rng.normal(size=(2, 4)) * 1.5)
        # relu/clip kinks: nudge coordinates away from the non-differentiable set
        point.data[np.abs(point.data) < 1e-3] += 0.01
        point.data[np.abs(np.abs(point.data) - 0.9) < 1e-3] += 0.01
        name = list(cases)[i % len(cases)]
        worst = max(worst, grad_check(cases[name], point))
    assert worst < 1e-4


def test_l2_vector_distance_gradcheck():
    rng = np.random.default_rng(3)
    b = Tensor(rng.normal(size=5))
    assert grad_check(lambda t: dc.l2_distance(t, b), Tensor(rng.normal(size=5))) < 1e-6
