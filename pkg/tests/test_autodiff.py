import numpy as np
import pytest

from lightdepth import ops
from lightdepth.autodiff import NonFiniteError, Tape, Tensor, backward, no_grad


def test_zero_extent_rejected():
    with pytest.raises(ValueError):
        Tensor(np.zeros((2, 0)))


def test_integer_data_becomes_float():
    t = Tensor([1, 2, 3])
    assert t.dtype == np.float64
    assert t.size == 3


def test_identity_chain_has_unit_gradient():
    x = Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
    y = ops.reshape(ops.reshape(x, (3, 1)), (3,))
    y.sum().backward()
    np.testing.assert_array_equal(x.grad, np.ones(3))


def test_sum_of_squares_gradient(rng):
    x = Tensor(rng.standard_normal((4, 5)), requires_grad=True)
    (x * x).sum().backward()
    np.testing.assert_allclose(x.grad, 2 * x.data, rtol=0, atol=1e-15)


def test_gradients_accumulate_over_reuse():
    x = Tensor(np.array([2.0]), requires_grad=True)
    (x * x + x).sum().backward()
    np.testing.assert_allclose(x.grad, [5.0])


def test_grad_shape_matches_value(rng):
    x = Tensor(rng.standard_normal((2, 3, 4, 4)), requires_grad=True)
    w = Tensor(rng.standard_normal((5, 3, 3, 3)), requires_grad=True)
    ops.conv2d(x, w, padding=1).sum().backward()
    assert x.grad.shape == x.shape
    assert w.grad.shape == w.shape


def test_tape_records_execution_order_once_per_op():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    a = x * 3.0
    b = a + a
    c = ops.relu(b)
    out = c.sum()
    tape = Tape.record(out)
    outputs = [t for t, _ in tape]
    assert len(outputs) == len({id(t) for t in outputs}) == 4
    order = [id(t) for t in outputs]
    assert order == [id(a), id(b), id(c), id(out)]


def test_backward_replays_tape_in_reverse(monkeypatch):
    visited = []
    original = ops.Mul.backward

    def spy(self, g):
        visited.append("mul")
        return original(self, g)

    monkeypatch.setattr(ops.Mul, "backward", spy)
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    y = Tensor(np.array([3.0, 4.0]), requires_grad=True)
    out = ops.relu(x * y).sum()
    out.backward()
    assert visited == ["mul"]
    np.testing.assert_array_equal(x.grad, y.data)


def test_backward_requires_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ValueError):
        backward(x * 2.0)


def test_no_grad_records_nothing():
    x = Tensor(np.ones(3), requires_grad=True)
    with no_grad():
        y = (x * 2.0).sum()
    assert not y.requires_grad


def test_unreachable_inputs_keep_no_grad():
    x = Tensor(np.ones(2), requires_grad=True)
    z = Tensor(np.ones(2), requires_grad=True)
    (x * 2.0).sum().backward()
    assert z.grad is None


def test_non_finite_result_raises():
    x = Tensor(np.array([1.0, 0.0]))
    with pytest.raises(NonFiniteError):
        ops.div(Tensor(np.ones(2)), x)


def test_non_finite_input_rejected_by_ops():
    with pytest.raises(NonFiniteError):
        ops.relu(Tensor(np.array([np.nan, 1.0])))


def test_network_gradients_sampled():
    from lightdepth import gradcheck

    result = gradcheck.check_network_suite(instances=3, seed=11)
    assert result.passed, result.line()


@pytest.mark.slow
def test_network_gradients_every_parameter_element():
    from lightdepth import gradcheck

    check = gradcheck.check_network(seed=0, coords_per_tensor=None)
    assert check.max_rel_error <= gradcheck.REL_TOL
    assert check.max_small_abs_error <= gradcheck.ABS_FLOOR
    assert check.probes >= 0.99 * (check.probes + check.skipped)
