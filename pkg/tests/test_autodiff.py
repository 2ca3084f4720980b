import numpy as np
import pytest

from ddpnet import ops
from ddpnet._tape import record
from ddpnet.autodiff import Tape, backward, finite_diff_check, gradients
from ddpnet.errors import UsageError
from ddpnet.gradcheck import CASES, GradCase, check_model, check_op, run_suite
from ddpnet.tensor import Tensor, add, concat_channels, split_channels


def leaf(arr):
    return Tensor.wrap(np.asarray(arr, dtype=np.float64), requires_grad=True)


def test_linear_map_gradient_is_input(rng):
    x = rng.standard_normal((1, 2, 3, 3))
    w = leaf(np.zeros_like(x))
    with Tape():
        loss = ops.weighted_sum(w, x)
    (g,) = gradients(loss, [w])
    assert np.array_equal(g, x)


def test_dead_relu_gives_zero_gradient(rng):
    x = leaf(rng.standard_normal((1, 2, 3, 3)))
    with Tape():
        loss = ops.sum_all(ops.relu(ops.mul(ops.absolute(x), Tensor.wrap(np.full(x.shape, -1.0)))))
    (g,) = gradients(loss, [x])
    assert not g.any()


def test_fan_out_accumulates(rng):
    x = leaf(rng.standard_normal((1, 2, 2, 2)))
    with Tape():
        loss = ops.sum_all(add(add(x, x), x))
    (g,) = gradients(loss, [x])
    assert np.array_equal(g, np.full(x.shape, 3.0))


def test_split_concat_route_gradients(rng):
    x = leaf(rng.standard_normal((1, 4, 2, 2)))
    proj = rng.standard_normal((1, 4, 2, 2))
    with Tape():
        a, b = split_channels(x, [1, 3])
        loss = ops.weighted_sum(concat_channels([b, a]), proj)
    (g,) = gradients(loss, [x])
    np.testing.assert_array_equal(g, np.concatenate([proj[:, 3:], proj[:, :3]], axis=1))


def test_unreachable_parameter_gets_zeros():
    x, y = leaf([1.0, 2.0]), leaf([3.0])
    with Tape():
        loss = ops.sum_all(x)
    grads = backward(loss, {"x": x, "y": y})
    assert grads["x"].tolist() == [1, 1] and grads["y"].tolist() == [0]


def test_nothing_is_recorded_without_a_tape():
    x = leaf([1.0, 2.0])
    y = ops.sum_all(x)
    assert y._node is None


def test_backward_needs_scalar():
    x = leaf([1.0, 2.0])
    with Tape():
        y = ops.mul(x, x)
    with pytest.raises(UsageError):
        backward(y, [x])


def test_finite_difference_quadratic():
    err = finite_diff_check(lambda t: ops.sum_all(ops.mul(t, t)), np.array([1.0, 2.0]))
    assert err < 1e-8


def test_finite_difference_constant_function():
    assert finite_diff_check(lambda t: Tensor.wrap(np.asarray(3.0)), np.array([1.0, 2.0])) == 0.0


def test_finite_difference_conv_bn_relu_composite(rng):
    w = rng.standard_normal((3, 2, 3, 3))
    proj = rng.standard_normal((1, 3, 4, 4))
    params = ops.ConvParams(2, 3, 3, 1, 1)

    def f(t):
        bn = ops.BatchNormState.create(3, np.float64)
        y = ops.relu(ops.batch_norm(ops.conv2d(t, Tensor.wrap(w), params=params), bn))
        return ops.weighted_sum(y, proj)

    assert finite_diff_check(f, rng.standard_normal((1, 2, 4, 4))) < 1e-4


def test_every_operator_passes():
    results = run_suite(seed=3, trials=5)
    assert set(results) == {c.name for c in CASES}
    assert max(results.values()) < 1e-4


def _wrong_square(t: Tensor) -> Tensor:
    out = Tensor.wrap(t.data * t.data)
    return record("wrong_square", [t], out, lambda g: [g * t.data])  # missing the factor 2


def test_wrong_backward_rule_is_caught():
    bad = GradCase("wrong_square", lambda rng: (rng.standard_normal(6), lambda t: ops.sum_all(_wrong_square(t))))
    results = run_suite(seed=0, trials=2, cases=[bad, CASES[0]])
    assert results["wrong_square"] > 0.4
    assert results[CASES[0].name] < 1e-4


def test_check_op_is_deterministic():
    case = next(c for c in CASES if c.name == "conv2d")
    a = check_op(case, np.random.default_rng(7), trials=3)
    b = check_op(case, np.random.default_rng(7), trials=3)
    assert a == b


def test_tiny_network_end_to_end():
    worst = check_model(seed=1, per_tensor=1)
    assert max(worst.values()) < 1e-4
    assert "input" in worst
