import numpy as np
import pytest

from autopalette.errors import ContractError, ShapeError
from autopalette.nn import (
    Tensor, avg_pool2, backward, conv2d, cross_entropy, finite_diff_check,
    instance_norm, linear, log_softmax, matmul, relu, reshape, softmax,
    straight_through, tmax, tmean, tsum,
)


def test_backward_of_sum_is_ones(rng):
    x = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    grads = backward(tsum(x))
    assert np.array_equal(grads[x], np.ones((3, 4)))


def test_backward_of_squared_norm_is_2x(rng):
    x = Tensor(rng.standard_normal(7), requires_grad=True)
    grads = backward(tsum(x * x))
    assert np.allclose(grads[x], 2 * x.data, rtol=0, atol=1e-12)


def test_backward_rejects_non_scalar(rng):
    x = Tensor(rng.standard_normal((2, 2)), requires_grad=True)
    with pytest.raises(ContractError):
        backward(x * 2.0)


def test_backward_twice_on_same_loss_errors(rng):
    x = Tensor(rng.standard_normal(3), requires_grad=True)
    loss = tsum(x * x)
    backward(loss)
    with pytest.raises(ContractError):
        backward(loss)


def test_two_loss_heads_on_shared_graph(rng):
    # separate roots over a shared subgraph give independent gradient maps
    x = Tensor(rng.standard_normal(5), requires_grad=True)
    y = x * x
    g1 = backward(tsum(y))
    g2 = backward(tsum(y * 3.0))
    assert np.allclose(g1[x] * 3.0, g2[x])


def test_grad_accumulates_when_input_reused(rng):
    x = Tensor(rng.standard_normal(4), requires_grad=True)
    grads = backward(tsum(x * x + x))
    assert np.allclose(grads[x], 2 * x.data + 1)


def test_broadcast_gradients(rng):
    a = Tensor(rng.standard_normal((3, 1)), requires_grad=True)
    b = Tensor(rng.standard_normal((1, 4)), requires_grad=True)
    grads = backward(tsum(a * b))
    assert grads[a].shape == (3, 1)
    assert grads[b].shape == (1, 4)
    assert np.allclose(grads[a], b.data.sum(axis=1, keepdims=True))


def test_finite_diff_on_sum_of_squares(rng):
    err = finite_diff_check(lambda t: tsum(t * t), rng.standard_normal(10))
    assert err <= 1e-8


def test_finite_diff_on_constant(rng):
    err = finite_diff_check(lambda t: tsum(t * 0.0), rng.standard_normal(5))
    assert err <= 1e-10


def test_finite_diff_flags_relu_kink():
    point = np.array([0.0, 0.5, -0.5])
    err, flagged = finite_diff_check(lambda t: tsum(relu(t)), point, return_flagged=True)
    assert list(flagged) == [0]
    assert err <= 1e-8


# every differentiable op, checked against the central-difference oracle
OP_CASES = [
    ("add", lambda t, c: tsum((t + c) * (t + c)), (3, 4)),
    ("sub", lambda t, c: tsum((t - c) * (t - c)), (3, 4)),
    ("mul", lambda t, c: tsum(t * c * t), (3, 4)),
    ("div", lambda t, c: tsum(t / (c * c + 1.0)), (3, 4)),
    ("pow", lambda t, c: tsum((t * t + 1.0) ** 1.5), (3, 4)),
    ("relu", lambda t, c: tsum(relu(t) * c), (3, 4)),
    ("sum_axis", lambda t, c: tsum(tsum(t, axis=0) * tsum(c, axis=0)), (3, 4)),
    ("mean", lambda t, c: tsum(tmean(t, axis=1) ** 2.0), (3, 4)),
    ("max", lambda t, c: tsum(tmax(t, axis=1) * 2.0), (5, 6)),
    ("matmul", lambda t, c: tsum(matmul(t, c) ** 2.0), (3, 4)),
    ("batched_matmul", lambda t, c: tsum(matmul(t, c) ** 2.0), (2, 3, 4)),
    ("softmax", lambda t, c: tsum(softmax(t, axis=1) * c), (3, 4)),
    ("log_softmax", lambda t, c: tsum(log_softmax(t, axis=1) * c), (3, 4)),
    ("reshape_transpose", lambda t, c: tsum(reshape(t, (4, 3)) * 1.0 + tsum(t)), (3, 4)),
    ("getitem", lambda t, c: tsum(t[1:, :2] ** 2.0), (3, 4)),
]


@pytest.mark.parametrize("name,fn,shape", OP_CASES, ids=[c[0] for c in OP_CASES])
def test_op_gradients_match_finite_differences(name, fn, shape, rng):
    for trial in range(3):
        point = rng.standard_normal(shape) + 0.1  # keep away from relu/max kinks
        if name == "matmul":
            const = Tensor(rng.standard_normal((shape[1], 5)))
        elif name == "batched_matmul":
            const = Tensor(rng.standard_normal((shape[0], shape[2], 2)))
        else:
            const = Tensor(rng.standard_normal(shape))
        err = finite_diff_check(lambda t: fn(t, const), point)
        assert err <= 1e-5, f"{name} trial {trial}: {err}"


def test_conv2d_gradients(rng):
    x = rng.standard_normal((2, 3, 6, 6))
    w = rng.standard_normal((4, 3, 3, 3)) * 0.5
    b = rng.standard_normal(4)
    err_x = finite_diff_check(lambda t: tsum(conv2d(t, Tensor(w), b) ** 2.0), x)
    assert err_x <= 1e-5
    err_w = finite_diff_check(lambda t: tsum(conv2d(Tensor(x), t, b) ** 2.0), w)
    assert err_w <= 1e-5


def test_conv2d_1x1_gradients(rng):
    x = rng.standard_normal((2, 3, 4, 4))
    w = rng.standard_normal((6, 3, 1, 1))
    err = finite_diff_check(lambda t: tsum(conv2d(Tensor(x), t) ** 2.0), w)
    assert err <= 1e-5


def test_instance_norm_gradients(rng):
    x = rng.standard_normal((2, 3, 4, 4))
    scale = np.ones(3) + 0.3 * rng.standard_normal(3)
    shift = rng.standard_normal(3)
    sel = Tensor(rng.standard_normal((2, 3, 4, 4)))
    err_x = finite_diff_check(lambda t: tsum(instance_norm(t, Tensor(scale), Tensor(shift)) * sel), x)
    assert err_x <= 1e-5
    err_s = finite_diff_check(lambda t: tsum(instance_norm(Tensor(x), t, Tensor(shift)) * sel), scale)
    assert err_s <= 1e-5
    err_b = finite_diff_check(lambda t: tsum(instance_norm(Tensor(x), Tensor(scale), t) * sel), shift)
    assert err_b <= 1e-5


def test_avg_pool_gradients(rng):
    x = rng.standard_normal((2, 3, 4, 4))
    err = finite_diff_check(lambda t: tsum(avg_pool2(t) ** 2.0), x)
    assert err <= 1e-5


def test_cross_entropy_gradients(rng):
    logits = rng.standard_normal((4, 3))
    labels = np.array([0, 2, 1, 2])
    err = finite_diff_check(lambda t: cross_entropy(t, labels), logits)
    assert err <= 1e-5


def test_cross_entropy_matches_manual(rng):
    logits = rng.standard_normal((5, 4))
    labels = rng.integers(0, 4, 5)
    got = cross_entropy(Tensor(logits), labels).item()
    z = logits - logits.max(axis=1, keepdims=True)
    lp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    assert got == pytest.approx(-lp[np.arange(5), labels].mean(), abs=1e-12)


def test_straight_through_forwards_hard_backprops_soft(rng):
    soft = Tensor(rng.standard_normal(6), requires_grad=True)
    hard = np.round(soft.data)
    out = straight_through(hard, soft * 2.0)
    assert np.array_equal(out.data, hard)
    grads = backward(tsum(out))
    assert np.allclose(grads[soft], 2.0 * np.ones(6))


def test_linear_bias(rng):
    x = rng.standard_normal((3, 4))
    w = rng.standard_normal((4, 2))
    b = rng.standard_normal(2)
    out = linear(Tensor(x), Tensor(w), Tensor(b))
    assert np.allclose(out.data, x @ w + b)


def test_conv2d_shape_errors(rng):
    with pytest.raises(ShapeError):
        conv2d(Tensor(rng.standard_normal((2, 3, 4, 4))), Tensor(rng.standard_normal((4, 5, 3, 3))))
    with pytest.raises(ShapeError):
        conv2d(Tensor(rng.standard_normal((3, 4, 4))), Tensor(rng.standard_normal((4, 3, 3, 3))))


def test_avg_pool_rejects_odd_dims(rng):
    with pytest.raises(ShapeError):
        avg_pool2(Tensor(rng.standard_normal((1, 1, 3, 4))))
