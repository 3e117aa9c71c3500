import numpy as np
import pytest

from autopalette.errors import ShapeError, TrainingError
from autopalette.nn import (
    ConvNetParams, Tensor, backward, cross_entropy, finite_diff_check,
    forward_convnet, instance_norm, sgd_step, tsum,
)


def make_net(rng, depth=2, width=4, hw=(8, 8), classes=3, dtype=np.float64):
    return ConvNetParams.random(3, classes, hw, depth=depth, width=width,
                                rng=rng, dtype=dtype)


def test_zero_weights_give_zero_features(rng):
    net = make_net(rng)
    for i in range(net.depth):
        net.conv_w[i][:] = 0.0
        net.conv_b[i][:] = 0.0
    feats = forward_convnet(net, rng.random((2, 3, 8, 8)))
    assert np.allclose(feats.data, 0.0)


def test_identical_images_give_identical_rows(rng):
    net = make_net(rng)
    img = rng.random((1, 3, 8, 8))
    batch = np.concatenate([img, img, img], axis=0)
    feats = forward_convnet(net, batch).data
    assert np.allclose(feats[0], feats[1])
    assert np.allclose(feats[0], feats[2])


def test_feature_shape_d2_w4():
    # 4 filters, two 2x2 pools on 8x8 input: 4 * 8*8 / 4^2 = 16
    net = make_net(np.random.default_rng(0), depth=2, width=4)
    feats = forward_convnet(net, np.random.default_rng(1).random((2, 3, 8, 8)))
    assert feats.shape == (2, 16)


def test_logits_shape(rng):
    net = make_net(rng, classes=5)
    logits = forward_convnet(net, rng.random((4, 3, 8, 8)), mode="logits")
    assert logits.shape == (4, 5)


def test_batch_order_equivariance(rng):
    net = make_net(rng)
    batch = rng.random((5, 3, 8, 8))
    perm = rng.permutation(5)
    feats = forward_convnet(net, batch).data
    feats_perm = forward_convnet(net, batch[perm]).data
    assert np.allclose(feats[perm], feats_perm, atol=1e-12)


def test_instance_norm_standardizes_before_affine(rng):
    x = rng.random((3, 4, 6, 6)) * 5.0 + 2.0
    out = instance_norm(Tensor(x), Tensor(np.ones(4)), Tensor(np.zeros(4))).data
    assert np.abs(out.mean(axis=(2, 3))).max() < 1e-5
    assert np.abs(out.var(axis=(2, 3)) - 1.0).max() < 1e-4  # eps shifts var slightly


def test_shape_validation(rng):
    net = make_net(rng)
    with pytest.raises(ShapeError):
        forward_convnet(net, rng.random((2, 4, 8, 8)))  # wrong channels
    with pytest.raises(ShapeError):
        forward_convnet(net, rng.random((2, 3, 6, 6)))  # not divisible by 2^D


def test_convnet_loss_gradient_vs_finite_differences(rng):
    net = make_net(rng, depth=1, width=2, hw=(4, 4), classes=2)
    batch = rng.random((2, 3, 4, 4))
    labels = np.array([0, 1])

    def loss_of_fc(t):
        p, _ = net.tensors(requires_grad=False)
        p.fc_w = t
        return cross_entropy(forward_convnet(p, batch, mode="logits"), labels)

    assert finite_diff_check(loss_of_fc, net.fc_w) <= 1e-5

    def loss_of_conv(t):
        p, _ = net.tensors(requires_grad=False)
        p.conv_w[0] = t
        return cross_entropy(forward_convnet(p, batch, mode="logits"), labels)

    assert finite_diff_check(loss_of_conv, net.conv_w[0]) <= 1e-5


def test_flat_roundtrip(rng):
    net = make_net(rng)
    again = ConvNetParams.from_flat(net.flat())
    assert all(np.array_equal(a, b) for a, b in zip(again.conv_w, net.conv_w))
    assert np.array_equal(again.fc_w, net.fc_w)


def test_params_tensors_backward_covers_all(rng):
    net = make_net(rng, depth=2, width=3, hw=(4, 4))
    p, flat = net.tensors()
    loss = tsum(forward_convnet(p, rng.random((2, 3, 4, 4)), mode="logits") ** 2.0)
    grads = backward(loss)
    for name, t in flat.items():
        assert t in grads, name
        assert grads[t].shape == t.data.shape


def test_sgd_zero_lr_keeps_params():
    params = {"w": np.array([1.0, 2.0])}
    grads = {"w": np.array([3.0, -1.0])}
    new, _ = sgd_step(params, grads, lr=0.0)
    assert np.array_equal(new["w"], params["w"])


def test_sgd_momentum0_lr1_grad_equals_param_zeroes():
    params = {"w": np.array([0.3, -2.0])}
    new, _ = sgd_step(params, {"w": params["w"].copy()}, lr=1.0, momentum=0.0)
    assert np.allclose(new["w"], 0.0)


def test_sgd_two_momentum_steps_hand_computed():
    # p0=[1,2], g1=[0.5,-1], g2=[0.25,0.5], lr=0.1, mu=0.9:
    # v1=[0.5,-1]   p1=[0.95,2.1]
    # v2=[0.7,-0.4] p2=[0.88,2.14]
    p = {"w": np.array([1.0, 2.0])}
    p, v = sgd_step(p, {"w": np.array([0.5, -1.0])}, lr=0.1, momentum=0.9)
    assert np.allclose(p["w"], [0.95, 2.1])
    p, v = sgd_step(p, {"w": np.array([0.25, 0.5])}, lr=0.1, momentum=0.9, velocity=v)
    assert np.allclose(p["w"], [0.88, 2.14])
    assert np.allclose(v["w"], [0.7, -0.4])


def test_sgd_rejects_nan_with_step_index():
    with pytest.raises(TrainingError, match="step 17"):
        sgd_step({"w": np.ones(2)}, {"w": np.array([np.nan, 0.0])}, lr=0.1, step=17)


def test_sgd_rejects_shape_mismatch():
    with pytest.raises(ShapeError):
        sgd_step({"w": np.ones(2)}, {"w": np.ones(3)}, lr=0.1)
