"""Finite-difference checks for every autodiff primitive, plus tape semantics."""
import numpy as np
import pytest

import tideseg.autodiff as ad
from tideseg.autodiff import Tensor

from gradcheck import check_grads


def rand(*shape, seed=0):
    return np.random.default_rng(seed).standard_normal(shape)


def test_add_mul_div_broadcast_grads():
    a = Tensor(rand(3, 4, seed=1), requires_grad=True)
    b = Tensor(rand(4, seed=2), requires_grad=True)
    c = Tensor(rand(3, 1, seed=3), requires_grad=True)
    w = rand(3, 4, seed=4)

    def loss():
        out = ad.div(ad.mul(ad.add(a, b), c), ad.add(ad.mul(b, b), 2.0))
        return ad.tsum(ad.mul(out, w))

    check_grads(loss, {"a": a, "b": b, "c": c})


def test_power_sqrt_grads():
    a = Tensor(np.abs(rand(5, seed=5)) + 0.5, requires_grad=True)

    def loss():
        return ad.tsum(ad.add(ad.power(a, 3.0), ad.sqrt(a)))

    check_grads(loss, {"a": a})


def test_relu_grad_away_from_kink():
    x = rand(4, 6, seed=6)
    x[np.abs(x) < 0.1] += 0.3  # keep FD away from the nondifferentiable point
    a = Tensor(x, requires_grad=True)
    w = rand(4, 6, seed=7)

    def loss():
        return ad.tsum(ad.mul(ad.relu(a), w))

    check_grads(loss, {"a": a})


def test_sum_mean_axes_grads():
    a = Tensor(rand(2, 3, 4, seed=8), requires_grad=True)
    w = rand(2, 4, seed=9)

    def loss():
        s = ad.tsum(a, axis=1)
        m = ad.tmean(a, axis=(0, 2), keepdims=True)
        return ad.add(ad.tsum(ad.mul(s, w)), ad.tsum(ad.mul(m, 2.0)))

    check_grads(loss, {"a": a})


def test_reshape_concat_stack_narrow_grads():
    a = Tensor(rand(2, 3, seed=10), requires_grad=True)
    b = Tensor(rand(2, 2, seed=11), requires_grad=True)
    w = rand(2, 5, seed=12)

    def loss():
        cat = ad.concat([a, b], axis=1)
        st = ad.stack([cat, ad.mul(cat, 2.0)], axis=0)
        nar = ad.narrow(st, 2, 1, 3)
        return ad.add(ad.tsum(ad.mul(cat, w)), ad.tsum(ad.power(nar, 2.0)))

    check_grads(loss, {"a": a, "b": b})


@pytest.mark.parametrize("stride,pad,k", [(1, 0, 1), (1, 1, 3), (2, 1, 3), (1, 2, 5)])
def test_conv2d_grads(stride, pad, k):
    x = Tensor(rand(2, 3, 6, 7, seed=13), requires_grad=True)
    w = Tensor(rand(4, 3, k, k, seed=14) * 0.5, requires_grad=True)
    b = Tensor(rand(4, seed=15), requires_grad=True)
    pw = rand(*ad.conv2d(x, w, b, stride=stride, pad=pad).shape)

    def loss():
        return ad.tsum(ad.mul(ad.conv2d(x, w, b, stride=stride, pad=pad), pw))

    check_grads(loss, {"x": x, "w": w, "b": b})


def test_conv2d_matches_per_pixel_dot_product_oracle():
    """1x1 conv equals an independent per-pixel matmul within 1e-5."""
    rng = np.random.default_rng(16)
    x = rng.standard_normal((2, 6, 4, 5)).astype(np.float32)
    w = rng.standard_normal((3, 6, 1, 1)).astype(np.float32)
    b = rng.standard_normal(3).astype(np.float32)
    out = ad.conv2d(Tensor(x), Tensor(w), Tensor(b)).data
    oracle = np.einsum("oc,bchw->bohw", w[:, :, 0, 0], x) + b[None, :, None, None]
    assert np.allclose(out, oracle, atol=1e-5)


def test_upsample_nearest_grads_and_values():
    x = Tensor(rand(1, 2, 3, 2, seed=17), requires_grad=True)
    up = ad.upsample_nearest(x, 2)
    assert up.shape == (1, 2, 6, 4)
    assert np.array_equal(up.data[0, 0, :2, :2], np.full((2, 2), x.data[0, 0, 0, 0]))
    pw = rand(1, 2, 6, 4, seed=18)

    def loss():
        return ad.tsum(ad.mul(ad.upsample_nearest(x, 2), pw))

    check_grads(loss, {"x": x})


def test_box_sum3x3_values_and_grads():
    x = Tensor(rand(1, 1, 4, 4, seed=19), requires_grad=True)
    out = ad.box_sum3x3(x)
    # interior point = sum of its 3x3 neighbourhood
    assert np.isclose(out.data[0, 0, 1, 1], x.data[0, 0, 0:3, 0:3].sum())
    # corner sums only the in-bounds 2x2 block (zero padding)
    assert np.isclose(out.data[0, 0, 0, 0], x.data[0, 0, 0:2, 0:2].sum())
    pw = rand(1, 1, 4, 4, seed=20)

    def loss():
        return ad.tsum(ad.mul(ad.box_sum3x3(x), pw))

    check_grads(loss, {"x": x})


def test_cross_entropy_uniform_logits_is_ln3():
    scores = Tensor(np.zeros((1, 3, 4, 4)))
    labels = np.random.default_rng(0).integers(0, 3, size=(1, 4, 4))
    loss = ad.cross_entropy_logits(scores, labels)
    assert np.isclose(float(loss.data), np.log(3.0))


def test_cross_entropy_grads():
    scores = Tensor(rand(2, 3, 3, 4, seed=21), requires_grad=True)
    labels = np.random.default_rng(22).integers(0, 3, size=(2, 3, 4))

    def loss():
        return ad.cross_entropy_logits(scores, labels)

    check_grads(loss, {"scores": scores})


def test_cross_entropy_matches_log_softmax_oracle():
    """Independent per-pixel log-softmax oracle, 1e-6 agreement."""
    rng = np.random.default_rng(23)
    scores = rng.standard_normal((2, 3, 5, 6))
    labels = rng.integers(0, 3, size=(2, 5, 6))
    got = float(ad.cross_entropy_logits(Tensor(scores), labels).data)
    total = 0.0
    for b in range(2):
        for y in range(5):
            for x in range(6):
                z = scores[b, :, y, x]
                p = np.exp(z) / np.exp(z).sum()
                total -= np.log(p[labels[b, y, x]])
    assert np.isclose(got, total / (2 * 5 * 6), atol=1e-6)


def test_detach_blocks_gradient():
    a = Tensor(rand(3, seed=24), requires_grad=True)
    out = ad.tsum(ad.mul(a.detach(), 2.0))
    assert not out.requires_grad
    both = ad.add(ad.tsum(ad.mul(a, 3.0)), out)
    both.backward()
    assert np.allclose(a.grad, 3.0)


def test_no_grad_suppresses_tape():
    a = Tensor(rand(3, seed=25), requires_grad=True)
    with ad.no_grad():
        out = ad.mul(a, 2.0)
    assert not out.requires_grad and out._backward is None


def test_backward_clears_stale_grads():
    a = Tensor(rand(3, seed=26), requires_grad=True)
    loss = ad.tsum(ad.mul(a, 2.0))
    loss.backward()
    first = a.grad.copy()
    loss2 = ad.tsum(ad.mul(a, 2.0))
    loss2.backward()
    assert np.allclose(a.grad, first)  # fresh, not doubled


def test_diamond_graph_accumulates_once_per_path():
    a = Tensor(np.array([2.0]), requires_grad=True)
    b = ad.mul(a, 3.0)
    out = ad.add(b, b)  # d(out)/da = 6
    out.backward(np.array([1.0]))
    assert np.allclose(a.grad, 6.0)
