import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from codedlf.autodiff import tensor as T
from codedlf.errors import ContractError, NumericError, ShapeError

from reference import conv2d_loops, conv2d_transpose_loops


def rand(shape, seed, scale=1.0):
    return np.random.default_rng(seed).standard_normal(shape) * scale


# ---------------------------------------------------------------------------
# conv2d


def test_conv2d_identity_kernel():
    x = T.Tensor(np.arange(9.0).reshape(1, 1, 3, 3))
    k = T.Tensor(np.ones((1, 1, 1, 1)))
    out = T.conv2d(x, k, stride=1, padding=0)
    assert np.array_equal(out.data, x.data)


def test_conv2d_constant_field():
    x = T.Tensor(np.full((1, 1, 5, 5), 2.0))
    k = T.Tensor(np.ones((1, 1, 3, 3)))
    out = T.conv2d(x, k)
    assert out.shape == (1, 1, 3, 3)
    assert np.all(out.data == 18.0)


def test_conv2d_matches_loop_oracle():
    x = rand((1, 2, 6, 6), seed=1)
    k = rand((3, 2, 3, 3), seed=2)
    out = T.conv2d(T.Tensor(x), T.Tensor(k), stride=2, padding=1)
    ref = conv2d_loops(x, k, stride=2, padding=1)
    assert np.max(np.abs(out.data - ref)) <= 1e-12 * np.max(np.abs(ref))


@settings(max_examples=20, deadline=None)
@given(
    n=st.integers(1, 2), c=st.integers(1, 3), o=st.integers(1, 3),
    h=st.integers(4, 8), k=st.integers(1, 3),
    stride=st.integers(1, 2), padding=st.integers(0, 2), seed=st.integers(0, 10**6),
)
def test_conv2d_loop_oracle_property(n, c, o, h, k, stride, padding, seed):
    x = rand((n, c, h, h), seed=seed)
    kk = rand((o, c, k, k), seed=seed + 1)
    out = T.conv2d(T.Tensor(x), T.Tensor(kk), stride=stride, padding=padding)
    ref = conv2d_loops(x, kk, stride=stride, padding=padding)
    assert out.data.shape == ref.shape
    assert np.allclose(out.data, ref, rtol=1e-12, atol=1e-12)


def test_conv2d_channel_mismatch():
    with pytest.raises(ShapeError):
        T.conv2d(T.Tensor(np.zeros((1, 2, 4, 4))), T.Tensor(np.zeros((1, 3, 3, 3))))


def test_conv2d_kernel_larger_than_padded_input():
    with pytest.raises(ShapeError):
        T.conv2d(T.Tensor(np.zeros((1, 1, 3, 3))), T.Tensor(np.zeros((1, 1, 5, 5))))


def test_conv2d_output_extent_formula():
    x = T.Tensor(np.zeros((1, 1, 11, 9)))
    k = T.Tensor(np.zeros((2, 1, 3, 3)))
    out = T.conv2d(x, k, stride=2, padding=1)
    assert out.shape == (1, 2, (11 + 2 - 3) // 2 + 1, (9 + 2 - 3) // 2 + 1)


# ---------------------------------------------------------------------------
# conv2d_transpose


def test_transpose_adjoint_identity():
    x = rand((1, 2, 6, 6), seed=3)
    k = rand((3, 2, 3, 3), seed=4)
    y = rand((1, 3, 3, 3), seed=5)
    cx = T.conv2d(T.Tensor(x), T.Tensor(k), stride=2, padding=1)
    assert cx.shape == y.shape
    lhs = float((cx.data * y).sum())
    ty = T.conv2d_transpose(T.Tensor(y), T.Tensor(k), stride=2, padding=1, output_size=(6, 6))
    rhs = float((x * ty.data).sum())
    assert abs(lhs - rhs) <= 1e-10


def test_transpose_ones_upsample():
    y = T.Tensor(np.ones((1, 1, 2, 2)))
    k = T.Tensor(np.ones((1, 1, 2, 2)))
    out = T.conv2d_transpose(y, k, stride=2, padding=0)
    assert out.shape == (1, 1, 4, 4)
    ref = conv2d_transpose_loops(y.data, k.data, stride=2, padding=0)
    assert np.array_equal(out.data, ref)
    assert np.all(out.data == 1.0)


def test_transpose_zero_input():
    out = T.conv2d_transpose(T.Tensor(np.zeros((1, 2, 3, 3))), T.Tensor(rand((2, 1, 3, 3), 0)))
    assert np.all(out.data == 0.0)


def test_transpose_matches_loop_oracle():
    y = rand((2, 3, 4, 4), seed=6)
    k = rand((3, 2, 3, 3), seed=7)
    out = T.conv2d_transpose(T.Tensor(y), T.Tensor(k), stride=2, padding=1)
    ref = conv2d_transpose_loops(y, k, stride=2, padding=1)
    assert np.allclose(out.data, ref, atol=1e-12)


def test_transpose_invalid_extent():
    with pytest.raises(ShapeError):
        T.conv2d_transpose(T.Tensor(np.zeros((1, 1, 1, 1))), T.Tensor(np.zeros((1, 1, 2, 2))),
                           stride=1, padding=3)


def test_transpose_output_size_validation():
    y = T.Tensor(np.zeros((1, 1, 3, 3)))
    k = T.Tensor(np.zeros((1, 1, 3, 3)))
    with pytest.raises(ShapeError):
        T.conv2d_transpose(y, k, stride=2, padding=1, output_size=(20, 20))


@settings(max_examples=20, deadline=None)
@given(
    c=st.integers(1, 2), o=st.integers(1, 2), h=st.integers(3, 8),
    k=st.integers(1, 3), stride=st.integers(1, 3), padding=st.integers(0, 1),
    seed=st.integers(0, 10**6),
)
def test_adjoint_identity_property(c, o, h, k, stride, padding, seed):
    if k > h + 2 * padding:
        return
    x = rand((1, c, h, h), seed=seed)
    kk = rand((o, c, k, k), seed=seed + 1)
    cx = T.conv2d(T.Tensor(x), T.Tensor(kk), stride=stride, padding=padding)
    y = rand(cx.shape, seed=seed + 2)
    lhs = float((cx.data * y).sum())
    ty = T.conv2d_transpose(T.Tensor(y), T.Tensor(kk), stride=stride, padding=padding,
                            output_size=(h, h))
    rhs = float((x * ty.data).sum())
    assert abs(lhs - rhs) <= 1e-10 * max(1.0, abs(lhs))


# ---------------------------------------------------------------------------
# elementwise


def test_relu_values():
    out = T.relu(T.Tensor(np.array([-1.0, 0.0, 2.0])))
    assert np.array_equal(out.data, [0.0, 0.0, 2.0])


def test_add_identity():
    x = T.Tensor(rand((4,), 8))
    out = T.add(x, np.zeros(4))
    assert np.array_equal(out.data, x.data)


def test_mul_gradient_product_rule():
    a = T.Tensor(np.array([3.0]), requires_grad=True)
    b = T.Tensor(np.array([5.0]), requires_grad=True)
    T.tensor_sum(T.mul(a, b)).backward()
    assert a.grad[0] == 5.0
    assert b.grad[0] == 3.0


def test_scale_and_clip():
    x = T.Tensor(np.array([-2.0, 0.5, 3.0]), requires_grad=True)
    out = T.clip(T.scale(x, 2.0), 0.0, 2.0)
    assert np.array_equal(out.data, [0.0, 1.0, 2.0])
    T.tensor_sum(out).backward()
    # gradient passes only where the pre-clip value is strictly inside
    assert np.array_equal(x.grad, [0.0, 2.0, 0.0])


def test_elementwise_shape_mismatch():
    with pytest.raises(ShapeError):
        T.add(T.Tensor(np.zeros(3)), T.Tensor(np.zeros(4)))
    with pytest.raises(ShapeError):
        T.mul(T.Tensor(np.zeros((2, 2))), T.Tensor(np.zeros((4,))))


def test_tanh_gradient():
    x = T.Tensor(np.array([0.3]), requires_grad=True)
    T.tanh(x).backward(np.array([1.0]))
    assert abs(x.grad[0] - (1 - np.tanh(0.3) ** 2)) < 1e-14


def test_add_bias_routes_gradient():
    x = T.Tensor(np.zeros((2, 3, 2, 2)), requires_grad=True)
    b = T.Tensor(np.arange(3.0), requires_grad=True)
    out = T.add_bias(x, b)
    assert np.array_equal(out.data[1, 2], np.full((2, 2), 2.0))
    T.tensor_sum(out).backward()
    assert np.array_equal(b.grad, [8.0, 8.0, 8.0])


def test_finite_check_rejects_inf():
    x = T.Tensor(np.array([1.0, np.inf]))
    with pytest.raises(NumericError):
        T.relu(x)


# ---------------------------------------------------------------------------
# concat / crop


def test_concat_channels_shapes():
    a = T.Tensor(np.zeros((1, 1, 4, 4)))
    b = T.Tensor(np.ones((1, 2, 4, 4)))
    out = T.concat_channels(a, b)
    assert out.shape == (1, 3, 4, 4)


def test_concat_backward_routes_to_both():
    a = T.Tensor(rand((1, 1, 4, 4), 9), requires_grad=True)
    b = T.Tensor(rand((1, 2, 4, 4), 10), requires_grad=True)
    T.tensor_sum(T.concat_channels(a, b)).backward()
    assert np.all(a.grad == 1.0)
    assert np.all(b.grad == 1.0)


def test_concat_roundtrip_slices():
    a = rand((1, 2, 3, 3), 11)
    b = rand((1, 1, 3, 3), 12)
    out = T.concat_channels(T.Tensor(a), T.Tensor(b))
    assert np.array_equal(out.data[:, :2], a)
    assert np.array_equal(out.data[:, 2:], b)


def test_concat_spatial_mismatch():
    with pytest.raises(ShapeError):
        T.concat_channels(T.Tensor(np.zeros((1, 1, 4, 4))), T.Tensor(np.zeros((1, 1, 5, 4))))


def test_crop_center_forward_backward():
    x = T.Tensor(rand((1, 1, 6, 6), 13), requires_grad=True)
    out = T.crop_center(x, (4, 4))
    assert np.array_equal(out.data, x.data[:, :, 1:5, 1:5])
    T.tensor_sum(out).backward()
    assert x.grad.sum() == 16.0
    assert np.all(x.grad[:, :, 0, :] == 0.0)


# ---------------------------------------------------------------------------
# mse loss


def test_mse_zero_for_equal():
    x = rand((2, 3), 14)
    assert float(T.mse_loss(T.Tensor(x), x, mode="sum").data) == 0.0


def test_mse_sum_mode_constant_offset():
    pred = T.Tensor(np.full(10, 0.1))
    target = np.zeros(10)
    loss = T.mse_loss(pred, target, mode="sum")
    assert abs(float(loss.data) - 0.1) < 1e-15


def test_mse_gradient_matches_finite_differences():
    p = rand((5,), 15)
    t = rand((5,), 16)
    pred = T.Tensor(p.copy(), requires_grad=True)
    T.mse_loss(pred, t, mode="sum").backward()
    analytic = pred.grad.copy()
    eps = 1e-6
    for i in range(5):
        pp, pm = p.copy(), p.copy()
        pp[i] += eps
        pm[i] -= eps
        num = (float(T.mse_loss(T.Tensor(pp), t, mode="sum").data)
               - float(T.mse_loss(T.Tensor(pm), t, mode="sum").data)) / (2 * eps)
        assert abs(num - analytic[i]) <= 1e-4 * max(1.0, abs(num))
    assert np.allclose(analytic, 2 * (p - t), atol=1e-12)


def test_mse_mean_mode_scales():
    pred = T.Tensor(np.full(10, 0.1))
    assert abs(float(T.mse_loss(pred, np.zeros(10), mode="mean").data) - 0.01) < 1e-15


# ---------------------------------------------------------------------------
# backward mechanics


def test_backward_of_sum_is_ones():
    x = T.Tensor(rand((3, 4), 17), requires_grad=True)
    T.tensor_sum(x).backward()
    assert np.all(x.grad == 1.0)


def test_backward_two_layer_composition_fd():
    x = rand((1, 1, 5, 5), 18)
    k1 = rand((2, 1, 3, 3), 19)
    k2 = rand((1, 2, 3, 3), 20)

    def loss_value(k1v):
        h = T.relu(T.conv2d(T.Tensor(x), T.Tensor(k1v), padding=1))
        out = T.conv2d(h, T.Tensor(k2), padding=1)
        return float(T.mse_loss(out, np.zeros(out.shape), mode="sum").data)

    k1t = T.Tensor(k1.copy(), requires_grad=True)
    h = T.relu(T.conv2d(T.Tensor(x), k1t, padding=1))
    out = T.conv2d(h, T.Tensor(k2), padding=1)
    T.mse_loss(out, np.zeros(out.shape), mode="sum").backward()
    eps = 1e-6
    for idx in [(0, 0, 0, 0), (1, 0, 2, 1), (0, 0, 1, 2)]:
        kp, km = k1.copy(), k1.copy()
        kp[idx] += eps
        km[idx] -= eps
        num = (loss_value(kp) - loss_value(km)) / (2 * eps)
        rel = abs(num - k1t.grad[idx]) / max(abs(num), abs(k1t.grad[idx]), 1e-12)
        assert rel <= 1e-4


def test_backward_fanout_accumulates():
    x = T.Tensor(np.array([7.0]), requires_grad=True)
    T.tensor_sum(T.add(x, x)).backward()
    assert x.grad[0] == 2.0


def test_fanout_sum_of_branches_exact():
    x = T.Tensor(rand((4,), 21), requires_grad=True)
    y = T.add(T.scale(x, 2.0), T.relu(x))
    T.tensor_sum(y).backward()
    expected = 2.0 + (x.data > 0)
    assert np.array_equal(x.grad, expected)


def test_backward_nonscalar_without_seed_raises():
    x = T.Tensor(np.zeros((2, 2)), requires_grad=True)
    with pytest.raises(ContractError):
        T.relu(x).backward()


def test_backward_with_explicit_seed():
    x = T.Tensor(np.array([1.0, 2.0]), requires_grad=True)
    T.scale(x, 3.0).backward(np.array([1.0, 10.0]))
    assert np.array_equal(x.grad, [3.0, 30.0])


def test_backward_deterministic_repeat():
    def run():
        x = T.Tensor(rand((1, 2, 6, 6), 22), requires_grad=True)
        k = T.Tensor(rand((2, 2, 3, 3), 23), requires_grad=True)
        out = T.relu(T.conv2d(x, k, stride=1, padding=1))
        T.mse_loss(out, np.zeros(out.shape)).backward()
        return x.grad.copy(), k.grad.copy()

    g1, g2 = run(), run()
    assert np.array_equal(g1[0], g2[0])
    assert np.array_equal(g1[1], g2[1])


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10**6), n=st.integers(1, 16))
def test_fanout_grad_is_sum_of_branch_grads(seed, n):
    xv = rand((n,), seed)
    x = T.Tensor(xv.copy(), requires_grad=True)
    T.tensor_sum(T.add(T.scale(x, 1.5), T.scale(x, -0.5))).backward()
    combined = x.grad.copy()
    x1 = T.Tensor(xv.copy(), requires_grad=True)
    T.tensor_sum(T.scale(x1, 1.5)).backward()
    x2 = T.Tensor(xv.copy(), requires_grad=True)
    T.tensor_sum(T.scale(x2, -0.5)).backward()
    assert np.array_equal(combined, x1.grad + x2.grad)
