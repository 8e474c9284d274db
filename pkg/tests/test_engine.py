"""Tensor engine tests: forward examples, loop oracles, gradient checks."""

import numpy as np
import pytest

import semgan.engine as E
from semgan.engine import Graph, GraphError, ShapeError, Tensor


# ---------------------------------------------------------------------------
# independent oracles


def conv2d_loop(x, k, stride=1, pad=0, mode="zero"):
    """Six-nested-loop convolution oracle, float64 accumulation."""
    n, c, h, w = x.shape
    oc, ic, kh, kw = k.shape
    assert c == ic
    if pad:
        if mode == "zero":
            x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
        else:
            x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)), mode="reflect")
    ho = (x.shape[2] - kh) // stride + 1
    wo = (x.shape[3] - kw) // stride + 1
    out = np.zeros((n, oc, ho, wo))
    for b in range(n):
        for o in range(oc):
            for y in range(ho):
                for xx in range(wo):
                    acc = 0.0
                    for i in range(kh):
                        for j in range(kw):
                            for ch in range(c):
                                acc += float(x[b, ch, y * stride + i, xx * stride + j]) * \
                                    float(k[o, ch, i, j])
                    out[b, o, y, xx] = acc
    return out


def instance_norm_loop(x, scale, shift, eps):
    """Scalar-loop instance norm oracle."""
    n, c, h, w = x.shape
    out = np.zeros_like(x, dtype=np.float64)
    for b in range(n):
        for ch in range(c):
            plane = x[b, ch].astype(np.float64)
            mu = plane.mean()
            var = ((plane - mu) ** 2).mean()
            out[b, ch] = (plane - mu) / np.sqrt(var + eps) * scale[ch] + shift[ch]
    return out


def resize_nearest_loop(x, th, tw):
    """Direct index-formula oracle: src = (dst * src_dim) // dst_dim."""
    n, c, h, w = x.shape
    out = np.zeros((n, c, th, tw), dtype=x.dtype)
    for y in range(th):
        for xx in range(tw):
            out[:, :, y, xx] = x[:, :, (y * h) // th, (xx * w) // tw]
    return out


def rel_err(a, b, floor=1e-2):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), floor)
    return np.abs(a - b).max(initial=0.0) / denom


def t(data, grad=False):
    return Tensor(np.asarray(data, dtype=np.float32), requires_grad=grad)


# ---------------------------------------------------------------------------
# tensor basics


def test_tensor_requires_4d():
    with pytest.raises(ShapeError):
        Tensor(np.zeros((3, 3)))


def test_tensor_data_is_float32_row_major():
    x = t(np.arange(16, dtype=np.float64).reshape(1, 1, 4, 4))
    assert x.data.dtype == np.float32
    assert x.data.flags["C_CONTIGUOUS"]
    assert x.size == 16


def test_scalar_helper_and_item():
    assert E.scalar(2.5).item() == 2.5
    with pytest.raises(ShapeError):
        t(np.zeros((1, 1, 2, 2))).item()


# ---------------------------------------------------------------------------
# conv2d


def test_conv2d_constant_image_sobel_zero_interior():
    img = t(np.full((1, 1, 3, 3), 5.0))
    sobel_x = t([[[[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]]]])
    out = E.conv2d(img, sobel_x, stride=1, padding="zero", pad_size=1)
    assert out.shape == (1, 1, 3, 3)
    assert out.data[0, 0, 1, 1] == 0.0


def test_conv2d_scalar_multiply():
    out = E.conv2d(t([[[[2.0]]]]), t([[[[3.0]]]]))
    assert out.item() == 6.0


@pytest.mark.parametrize("seed,stride,pad,mode", [
    (0, 1, 0, "zero"), (1, 1, 1, "zero"), (2, 2, 1, "zero"),
    (3, 1, 1, "reflect"), (4, 2, 2, "reflect"),
])
def test_conv2d_matches_loop_oracle(seed, stride, pad, mode):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((1, 2, 5, 5)).astype(np.float32)
    k = rng.standard_normal((3, 2, 3, 3)).astype(np.float32)
    out = E.conv2d(t(x), t(k), stride=stride, padding=mode, pad_size=pad)
    expected = conv2d_loop(x, k, stride=stride, pad=pad, mode=mode)
    assert np.abs(out.data - expected).max() < 1e-5


def test_conv2d_channel_mismatch_names_dimension():
    with pytest.raises(ShapeError, match="2 channels but kernel expects 3"):
        E.conv2d(t(np.zeros((1, 2, 4, 4))), t(np.zeros((1, 3, 3, 3))))


def test_conv2d_zero_kernel_gives_zero_output():
    rng = np.random.default_rng(7)
    x = t(rng.standard_normal((2, 3, 6, 6)).astype(np.float32))
    k = t(np.zeros((4, 3, 3, 3)))
    out = E.conv2d(x, k, pad_size=1)
    assert np.all(out.data == 0.0)


def test_conv2d_deterministic_bitwise():
    rng = np.random.default_rng(11)
    x = rng.standard_normal((1, 3, 8, 8)).astype(np.float32)
    k = rng.standard_normal((2, 3, 3, 3)).astype(np.float32)
    a = E.conv2d(t(x), t(k), stride=1, pad_size=1)
    b = E.conv2d(t(x), t(k), stride=1, pad_size=1)
    assert np.array_equal(a.data, b.data)


# ---------------------------------------------------------------------------
# conv_transpose2d


def test_conv_transpose_ones_kernel():
    out = E.conv_transpose2d(t([[[[1.0]]]]), t(np.ones((1, 1, 2, 2))), stride=2)
    assert out.shape == (1, 1, 2, 2)
    assert np.all(out.data == 1.0)


def test_conv_transpose_zero_input():
    out = E.conv_transpose2d(t(np.zeros((1, 2, 3, 3))), t(np.ones((2, 4, 2, 2))), stride=2)
    assert np.all(out.data == 0.0)


@pytest.mark.parametrize("seed,stride", [(0, 1), (1, 2), (2, 2)])
def test_conv_transpose_equals_conv2d_input_gradient(seed, stride):
    # Definition check: forward(conv_transpose) == backward-by-input of
    # conv2d with the same kernel on matching shapes.
    rng = np.random.default_rng(seed)
    kh = 2 if stride == 2 else 3
    k = rng.standard_normal((3, 2, kh, kh)).astype(np.float32)
    x = rng.standard_normal((1, 2, 6, 6)).astype(np.float32)
    xt = t(x, grad=True)
    with Graph() as g:
        y = E.conv2d(xt, t(k), stride=stride)
        loss_weights = rng.standard_normal(y.shape).astype(np.float32)
        loss = E.reduce(E.mul(y, t(loss_weights)), "sum")
    g.backward(loss)
    transposed = E.conv_transpose2d(t(loss_weights), t(k), stride=stride)
    assert np.abs(transposed.data - xt.grad).max() < 1e-5


def test_conv_transpose_invalid_stride():
    with pytest.raises(ValueError, match="stride"):
        E.conv_transpose2d(t(np.zeros((1, 1, 2, 2))), t(np.zeros((1, 1, 2, 2))), stride=0)


# ---------------------------------------------------------------------------
# instance norm


def test_instance_norm_zero_mean_unit_variance():
    x = t(np.array([1, 2, 3, 4], dtype=np.float32).reshape(1, 1, 2, 2))
    out = E.instance_norm(x, t(np.ones((1, 1, 1, 1))), t(np.zeros((1, 1, 1, 1))), 1e-5)
    assert abs(out.data.mean()) < 1e-3
    assert abs(out.data.var() - 1.0) < 1e-3


def test_instance_norm_constant_plane_is_all_zeros():
    x = t(np.full((1, 1, 2, 2), 5.0))
    out = E.instance_norm(x, t(np.ones((1, 1, 1, 1))), t(np.zeros((1, 1, 1, 1))), 1e-5)
    assert np.all(out.data == 0.0)


def test_instance_norm_matches_loop_oracle():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((2, 3, 5, 4)).astype(np.float32)
    scale = rng.standard_normal(3).astype(np.float32)
    shift = rng.standard_normal(3).astype(np.float32)
    out = E.instance_norm(
        t(x), t(scale.reshape(1, 3, 1, 1)), t(shift.reshape(1, 3, 1, 1)), 1e-5)
    expected = instance_norm_loop(x, scale, shift, 1e-5)
    assert np.abs(out.data - expected).max() < 1e-5


def test_instance_norm_mean_var_invariant_random_planes():
    rng = np.random.default_rng(9)
    x = t(rng.standard_normal((3, 2, 8, 8)).astype(np.float32))
    out = E.instance_norm(x, t(np.ones((1, 2, 1, 1))), t(np.zeros((1, 2, 1, 1))), 1e-5)
    for b in range(3):
        for c in range(2):
            plane = out.data[b, c]
            assert abs(plane.mean()) < 1e-4
            assert abs(plane.var() - 1.0) < 1e-2


def test_instance_norm_rejects_bad_epsilon_and_shapes():
    x = t(np.zeros((1, 2, 2, 2)))
    ones = t(np.ones((1, 2, 1, 1)))
    with pytest.raises(ValueError, match="epsilon"):
        E.instance_norm(x, ones, ones, 0.0)
    with pytest.raises(ShapeError, match="scale"):
        E.instance_norm(x, t(np.ones((1, 1, 1, 1))), ones, 1e-5)


# ---------------------------------------------------------------------------
# activations and element-wise ops


def test_activation_examples():
    assert E.leaky_relu(t([[[[-1.0]]]]), 0.2).item() == pytest.approx(-0.2)
    assert E.tanh(t([[[[0.0]]]])).item() == 0.0
    out = E.activation(t([[[[-2.0], [3.0]]]]), "relu")
    assert out.data.reshape(-1).tolist() == [0.0, 3.0]


def test_leaky_relu_slope_range():
    with pytest.raises(ValueError):
        E.leaky_relu(t(np.zeros((1, 1, 1, 1))), 1.5)


def test_elementwise_examples():
    assert E.sign(t([[[[-3.0], [0.0], [2.0]]]])).data.reshape(-1).tolist() == [-1, 0, 1]
    assert E.absolute(t([[[[-1.5]]]])).item() == 1.5
    assert E.mul(t([[[[2.0]]]]), t([[[[3.0]]]])).item() == 6.0


def test_elementwise_shape_mismatch():
    with pytest.raises(ShapeError):
        E.add(t(np.zeros((1, 1, 2, 2))), t(np.zeros((1, 1, 3, 3))))


def test_sign_is_gradient_blocked():
    x = t([[[[2.0]]]], grad=True)
    with Graph() as g:
        s = E.sign(x)
        assert not s.requires_grad
        loss = E.reduce(E.mul(x, 3.0), "sum")
    g.backward(loss)
    assert x.grad.reshape(()) == 3.0


# ---------------------------------------------------------------------------
# reductions


def test_reduce_examples():
    x = t([[[[1.0], [-2.0], [3.0]]]])
    assert E.reduce(x, "l1_norm").item() == 6.0
    assert E.reduce(t([[[[2.0], [4.0]]]]), "mean").item() == 3.0


def test_reduce_sum_matches_loop_oracle():
    rng = np.random.default_rng(5)
    x = rng.standard_normal((2, 3, 4, 5)).astype(np.float32)
    total = 0.0
    for v in x.reshape(-1):
        total += float(v)
    assert abs(E.reduce(t(x), "sum").item() - total) < 1e-4


def test_reduce_empty_rejected():
    with pytest.raises(ValueError, match="empty"):
        E.reduce(t(np.zeros((1, 0, 2, 2))), "sum")


# ---------------------------------------------------------------------------
# resize, concat, channel ops


def test_resize_nearest_upscale_preserves_one_hot():
    labels = np.array([[0, 1], [1, 0]])
    onehot = (labels[None, None] == np.arange(2)[None, :, None, None]).astype(np.float32)
    out = E.resize_nearest(t(onehot), 4, 4)
    assert set(np.unique(out.data)) <= {0.0, 1.0}
    assert np.all(out.data.sum(axis=1) == 1.0)
    # block replication
    assert np.array_equal(out.data[0, 0, :2, :2], np.ones((2, 2), np.float32))


def test_resize_nearest_identity_is_bitwise_equal():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((1, 3, 5, 7)).astype(np.float32)
    out = E.resize_nearest(t(x), 5, 7)
    assert np.array_equal(out.data, x)


def test_resize_nearest_downscale_matches_index_oracle():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((2, 3, 4, 4)).astype(np.float32)
    out = E.resize_nearest(t(x), 2, 2)
    assert np.array_equal(out.data, resize_nearest_loop(x, 2, 2))


def test_concat_and_sum_channels():
    a = t(np.ones((1, 2, 2, 2)))
    b = t(np.full((1, 3, 2, 2), 2.0))
    cat = E.concat_channels([a, b])
    assert cat.shape == (1, 5, 2, 2)
    summed = E.sum_channels(cat)
    assert summed.shape == (1, 1, 2, 2)
    assert np.all(summed.data == 8.0)


def test_bias_add_shape_check():
    with pytest.raises(ShapeError):
        E.bias_add(t(np.zeros((1, 3, 2, 2))), t(np.zeros((1, 2, 1, 1))))


# ---------------------------------------------------------------------------
# backward mechanics


def test_backward_trivial_sum():
    x = t([[[[1.0], [2.0]]]], grad=True)
    with Graph() as g:
        loss = E.reduce(E.mul(x, 2.0), "sum")
    g.backward(loss)
    assert x.grad.reshape(-1).tolist() == [2.0, 2.0]


def test_backward_l1():
    x = t([[[[3.0], [-4.0]]]], grad=True)
    with Graph() as g:
        loss = E.reduce(x, "l1_norm")
    g.backward(loss)
    assert x.grad.reshape(-1).tolist() == [1.0, -1.0]


def test_backward_requires_scalar_loss():
    x = t(np.zeros((1, 1, 2, 2)), grad=True)
    with Graph() as g:
        y = E.mul(x, 2.0)
    with pytest.raises(ShapeError, match="scalar"):
        g.backward(y)


def test_backward_twice_is_an_error():
    x = t([[[[1.0]]]], grad=True)
    with Graph() as g:
        loss = E.reduce(x, "sum")
    g.backward(loss)
    with pytest.raises(GraphError, match="already ran"):
        g.backward(loss)


def test_no_graph_means_no_recording():
    x = t([[[[1.0]]]], grad=True)
    y = E.mul(x, 2.0)
    assert not y.requires_grad


def test_grads_accumulate_across_graphs():
    x = t([[[[1.0]]]], grad=True)
    for _ in range(2):
        with Graph() as g:
            loss = E.reduce(E.mul(x, 2.0), "sum")
        g.backward(loss)
    assert x.grad.reshape(()) == 4.0


def test_shared_input_used_twice_accumulates():
    x = t([[[[3.0]]]], grad=True)
    with Graph() as g:
        loss = E.reduce(E.mul(x, x), "sum")  # d(x^2)/dx = 2x
    g.backward(loss)
    assert x.grad.reshape(()) == 6.0


def _composite_case(seed=14):
    # conv -> instance_norm -> leaky_relu -> l1_norm on a small instance.
    rng = np.random.default_rng(seed)
    x_data = rng.standard_normal((1, 2, 3, 3)).astype(np.float32)
    k_data = rng.standard_normal((2, 2, 3, 3)).astype(np.float32)
    scale_data = (1.0 + 0.1 * rng.standard_normal((1, 2, 1, 1))).astype(np.float32)
    shift_data = 0.1 * rng.standard_normal((1, 2, 1, 1)).astype(np.float32)
    return x_data, k_data, scale_data, shift_data


def _composite_forward(xt, kt, st, bt):
    y = E.conv2d(xt, kt, stride=1, padding="zero", pad_size=1)
    y = E.instance_norm(y, st, bt, 1e-5)
    y = E.leaky_relu(y, 0.2)
    return E.reduce(y, "l1_norm")


def composite_forward_f64(x, k, s, b):
    """Independent float64 replica of the composite chain (loop conv)."""
    xp = np.pad(x.astype(np.float64), ((0, 0), (0, 0), (1, 1), (1, 1)))
    n, c, h, w = x.shape
    oc = k.shape[0]
    out = np.zeros((n, oc, h, w))
    for o in range(oc):
        for y in range(h):
            for xx in range(w):
                out[0, o, y, xx] = (xp[0, :, y:y + 3, xx:xx + 3] * k[o]).sum()
    mu = out.mean(axis=(2, 3), keepdims=True)
    var = ((out - mu) ** 2).mean(axis=(2, 3), keepdims=True)
    z = (out - mu) / np.sqrt(var + 1e-5) * s + b
    z = np.where(z > 0, z, 0.2 * z)
    return np.abs(z).sum()


def test_backward_composite_matches_finite_differences():
    x_data, k_data, scale_data, shift_data = _composite_case()
    # Guard: the finite-difference oracle is only valid away from the
    # leaky-relu/l1 kinks; this seed keeps a wide margin.
    pre = E.conv2d(t(x_data), t(k_data), 1, "zero", 1)
    pre = E.instance_norm(pre, t(scale_data), t(shift_data), 1e-5)
    assert np.abs(pre.data).min() > 0.05

    xt = t(x_data, grad=True)
    kt = t(k_data, grad=True)
    st = t(scale_data, grad=True)
    bt = t(shift_data, grad=True)
    with Graph() as g:
        loss = _composite_forward(xt, kt, st, bt)
    g.backward(loss)

    for holder, others in [
        (xt, lambda v: _composite_forward(v, t(k_data), t(scale_data), t(shift_data))),
        (kt, lambda v: _composite_forward(t(x_data), v, t(scale_data), t(shift_data))),
        (st, lambda v: _composite_forward(t(x_data), t(k_data), v, t(shift_data))),
        (bt, lambda v: _composite_forward(t(x_data), t(k_data), t(scale_data), v)),
    ]:
        fd = E.finite_diff_grad(others, Tensor(holder.data.copy()), step=1e-3)
        assert rel_err(fd.data, holder.grad) < 1e-3


def test_backward_composite_matches_float64_oracle():
    # Stronger check: float64 finite differences of an independent replica.
    x_data, k_data, scale_data, shift_data = _composite_case()
    xt = t(x_data, grad=True)
    kt = t(k_data, grad=True)
    st = t(scale_data, grad=True)
    bt = t(shift_data, grad=True)
    with Graph() as g:
        loss = _composite_forward(xt, kt, st, bt)
    g.backward(loss)

    args = [x_data.astype(np.float64), k_data.astype(np.float64),
            scale_data.astype(np.float64), shift_data.astype(np.float64)]
    step = 1e-6
    for pos, holder in enumerate([xt, kt, st, bt]):
        fd = np.zeros(args[pos].size)
        flat = args[pos].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = composite_forward_f64(*args)
            flat[i] = orig - step
            lo = composite_forward_f64(*args)
            flat[i] = orig
            fd[i] = (hi - lo) / (2 * step)
        assert rel_err(fd.reshape(holder.shape), holder.grad) < 1e-5


def test_forward_ops_finite_on_finite_inputs():
    rng = np.random.default_rng(23)
    x = t(rng.standard_normal((1, 3, 8, 8)).astype(np.float32) * 10)
    k = t(rng.standard_normal((2, 3, 3, 3)).astype(np.float32))
    y = E.conv2d(x, k, stride=2, pad_size=1)
    y = E.instance_norm(y, t(np.ones((1, 2, 1, 1))), t(np.zeros((1, 2, 1, 1))), 1e-5)
    y = E.tanh(y)
    assert np.all(np.isfinite(y.data))


# ---------------------------------------------------------------------------
# finite_diff_grad itself


def test_finite_diff_sum_of_squares():
    fd = E.finite_diff_grad(lambda v: E.reduce(E.mul(v, v), "sum"), t([[[[3.0]]]]))
    assert abs(fd.data.reshape(()) - 6.0) < 1e-2


def test_finite_diff_l1():
    fd = E.finite_diff_grad(lambda v: E.reduce(v, "l1_norm"), t([[[[2.0]]]]))
    assert abs(fd.data.reshape(()) - 1.0) < 1e-2


def test_finite_diff_rejects_bad_step():
    with pytest.raises(ValueError):
        E.finite_diff_grad(lambda v: E.reduce(v, "sum"), t([[[[1.0]]]]), step=0.0)


def test_backward_matches_finite_diff_on_random_small_shapes():
    # 20 seeded cases across the op set, relative error < 1e-3.
    for seed in range(20):
        rng = np.random.default_rng(100 + seed)
        x_data = rng.standard_normal((1, 2, 4, 4)).astype(np.float32)
        w_data = rng.standard_normal((1, 2, 4, 4)).astype(np.float32)

        def forward(v):
            y = E.mul(v, t(w_data))
            y = E.tanh(y)
            y = E.add(y, t(w_data))
            return E.reduce(y, "sum")

        xt = t(x_data, grad=True)
        with Graph() as g:
            loss = forward(xt)
        g.backward(loss)
        fd = E.finite_diff_grad(forward, Tensor(x_data.copy()), step=1e-3)
        assert rel_err(fd.data, xt.grad) < 1e-3
