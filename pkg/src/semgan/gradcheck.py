"""Finite-difference verification of every differentiable operation and of
the composed training objective on a depth-2 toy network.

Relative error per input tensor is ||fd - analytic||inf normalized by the
largest gradient magnitude (floored at 0.01). Cases are sized and seeded
so the float32 finite-difference noise floor, eps * |f| / (2h), and the
kinks of relu/abs stay out of the way; the analytic side needs no such
care, only the oracle does.
"""

from __future__ import annotations

import zlib

import numpy as np

from . import engine
from .data import default_domain_spec, generate_scene
from .engine import Graph, Tensor, finite_diff_grad
from .gradfilters import LabelMap
from .losses import (
    LossWeights,
    SoftnessParams,
    cycle_loss,
    full_grad_objective,
    generator_adv_loss_ls,
    total_objective,
)
from .networks import (
    DiscriminatorConfig,
    GeneratorConfig,
    GeneratorNet,
    SemanticDiscriminatorNet,
    discriminator_receptive_dims,
    one_hot_mask,
    sd_forward,
)

TOLERANCE = 1e-3
STEP = 1e-3


def _away_from_zero(rng, shape, low=0.2, high=1.0):
    """Samples with |x| >= low: keeps finite differences off the kinks."""
    magnitude = rng.uniform(low, high, size=shape)
    signs = np.where(rng.random(shape) < 0.5, -1.0, 1.0)
    return (magnitude * signs).astype(np.float32)


def _check(forward, inputs: dict, step: float = STEP) -> float:
    """Worst relative error between backward() and finite differences,
    over every input tensor of one case."""
    tracked = {name: Tensor(arr.copy(), requires_grad=True)
               for name, arr in inputs.items()}
    with Graph() as graph:
        loss = forward(tracked)
    graph.backward(loss)
    worst = 0.0
    for name in inputs:
        def evaluate(x, name=name):
            trial = {k: Tensor(arr) for k, arr in inputs.items()}
            trial[name] = x
            return forward(trial)

        fd = finite_diff_grad(evaluate, Tensor(inputs[name].copy()), step)
        analytic = tracked[name].grad.astype(np.float64)
        numeric = fd.data.astype(np.float64)
        denom = max(np.abs(analytic).max(), np.abs(numeric).max(), 1e-2)
        worst = max(worst, float(np.abs(numeric - analytic).max() / denom))
    return worst


def _weighted_sum(out: Tensor, weights: np.ndarray) -> Tensor:
    return engine.reduce(engine.mul(out, Tensor(weights)), "sum")


def _op_cases(op_name: str, seed: int, cases: int = 20):
    worst = 0.0
    for i in range(cases):
        rng = np.random.default_rng([seed, zlib.crc32(op_name.encode()), i])
        worst = max(worst, _single_op_case(op_name, rng))
    return worst


def _small_hw(rng):
    return int(rng.integers(2, 6)), int(rng.integers(2, 6))


def _single_op_case(op_name: str, rng) -> float:
    # Magnitudes are chosen so the float32 noise floor of the fd quotient,
    # eps * |f| / (2h), stays an order of magnitude under the tolerance.
    if op_name == "conv2d":
        stride = 1 if rng.random() < 0.5 else 2
        padding = "zero" if rng.random() < 0.5 else "reflect"
        size = int(rng.integers(4, 7))
        x = 0.6 * rng.standard_normal((1, 2, size, size)).astype(np.float32)
        k = 0.6 * rng.standard_normal((2, 2, 3, 3)).astype(np.float32)
        probe = (size + 2 - 3) // stride + 1
        w = rng.standard_normal((1, 2, probe, probe)).astype(np.float32)
        return _check(
            lambda t: _weighted_sum(
                engine.conv2d(t["x"], t["k"], stride, padding, 1), w),
            {"x": x, "k": k})
    if op_name == "conv_transpose2d":
        stride = 1 if rng.random() < 0.5 else 2
        size = int(rng.integers(2, 5))
        x = 0.6 * rng.standard_normal((1, 3, size, size)).astype(np.float32)
        k = 0.6 * rng.standard_normal((3, 2, 2, 2)).astype(np.float32)
        out_h = (size - 1) * stride + 2
        w = rng.standard_normal((1, 2, out_h, out_h)).astype(np.float32)
        return _check(
            lambda t: _weighted_sum(engine.conv_transpose2d(t["x"], t["k"], stride), w),
            {"x": x, "k": k})
    if op_name == "instance_norm":
        # normalization cancels input scaling, so only a small plane keeps
        # |f| (and with it the fd noise floor) down
        x = rng.standard_normal((1, 2, 3, 3)).astype(np.float32)
        scale = (1.0 + 0.2 * rng.standard_normal((1, 2, 1, 1))).astype(np.float32)
        shift = 0.2 * rng.standard_normal((1, 2, 1, 1)).astype(np.float32)
        w = 0.5 * rng.standard_normal(x.shape).astype(np.float32)
        return _check(
            lambda t: _weighted_sum(
                engine.instance_norm(t["x"], t["scale"], t["shift"], 1e-5), w),
            {"x": x, "scale": scale, "shift": shift})
    if op_name in ("relu", "leaky_relu", "tanh"):
        x = _away_from_zero(rng, (1, 2) + _small_hw(rng))
        w = rng.standard_normal(x.shape).astype(np.float32)
        return _check(
            lambda t: _weighted_sum(engine.activation(t["x"], op_name, 0.2), w),
            {"x": x})
    if op_name in ("add", "sub", "mul"):
        shape = (1, 2) + _small_hw(rng)
        a = 0.6 * rng.standard_normal(shape).astype(np.float32)
        b = 0.6 * rng.standard_normal(shape).astype(np.float32)
        w = rng.standard_normal(shape).astype(np.float32)
        return _check(
            lambda t: _weighted_sum(engine.elementwise(t["a"], t["b"], op_name), w),
            {"a": a, "b": b})
    if op_name == "abs":
        x = _away_from_zero(rng, (1, 2) + _small_hw(rng))
        w = rng.standard_normal(x.shape).astype(np.float32)
        return _check(lambda t: _weighted_sum(engine.absolute(t["x"]), w), {"x": x})
    if op_name in ("sum", "mean"):
        # bare reduction: keep the element count tiny so the summation's
        # own rounding stays below the mean-scaled gradients
        x = 0.5 * rng.standard_normal((1, 1, 2, 2)).astype(np.float32)
        return _check(lambda t: engine.reduce(t["x"], op_name), {"x": x})
    if op_name == "l1_norm":
        x = _away_from_zero(rng, (1, 1, 2, 2), low=0.2, high=0.6)
        return _check(lambda t: engine.reduce(t["x"], "l1_norm"), {"x": x})
    if op_name == "bias_add":
        x = 0.6 * rng.standard_normal((1, 3) + _small_hw(rng)).astype(np.float32)
        b = 0.6 * rng.standard_normal((1, 3, 1, 1)).astype(np.float32)
        w = rng.standard_normal(x.shape).astype(np.float32)
        return _check(
            lambda t: _weighted_sum(engine.bias_add(t["x"], t["b"]), w),
            {"x": x, "b": b})
    if op_name == "concat_channels":
        h, w_dim = _small_hw(rng)
        a = 0.6 * rng.standard_normal((1, 2, h, w_dim)).astype(np.float32)
        b = 0.6 * rng.standard_normal((1, 3, h, w_dim)).astype(np.float32)
        w = rng.standard_normal((1, 5, h, w_dim)).astype(np.float32)
        return _check(
            lambda t: _weighted_sum(engine.concat_channels([t["a"], t["b"]]), w),
            {"a": a, "b": b})
    if op_name == "sum_channels":
        h, w_dim = _small_hw(rng)
        x = 0.6 * rng.standard_normal((1, 4, h, w_dim)).astype(np.float32)
        w = rng.standard_normal((1, 1, h, w_dim)).astype(np.float32)
        return _check(lambda t: _weighted_sum(engine.sum_channels(t["x"]), w), {"x": x})
    if op_name == "resize_nearest":
        x = 0.6 * rng.standard_normal((1, 2, 4, 4)).astype(np.float32)
        th, tw = int(rng.integers(2, 7)), int(rng.integers(2, 7))
        w = rng.standard_normal((1, 2, th, tw)).astype(np.float32)
        return _check(
            lambda t: _weighted_sum(engine.resize_nearest(t["x"], th, tw), w),
            {"x": x})
    raise ValueError(f"unknown op {op_name!r}")


OPS = ("conv2d", "conv_transpose2d", "instance_norm", "relu", "leaky_relu",
       "tanh", "add", "sub", "mul", "abs", "sum", "mean", "l1_norm",
       "bias_add", "concat_channels", "sum_channels", "resize_nearest")

COMPOSED = "total_objective_depth2"

# Toy conditions for a valid float32 finite-difference oracle on the deep
# composition. (1) tanh activations inside the toy nets: relu/leaky kinks
# otherwise sit within step reach of some probe and bias the quotient.
# (2) Small loss weights: the abs() kinks inside the cycle/gradient terms
# contribute FD bias proportional to their weight, and 0.1 pushes that
# under the tolerance while their gradients stay far above it, so a wrong
# backward in any term still fails the check. (3) iid-noise images and
# O(0.3) parameters keep every instance-norm plane's variance healthy;
# near var == 0 the normalization's curvature ~ eps^(-3/2) swamps central
# differences while the analytic gradient stays exact.
_TOY_WEIGHTS = LossWeights(lambda_c=0.1, lambda_g=0.1)
_COORDS_PER_TENSOR = 2


def _toy_net_params(rng, specs):
    params = {}
    for name, shape in specs:
        center = 1.0 if name.endswith(".scale") else 0.0
        params[name] = Tensor(
            (center + 0.3 * rng.standard_normal(shape)).astype(np.float32),
            requires_grad=True)
    return params


def _toy_generator(rng):
    # depth-2 U-Net shape: two stride-2 encoder convs, skip concat, two
    # up-convolutions, tanh output; tanh activations throughout.
    return _toy_net_params(rng, [
        ("enc1.w", (4, 3, 4, 4)), ("enc1.b", (1, 4, 1, 1)),
        ("enc2.w", (8, 4, 4, 4)), ("enc2.s", (1, 8, 1, 1)), ("enc2.h", (1, 8, 1, 1)),
        ("dec2.up", (8, 4, 2, 2)), ("dec2.mix", (4, 8, 3, 3)),
        ("dec2.s", (1, 4, 1, 1)), ("dec2.h", (1, 4, 1, 1)),
        ("dec1.up", (4, 2, 2, 2)), ("dec1.s", (1, 2, 1, 1)), ("dec1.h", (1, 2, 1, 1)),
        ("out.w", (3, 2, 3, 3)), ("out.b", (1, 3, 1, 1)),
    ])


def _toy_generator_forward(p, image):
    x = engine.bias_add(engine.conv2d(image, p["enc1.w"], 2, "zero", 1), p["enc1.b"])
    skip = engine.tanh(x)
    x = engine.conv2d(skip, p["enc2.w"], 2, "zero", 1)
    x = engine.tanh(engine.instance_norm(x, p["enc2.s"], p["enc2.h"], 1e-5))
    x = engine.conv_transpose2d(x, p["dec2.up"], 2)
    x = engine.conv2d(engine.concat_channels([x, skip]), p["dec2.mix"], 1, "zero", 1)
    x = engine.tanh(engine.instance_norm(x, p["dec2.s"], p["dec2.h"], 1e-5))
    x = engine.conv_transpose2d(x, p["dec1.up"], 2)
    x = engine.tanh(engine.instance_norm(x, p["dec1.s"], p["dec1.h"], 1e-5))
    return engine.tanh(engine.bias_add(
        engine.conv2d(x, p["out.w"], 1, "zero", 1), p["out.b"]))


def _toy_discriminator(rng, classes=2):
    return _toy_net_params(rng, [
        ("b1.w", (4, 3, 4, 4)), ("b1.b", (1, 4, 1, 1)),
        ("b2.w", (8, 4, 4, 4)), ("b2.s", (1, 8, 1, 1)), ("b2.h", (1, 8, 1, 1)),
        ("head.w", (classes, 8, 3, 3)), ("head.b", (1, classes, 1, 1)),
    ])


def _toy_discriminator_forward(p, image):
    x = engine.tanh(engine.bias_add(
        engine.conv2d(image, p["b1.w"], 2, "zero", 1), p["b1.b"]))
    x = engine.conv2d(x, p["b2.w"], 2, "zero", 1)
    x = engine.tanh(engine.instance_norm(x, p["b2.s"], p["b2.h"], 1e-5))
    return engine.bias_add(engine.conv2d(x, p["head.w"], 1, "zero", 1), p["head.b"])


def _toy_setup(case_seed: int):
    rng = np.random.default_rng([case_seed, 5])
    nets = {
        "gen_v2r": _toy_generator(rng),
        "gen_r2v": _toy_generator(rng),
        "disc_r": _toy_discriminator(rng),
        "disc_v": _toy_discriminator(rng),
    }
    v_img = Tensor(rng.uniform(-0.9, 0.9, size=(1, 3, 16, 16)).astype(np.float32))
    r_img = Tensor(rng.uniform(-0.9, 0.9, size=(1, 3, 16, 16)).astype(np.float32))
    labels_v = LabelMap(rng.integers(0, 2, size=(1, 16, 16)).astype(np.int32), 2)
    labels_r = LabelMap(rng.integers(0, 2, size=(1, 16, 16)).astype(np.int32), 2)
    return nets, v_img, r_img, labels_v, labels_r


def _toy_total(setup) -> Tensor:
    nets, v_img, r_img, labels_v, labels_r = setup
    mask_v = one_hot_mask(labels_v, 2, 4, 4)
    mask_r = one_hot_mask(labels_r, 2, 4, 4)
    fake_r = _toy_generator_forward(nets["gen_v2r"], v_img)
    cyc_v = _toy_generator_forward(nets["gen_r2v"], fake_r)
    fake_v = _toy_generator_forward(nets["gen_r2v"], r_img)
    cyc_r = _toy_generator_forward(nets["gen_v2r"], fake_v)
    score_r = engine.sum_channels(engine.mul(
        _toy_discriminator_forward(nets["disc_r"], fake_r), mask_v))
    score_v = engine.sum_channels(engine.mul(
        _toy_discriminator_forward(nets["disc_v"], fake_v), mask_r))
    adv_v2r = generator_adv_loss_ls(score_r)
    adv_r2v = generator_adv_loss_ls(score_v)
    cyc = cycle_loss(v_img, cyc_v, r_img, cyc_r)
    grad_sens = full_grad_objective(v_img, fake_r, labels_v, r_img, fake_v,
                                    labels_r, SoftnessParams(0.9, 0.1))
    return total_objective(adv_v2r, adv_r2v, cyc, grad_sens, _TOY_WEIGHTS)


# The composed case differentiates through hundreds of abs() elements, so
# any float32 step leaves kink crossings whose bias is w/2 per element
# regardless of step size. The oracle therefore evaluates a float64 twin
# of the same objective at step 2e-6: crossings become ~500x rarer and the
# per-crossing bound (lambda/N/2 at the toy weights) sits well under the
# tolerance even when a probe crosses a few at once. The float64 noise
# floor at this step is ~2e-10, far below everything else.
_COMPOSED_STEP = 2e-6

from numpy.lib.stride_tricks import sliding_window_view  # noqa: E402

from .gradfilters import boundary_mask, label_grad_pair, sobel_pair  # noqa: E402


def _conv64(x, k, stride=1, pad=0):
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(x, k.shape[2:], axis=(2, 3))[:, :, ::stride, ::stride]
    return np.tensordot(win, k, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)


def _tconv64(x, k, stride):
    ki, ko, kh, kw = k.shape
    n, c, h, w = x.shape
    out = np.zeros((n, ko, (h - 1) * stride + kh, (w - 1) * stride + kw))
    for i in range(kh):
        for j in range(kw):
            contrib = np.tensordot(x, k[:, :, i, j], axes=([1], [0]))
            out[:, :, i:i + stride * h:stride, j:j + stride * w:stride] += \
                contrib.transpose(0, 3, 1, 2)
    return out


def _in64(x, scale, shift, eps=1e-5):
    mu = x.mean(axis=(2, 3), keepdims=True)
    var = ((x - mu) ** 2).mean(axis=(2, 3), keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * scale + shift


def _gen64(p, image):
    skip = np.tanh(_conv64(image, p["enc1.w"], 2, 1) + p["enc1.b"])
    x = np.tanh(_in64(_conv64(skip, p["enc2.w"], 2, 1), p["enc2.s"], p["enc2.h"]))
    x = _tconv64(x, p["dec2.up"], 2)
    x = _conv64(np.concatenate([x, skip], axis=1), p["dec2.mix"], 1, 1)
    x = np.tanh(_in64(x, p["dec2.s"], p["dec2.h"]))
    x = np.tanh(_in64(_tconv64(x, p["dec1.up"], 2), p["dec1.s"], p["dec1.h"]))
    return np.tanh(_conv64(x, p["out.w"], 1, 1) + p["out.b"])


def _disc64(p, image):
    x = np.tanh(_conv64(image, p["b1.w"], 2, 1) + p["b1.b"])
    x = np.tanh(_in64(_conv64(x, p["b2.w"], 2, 1), p["b2.s"], p["b2.h"]))
    return _conv64(x, p["head.w"], 1, 1) + p["head.b"]


def _gm64(image):
    pair = sobel_pair()
    channels = image.shape[1]
    kx = np.zeros((channels, channels, 3, 3))
    ky = np.zeros((channels, channels, 3, 3))
    for c in range(channels):
        kx[c, c] = pair.cx
        ky[c, c] = pair.cy
    return (np.abs(_conv64(image, kx, 1, 1)).sum(axis=1, keepdims=True) +
            np.abs(_conv64(image, ky, 1, 1)).sum(axis=1, keepdims=True))


def _total64(nets64, v_img, r_img, mask_v, mask_r, bmask_v, bmask_r):
    fake_r = _gen64(nets64["gen_v2r"], v_img)
    cyc_v = _gen64(nets64["gen_r2v"], fake_r)
    fake_v = _gen64(nets64["gen_r2v"], r_img)
    cyc_r = _gen64(nets64["gen_v2r"], fake_v)
    score_r = (_disc64(nets64["disc_r"], fake_r) * mask_v).sum(axis=1, keepdims=True)
    score_v = (_disc64(nets64["disc_v"], fake_v) * mask_r).sum(axis=1, keepdims=True)
    adv = ((score_r - 1.0) ** 2).mean() + ((score_v - 1.0) ** 2).mean()
    cyc = np.abs(cyc_v - v_img).mean() + np.abs(cyc_r - r_img).mean()
    alpha, beta = 0.9, 0.1
    grad_sens = 0.0
    for image, fake, bmask in ((v_img, fake_r, bmask_v), (r_img, fake_v, bmask_r)):
        discrepancy = np.abs(_gm64(image) - _gm64(fake))
        grad_sens += (discrepancy * (alpha * bmask + beta)).mean()
    return adv + _TOY_WEIGHTS.lambda_c * cyc + _TOY_WEIGHTS.lambda_g * grad_sens


def _composed_case(case_seed: int) -> float:
    """Sampled-coordinate float64 finite differences on every parameter
    tensor of the full objective; the analytic side is the float32 engine."""
    setup = _toy_setup(case_seed)
    nets, v_img, r_img, labels_v, labels_r = setup
    with Graph() as graph:
        total = _toy_total(setup)
    graph.backward(total)

    nets64 = {net_name: {name: p.data.astype(np.float64) for name, p in net.items()}
              for net_name, net in nets.items()}
    args64 = (
        v_img.data.astype(np.float64), r_img.data.astype(np.float64),
        one_hot_mask(labels_v, 2, 4, 4).data.astype(np.float64),
        one_hot_mask(labels_r, 2, 4, 4).data.astype(np.float64),
        boundary_mask(labels_v, label_grad_pair()).data.astype(np.float64),
        boundary_mask(labels_r, label_grad_pair()).data.astype(np.float64),
    )

    tensors = [param for net in nets.values() for param in net.values()]
    scale = max(float(np.abs(p.grad).max()) for p in tensors)
    worst = 0.0
    coord_rng = np.random.default_rng([case_seed, 77])
    for net_name, net in nets.items():
        for name, param in net.items():
            analytic = param.grad.astype(np.float64)
            denom = max(np.abs(analytic).max(), 0.15 * scale, 1e-2)
            flat = nets64[net_name][name].reshape(-1)
            for _ in range(_COORDS_PER_TENSOR):
                index = int(coord_rng.integers(0, flat.size))
                original = flat[index]
                flat[index] = original + _COMPOSED_STEP
                f_hi = _total64(nets64, *args64)
                flat[index] = original - _COMPOSED_STEP
                f_lo = _total64(nets64, *args64)
                flat[index] = original
                fd = (f_hi - f_lo) / (2.0 * _COMPOSED_STEP)
                worst = max(worst, abs(fd - analytic.reshape(-1)[index]) / denom)
    return worst


def run_suite(seed: int = 0, composed_cases: int = 20) -> dict:
    """Max relative error per op family; values below TOLERANCE pass."""
    results = {}
    for op_name in OPS:
        results[op_name] = _op_cases(op_name, seed)
    worst = 0.0
    for case in range(composed_cases):
        worst = max(worst, _composed_case(seed * 1000 + case))
    results[COMPOSED] = worst
    return results


def suite_passes(results: dict) -> bool:
    return all(value < TOLERANCE for value in results.values())
