"""Dense 4-D float32 tensors with reverse-mode automatic differentiation.

Every tensor has shape (batch, channel, height, width), stored row-major.
Operations record onto the innermost active :class:`Graph` (a linear tape)
when one is open and at least one input requires a gradient; otherwise they
run forward-only. ``Graph.backward`` walks the tape once, in reverse, and
accumulates gradients into every tensor on the path to the loss.

A Graph must stay on one thread for its forward/backward cycle. Tensors
themselves are plain values and may move freely between threads.
"""

from __future__ import annotations

import threading
from typing import Callable, Optional, Sequence, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

Scalar = Union[int, float]


class ShapeError(ValueError):
    """Shapes inconsistent with an operation's contract."""


class GraphError(RuntimeError):
    """Invalid Graph use, e.g. a second backward() on the same graph."""


class Tensor:
    """A dense (batch, channel, height, width) float32 array.

    ``grad``, when populated by a backward pass, always matches ``data``
    in shape. Gradients accumulate across separate graphs; callers reset
    them by assigning ``grad = None``.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.ascontiguousarray(data, dtype=np.float32)
        if arr.ndim != 4:
            raise ShapeError(
                f"tensors are 4-D (batch, channel, height, width); got shape {arr.shape}"
            )
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.size != 1:
            raise ShapeError(f"item() needs a 1-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        """Copy of the values with no gradient tracking."""
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # Arithmetic sugar; scalars are plain Python numbers.
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __abs__(self):
        return absolute(self)

    def sum(self) -> "Tensor":
        return reduce(self, "sum")

    def mean(self) -> "Tensor":
        return reduce(self, "mean")

    def l1_norm(self) -> "Tensor":
        return reduce(self, "l1_norm")


def scalar(value: Scalar) -> Tensor:
    """A 1x1x1x1 constant tensor."""
    return Tensor(np.full((1, 1, 1, 1), value, dtype=np.float32))


class Node:
    """One recorded op: inputs, output, and a closure mapping the output
    gradient to per-input gradients (None where not required)."""

    __slots__ = ("op", "inputs", "output", "backward_fn")

    def __init__(self, op: str, inputs: tuple, output: Tensor,
                 backward_fn: Callable[[np.ndarray], tuple]):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


_STATE = threading.local()


def _graph_stack() -> list:
    stack = getattr(_STATE, "stack", None)
    if stack is None:
        stack = []
        _STATE.stack = stack
    return stack


def active_graph() -> Optional["Graph"]:
    stack = _graph_stack()
    return stack[-1] if stack else None


class Graph:
    """Linear tape of op records in execution order (hence topologically
    sorted). One backward pass per instance; a second call is an error."""

    def __init__(self):
        self.nodes: list[Node] = []
        self._consumed = False

    def __enter__(self) -> "Graph":
        _graph_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> bool:
        _graph_stack().pop()
        return False

    def backward(self, loss: Tensor) -> None:
        """Populate ``grad`` on every requires-grad tensor reachable from
        ``loss``. The loss must be a 1-element tensor produced under this
        graph."""
        if loss.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if self._consumed:
            raise GraphError("backward() already ran on this graph")
        self._consumed = True
        seed = np.ones((1, 1, 1, 1), dtype=np.float32)
        pending: dict[int, np.ndarray] = {id(loss): seed}
        holders: dict[int, Tensor] = {id(loss): loss}
        reached = False
        for node in reversed(self.nodes):
            out_grad = pending.pop(id(node.output), None)
            if out_grad is None:
                continue
            reached = True
            out = node.output
            if out.requires_grad:
                out.grad = out_grad if out.grad is None else out.grad + out_grad
            for inp, grad in zip(node.inputs, node.backward_fn(out_grad)):
                if grad is None:
                    continue
                key = id(inp)
                if key in pending:
                    pending[key] = pending[key] + grad
                else:
                    pending[key] = grad
                    holders[key] = inp
        if not reached and loss.requires_grad:
            raise GraphError("loss is not reachable from this graph")
        for key, grad in pending.items():
            t = holders[key]
            if t.requires_grad:
                t.grad = grad if t.grad is None else t.grad + grad


def backward(graph: Graph, loss: Tensor) -> None:
    graph.backward(loss)


def _emit(op: str, inputs: tuple, out_data: np.ndarray,
          backward_fn: Callable[[np.ndarray], tuple]) -> Tensor:
    out = Tensor(out_data)
    graph = active_graph()
    if graph is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        graph.nodes.append(Node(op, inputs, out, backward_fn))
    return out


# ---------------------------------------------------------------------------
# convolution


def _pad2d(data: np.ndarray, pad: int, mode: str) -> np.ndarray:
    if pad == 0:
        return data
    spec = ((0, 0), (0, 0), (pad, pad), (pad, pad))
    if mode == "zero":
        return np.pad(data, spec, mode="constant")
    return np.pad(data, spec, mode="reflect")


def _reflect_index(n: int, pad: int) -> np.ndarray:
    # Source index for every padded index under np.pad(mode="reflect").
    idx = np.abs(np.arange(-pad, n + pad))
    if n > 1:
        period = 2 * n - 2
        idx = idx % period
        idx = np.where(idx >= n, period - idx, idx)
    else:
        idx = np.zeros_like(idx)
    return idx


def _unpad2d_grad(gp: np.ndarray, pad: int, mode: str, hw: tuple) -> np.ndarray:
    if pad == 0:
        return gp
    h, w = hw
    if mode == "zero":
        return np.ascontiguousarray(gp[:, :, pad:pad + h, pad:pad + w])
    # Reflect: fold border contributions back onto their source pixels.
    ys = _reflect_index(h, pad)
    xs = _reflect_index(w, pad)
    out = np.zeros(gp.shape[:2] + (h, w), dtype=np.float32)
    np.add.at(out, (slice(None), slice(None), ys[:, None], xs[None, :]), gp)
    return out


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1,
           padding: str = "zero", pad_size: int = 0) -> Tensor:
    """Cross-correlate ``x`` with ``kernel`` of shape (out_ch, in_ch, kh, kw).

    Output spatial dims follow (H + 2*pad - kh) // stride + 1. Differentiable
    with respect to both the input and the kernel.
    """
    if stride < 1:
        raise ValueError(f"conv2d: stride must be >= 1, got {stride}")
    if padding not in ("zero", "reflect"):
        raise ValueError(f"conv2d: padding must be 'zero' or 'reflect', got {padding!r}")
    if pad_size < 0:
        raise ValueError(f"conv2d: pad_size must be >= 0, got {pad_size}")
    oc, ic, kh, kw = kernel.shape
    n, c, h, w = x.shape
    if c != ic:
        raise ShapeError(
            f"conv2d: input has {c} channels but kernel expects {ic} (kernel dim 1)"
        )
    xp = _pad2d(x.data, pad_size, padding)
    if xp.shape[2] < kh or xp.shape[3] < kw:
        raise ShapeError(
            f"conv2d: padded input {xp.shape[2]}x{xp.shape[3]} smaller than kernel {kh}x{kw}"
        )
    # im2col + one GEMM; the column matrix is reused by both gradient paths
    windows = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = windows.shape[2], windows.shape[3]
    cols = np.ascontiguousarray(windows.transpose(0, 2, 3, 1, 4, 5))
    cols_mat = cols.reshape(n * ho * wo, ic * kh * kw)
    k_mat = kernel.data.reshape(oc, ic * kh * kw)
    out = cols_mat @ k_mat.T
    out = np.ascontiguousarray(out.reshape(n, ho, wo, oc).transpose(0, 3, 1, 2))
    need_x, need_k = x.requires_grad, kernel.requires_grad

    def backward_fn(g: np.ndarray) -> tuple:
        gx = gk = None
        g_mat = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(n * ho * wo, oc)
        if need_k:
            gk = (g_mat.T @ cols_mat).reshape(kernel.shape)
        if need_x:
            dcols = (g_mat @ k_mat).reshape(n, ho, wo, ic, kh, kw)
            dcols = dcols.transpose(0, 3, 1, 2, 4, 5)
            gp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                        dcols[:, :, :, :, i, j]
            gx = _unpad2d_grad(gp, pad_size, padding, (h, w))
        return gx, gk

    return _emit("conv2d", (x, kernel), out, backward_fn)


def conv_transpose2d(x: Tensor, kernel: Tensor, stride: int = 1) -> Tensor:
    """Transposed convolution with kernel shape (in_ch, out_ch, kh, kw).

    The forward pass equals the input-gradient pass of ``conv2d`` with the
    same kernel and stride (and no padding); output spatial dims are
    (H - 1) * stride + kh.
    """
    if stride < 1:
        raise ValueError(f"conv_transpose2d: stride must be >= 1, got {stride}")
    ki, ko, kh, kw = kernel.shape
    n, c, h, w = x.shape
    if c != ki:
        raise ShapeError(
            f"conv_transpose2d: input has {c} channels but kernel expects {ki} (kernel dim 0)"
        )
    out = np.zeros((n, ko, (h - 1) * stride + kh, (w - 1) * stride + kw), dtype=np.float32)
    kd = kernel.data
    for i in range(kh):
        for j in range(kw):
            contrib = np.tensordot(x.data, kd[:, :, i, j], axes=([1], [0]))
            out[:, :, i:i + stride * h:stride, j:j + stride * w:stride] += \
                contrib.transpose(0, 3, 1, 2)
    need_x, need_k = x.requires_grad, kernel.requires_grad

    def backward_fn(g: np.ndarray) -> tuple:
        gx = gk = None
        gwin = sliding_window_view(g, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
        if need_x:
            gx = np.tensordot(gwin, kd, axes=([1, 4, 5], [1, 2, 3]))
            gx = np.ascontiguousarray(gx.transpose(0, 3, 1, 2))
        if need_k:
            gk = np.tensordot(x.data, gwin, axes=([0, 2, 3], [0, 2, 3]))
        return gx, gk

    return _emit("conv_transpose2d", (x, kernel), out, backward_fn)


# ---------------------------------------------------------------------------
# normalization and activations


def instance_norm(x: Tensor, scale: Tensor, shift: Tensor,
                  epsilon: float = 1e-5) -> Tensor:
    """Normalize each (batch, channel) plane to zero mean / unit variance,
    then apply the per-channel scale and shift."""
    if epsilon <= 0:
        raise ValueError(f"instance_norm: epsilon must be > 0, got {epsilon}")
    n, c, h, w = x.shape
    for name, t in (("scale", scale), ("shift", shift)):
        if t.shape != (1, c, 1, 1):
            raise ShapeError(
                f"instance_norm: {name} must have shape (1, {c}, 1, 1), got {t.shape}"
            )
    mu = x.data.mean(axis=(2, 3), keepdims=True)
    centered = x.data - mu
    var = np.mean(centered * centered, axis=(2, 3), keepdims=True)
    inv = 1.0 / np.sqrt(var + np.float32(epsilon))
    xhat = centered * inv
    out = xhat * scale.data + shift.data
    need_x, need_s, need_b = x.requires_grad, scale.requires_grad, shift.requires_grad

    def backward_fn(g: np.ndarray) -> tuple:
        gx = gs = gb = None
        if need_s:
            gs = (g * xhat).sum(axis=(0, 2, 3), keepdims=True)
        if need_b:
            gb = g.sum(axis=(0, 2, 3), keepdims=True)
        if need_x:
            gh = g * scale.data
            m1 = gh.mean(axis=(2, 3), keepdims=True)
            m2 = (gh * xhat).mean(axis=(2, 3), keepdims=True)
            gx = inv * (gh - m1 - xhat * m2)
        return gx, gs, gb

    return _emit("instance_norm", (x, scale, shift), out, backward_fn)


def relu(x: Tensor) -> Tensor:
    mask = (x.data > 0).astype(np.float32)  # subgradient 0 at the kink
    out = x.data * mask

    def backward_fn(g: np.ndarray) -> tuple:
        return (g * mask,)

    return _emit("relu", (x,), out, backward_fn)


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    if not 0.0 < slope < 1.0:
        raise ValueError(f"leaky_relu: slope must be in (0, 1), got {slope}")
    factor = np.where(x.data > 0, np.float32(1.0), np.float32(slope))
    out = x.data * factor

    def backward_fn(g: np.ndarray) -> tuple:
        return (g * factor,)

    return _emit("leaky_relu", (x,), out, backward_fn)


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)

    def backward_fn(g: np.ndarray) -> tuple:
        return (g * (1.0 - out * out),)

    return _emit("tanh", (x,), out, backward_fn)


def activation(x: Tensor, kind: str, slope: float = 0.2) -> Tensor:
    """Dispatch on kind: relu | leaky_relu | tanh."""
    if kind == "relu":
        return relu(x)
    if kind == "leaky_relu":
        return leaky_relu(x, slope)
    if kind == "tanh":
        return tanh(x)
    raise ValueError(f"activation: unknown kind {kind!r}")


# ---------------------------------------------------------------------------
# element-wise arithmetic


def _check_same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not match")


def add(a: Tensor, b: Union[Tensor, Scalar]) -> Tensor:
    if isinstance(b, Tensor):
        _check_same_shape("add", a, b)
        need_a, need_b = a.requires_grad, b.requires_grad

        def backward_fn(g: np.ndarray) -> tuple:
            return (g if need_a else None, g if need_b else None)

        return _emit("add", (a, b), a.data + b.data, backward_fn)

    def backward_scalar(g: np.ndarray) -> tuple:
        return (g,)

    return _emit("add", (a,), a.data + np.float32(b), backward_scalar)


def sub(a: Tensor, b: Union[Tensor, Scalar]) -> Tensor:
    if isinstance(b, Tensor):
        _check_same_shape("sub", a, b)
        need_a, need_b = a.requires_grad, b.requires_grad

        def backward_fn(g: np.ndarray) -> tuple:
            return (g if need_a else None, -g if need_b else None)

        return _emit("sub", (a, b), a.data - b.data, backward_fn)

    def backward_scalar(g: np.ndarray) -> tuple:
        return (g,)

    return _emit("sub", (a,), a.data - np.float32(b), backward_scalar)


def mul(a: Tensor, b: Union[Tensor, Scalar]) -> Tensor:
    if isinstance(b, Tensor):
        _check_same_shape("mul", a, b)
        need_a, need_b = a.requires_grad, b.requires_grad

        def backward_fn(g: np.ndarray) -> tuple:
            return (g * b.data if need_a else None, g * a.data if need_b else None)

        return _emit("mul", (a, b), a.data * b.data, backward_fn)

    factor = np.float32(b)

    def backward_scalar(g: np.ndarray) -> tuple:
        return (g * factor,)

    return _emit("mul", (a,), a.data * factor, backward_scalar)


def absolute(x: Tensor) -> Tensor:
    out = np.abs(x.data)

    def backward_fn(g: np.ndarray) -> tuple:
        return (g * np.sign(x.data),)  # subgradient 0 at 0

    return _emit("abs", (x,), out, backward_fn)


def sign(x: Tensor) -> Tensor:
    """Element-wise sign. Always a constant: no gradient flows through it."""
    return Tensor(np.sign(x.data))


def elementwise(a: Tensor, b: Union[Tensor, Scalar, None] = None, kind: str = "add") -> Tensor:
    """Dispatch on kind: add | sub | mul (binary), abs | sign (unary)."""
    if kind in ("add", "sub", "mul"):
        if b is None:
            raise ValueError(f"elementwise: {kind} needs a second operand")
        return {"add": add, "sub": sub, "mul": mul}[kind](a, b)
    if kind == "abs":
        return absolute(a)
    if kind == "sign":
        return sign(a)
    raise ValueError(f"elementwise: unknown kind {kind!r}")


# ---------------------------------------------------------------------------
# reductions and shape ops


def reduce(x: Tensor, kind: str) -> Tensor:
    """Full reduction to a 1x1x1x1 tensor: sum | mean | l1_norm."""
    if x.size == 0:
        raise ValueError("reduce: empty tensor")
    if kind == "sum":
        value = x.data.sum(dtype=np.float32)

        def backward_fn(g: np.ndarray) -> tuple:
            return (np.full(x.shape, g.reshape(()), dtype=np.float32),)
    elif kind == "mean":
        value = x.data.mean(dtype=np.float32)
        inv_n = np.float32(1.0 / x.size)

        def backward_fn(g: np.ndarray) -> tuple:
            return (np.full(x.shape, g.reshape(()) * inv_n, dtype=np.float32),)
    elif kind == "l1_norm":
        value = np.abs(x.data).sum(dtype=np.float32)

        def backward_fn(g: np.ndarray) -> tuple:
            return (g.reshape(()) * np.sign(x.data),)
    else:
        raise ValueError(f"reduce: unknown kind {kind!r}")
    out = np.full((1, 1, 1, 1), value, dtype=np.float32)
    return _emit(f"reduce_{kind}", (x,), out, backward_fn)


def resize_nearest(x: Tensor, target_h: int, target_w: int) -> Tensor:
    """Nearest-neighbor resample; source index is (dst * src_dim) // dst_dim."""
    if target_h < 1 or target_w < 1:
        raise ValueError(f"resize_nearest: target dims must be >= 1, got {target_h}x{target_w}")
    n, c, h, w = x.shape
    rows = (np.arange(target_h) * h) // target_h
    cols = (np.arange(target_w) * w) // target_w
    out = x.data[:, :, rows[:, None], cols[None, :]]

    def backward_fn(g: np.ndarray) -> tuple:
        gx = np.zeros_like(x.data)
        np.add.at(gx, (slice(None), slice(None), rows[:, None], cols[None, :]), g)
        return (gx,)

    return _emit("resize_nearest", (x,), out, backward_fn)


def concat_channels(tensors: Sequence[Tensor]) -> Tensor:
    """Concatenate along the channel axis."""
    if not tensors:
        raise ValueError("concat_channels: need at least one tensor")
    n, _, h, w = tensors[0].shape
    for t in tensors[1:]:
        if t.shape[0] != n or t.shape[2] != h or t.shape[3] != w:
            raise ShapeError(
                f"concat_channels: got {t.shape}, expected batch/spatial ({n}, *, {h}, {w})"
            )
    out = np.concatenate([t.data for t in tensors], axis=1)
    widths = [t.shape[1] for t in tensors]
    needs = [t.requires_grad for t in tensors]

    def backward_fn(g: np.ndarray) -> tuple:
        grads = []
        offset = 0
        for width, need in zip(widths, needs):
            grads.append(
                np.ascontiguousarray(g[:, offset:offset + width]) if need else None
            )
            offset += width
        return tuple(grads)

    return _emit("concat_channels", tuple(tensors), out, backward_fn)


def sum_channels(x: Tensor) -> Tensor:
    """Sum over the channel axis, keeping a singleton channel."""
    out = x.data.sum(axis=1, keepdims=True, dtype=np.float32)

    def backward_fn(g: np.ndarray) -> tuple:
        return (np.repeat(g, x.shape[1], axis=1),)

    return _emit("sum_channels", (x,), out, backward_fn)


def bias_add(x: Tensor, bias: Tensor) -> Tensor:
    """Add a per-channel bias of shape (1, C, 1, 1)."""
    n, c, h, w = x.shape
    if bias.shape != (1, c, 1, 1):
        raise ShapeError(f"bias_add: bias must have shape (1, {c}, 1, 1), got {bias.shape}")
    need_x, need_b = x.requires_grad, bias.requires_grad

    def backward_fn(g: np.ndarray) -> tuple:
        gb = g.sum(axis=(0, 2, 3), keepdims=True) if need_b else None
        return (g if need_x else None, gb)

    return _emit("bias_add", (x, bias), x.data + bias.data, backward_fn)


# ---------------------------------------------------------------------------
# numerical gradient oracle


def finite_diff_grad(f: Callable[[Tensor], Union[Tensor, float]], x: Tensor,
                     step: float = 1e-3) -> Tensor:
    """Central-difference gradient estimate of a scalar-valued function.

    Perturbations happen in float32 (the engine precision); the quotient is
    taken against the actually-representable step width.
    """
    if step <= 0:
        raise ValueError(f"finite_diff_grad: step must be > 0, got {step}")
    flat = x.data.reshape(-1)
    grad = np.zeros(flat.size, dtype=np.float64)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + np.float32(step)
        hi = float(flat[i])
        f_hi = _scalar_value(f(x))
        flat[i] = orig - np.float32(step)
        lo = float(flat[i])
        f_lo = _scalar_value(f(x))
        flat[i] = orig
        grad[i] = (f_hi - f_lo) / (hi - lo)
    return Tensor(grad.reshape(x.shape))


def _scalar_value(result: Union[Tensor, float]) -> float:
    if isinstance(result, Tensor):
        return result.item()
    return float(result)
