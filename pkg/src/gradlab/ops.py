"""Differentiable operations.

Every op validates shapes, computes its float64 result, rejects non-finite
outputs, and (when recording is active and some input requires grad) pushes a
GraphNode whose backward rule is itself written in terms of these ops. That
last point is what lets the attacks differentiate an objective built from
parameter gradients: ``grad_tensors`` replays the backward rules as new
forward nodes.

``forward_op`` is a thin dispatcher over the same functions, keyed by op-kind
name.
"""

import numpy as np

from . import kernels
from .errors import DimensionError, NumericError, UsageError
from .tensor import GraphNode, Tensor, grad_enabled


def as_tensor(x):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def constant(x, name=None):
    return Tensor(np.asarray(x, dtype=np.float64), requires_grad=False, name=name)


def _finite_or_raise(kind, arr):
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"op '{kind}' produced non-finite values")


def _result(kind, data, inputs):
    """Build the output tensor; returns (out, node-or-None)."""
    _finite_or_raise(kind, data)
    record = grad_enabled() and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=record)
    if record:
        out.node = GraphNode(kind, tuple(inputs), out)
    return out


def _reduce_to(g, shape):
    """Undo numpy broadcasting: sum g down to the given shape."""
    if g.shape == shape:
        return g
    return reduce_sum_to(g, shape)


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b):
    try:
        data = a.data + b.data
    except ValueError:
        raise DimensionError(f"add: shapes {a.shape} and {b.shape} do not broadcast") from None
    out = _result("add", data, (a, b))
    if out.node:
        out.node.backward_fn = lambda g: (_reduce_to(g, a.shape), _reduce_to(g, b.shape))
    return out


def sub(a, b):
    try:
        data = a.data - b.data
    except ValueError:
        raise DimensionError(f"sub: shapes {a.shape} and {b.shape} do not broadcast") from None
    out = _result("sub", data, (a, b))
    if out.node:
        out.node.backward_fn = lambda g: (_reduce_to(g, a.shape), _reduce_to(neg(g), b.shape))
    return out


def mul(a, b):
    try:
        data = a.data * b.data
    except ValueError:
        raise DimensionError(f"mul: shapes {a.shape} and {b.shape} do not broadcast") from None
    out = _result("mul", data, (a, b))
    if out.node:
        out.node.backward_fn = lambda g: (
            _reduce_to(mul(g, b), a.shape),
            _reduce_to(mul(g, a), b.shape),
        )
    return out


def div(a, b):
    try:
        with np.errstate(divide="ignore", invalid="ignore"):
            data = a.data / b.data
    except ValueError:
        raise DimensionError(f"div: shapes {a.shape} and {b.shape} do not broadcast") from None
    out = _result("div", data, (a, b))
    if out.node:
        out.node.backward_fn = lambda g: (
            _reduce_to(div(g, b), a.shape),
            _reduce_to(neg(div(mul(g, a), mul(b, b))), b.shape),
        )
    return out


def neg(a):
    out = _result("neg", -a.data, (a,))
    if out.node:
        out.node.backward_fn = lambda g: (neg(g),)
    return out


def abs_diff(a, b):
    """|a - b| elementwise; the total-variation building block."""
    if a.shape != b.shape:
        raise DimensionError(f"abs_diff: shapes {a.shape} and {b.shape} differ")
    diff = a.data - b.data
    sign = constant(np.sign(diff))
    out = _result("abs_diff", np.abs(diff), (a, b))
    if out.node:
        out.node.backward_fn = lambda g: (mul(g, sign), neg(mul(g, sign)))
    return out


# ---------------------------------------------------------------------------
# shape manipulation


def reduce_sum_to(x, shape):
    """Sum away broadcast axes so x collapses to the target shape."""
    data = x.data
    extra = data.ndim - len(shape)
    if extra < 0:
        raise DimensionError(f"reduce_sum_to: cannot reduce {x.shape} to {shape}")
    if extra:
        data = data.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and data.shape[i] > 1)
    if axes:
        data = data.sum(axis=axes, keepdims=True)
    if data.shape != tuple(shape):
        raise DimensionError(f"reduce_sum_to: {x.shape} does not broadcast-reduce to {shape}")
    out = _result("reduce_sum_to", data, (x,))
    if out.node:
        src_shape = x.shape
        out.node.backward_fn = lambda g: (broadcast_to(g, src_shape),)
    return out


def broadcast_to(x, shape):
    try:
        data = np.ascontiguousarray(np.broadcast_to(x.data, shape))
    except ValueError:
        raise DimensionError(f"broadcast_to: {x.shape} does not broadcast to {shape}") from None
    out = _result("broadcast_to", data, (x,))
    if out.node:
        src_shape = x.shape
        out.node.backward_fn = lambda g: (reduce_sum_to(g, src_shape),)
    return out


def reshape(x, shape):
    try:
        data = x.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot view {x.shape} as {shape}") from None
    out = _result("reshape", data, (x,))
    if out.node:
        src_shape = x.shape
        out.node.backward_fn = lambda g: (reshape(g, src_shape),)
    return out


def slice_(x, key):
    """Basic slicing with a tuple of slice objects."""
    if not isinstance(key, tuple):
        key = (key,)
    if not all(isinstance(k, slice) for k in key):
        raise UsageError("slice_ accepts only slice objects")
    data = x.data[key]
    if data.size == 0:
        raise DimensionError(f"slice of {x.shape} with {key} is empty")
    out = _result("slice", data, (x,))
    if out.node:
        src_shape = x.shape
        out.node.backward_fn = lambda g: (unslice(g, src_shape, key),)
    return out


def unslice(g, shape, key):
    """Scatter g into a zero tensor of the given shape (adjoint of slice_)."""
    data = np.zeros(shape, dtype=np.float64)
    data[key] = g.data
    out = _result("unslice", data, (g,))
    if out.node:
        out.node.backward_fn = lambda up: (slice_(up, key),)
    return out


def concat(tensors, axis=0):
    tensors = list(tensors)
    if not tensors:
        raise UsageError("concat of no tensors")
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise DimensionError(
            f"concat: shapes {[t.shape for t in tensors]} do not align on axis {axis}"
        ) from None
    out = _result("concat", data, tuple(tensors))
    if out.node:
        sizes = [t.shape[axis] for t in tensors]
        ndim = tensors[0].ndim

        def bw(g):
            grads = []
            start = 0
            for n in sizes:
                key = tuple(
                    slice(start, start + n) if d == (axis % ndim) else slice(None)
                    for d in range(ndim)
                )
                grads.append(slice_(g, key))
                start += n
            return tuple(grads)

        out.node.backward_fn = bw
    return out


# ---------------------------------------------------------------------------
# reductions


def sum_(x, axis=None, keepdims=False):
    data = x.data.sum(axis=axis, keepdims=keepdims)
    out = _result("sum", data, (x,))
    if out.node:
        src_shape = x.shape

        def bw(g):
            if axis is not None and not keepdims:
                kd = list(src_shape)
                kd[axis] = 1
                g = reshape(g, tuple(kd))
            return (broadcast_to(g, src_shape),)

        out.node.backward_fn = bw
    return out


def mean(x, axis=None, keepdims=False):
    data = x.data.mean(axis=axis, keepdims=keepdims)
    out = _result("mean", data, (x,))
    if out.node:
        src_shape = x.shape
        n = x.data.size if axis is None else src_shape[axis]
        inv = constant(1.0 / n)

        def bw(g):
            if axis is not None and not keepdims:
                kd = list(src_shape)
                kd[axis] = 1
                g = reshape(g, tuple(kd))
            return (mul(broadcast_to(g, src_shape), inv),)

        out.node.backward_fn = bw
    return out


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b):
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul expects 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: inner dims differ for {a.shape} @ {b.shape}")
    out = _result("matmul", a.data @ b.data, (a, b))
    if out.node:
        out.node.backward_fn = lambda g: (matmul(g, transpose(b)), matmul(transpose(a), g))
    return out


def transpose(a):
    if a.ndim != 2:
        raise DimensionError(f"transpose expects a 2-d tensor, got {a.shape}")
    out = _result("transpose", a.data.T.copy(), (a,))
    if out.node:
        out.node.backward_fn = lambda g: (transpose(g),)
    return out


# ---------------------------------------------------------------------------
# nonlinearities


def relu(x):
    out = _result("relu", np.maximum(x.data, 0.0), (x,))
    if out.node:
        mask = constant((x.data > 0).astype(np.float64))
        out.node.backward_fn = lambda g: (mul(g, mask),)
    return out


def sigmoid(x):
    z = x.data
    data = np.empty_like(z)
    pos = z >= 0
    data[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    data[~pos] = ez / (1.0 + ez)
    out = _result("sigmoid", data, (x,))
    if out.node:
        one = constant(1.0)
        out.node.backward_fn = lambda g: (mul(g, mul(out, sub(one, out))),)
    return out


def exp(x):
    with np.errstate(over="ignore"):
        data = np.exp(x.data)
    out = _result("exp", data, (x,))
    if out.node:
        out.node.backward_fn = lambda g: (mul(g, out),)
    return out


def log(x):
    with np.errstate(divide="ignore", invalid="ignore"):
        data = np.log(x.data)
    out = _result("log", data, (x,))
    if out.node:
        out.node.backward_fn = lambda g: (div(g, x),)
    return out


def sqrt(x):
    with np.errstate(invalid="ignore"):
        data = np.sqrt(x.data)
    out = _result("sqrt", data, (x,))
    if out.node:
        two = constant(2.0)
        out.node.backward_fn = lambda g: (div(g, mul(two, out)),)
    return out


def softmax(x, axis=-1):
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    data = e / e.sum(axis=axis, keepdims=True)
    out = _result("softmax", data, (x,))
    if out.node:
        out.node.backward_fn = lambda g: (
            mul(out, sub(g, sum_(mul(g, out), axis=axis, keepdims=True))),
        )
    return out


def log_softmax(x, axis=-1):
    z = x.data - x.data.max(axis=axis, keepdims=True)
    data = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = _result("log_softmax", data, (x,))
    if out.node:
        out.node.backward_fn = lambda g: (
            sub(g, mul(exp(out), sum_(g, axis=axis, keepdims=True))),
        )
    return out


# ---------------------------------------------------------------------------
# convolution (kernels module provides numba or numpy implementations)


def _check_conv_shapes(kind, x, w, stride, padding):
    if x.ndim != 4 or w.ndim != 4:
        raise DimensionError(f"{kind} expects (B,C,H,W) input and (O,C,kh,kw) weight")
    if x.shape[1] != w.shape[1]:
        raise DimensionError(f"{kind}: channel mismatch {x.shape} vs {w.shape}")
    ho = kernels.conv_out_size(x.shape[2], w.shape[2], stride, padding)
    wo = kernels.conv_out_size(x.shape[3], w.shape[3], stride, padding)
    if ho < 1 or wo < 1:
        raise DimensionError(
            f"{kind}: kernel {w.shape[2:]} stride {stride} pad {padding} "
            f"does not fit input {x.shape[2:]}"
        )


def conv2d(x, w, stride=1, padding=0):
    _check_conv_shapes("conv2d", x, w, stride, padding)
    data = kernels.conv2d_forward(
        np.ascontiguousarray(x.data), np.ascontiguousarray(w.data), stride, padding
    )
    out = _result("conv2d", data, (x, w))
    if out.node:
        h, wdt = x.shape[2], x.shape[3]
        kh, kw = w.shape[2], w.shape[3]
        out.node.backward_fn = lambda g: (
            conv2d_input_grad(g, w, stride, padding, (h, wdt)),
            conv2d_weight_grad(x, g, stride, padding, (kh, kw)),
        )
    return out


def conv2d_input_grad(g, w, stride, padding, in_hw):
    h, wdt = in_hw
    data = kernels.conv2d_input_grad(
        np.ascontiguousarray(g.data), np.ascontiguousarray(w.data), stride, padding, h, wdt
    )
    out = _result("conv2d_input_grad", data, (g, w))
    if out.node:
        kh, kw = w.shape[2], w.shape[3]
        out.node.backward_fn = lambda up: (
            conv2d(up, w, stride, padding),
            conv2d_weight_grad(up, g, stride, padding, (kh, kw)),
        )
    return out


def conv2d_weight_grad(x, g, stride, padding, k_hw):
    kh, kw = k_hw
    data = kernels.conv2d_weight_grad(
        np.ascontiguousarray(x.data), np.ascontiguousarray(g.data), stride, padding, kh, kw
    )
    out = _result("conv2d_weight_grad", data, (x, g))
    if out.node:
        h, wdt = x.shape[2], x.shape[3]
        out.node.backward_fn = lambda up: (
            conv2d_input_grad(g, up, stride, padding, (h, wdt)),
            conv2d(x, up, stride, padding),
        )
    return out


# ---------------------------------------------------------------------------
# losses


def onehot(labels, classes):
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.size and (labels.min() < 0 or labels.max() >= classes):
        raise UsageError(f"label out of range [0, {classes}): {labels}")
    eye = np.zeros((labels.size, classes), dtype=np.float64)
    eye[np.arange(labels.size), labels] = 1.0
    return constant(eye)


def cross_entropy_loss(logits, labels):
    """Mean over the batch of -log softmax(logits)[label]."""
    if logits.ndim != 2:
        raise DimensionError(f"cross_entropy_loss expects (batch, classes), got {logits.shape}")
    y = onehot(labels, logits.shape[1])
    if y.shape[0] != logits.shape[0]:
        raise UsageError(f"{y.shape[0]} labels for batch of {logits.shape[0]}")
    ls = log_softmax(logits, axis=-1)
    return neg(mean(sum_(mul(ls, y), axis=1)))


def soft_cross_entropy(logits, soft_labels):
    """Cross entropy against a probability-vector target (joint label recovery)."""
    ls = log_softmax(logits, axis=-1)
    return neg(mean(sum_(mul(ls, soft_labels), axis=1)))


# ---------------------------------------------------------------------------
# dispatcher

_REGISTRY = {
    "matmul": matmul,
    "add": add,
    "mul": mul,
    "conv2d": conv2d,
    "relu": relu,
    "sigmoid": sigmoid,
    "softmax": softmax,
    "log": log,
    "exp": exp,
    "sum": sum_,
    "mean": mean,
    "reshape": reshape,
    "slice": slice_,
    "concat": concat,
    "abs-diff": abs_diff,
    # extra kinds used internally
    "sub": sub,
    "div": div,
    "neg": neg,
    "sqrt": sqrt,
    "transpose": transpose,
    "log_softmax": log_softmax,
    "broadcast_to": broadcast_to,
    "reduce_sum_to": reduce_sum_to,
}


def forward_op(kind, inputs, **attrs):
    """Dispatch an op by kind name over a list of input tensors."""
    fn = _REGISTRY.get(kind)
    if fn is None:
        raise UsageError(f"unknown op kind {kind!r}")
    if kind == "concat":
        return fn(inputs, **attrs)
    return fn(*inputs, **attrs)
