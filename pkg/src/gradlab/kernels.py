"""Convolution kernels: numba-jitted loops with a pure-numpy fallback.

The jitted path is the default because the reconstruction attacks call these
kernels thousands of times per image. Set ``GRADLAB_DISABLE_NUMBA=1`` before
import to force the numpy (im2col) implementations; both paths produce
bitwise-comparable float64 results and are cross-checked in the test suite.

Layout conventions: activations are (B, C, H, W), weights (Cout, Cin, kh, kw),
zero padding, single integer stride.
"""

import os

import numpy as np

_DISABLE = os.environ.get("GRADLAB_DISABLE_NUMBA", "").lower() in ("1", "true", "yes")

try:
    if _DISABLE:
        raise ImportError("numba disabled by GRADLAB_DISABLE_NUMBA")
    from numba import njit

    HAVE_NUMBA = True
except ImportError:
    HAVE_NUMBA = False

    def njit(*args, **kwargs):  # no-op decorator so the jitted defs stay importable
        if args and callable(args[0]):
            return args[0]
        return lambda f: f


def conv_out_size(size, kernel, stride, pad):
    return (size + 2 * pad - kernel) // stride + 1


# ---------------------------------------------------------------------------
# numpy (im2col) implementations


def _im2col(x, kh, kw, stride, pad):
    b, c, h, w = x.shape
    ho = conv_out_size(h, kh, stride, pad)
    wo = conv_out_size(w, kw, stride, pad)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = np.empty((b, c, kh, kw, ho, wo), dtype=x.dtype)
    for p in range(kh):
        for q in range(kw):
            cols[:, :, p, q] = xp[:, :, p : p + stride * ho : stride, q : q + stride * wo : stride]
    return cols.reshape(b, c * kh * kw, ho * wo)


def _col2im(cols, b, c, h, w, kh, kw, stride, pad):
    ho = conv_out_size(h, kh, stride, pad)
    wo = conv_out_size(w, kw, stride, pad)
    xp = np.zeros((b, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    cols = cols.reshape(b, c, kh, kw, ho, wo)
    for p in range(kh):
        for q in range(kw):
            xp[:, :, p : p + stride * ho : stride, q : q + stride * wo : stride] += cols[:, :, p, q]
    return xp[:, :, pad : pad + h, pad : pad + w]


def conv2d_forward_numpy(x, w, stride, pad):
    b = x.shape[0]
    co, ci, kh, kw = w.shape
    ho = conv_out_size(x.shape[2], kh, stride, pad)
    wo = conv_out_size(x.shape[3], kw, stride, pad)
    cols = _im2col(x, kh, kw, stride, pad)
    out = np.matmul(w.reshape(co, -1)[None], cols)
    return out.reshape(b, co, ho, wo)


def conv2d_input_grad_numpy(g, w, stride, pad, h, wdt):
    b = g.shape[0]
    co, ci, kh, kw = w.shape
    g2 = g.reshape(b, co, -1)
    cols = np.matmul(w.reshape(co, -1).T[None], g2)
    return _col2im(cols, b, ci, h, wdt, kh, kw, stride, pad)


def conv2d_weight_grad_numpy(x, g, stride, pad, kh, kw):
    b, ci = x.shape[0], x.shape[1]
    co = g.shape[1]
    cols = _im2col(x, kh, kw, stride, pad)
    g2 = g.reshape(b, co, -1)
    gw = np.einsum("bop,bkp->ok", g2, cols)
    return gw.reshape(co, ci, kh, kw)


# ---------------------------------------------------------------------------
# numba implementations (direct loops, no im2col buffers)


@njit(cache=True)
def conv2d_forward_numba(x, w, stride, pad):
    b, ci, h, wdt = x.shape
    co, _, kh, kw = w.shape
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wdt + 2 * pad - kw) // stride + 1
    out = np.zeros((b, co, ho, wo), dtype=np.float64)
    for n in range(b):
        for o in range(co):
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0
                    for c in range(ci):
                        for p in range(kh):
                            u = i * stride - pad + p
                            if u < 0 or u >= h:
                                continue
                            for q in range(kw):
                                v = j * stride - pad + q
                                if 0 <= v < wdt:
                                    acc += x[n, c, u, v] * w[o, c, p, q]
                    out[n, o, i, j] = acc
    return out


@njit(cache=True)
def conv2d_input_grad_numba(g, w, stride, pad, h, wdt):
    b, co, ho, wo = g.shape
    _, ci, kh, kw = w.shape
    gx = np.zeros((b, ci, h, wdt), dtype=np.float64)
    for n in range(b):
        for o in range(co):
            for i in range(ho):
                for j in range(wo):
                    gij = g[n, o, i, j]
                    for c in range(ci):
                        for p in range(kh):
                            u = i * stride - pad + p
                            if u < 0 or u >= h:
                                continue
                            for q in range(kw):
                                v = j * stride - pad + q
                                if 0 <= v < wdt:
                                    gx[n, c, u, v] += gij * w[o, c, p, q]
    return gx


@njit(cache=True)
def conv2d_weight_grad_numba(x, g, stride, pad, kh, kw):
    b, ci, h, wdt = x.shape
    co, ho, wo = g.shape[1], g.shape[2], g.shape[3]
    gw = np.zeros((co, ci, kh, kw), dtype=np.float64)
    for n in range(b):
        for o in range(co):
            for i in range(ho):
                for j in range(wo):
                    gij = g[n, o, i, j]
                    for c in range(ci):
                        for p in range(kh):
                            u = i * stride - pad + p
                            if u < 0 or u >= h:
                                continue
                            for q in range(kw):
                                v = j * stride - pad + q
                                if 0 <= v < wdt:
                                    gw[o, c, p, q] += gij * x[n, c, u, v]
    return gw


if HAVE_NUMBA:
    conv2d_forward = conv2d_forward_numba
    conv2d_input_grad = conv2d_input_grad_numba
    conv2d_weight_grad = conv2d_weight_grad_numba
else:
    conv2d_forward = conv2d_forward_numpy
    conv2d_input_grad = conv2d_input_grad_numpy
    conv2d_weight_grad = conv2d_weight_grad_numpy


def backend_name():
    return "numba" if HAVE_NUMBA else "numpy"


def warmup():
    """Trigger JIT compilation on tiny inputs so first real call is fast."""
    x = np.zeros((1, 1, 4, 4))
    w = np.zeros((1, 1, 3, 3))
    y = conv2d_forward(x, w, 1, 1)
    conv2d_input_grad(y, w, 1, 1, 4, 4)
    conv2d_weight_grad(x, y, 1, 1, 3, 3)
