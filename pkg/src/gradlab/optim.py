"""First-order optimizers and the flattened gradient capture.

Adam follows the bias-corrected update rule. L-BFGS uses the two-loop
recursion over a bounded (s, y) history with a backtracking Armijo line
search (c1 = 1e-4, halving factor 0.5, at most 20 backtracks); curvature
pairs are stored only when s.y > 0, and a failed line search skips the step
and is recorded in the trace.
"""

from dataclasses import dataclass

import numpy as np

from .errors import UsageError
from .tensor import Tensor


class Adam:
    def __init__(self, params, lr=0.001, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self, grads=None):
        """Apply one update. grads defaults to each parameter's .grad."""
        if grads is None:
            grads = [p.grad for p in self.params]
        if len(grads) != len(self.params):
            raise UsageError(f"{len(grads)} gradients for {len(self.params)} parameters")
        self.step_count += 1
        t = self.step_count
        b1, b2 = self.beta1, self.beta2
        for i, (p, g) in enumerate(zip(self.params, grads)):
            if g is None:
                raise UsageError(f"missing gradient for parameter {i}")
            g = np.asarray(g)
            self.m[i] = b1 * self.m[i] + (1 - b1) * g
            self.v[i] = b2 * self.v[i] + (1 - b2) * g * g
            m_hat = self.m[i] / (1 - b1**t)
            v_hat = self.v[i] / (1 - b2**t)
            p.data[...] = p.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


class LBFGS:
    def __init__(self, params, lr=1.0, history=10, c1=1e-4, shrink=0.5, max_backtracks=20):
        self.params = list(params)
        self.lr = lr
        self.history = history
        self.c1 = c1
        self.shrink = shrink
        self.max_backtracks = max_backtracks
        self.pairs = []  # (s, y, rho), most recent last
        self.trace = []  # per-step dicts: loss, step_size, skipped
        self._prev_x = None
        self._prev_g = None

    def _get_flat(self):
        return np.concatenate([p.data.ravel() for p in self.params])

    def _set_flat(self, x):
        off = 0
        for p in self.params:
            n = p.data.size
            p.data[...] = x[off : off + n].reshape(p.data.shape)
            off += n

    def _flat_grad(self):
        gs = []
        for i, p in enumerate(self.params):
            if p.grad is None:
                raise UsageError(f"missing gradient for parameter {i}")
            gs.append(p.grad.ravel())
        return np.concatenate(gs)

    def _direction(self, g):
        q = g.copy()
        alphas = []
        for s, y, rho in reversed(self.pairs):
            a = rho * np.dot(s, q)
            alphas.append(a)
            q -= a * y
        if self.pairs:
            s, y, _ = self.pairs[-1]
            q *= np.dot(s, y) / np.dot(y, y)
        for (s, y, rho), a in zip(self.pairs, reversed(alphas)):
            b = rho * np.dot(y, q)
            q += (a - b) * s
        return -q

    def step(self, closure):
        """One quasi-Newton step. closure() must re-evaluate the loss at the
        current parameters, populate .grad, and return the loss value."""
        f0 = float(closure())
        g0 = self._flat_grad()
        x0 = self._get_flat()
        d = self._direction(g0)
        dg = np.dot(d, g0)
        if dg >= 0:  # not a descent direction; restart from steepest descent
            d = -g0
            dg = np.dot(d, g0)
        t = self.lr
        accepted = False
        f1 = f0
        for _ in range(self.max_backtracks + 1):
            self._set_flat(x0 + t * d)
            f1 = float(closure())
            if f1 <= f0 + self.c1 * t * dg:
                accepted = True
                break
            t *= self.shrink
        if not accepted:
            self._set_flat(x0)
            closure()  # restore gradients at x0
            self.trace.append({"loss": f0, "step_size": 0.0, "skipped": True})
            self._prev_x, self._prev_g = x0, g0
            return f0
        x1 = self._get_flat()
        g1 = self._flat_grad()
        s = x1 - x0
        y = g1 - g0
        sy = np.dot(s, y)
        if sy > 1e-12:
            self.pairs.append((s, y, 1.0 / sy))
            if len(self.pairs) > self.history:
                self.pairs.pop(0)
        self.trace.append({"loss": f1, "step_size": t, "skipped": False})
        return f1


@dataclass(frozen=True)
class LayoutEntry:
    name: str
    offset: int
    size: int
    shape: tuple


@dataclass
class GradientCapture:
    """Flattened per-parameter gradients from one victim step."""

    values: np.ndarray
    layout: tuple

    @property
    def size(self):
        return self.values.size

    def copy(self):
        return GradientCapture(self.values.copy(), self.layout)

    def segment(self, name):
        for e in self.layout:
            if e.name == name:
                return self.values[e.offset : e.offset + e.size].reshape(e.shape)
        raise UsageError(f"no parameter named {name!r} in capture layout")

    def unflatten(self):
        return {
            e.name: self.values[e.offset : e.offset + e.size].reshape(e.shape)
            for e in self.layout
        }

    def per_param(self):
        for e in self.layout:
            yield e.name, self.values[e.offset : e.offset + e.size].reshape(e.shape)


def flatten_grads(named_params):
    """Flatten .grad of (name, Tensor) pairs in definition order."""
    chunks = []
    layout = []
    offset = 0
    for name, p in named_params:
        if p.grad is None:
            raise UsageError(f"parameter {name!r} has no gradient")
        flat = np.asarray(p.grad, dtype=np.float64).ravel()
        layout.append(LayoutEntry(name, offset, flat.size, tuple(p.data.shape)))
        chunks.append(flat)
        offset += flat.size
    if not chunks:
        raise UsageError("flatten_grads over an empty parameter list")
    return GradientCapture(np.concatenate(chunks), tuple(layout))


def flatten_values(named_params):
    """Flatten parameter values with the same layout as flatten_grads."""
    chunks = []
    layout = []
    offset = 0
    for name, p in named_params:
        data = p.data if isinstance(p, Tensor) else np.asarray(p)
        flat = np.asarray(data, dtype=np.float64).ravel()
        layout.append(LayoutEntry(name, offset, flat.size, tuple(np.shape(data))))
        chunks.append(flat)
        offset += flat.size
    return GradientCapture(np.concatenate(chunks), tuple(layout))
