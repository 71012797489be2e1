"""Benchmark the convolution kernels: numba loops vs numpy im2col.

Run:  python benchmarks/bench_conv.py [repeats]

Shapes mirror the convnet preset (stride-2, 5x5, 12 channels) at the desk
scale and at CIFAR scale, plus the gradient kernels the attacks lean on.
"""

import sys
import time

import numpy as np

from gradlab import kernels
from gradlab.kernels import (
    conv2d_forward_numba,
    conv2d_forward_numpy,
    conv2d_input_grad_numba,
    conv2d_input_grad_numpy,
    conv2d_weight_grad_numba,
    conv2d_weight_grad_numpy,
    conv_out_size,
)

CASES = [
    ("desk 8x8", 1, 1, 8, 8, 12, 5, 2, 2),
    ("desk 16x16", 4, 12, 16, 16, 12, 5, 2, 2),
    ("cifar 32x32", 8, 3, 32, 32, 12, 5, 2, 2),
]


def _time(fn, repeats):
    fn()  # warmup / JIT
    t0 = time.perf_counter()
    for _ in range(repeats):
        fn()
    return (time.perf_counter() - t0) / repeats


def main():
    repeats = int(sys.argv[1]) if len(sys.argv) > 1 else 50
    rng = np.random.default_rng(0)
    print(f"default backend: {kernels.backend_name()}; {repeats} repeats per cell")
    header = f"{'case':<14} {'kernel':<12} {'numba [us]':>12} {'numpy [us]':>12} {'speedup':>9}"
    print(header)
    print("-" * len(header))
    for name, b, ci, h, w, co, k, stride, pad in CASES:
        x = rng.standard_normal((b, ci, h, w))
        wt = rng.standard_normal((co, ci, k, k))
        ho, wo = conv_out_size(h, k, stride, pad), conv_out_size(w, k, stride, pad)
        g = rng.standard_normal((b, co, ho, wo))
        rows = [
            ("forward",
             lambda: conv2d_forward_numba(x, wt, stride, pad),
             lambda: conv2d_forward_numpy(x, wt, stride, pad)),
            ("input-grad",
             lambda: conv2d_input_grad_numba(g, wt, stride, pad, h, w),
             lambda: conv2d_input_grad_numpy(g, wt, stride, pad, h, w)),
            ("weight-grad",
             lambda: conv2d_weight_grad_numba(x, g, stride, pad, k, k),
             lambda: conv2d_weight_grad_numpy(x, g, stride, pad, k, k)),
        ]
        for kind, f_nb, f_np in rows:
            out_nb, out_np = f_nb(), f_np()
            assert np.allclose(out_nb, out_np, rtol=1e-10, atol=1e-10)
            t_nb = _time(f_nb, repeats) * 1e6
            t_np = _time(f_np, repeats) * 1e6
            print(f"{name:<14} {kind:<12} {t_nb:>12.1f} {t_np:>12.1f} {t_np / t_nb:>8.1f}x")


if __name__ == "__main__":
    main()
