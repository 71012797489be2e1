"""Gradient perturbation defenses applied to a capture before exchange.

Two mechanisms: additive zero-mean Gaussian noise, and compression that
prunes the smallest-magnitude coordinates to zero. Both are pure functions
of (capture, defense, rng); layout and length never change.
"""

from dataclasses import dataclass

import numpy as np

from .errors import UsageError
from .optim import GradientCapture


@dataclass
class GradientDefense:
    kind: str = "none"  # none | gaussian_noise | compression
    sigma: float = 0.0
    prune_ratio: float = 0.0
    seed: int = 0
    per_layer: bool = False  # compression budget per layout segment instead of global

    def __post_init__(self):
        if self.kind not in ("none", "gaussian_noise", "compression"):
            raise UsageError(f"unknown defense kind {self.kind!r}")
        if self.kind == "gaussian_noise" and not self.sigma > 0:
            raise UsageError("gaussian_noise requires sigma > 0")
        if self.kind == "compression" and not 0 <= self.prune_ratio < 1:
            raise UsageError("compression requires prune_ratio in [0, 1)")

    def spec_string(self):
        if self.kind == "gaussian_noise":
            return f"ng:{self.sigma:g}"
        if self.kind == "compression":
            return f"gc:{self.prune_ratio:g}"
        return "none"


def parse_defense(text, seed=0):
    """Parse CLI defense strings: none, ng:1e-2, gc:0.10."""
    text = text.strip().lower()
    if text in ("", "none"):
        return GradientDefense("none", seed=seed)
    head, _, value = text.partition(":")
    try:
        if head == "ng":
            return GradientDefense("gaussian_noise", sigma=float(value), seed=seed)
        if head == "gc":
            return GradientDefense("compression", prune_ratio=float(value), seed=seed)
    except ValueError:
        pass
    raise UsageError(f"unrecognized defense spec {text!r}")


def _prune_smallest(values, ratio):
    n = values.size
    m = int(np.floor(ratio * n))
    if m == 0:
        return values.copy()
    # stable sort on |v| breaks ties by ascending flat index
    order = np.argsort(np.abs(values), kind="stable")
    out = values.copy()
    out[order[:m]] = 0.0
    return out


def apply_defense(capture, defense, rng=None):
    """Return a new capture with the defense applied; identity for 'none'."""
    if defense is None or defense.kind == "none":
        return GradientCapture(capture.values.copy(), capture.layout)
    if defense.kind == "gaussian_noise":
        if rng is None:
            rng = np.random.default_rng(defense.seed)
        noise = rng.normal(0.0, defense.sigma, size=capture.values.shape)
        return GradientCapture(capture.values + noise, capture.layout)
    # compression
    if defense.per_layer:
        out = capture.values.copy()
        for e in capture.layout:
            seg = out[e.offset : e.offset + e.size]
            out[e.offset : e.offset + e.size] = _prune_smallest(seg, defense.prune_ratio)
        return GradientCapture(out, capture.layout)
    return GradientCapture(_prune_smallest(capture.values, defense.prune_ratio), capture.layout)
