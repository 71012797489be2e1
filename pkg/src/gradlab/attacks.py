"""Optimization-based gradient inversion attacks.

Given a frozen model snapshot and a victim gradient capture, a dummy batch is
initialized from a standard Gaussian and optimized so that its gradient
matches the capture. Objectives:

  euclidean               squared distance between captures (DLG / iDLG)
  euclidean+label_match   euclidean plus alpha * ||softmax(F(x')) - y||^2 (CPL)
  cosine+tv               cosine distance over the whole flattened capture
                          plus alpha * total variation of the dummy (IGA)

Labels are either known (the evaluation protocol here), recovered
analytically from the capture (batch size 1), or optimized jointly as a
softmax over logits (original DLG).
"""

import math
from dataclasses import dataclass, asdict

import numpy as np

from . import ops
from .errors import AttackError, NumericError, UsageError
from .layers import precode_loss
from .optim import Adam, LBFGS
from .tensor import Tensor, backward, grad_tensors, zero_grads
from .training import analytic_label_from_gradient

OBJECTIVES = ("euclidean", "euclidean+label_match", "cosine+tv")


@dataclass
class AttackConfig:
    objective: str = "cosine+tv"
    alpha: float = 1e-6
    optimizer: str = "adam"  # adam | lbfgs
    lr: float = 0.01
    lr_decay: bool = True
    milestones: tuple = ()  # empty means 3/8, 5/8, 7/8 of max_iters when decaying
    max_iters: int = 3000
    patience: int = 600
    restarts: int = 0
    dummy_init: str = "gaussian"
    labels: str = "known"  # known | analytic | joint
    cosine_scope: str = "whole"  # whole | per-layer-mean
    include_kl: bool = True
    converge_tol: float = 1e-10

    def __post_init__(self):
        if self.objective not in OBJECTIVES:
            raise UsageError(f"unknown objective {self.objective!r}")
        if self.optimizer not in ("adam", "lbfgs"):
            raise UsageError(f"unknown optimizer {self.optimizer!r}")
        if self.labels not in ("known", "analytic", "joint"):
            raise UsageError(f"unknown label policy {self.labels!r}")
        if self.dummy_init != "gaussian":
            raise UsageError(f"unknown dummy init {self.dummy_init!r}")
        if not 0 < self.patience <= self.max_iters:
            raise UsageError("patience must satisfy 0 < patience <= max_iters")
        if self.alpha < 0:
            raise UsageError("alpha must be nonnegative")

    def to_dict(self):
        d = asdict(self)
        d["milestones"] = list(self.milestones)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "milestones" in d:
            d["milestones"] = tuple(d["milestones"])
        return cls(**d)


@dataclass
class AttackResult:
    reconstructed: np.ndarray  # model-input layout, victim shape
    recovered_labels: np.ndarray
    loss_trace: list  # (iteration, objective, lr) for the winning restart
    iterations_used: int
    stop_reason: str  # max_iters | patience | converged
    best_objective: float
    restart_index: int = 0


def attack_preset(name):
    """Default configurations for the four named attacks."""
    name = name.lower()
    if name == "iga":
        return AttackConfig(objective="cosine+tv", alpha=1e-6, optimizer="adam", lr=0.01,
                            lr_decay=True, labels="known")
    if name == "cpl":
        return AttackConfig(objective="euclidean+label_match", alpha=1.0, optimizer="adam",
                            lr=0.01, lr_decay=True, labels="known")
    if name == "idlg":
        return AttackConfig(objective="euclidean", optimizer="lbfgs", lr=1.0,
                            lr_decay=False, labels="analytic")
    if name == "dlg":
        return AttackConfig(objective="euclidean", optimizer="lbfgs", lr=1.0,
                            lr_decay=False, labels="joint")
    raise UsageError(f"unknown attack preset {name!r}")


def step_lr_schedule(base_lr, iteration, milestones):
    """Step decay: one factor of 0.1 per milestone at or before iteration."""
    passed = sum(1 for m in milestones if iteration >= m)
    return base_lr * 0.1**passed


def default_milestones(max_iters):
    return (int(max_iters * 3 / 8), int(max_iters * 5 / 8), int(max_iters * 7 / 8))


def total_variation(x, image_shape=None, channels_last=False):
    """Anisotropic TV: sum of |vertical diffs| + |horizontal diffs| over the
    batch. Expects (B, C, H, W), or (B, H, W, C) with channels_last; flat
    (B, F) inputs are reshaped with the provided per-sample image_shape."""
    if x.ndim == 2:
        if image_shape is None:
            raise UsageError("flat input needs image_shape for total variation")
        x = ops.reshape(x, (x.shape[0],) + tuple(image_shape))
    if x.ndim != 4:
        raise UsageError(f"total_variation expects a 4-d image batch, got {x.shape}")
    hax, wax = (1, 2) if channels_last else (2, 3)
    h, w = x.shape[hax], x.shape[wax]
    if h < 2 or w < 2:
        raise UsageError(f"total_variation needs H, W >= 2, got {(h, w)}")

    def spatial_slice(axis, sl):
        key = [slice(None)] * 4
        key[axis] = sl
        return ops.slice_(x, tuple(key))

    down = ops.abs_diff(spatial_slice(hax, slice(1, h)), spatial_slice(hax, slice(0, h - 1)))
    right = ops.abs_diff(spatial_slice(wax, slice(1, w)), spatial_slice(wax, slice(0, w - 1)))
    return ops.add(ops.sum_(down), ops.sum_(right))


def _check_alignment(model, capture):
    sizes = [p.data.size for p in model.param_tensors]
    if [e.size for e in capture.layout] != sizes:
        raise UsageError("capture layout does not match the model's parameters")


def euclidean_gap(dummy_segments, victim_segments):
    """Sum over parameters of ||g_dummy - g_victim||^2."""
    total = None
    for g, v in zip(dummy_segments, victim_segments):
        term = ops.sum_(ops.mul(ops.sub(g, v), ops.sub(g, v)))
        total = term if total is None else ops.add(total, term)
    return total


def cosine_distance(dummy_segments, victim_segments, scope="whole"):
    """1 - cos(g_dummy, g_victim), over the whole flattened capture or
    averaged per layer."""
    if scope == "whole":
        dot = norm_d = norm_v = None
        for g, v in zip(dummy_segments, victim_segments):
            d_term = ops.sum_(ops.mul(g, v))
            n_term = ops.sum_(ops.mul(g, g))
            v_term = ops.sum_(ops.mul(v, v))
            dot = d_term if dot is None else ops.add(dot, d_term)
            norm_d = n_term if norm_d is None else ops.add(norm_d, n_term)
            norm_v = v_term if norm_v is None else ops.add(norm_v, v_term)
        cos = ops.div(dot, ops.mul(ops.sqrt(norm_d), ops.sqrt(norm_v)))
        return ops.sub(ops.constant(1.0), cos)
    if scope == "per-layer-mean":
        terms = []
        for g, v in zip(dummy_segments, victim_segments):
            cos = ops.div(
                ops.sum_(ops.mul(g, v)),
                ops.mul(ops.sqrt(ops.sum_(ops.mul(g, g))), ops.sqrt(ops.sum_(ops.mul(v, v)))),
            )
            terms.append(ops.sub(ops.constant(1.0), cos))
        total = terms[0]
        for t in terms[1:]:
            total = ops.add(total, t)
        return ops.mul(total, ops.constant(1.0 / len(terms)))
    raise UsageError(f"unknown cosine scope {scope!r}")


def attack_objective(kind, model, capture, x_prime, y, alpha,
                     cosine_scope="whole", include_kl=True, eps=None, rng=None):
    """Build the scalar attack objective for the current dummy batch.

    y is an integer label array, or a Tensor of label logits when labels are
    optimized jointly. Model parameters stay frozen; the objective is a
    function of x_prime (and y when joint).
    """
    if kind not in OBJECTIVES:
        raise UsageError(f"unknown objective {kind!r}")
    _check_alignment(model, capture)
    logits, stats = model.forward(x_prime, mode="attack", eps=eps, rng=rng)
    if isinstance(y, Tensor):
        loss = ops.soft_cross_entropy(logits, ops.softmax(y))
    else:
        loss = ops.cross_entropy_loss(logits, y)
    if stats and include_kl:
        loss = precode_loss(loss, stats, [b.beta for b in model.blocks])
    dummy_segments = grad_tensors(loss, model.param_tensors)
    victim_segments = [
        ops.constant(arr) for _, arr in capture.per_param()
    ]

    if kind.startswith("euclidean"):
        obj = euclidean_gap(dummy_segments, victim_segments)
        if kind == "euclidean+label_match":
            if isinstance(y, Tensor):
                raise UsageError("label_match objective needs fixed labels")
            target = ops.onehot(y, model.classes)
            gap = ops.sub(ops.softmax(logits), target)
            obj = ops.add(obj, ops.mul(ops.constant(float(alpha)), ops.sum_(ops.mul(gap, gap))))
        return obj

    obj = cosine_distance(dummy_segments, victim_segments, scope=cosine_scope)
    if alpha:
        if model.input_kind == "image":
            tv = total_variation(x_prime)
        else:
            h, w, c = model.spec.dataset_shape
            tv = total_variation(x_prime, image_shape=(h, w, c), channels_last=True)
        obj = ops.add(obj, ops.mul(ops.constant(float(alpha)), tv))
    return obj


def recover_labels(capture, model, policy, truth=None, batch_size=1):
    """known -> pass-through, analytic -> recovered from the capture,
    joint -> None (labels become an optimization variable)."""
    if policy == "known":
        if truth is None:
            raise UsageError("label policy 'known' requires ground-truth labels")
        return np.asarray(truth, dtype=np.int64).reshape(-1)
    if policy == "analytic":
        if batch_size != 1:
            raise UsageError("analytic label recovery supports batch size 1 only")
        return np.array([analytic_label_from_gradient(capture, model)], dtype=np.int64)
    if policy == "joint":
        return None
    raise UsageError(f"unknown label policy {policy!r}")


def _run_restart(model, capture, shape, cfg, rng, fixed_labels):
    x = Tensor(rng.standard_normal(shape), requires_grad=True)
    variables = [x]
    y_logits = None
    if cfg.labels == "joint":
        y_logits = Tensor(rng.standard_normal((shape[0], model.classes)), requires_grad=True)
        variables.append(y_logits)
        y = y_logits
    else:
        y = fixed_labels

    milestones = cfg.milestones or default_milestones(cfg.max_iters)
    euclidean_kind = cfg.objective.startswith("euclidean")

    def objective():
        return attack_objective(
            cfg.objective, model, capture, x, y, cfg.alpha,
            cosine_scope=cfg.cosine_scope, include_kl=cfg.include_kl,
        )

    best = math.inf
    best_x = x.data.copy()
    best_y = None if y_logits is None else y_logits.data.copy()
    trace = []
    stall = 0
    stop_reason = "max_iters"
    iterations = 0

    if cfg.optimizer == "adam":
        opt = Adam(variables, lr=cfg.lr)
        for it in range(cfg.max_iters):
            lr = step_lr_schedule(cfg.lr, it, milestones) if cfg.lr_decay else cfg.lr
            opt.lr = lr
            zero_grads(variables)
            obj = objective()
            backward(obj)
            val = obj.item()
            trace.append((it, val, lr))
            iterations = it + 1
            if val < best:
                best = val
                best_x = x.data.copy()
                if y_logits is not None:
                    best_y = y_logits.data.copy()
                stall = 0
            else:
                stall += 1
            if euclidean_kind and val < cfg.converge_tol:
                stop_reason = "converged"
                break
            if stall >= cfg.patience:
                stop_reason = "patience"
                break
            opt.step()
    else:
        opt = LBFGS(variables, lr=cfg.lr)

        def closure():
            zero_grads(variables)
            obj = objective()
            backward(obj)
            return obj.item()

        for it in range(cfg.max_iters):
            val = opt.step(closure)
            trace.append((it, val, cfg.lr))
            iterations = it + 1
            if val < best:
                best = val
                best_x = x.data.copy()
                if y_logits is not None:
                    best_y = y_logits.data.copy()
                stall = 0
            else:
                stall += 1
            if euclidean_kind and val < cfg.converge_tol:
                stop_reason = "converged"
                break
            if stall >= cfg.patience:
                stop_reason = "patience"
                break

    return best, best_x, best_y, trace, iterations, stop_reason


def run_attack(model, capture, victim_shape, cfg, seed, labels=None):
    """Run the configured attack with restarts; the restart with the lowest
    best objective wins. (seed, cfg) fully determine the result."""
    victim_shape = tuple(victim_shape)
    if victim_shape[1:] != model.input_shape:
        raise UsageError(
            f"victim shape {victim_shape} does not match model input {model.input_shape}"
        )
    _check_alignment(model, capture)
    fixed_labels = None
    if cfg.labels != "joint":
        fixed_labels = recover_labels(
            capture, model, cfg.labels, truth=labels, batch_size=victim_shape[0]
        )
        if fixed_labels.size != victim_shape[0]:
            raise UsageError(f"{fixed_labels.size} labels for victim batch of {victim_shape[0]}")
    model.reseed_blocks(seed)

    outcomes = []
    failures = []
    for r in range(cfg.restarts + 1):
        rng = np.random.default_rng([seed, r])
        try:
            outcomes.append((r,) + _run_restart(model, capture, victim_shape, cfg, rng, fixed_labels))
        except NumericError as e:
            failures.append((r, str(e)))
    if not outcomes:
        raise AttackError(f"all {cfg.restarts + 1} restarts failed: {failures[-1][1]}")

    r, best, best_x, best_y, trace, iterations, stop_reason = min(outcomes, key=lambda o: o[1])
    if cfg.labels == "joint":
        recovered = np.argmax(best_y, axis=1).astype(np.int64)
    else:
        recovered = fixed_labels.copy()
    return AttackResult(
        reconstructed=best_x,
        recovered_labels=recovered,
        loss_trace=trace,
        iterations_used=iterations,
        stop_reason=stop_reason,
        best_objective=best,
        restart_index=r,
    )


def export_trace_csv(result, path):
    """Write the winning restart's loss trace as iteration,objective,lr."""
    with open(path, "w", newline="") as f:
        f.write("iteration,objective,lr\n")
        for it, obj, lr in result.loss_trace:
            f.write(f"{it},{obj!r},{lr!r}\n")
    return path
