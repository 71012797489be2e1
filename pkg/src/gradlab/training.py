"""Victim-model training loop and analytic label recovery."""

from dataclasses import dataclass

import numpy as np

from . import ops
from .defenses import apply_defense
from .errors import LabelRecoveryError, NumericError, TrainingError, UsageError
from .layers import precode_loss
from .optim import Adam, flatten_grads
from .tensor import zero_grads


@dataclass
class TrainConfig:
    epochs: int
    batch_size: int = 64
    learning_rate: float = 0.001
    adam_betas: tuple = (0.9, 0.999)
    seed: int = 0
    checkpoint_epochs: tuple = ()


@dataclass
class TrainResult:
    checkpoints: dict  # epoch -> parameter snapshot
    trace: list  # per-epoch dicts: epoch, loss, train_acc, test_acc


def model_loss(model, x, labels, mode="train", eps=None, rng=None):
    """Task loss (cross entropy) plus any bottleneck KL terms."""
    logits, stats = model.forward(x, mode=mode, eps=eps, rng=rng)
    loss = ops.cross_entropy_loss(logits, labels)
    if stats:
        betas = [b.beta for b in model.blocks]
        loss = precode_loss(loss, stats, betas)
    return loss, logits


def accuracy(model, images, labels, rng=None):
    preds = model.predict(images, rng=rng)
    return float(np.mean(preds == np.asarray(labels)))


def train(model, dataset, cfg, defense=None):
    """Train with Adam on cross entropy; snapshots at checkpoint epochs.

    When a defense is active, the flattened gradient is perturbed before
    every optimizer step (the optimizer consumes the perturbed gradient).
    Checkpoint epoch 0 is the untouched initialization.
    """
    if cfg.batch_size < 1 or cfg.learning_rate <= 0:
        raise UsageError("batch_size must be >= 1 and learning_rate > 0")
    train_idx = np.asarray(dataset.train_idx)
    if train_idx.size == 0:
        raise UsageError("dataset has an empty training split")
    bad = [e for e in cfg.checkpoint_epochs if not 0 <= e <= cfg.epochs]
    if bad:
        raise UsageError(f"checkpoint epochs {bad} outside [0, {cfg.epochs}]")

    ss = np.random.SeedSequence(cfg.seed)
    shuffle_rng, eval_rng, defense_ss = (
        np.random.default_rng(ss.spawn(1)[0]),
        np.random.default_rng(ss.spawn(1)[0]),
        ss.spawn(1)[0],
    )
    opt = Adam(model.param_tensors, lr=cfg.learning_rate, betas=cfg.adam_betas)
    checkpoints = {}
    trace = []
    want = set(cfg.checkpoint_epochs)
    if 0 in want:
        checkpoints[0] = model.snapshot()

    train_images = dataset.images[train_idx]
    train_labels = dataset.labels[train_idx]
    test_idx = np.asarray(dataset.test_idx)
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        order = shuffle_rng.permutation(train_idx.size)
        epoch_loss = 0.0
        nbatches = 0
        for start in range(0, train_idx.size, cfg.batch_size):
            batch = order[start : start + cfg.batch_size]
            x = model.inputs_from_images(train_images[batch])
            y = train_labels[batch]
            zero_grads(model.param_tensors)
            try:
                loss, _ = model_loss(model, x, y)
                loss.backward()
            except NumericError as e:
                raise TrainingError(f"diverged at epoch {epoch} step {step}: {e}") from e
            if defense is not None and defense.kind != "none":
                capture = flatten_grads(model.named_params)
                step_rng = np.random.default_rng([defense_ss.entropy, step])
                perturbed = apply_defense(capture, defense, rng=step_rng)
                for (_, p), (_, g) in zip(model.named_params, perturbed.per_param()):
                    p.grad = np.ascontiguousarray(g)
            opt.step()
            epoch_loss += loss.item()
            nbatches += 1
            step += 1
        row = {
            "epoch": epoch,
            "loss": epoch_loss / max(nbatches, 1),
            "train_acc": accuracy(model, train_images, train_labels, rng=eval_rng),
            "test_acc": (
                accuracy(model, dataset.images[test_idx], dataset.labels[test_idx], rng=eval_rng)
                if test_idx.size
                else float("nan")
            ),
        }
        trace.append(row)
        if epoch in want:
            checkpoints[epoch] = model.snapshot()
    return TrainResult(checkpoints=checkpoints, trace=trace)


def analytic_label_from_gradient(capture, model):
    """Recover the label of a single-sample capture from the output-layer
    weight gradient: with cross entropy after softmax the gradient row for
    the true class is the only one with negative column sum (p - y < 0 there,
    > 0 elsewhere, scaled by the nonnegative incoming activations)."""
    name = model.output_layer_name + ".w"
    seg = capture.segment(name)  # (in_features, classes)
    col_sums = seg.sum(axis=0)
    negative = np.flatnonzero(col_sums < 0)
    if negative.size != 1:
        raise LabelRecoveryError(
            f"ambiguous sign pattern: {negative.size} negative output-gradient columns"
        )
    return int(negative[0])
