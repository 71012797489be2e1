"""Experiment orchestration: victim capture, attack sweeps, persistence.

A run iterates (seed, checkpoint epoch, batch size) over a fixed victim set,
captures defended gradients, attacks them, scores reconstructions, and emits
per-image CSV rows, an aggregate table averaged over seeds, side-by-side
reconstruction grids, and a JSON manifest referencing every artifact.

Identical specs and seeds produce byte-identical CSV payloads; wall-clock
information lives only in the manifest.
"""

import json
import os
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import ops
from .attacks import AttackConfig, run_attack
from .datasets import load_dataset, sample_victims
from .defenses import apply_defense, parse_defense
from .errors import GradlabError, UsageError
from .layers import build_model, model_spec, precode_loss
from .metrics import attack_success_rate, build_report
from .optim import flatten_grads
from .tensor import zero_grads
from .training import TrainConfig, accuracy, train

ARTIFACTS_ENV = "GRADLAB_ARTIFACTS"


def artifacts_root(default="runs"):
    return Path(os.environ.get(ARTIFACTS_ENV, default))


def capture_victim_gradient(model, images, labels, defense=None, seed=0, include_kl=True):
    """One forward/backward at the current parameters, then the defense.

    Parameters are read, never updated. Bottleneck sampling draws from a
    stream derived from ``seed`` (pass seed=None to consume the blocks' own
    streams instead).
    """
    x = model.inputs_from_images(images)
    rng = None if seed is None else np.random.default_rng(seed)
    zero_grads(model.param_tensors)
    logits, stats = model.forward(x, mode="train", rng=rng)
    loss = ops.cross_entropy_loss(logits, labels)
    if stats and include_kl:
        loss = precode_loss(loss, stats, [b.beta for b in model.blocks])
    loss.backward()
    capture = flatten_grads(model.named_params)
    zero_grads(model.param_tensors)
    if defense is not None and defense.kind != "none":
        defense_rng = None if seed is None else np.random.default_rng([seed, 1])
        capture = apply_defense(capture, defense, rng=defense_rng)
    return capture


@dataclass
class ExperimentSpec:
    name: str
    model: str = "smlp:64"
    dataset: str = "synthetic:classes=4,per_class=16,size=8"
    defense: str = "none"
    attack: AttackConfig = field(default_factory=AttackConfig)
    victim_size: int = 16
    victim_seed: int = 0
    batch_sizes: tuple = (1,)
    checkpoint_epochs: tuple = (0,)  # training runs to max() of these
    seeds: tuple = (1,)
    train_batch_size: int = 16
    train_lr: float = 0.001
    include_kl: bool = True

    def to_dict(self):
        d = {
            "name": self.name,
            "model": self.model,
            "dataset": self.dataset,
            "defense": self.defense,
            "attack": self.attack.to_dict(),
            "victim_size": self.victim_size,
            "victim_seed": self.victim_seed,
            "batch_sizes": list(self.batch_sizes),
            "checkpoint_epochs": list(self.checkpoint_epochs),
            "seeds": list(self.seeds),
            "train_batch_size": self.train_batch_size,
            "train_lr": self.train_lr,
            "include_kl": self.include_kl,
        }
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["attack"] = AttackConfig.from_dict(d.get("attack", {}))
        for key in ("batch_sizes", "checkpoint_epochs", "seeds"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass
class RunArtifacts:
    out_dir: Path
    per_image_csv: Path
    aggregate_csv: Path
    grids: list
    manifest: Path
    failures: list


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as f:
        f.write(",".join(header) + "\n")
        for row in rows:
            f.write(",".join(_fmt(v) for v in row) + "\n")
    return path


def render_grid(originals, reconstructions, path):
    """Single PNG: originals in row 1, reconstructions in row 2."""
    from PIL import Image

    originals = [np.asarray(o, dtype=np.float64) for o in originals]
    reconstructions = [np.asarray(r, dtype=np.float64) for r in reconstructions]
    if not originals or len(originals) != len(reconstructions):
        raise UsageError("render_grid needs equal, nonempty image lists")
    h, w = originals[0].shape[0], originals[0].shape[1]
    c = originals[0].shape[2] if originals[0].ndim == 3 else 1
    pad = 1
    cols = len(originals)
    canvas = np.ones((2 * h + 3 * pad, cols * (w + pad) + pad, c))
    for j, (org, rec) in enumerate(zip(originals, reconstructions)):
        for row, img in ((0, org), (1, rec)):
            tile = np.clip(img.reshape(h, w, c), 0.0, 1.0)
            top = pad + row * (h + pad)
            left = pad + j * (w + pad)
            canvas[top : top + h, left : left + w, :] = tile
    arr = np.round(canvas * 255.0).astype(np.uint8)
    img = Image.fromarray(arr[..., 0], mode="L") if c == 1 else Image.fromarray(arr, mode="RGB")
    img.save(path)
    return path


def run_experiment(spec, out_dir=None):
    """Execute an ExperimentSpec; returns the artifact paths.

    Stage failures are recorded in the manifest with their (seed, epoch,
    batch coordinates) and the run continues with the remaining work.
    """
    out_dir = Path(out_dir) if out_dir else artifacts_root() / spec.name
    out_dir.mkdir(parents=True, exist_ok=True)
    dataset = load_dataset(spec.dataset)
    victims = sample_victims(dataset, spec.victim_size, spec.victim_seed)
    defense = parse_defense(spec.defense)
    mspec = model_spec(spec.model, dataset.image_shape, dataset.classes)

    rows = []
    grids = []
    failures = []
    acc_by = {}  # (seed, epoch) -> (train_acc, test_acc)
    for seed in spec.seeds:
        model = build_model(mspec, seed=seed)
        epochs_needed = [e for e in spec.checkpoint_epochs if e > 0]
        snapshots = {0: model.snapshot()}
        if epochs_needed:
            cfg = TrainConfig(
                epochs=max(epochs_needed),
                batch_size=spec.train_batch_size,
                learning_rate=spec.train_lr,
                seed=seed,
                checkpoint_epochs=tuple(sorted(set(epochs_needed))),
            )
            result = train(model, dataset, cfg, defense=defense)
            snapshots.update(result.checkpoints)
        for epoch in spec.checkpoint_epochs:
            model.load_snapshot(snapshots[epoch])
            eval_rng = np.random.default_rng([seed, epoch, 7])
            tr = np.asarray(dataset.train_idx)
            te = np.asarray(dataset.test_idx)
            acc_by[(seed, epoch)] = (
                accuracy(model, dataset.images[tr], dataset.labels[tr], rng=eval_rng),
                accuracy(model, dataset.images[te], dataset.labels[te], rng=eval_rng)
                if te.size
                else float("nan"),
            )
            for bs in spec.batch_sizes:
                originals, recons, vids, vlabels = [], [], [], []
                for start in range(0, victims.size, bs):
                    sel = slice(start, min(start + bs, victims.size))
                    imgs = victims.images[sel]
                    labs = victims.labels[sel]
                    sub_seed = _sub_seed(seed, epoch, bs, start)
                    try:
                        capture = capture_victim_gradient(
                            model, imgs, labs, defense=defense, seed=sub_seed,
                            include_kl=spec.include_kl,
                        )
                        result = run_attack(
                            model,
                            capture,
                            (imgs.shape[0],) + model.input_shape,
                            spec.attack,
                            seed=sub_seed,
                            labels=labs if spec.attack.labels == "known" else None,
                        )
                    except GradlabError as e:
                        failures.append(
                            {"seed": seed, "epoch": epoch, "batch_size": bs,
                             "start": start, "error": str(e)}
                        )
                        continue
                    rec_imgs = model.images_from_inputs(result.reconstructed)
                    originals.extend(list(imgs))
                    recons.extend(list(rec_imgs))
                    vids.extend(victims.indices[sel].tolist())
                    vlabels.extend(labs.tolist())
                if not originals:
                    continue
                report = build_report(
                    originals, recons, match="ssim" if bs > 1 else None
                )
                for (vid, lab, (m, p, s)) in zip(vids, vlabels, report.per_image):
                    rows.append(
                        (seed, epoch, bs, vid, lab, m, p, s, int(s >= report.threshold))
                    )
                grid_path = out_dir / f"grid_seed{seed}_epoch{epoch}_bs{bs}.png"
                render_grid(originals, [np.clip(r, 0, 1) for r in recons], grid_path)
                grids.append(grid_path)

    per_image_csv = _write_csv(
        out_dir / "per_image.csv",
        ["seed", "epoch", "batch_size", "image_id", "label", "mse", "psnr", "ssim", "success"],
        rows,
    )

    agg_rows = []
    for epoch in spec.checkpoint_epochs:
        for bs in spec.batch_sizes:
            sub = [r for r in rows if r[1] == epoch and r[2] == bs]
            if not sub:
                continue
            ssims = [r[7] for r in sub]
            accs = [acc_by[(s, epoch)] for s in spec.seeds if (s, epoch) in acc_by]
            agg_rows.append(
                (
                    epoch,
                    bs,
                    float(np.mean([r[5] for r in sub])),
                    float(np.mean([r[6] for r in sub])),
                    float(np.mean(ssims)),
                    attack_success_rate(ssims),
                    float(np.mean([a[0] for a in accs])),
                    float(np.mean([a[1] for a in accs])),
                )
            )
    aggregate_csv = _write_csv(
        out_dir / "aggregate.csv",
        ["epoch", "batch_size", "mse", "psnr", "ssim", "asr", "train_acc", "test_acc"],
        agg_rows,
    )

    manifest_path = out_dir / "manifest.json"
    manifest = {
        "spec": spec.to_dict(),
        "files": [str(per_image_csv.name), str(aggregate_csv.name)]
        + [g.name for g in grids],
        "failures": failures,
        "row_count": len(rows),
        "finished_at": time.strftime("%Y-%m-%dT%H:%M:%S"),
    }
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return RunArtifacts(
        out_dir=out_dir,
        per_image_csv=per_image_csv,
        aggregate_csv=aggregate_csv,
        grids=grids,
        manifest=manifest_path,
        failures=failures,
    )


def _sub_seed(seed, epoch, batch_size, start):
    """Stable per-(stage, image) seed so parallel and serial execution agree."""
    ss = np.random.SeedSequence(entropy=seed, spawn_key=(epoch, batch_size, start))
    return int(ss.generate_state(1)[0])


def reproduce_presets():
    """Named desk-scale sweeps; each maps to a list of ExperimentSpecs."""
    iga = AttackConfig(max_iters=1500, patience=400)
    iga_small = AttackConfig(max_iters=120, patience=60)
    cpl = AttackConfig(objective="euclidean+label_match", alpha=1.0, optimizer="adam",
                       lr=0.01, max_iters=1500, patience=400)
    data = "synthetic:classes=4,per_class=16,size=8"
    presets = {}
    presets["smoke"] = [
        ExperimentSpec(name="smoke", model="smlp:32", dataset=data, attack=iga_small,
                       victim_size=4, seeds=(1,)),
    ]
    presets["table1"] = [
        ExperimentSpec(name="table1-smlp", model="smlp:64", dataset=data, attack=iga,
                       victim_size=8, seeds=(1, 2, 3)),
        ExperimentSpec(name="table1-smlp-precode", model="smlp:64+precode(k=16,beta=0.001)",
                       dataset=data, attack=iga, victim_size=8, seeds=(1, 2, 3)),
        ExperimentSpec(name="table1-dmlp", model="dmlp:64", dataset=data, attack=iga,
                       victim_size=8, seeds=(1, 2, 3)),
        ExperimentSpec(name="table1-dmlp-precode", model="dmlp:64+precode(k=16,beta=0.001)",
                       dataset=data, attack=iga, victim_size=8, seeds=(1, 2, 3)),
    ]
    presets["table2"] = [
        ExperimentSpec(name="table2-baseline", model="smlp:64", dataset=data, attack=iga,
                       victim_size=8, seeds=(1, 2, 3)),
        ExperimentSpec(name="table2-ng3", model="smlp:64", dataset=data, attack=iga,
                       defense="ng:1e-3", victim_size=8, seeds=(1, 2, 3)),
        ExperimentSpec(name="table2-ng2", model="smlp:64", dataset=data, attack=iga,
                       defense="ng:1e-2", victim_size=8, seeds=(1, 2, 3)),
        ExperimentSpec(name="table2-gc", model="smlp:64", dataset=data, attack=iga,
                       defense="gc:0.10", victim_size=8, seeds=(1, 2, 3)),
        ExperimentSpec(name="table2-precode", model="smlp:64+precode(k=16,beta=0.001)",
                       dataset=data, attack=iga, victim_size=8, seeds=(1, 2, 3)),
    ]
    presets["cpl"] = [
        ExperimentSpec(name="cpl-baseline", model="smlp:64", dataset=data, attack=cpl,
                       victim_size=8, seeds=(1, 2, 3)),
        ExperimentSpec(name="cpl-precode", model="smlp:64+precode(k=16,beta=0.001)",
                       dataset=data, attack=cpl, victim_size=8, seeds=(1, 2, 3)),
    ]
    presets["progress"] = [
        ExperimentSpec(name="progress-baseline", model="smlp:64", dataset=data, attack=iga,
                       victim_size=4, seeds=(1,), checkpoint_epochs=(0, 1, 5),
                       batch_sizes=(1, 2)),
        ExperimentSpec(name="progress-precode", model="smlp:64+precode(k=16,beta=0.001)",
                       dataset=data, attack=iga, victim_size=4, seeds=(1,),
                       checkpoint_epochs=(0, 1, 5), batch_sizes=(1, 2)),
    ]
    return presets


def run_preset(name, out_root=None):
    presets = reproduce_presets()
    if name not in presets:
        raise UsageError(f"unknown preset {name!r}; choose from {sorted(presets)}")
    out_root = Path(out_root) if out_root else artifacts_root() / name
    artifacts = []
    for spec in presets[name]:
        artifacts.append(run_experiment(spec, out_dir=out_root / spec.name))
    return artifacts
