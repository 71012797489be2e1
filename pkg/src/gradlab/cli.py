"""Command-line interface.

Subcommands: train, attack, evaluate, reproduce, dataset. The artifacts root
defaults to ./runs and can be moved with the GRADLAB_ARTIFACTS environment
variable.
"""

import argparse
import sys
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from .attacks import attack_preset, export_trace_csv, run_attack
from .datasets import load_dataset, sample_victims, save_cifar_binary, save_idx, save_image_dir
from .defenses import parse_defense
from .errors import GradlabError, UsageError
from .experiment import (
    artifacts_root,
    capture_victim_gradient,
    render_grid,
    reproduce_presets,
    run_preset,
)
from .layers import build_model, count_params, model_spec
from .metrics import attack_success_rate, build_report
from .training import TrainConfig, train


def _int_list(text):
    return tuple(int(x) for x in text.split(",") if x != "")


def cmd_train(args):
    dataset = load_dataset(args.dataset)
    spec = model_spec(args.model, dataset.image_shape, dataset.classes)
    model = build_model(spec, seed=args.seed)
    print(f"model {spec.name}: {count_params(model)} parameters")
    checkpoints = args.checkpoints or (0, args.epochs)
    cfg = TrainConfig(
        epochs=args.epochs,
        batch_size=args.batch_size,
        learning_rate=args.lr,
        seed=args.seed,
        checkpoint_epochs=checkpoints,
    )
    defense = parse_defense(args.defense)
    result = train(model, dataset, cfg, defense=defense)
    out = Path(args.out) if args.out else artifacts_root() / "train" / spec.name
    out.mkdir(parents=True, exist_ok=True)
    for epoch, snap in result.checkpoints.items():
        model.load_snapshot(snap)
        path = out / f"epoch{epoch:04d}.ckpt"
        ckpt.save(path, model, meta={"epoch": epoch, "seed": args.seed, "defense": args.defense})
        print(f"wrote {path}")
    trace_path = out / "accuracy.csv"
    with open(trace_path, "w") as f:
        f.write("epoch,loss,train_acc,test_acc\n")
        for row in result.trace:
            f.write(f"{row['epoch']},{row['loss']!r},{row['train_acc']!r},{row['test_acc']!r}\n")
    print(f"wrote {trace_path}")
    return 0


def cmd_attack(args):
    model, meta = ckpt.load(args.checkpoint)
    dataset = load_dataset(args.dataset)
    if dataset.image_shape != tuple(model.spec.dataset_shape):
        raise UsageError(
            f"dataset images {dataset.image_shape} do not match checkpoint "
            f"{tuple(model.spec.dataset_shape)}"
        )
    victims = sample_victims(dataset, args.victims, args.victim_seed)
    cfg = attack_preset(args.attack)
    if args.max_iters:
        cfg.max_iters = args.max_iters
        cfg.patience = min(cfg.patience, args.max_iters)
    if args.patience:
        cfg.patience = args.patience
    if args.restarts:
        cfg.restarts = args.restarts
    defense = parse_defense(args.defense)
    out = Path(args.out) if args.out else artifacts_root() / "attack" / args.attack
    out.mkdir(parents=True, exist_ok=True)

    originals, recons = [], []
    rows = []
    for start in range(0, victims.size, args.batch_size):
        sel = slice(start, min(start + args.batch_size, victims.size))
        imgs, labs = victims.images[sel], victims.labels[sel]
        capture = capture_victim_gradient(model, imgs, labs, defense=defense,
                                          seed=args.seed + start)
        result = run_attack(
            model, capture, (imgs.shape[0],) + model.input_shape, cfg,
            seed=args.seed + start,
            labels=labs if cfg.labels == "known" else None,
        )
        rec = model.images_from_inputs(result.reconstructed)
        originals.extend(list(imgs))
        recons.extend(list(rec))
        export_trace_csv(result, out / f"trace_{start:04d}.csv")
        print(
            f"victims {victims.indices[sel].tolist()}: objective {result.best_objective:.3e} "
            f"after {result.iterations_used} iterations ({result.stop_reason})"
        )
    report = build_report(originals, recons, match="ssim" if args.batch_size > 1 else None)
    with open(out / "metrics.csv", "w") as f:
        f.write("image_id,mse,psnr,ssim,success\n")
        for row in report.csv_rows():
            f.write(",".join(repr(v) if isinstance(v, float) else str(v) for v in row) + "\n")
    render_grid(originals, recons, out / "grid.png")
    print(f"ASR {report.asr:.2%} (threshold {report.threshold}); artifacts in {out}")
    return 0


def cmd_evaluate(args):
    root = Path(args.results)
    csvs = sorted(root.rglob("per_image.csv"))
    if not csvs:
        raise UsageError(f"no per_image.csv files under {root}")
    for path in csvs:
        lines = path.read_text().strip().splitlines()[1:]
        ssims = [float(line.split(",")[7]) for line in lines]
        if not ssims:
            print(f"{path}: no rows")
            continue
        asr = attack_success_rate(ssims, threshold=args.threshold)
        print(f"{path}: {len(ssims)} images, mean SSIM {np.mean(ssims):.4f}, ASR {asr:.2%}")
    return 0


def cmd_reproduce(args):
    if args.list:
        for name, specs in reproduce_presets().items():
            print(f"{name}: {[s.name for s in specs]}")
        return 0
    artifacts = run_preset(args.preset, out_root=args.out)
    for a in artifacts:
        print(f"{a.out_dir}: {a.per_image_csv.name}, {a.aggregate_csv.name}, "
              f"{len(a.grids)} grids, {len(a.failures)} failures")
    return 0


def cmd_dataset(args):
    if args.action == "inspect":
        ds = load_dataset(args.source)
        print(f"name: {ds.name}")
        print(f"images: {ds.images.shape} in [{ds.images.min():.3f}, {ds.images.max():.3f}]")
        print(f"classes: {ds.classes}; per-class counts: "
              f"{np.bincount(ds.labels, minlength=ds.classes).tolist()}")
        print(f"split: {len(ds.train_idx)} train / {len(ds.test_idx)} test")
        return 0
    ds = load_dataset(args.source)
    out = Path(args.out)
    if args.format == "cifar":
        save_cifar_binary(ds, out)
    elif args.format == "idx":
        out.parent.mkdir(parents=True, exist_ok=True)
        save_idx(ds, out, out.with_name(out.stem + "-labels" + out.suffix))
    elif args.format == "dir":
        save_image_dir(ds, out)
    else:
        raise UsageError(f"unknown format {args.format!r}")
    print(f"wrote {out}")
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="gradlab",
                                description="gradient inversion laboratory")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model and write checkpoints")
    t.add_argument("--model", default="smlp:64")
    t.add_argument("--dataset", default="synthetic:classes=4,per_class=16,size=8")
    t.add_argument("--defense", default="none")
    t.add_argument("--epochs", type=int, default=20)
    t.add_argument("--batch-size", type=int, default=16)
    t.add_argument("--lr", type=float, default=0.001)
    t.add_argument("--seed", type=int, default=1)
    t.add_argument("--checkpoints", type=_int_list, default=None,
                   help="comma-separated epochs, e.g. 0,1,20")
    t.add_argument("--out", default=None)
    t.set_defaults(fn=cmd_train)

    a = sub.add_parser("attack", help="attack a checkpoint's gradients")
    a.add_argument("--checkpoint", required=True)
    a.add_argument("--dataset", default="synthetic:classes=4,per_class=16,size=8")
    a.add_argument("--attack", default="iga", choices=["iga", "cpl", "dlg", "idlg"])
    a.add_argument("--defense", default="none")
    a.add_argument("--victims", type=int, default=8)
    a.add_argument("--victim-seed", type=int, default=0)
    a.add_argument("--batch-size", type=int, default=1)
    a.add_argument("--seed", type=int, default=1)
    a.add_argument("--max-iters", type=int, default=0)
    a.add_argument("--patience", type=int, default=0)
    a.add_argument("--restarts", type=int, default=0)
    a.add_argument("--out", default=None)
    a.set_defaults(fn=cmd_attack)

    e = sub.add_parser("evaluate", help="aggregate metrics over a results directory")
    e.add_argument("--results", required=True)
    e.add_argument("--threshold", type=float, default=0.6)
    e.set_defaults(fn=cmd_evaluate)

    r = sub.add_parser("reproduce", help="run a named desk-scale preset sweep")
    r.add_argument("--preset", default="smoke")
    r.add_argument("--out", default=None)
    r.add_argument("--list", action="store_true", help="list presets and exit")
    r.set_defaults(fn=cmd_reproduce)

    d = sub.add_parser("dataset", help="inspect or convert datasets")
    d.add_argument("action", choices=["inspect", "convert"])
    d.add_argument("source")
    d.add_argument("--out", default=None)
    d.add_argument("--format", default="idx", choices=["cifar", "idx", "dir"])
    d.set_defaults(fn=cmd_dataset)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except GradlabError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
