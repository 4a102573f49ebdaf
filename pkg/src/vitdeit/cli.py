"""Command-line pipeline: synth -> balance -> split -> train -> eval/ensemble -> report.

Exit codes: 0 success, 1 domain error (diagnostic prefixed with its
category), 2 usage error. Every written artifact path is printed on its own
line. All randomness derives from ``--seed`` via per-stage sub-seeds.
"""

import argparse
import os
import sys
from dataclasses import fields, replace

import numpy as np

from .attention import METHODS, attention_map, render_overlay
from .checkpoint import load_checkpoint, read_checkpoint
from .config import derive_seed, read_key_values
from .data import (MAGNIFICATIONS, SCOPES, SUBCLASSES, load_manifest, make_split, parse_magnification,
                   read_split, save_manifest, undersample_balance, write_split)
from .deit import ModelTeacher
from .ensemble import read_probs, vote_from_probs, write_probs
from .errors import ConfigError, VitDeitError
from .imaging import load_image, load_images, write_ppm
from .metrics import evaluate, plot_roc
from .synthetic import generate_synthetic, corpus_counts, uniform_counts
from .training import TrainConfig, prepare_fine_tune, train
from .vit import TransformerConfig, init_weights, predict_proba

MODEL_KEYS = {f.name for f in fields(TransformerConfig)}


def _mag_list(text):
    try:
        return tuple(parse_magnification(t) for t in text.split(",") if t.strip())
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _emit(*paths):
    for p in paths:
        print(p)


# -- subcommands ------------------------------------------------------------


def cmd_synth(args):
    if args.skew == "corpus":
        counts = corpus_counts(total=args.total)
        counts = {k: v for k, v in counts.items() if k[1] in args.magnifications}
    else:
        counts = uniform_counts(args.per_class, args.magnifications)
    manifest = generate_synthetic(args.out, counts=counts, image_size=args.image_size,
                                  seed=derive_seed(args.seed, "synth"), separation=args.separation,
                                  noise=args.noise)
    _emit(os.path.join(args.out, "manifest.txt"), os.path.join(args.out, "images"))
    return manifest


def cmd_balance(args):
    manifest = load_manifest(args.manifest)
    if args.magnifications:
        manifest = manifest.filter(magnifications=args.magnifications)
    balanced = undersample_balance(manifest, scope=args.scope, seed=derive_seed(args.seed, "balance"))
    balanced = _rebase(balanced, args.out)
    _emit(save_manifest(balanced, args.out))


def _rebase(manifest, out_path):
    """Rewrite relative image paths so they resolve from the new manifest's directory."""
    from .data import DatasetManifest, SampleRecord

    target = os.path.dirname(os.path.abspath(out_path))
    recs = []
    for r in manifest:
        path = os.path.relpath(manifest.resolve(r), target) if manifest.root else r.path
        recs.append(SampleRecord(r.sample_id, path, r.subclass, r.magnification, r.patient_id))
    return DatasetManifest(recs, root=target)


def cmd_split(args):
    manifest = load_manifest(args.manifest)
    stratify = ("subclass", "magnification") if args.stratify == "subclass-magnification" else ("subclass",)
    plan = make_split(manifest, test_fraction=args.test_fraction, stratify_by=stratify,
                      seed=derive_seed(args.seed, "split"), patient_level=args.patient_level)
    _emit(write_split(plan, args.out))


def load_run_config(path):
    """Split a key-value file into model overrides and a TrainConfig."""
    values = read_key_values(path) if path else {}
    model = {k: v for k, v in values.items() if k in MODEL_KEYS}
    train_values = {k: v for k, v in values.items() if k not in MODEL_KEYS}
    return model, TrainConfig.from_dict(train_values)


def cmd_train(args):
    manifest = load_manifest(args.manifest)
    split = read_split(args.split)
    model_values, cfg = load_run_config(args.config)
    overrides = {"seed": derive_seed(args.seed, "train")}
    if args.epochs is not None:
        overrides["epochs"] = args.epochs
    if args.freeze_backbone:
        overrides["freeze_backbone"] = True
    cfg = replace(cfg, **overrides)
    model_values["use_distillation_token"] = args.arch == "deit"
    model_values.setdefault("num_classes", len(SUBCLASSES))
    config = TransformerConfig.from_dict(model_values)
    if args.init:
        weights = prepare_fine_tune(args.init, config.num_classes, config, seed=cfg.seed)
    else:
        weights = init_weights(config, seed=derive_seed(args.seed, "init"))
    teacher = ModelTeacher.from_checkpoint(args.teacher) if args.teacher else None
    if teacher is not None and args.arch != "deit":
        raise ConfigError("--teacher only applies to --arch deit")
    os.makedirs(args.out, exist_ok=True)
    ckpt = os.path.join(args.out, "model.ckpt")
    log = os.path.join(args.out, "metrics.log")
    train(weights, manifest, split, cfg, teacher=teacher, checkpoint_path=ckpt, metrics_path=log)
    _emit(ckpt, log)


def _checkpoint_id(path):
    """File stem, or the run directory's name for the generic ``model.ckpt``."""
    stem = os.path.splitext(os.path.basename(path))[0]
    if stem == "model":
        parent = os.path.basename(os.path.dirname(os.path.abspath(path)))
        stem = parent or stem
    return stem


def _eval_ids(manifest, split_path):
    return list(read_split(split_path).test_ids) if split_path else manifest.ids


def cmd_eval(args):
    manifest = load_manifest(args.manifest)
    ids = _eval_ids(manifest, args.split)
    config, weights = load_checkpoint(args.checkpoint)
    probs = predict_proba(load_images(manifest, config.image_size, ids), config, weights)
    model_id = args.model_id or _checkpoint_id(args.checkpoint)
    os.makedirs(args.out, exist_ok=True)
    probs_path = write_probs(os.path.join(args.out, "probs.csv"),
                             ((sid, model_id, p) for sid, p in zip(ids, probs)))
    _emit(probs_path, *_write_report(manifest, ids, probs, args.out, model_id))


def _write_report(manifest, ids, probs, out_dir, name, extra=None):
    labels = np.array([manifest[s].label for s in ids])
    report = evaluate(labels, probs, SUBCLASSES if probs.shape[1] == len(SUBCLASSES) else None,
                      records=[manifest[s] for s in ids], metadata={"model": name, **(extra or {})})
    json_path = os.path.join(out_dir, f"report_{name}.json")
    txt_path = os.path.join(out_dir, f"report_{name}.txt")
    with open(json_path, "w", encoding="utf-8") as fh:
        fh.write(report.to_json() + "\n")
    with open(txt_path, "w", encoding="utf-8") as fh:
        fh.write(report.to_text())
    png = plot_roc(report.roc, os.path.join(out_dir, f"roc_{name}.png"), title=name)
    return json_path, txt_path, png


def cmd_ensemble(args):
    if args.probs:
        table = read_probs(args.probs)
    else:
        if not (args.checkpoints and args.manifest):
            raise ConfigError("give --probs, or --checkpoints with --manifest")
        manifest = load_manifest(args.manifest)
        ids = _eval_ids(manifest, args.split)
        table = {}
        for path in args.checkpoints:
            config, weights = load_checkpoint(path)
            probs = predict_proba(load_images(manifest, config.image_size, ids), config, weights)
            mid = _checkpoint_id(path)
            if mid in table:
                mid = f"{mid}-{len(table)}"
            table[mid] = dict(zip(ids, probs))
    votes = vote_from_probs(table)
    os.makedirs(args.out, exist_ok=True)
    pred_path = os.path.join(args.out, "predictions.csv")
    with open(pred_path, "w", encoding="utf-8") as fh:
        for sid, v in votes.items():
            label = SUBCLASSES[v.predicted_index] if len(v.averaged_probs) == len(SUBCLASSES) else v.predicted_index
            fh.write(f"{sid},{v.predicted_index},{label},{int(v.tie_broken)}\n")
    rows = [(sid, mid, p) for mid, per in table.items() for sid, p in per.items()]
    rows += [(sid, "ensemble", v.averaged_probs) for sid, v in votes.items()]
    probs_path = write_probs(os.path.join(args.out, "probs.csv"), rows)
    _emit(pred_path, probs_path)


def cmd_report(args):
    manifest = load_manifest(args.manifest)
    table = read_probs(args.probs)
    if args.model_id:
        if args.model_id not in table:
            raise ConfigError(f"model {args.model_id!r} not in {args.probs}")
        table = {args.model_id: table[args.model_id]}
    os.makedirs(args.out, exist_ok=True)
    members = [m for m in table if m != "ensemble"]
    if len(members) > 1 and "ensemble" not in table:
        votes = vote_from_probs({m: table[m] for m in members})
        table["ensemble"] = {s: v.averaged_probs for s, v in votes.items()}
    outputs = []
    for mid, per in table.items():
        extra = {"members": ",".join(members)} if mid == "ensemble" else None
        ids = list(per)
        outputs += _write_report(manifest, ids, np.stack([per[s] for s in ids]), args.out, mid, extra)
        if args.by_magnification:
            for mag in sorted({manifest[s].magnification for s in ids}):
                sub = [s for s in ids if manifest[s].magnification == mag]
                outputs += _write_report(manifest, sub, np.stack([per[s] for s in sub]), args.out,
                                         f"{mid}_{mag}X", {**(extra or {}), "magnification": str(mag)})
    _emit(*outputs)


def cmd_attention(args):
    config, weights = load_checkpoint(args.checkpoint)
    image = load_image(args.image, config.image_size)
    amap = attention_map(config, weights, image, method=args.method)
    os.makedirs(args.out, exist_ok=True)
    stem = os.path.splitext(os.path.basename(args.image))[0]
    grid_path = os.path.join(args.out, f"{stem}_{args.method}.txt")
    with open(grid_path, "w", encoding="utf-8") as fh:
        fh.write(f"# method={amap.method} heads={amap.head_combination} grid={config.grid_size}\n")
        for row in amap.grid:
            fh.write(" ".join(f"{v:.6f}" for v in row) + "\n")
    overlay = write_ppm(os.path.join(args.out, f"{stem}_{args.method}.ppm"), render_overlay(image, amap))
    _emit(grid_path, overlay)


# -- parser -----------------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(prog="vitdeit", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    def add(name, func, help_text):
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--seed", type=int, default=0, help="master seed (default 0)")
        p.set_defaults(func=func)
        return p

    p = add("synth", cmd_synth, "generate the synthetic 8-class texture dataset")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--per-class", type=int, default=50, help="images per subclass per magnification")
    p.add_argument("--image-size", type=int, default=32, help="square image side in pixels")
    p.add_argument("--magnifications", type=_mag_list, default=MAGNIFICATIONS,
                   help="comma-separated magnifications (default 40,100,200,400)")
    p.add_argument("--skew", choices=("none", "corpus"), default="none",
                   help="corpus: counts proportional to the public corpus instead of uniform")
    p.add_argument("--total", type=int, default=800, help="approximate image count for --skew corpus")
    p.add_argument("--separation", type=float, default=1.0, help="class separability in [0, 1]")
    p.add_argument("--noise", type=float, default=0.04, help="pixel noise standard deviation")

    p = add("balance", cmd_balance, "undersample every subclass to the smallest one")
    p.add_argument("--manifest", required=True)
    p.add_argument("--scope", choices=SCOPES, default="independent",
                   help="dependent: balance each magnification separately")
    p.add_argument("--magnifications", type=_mag_list, default=None,
                   help="keep only these magnifications before balancing")
    p.add_argument("--out", required=True, help="output manifest path")

    p = add("split", cmd_split, "stratified train/test split")
    p.add_argument("--manifest", required=True)
    p.add_argument("--test-fraction", type=float, default=0.2)
    p.add_argument("--stratify", choices=("subclass", "subclass-magnification"), default="subclass")
    p.add_argument("--patient-level", action="store_true", help="keep each patient on one side")
    p.add_argument("--out", required=True, help="output split file")

    p = add("train", cmd_train, "train a ViT or DeiT model on a split")
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", required=True)
    p.add_argument("--arch", choices=("vit", "deit"), default="vit")
    p.add_argument("--config", help="key = value file with model and training settings")
    p.add_argument("--epochs", type=int, help="override the configured epoch count")
    p.add_argument("--teacher", help="teacher checkpoint for DeiT distillation")
    p.add_argument("--init", help="checkpoint to fine-tune from (heads re-initialised)")
    p.add_argument("--freeze-backbone", action="store_true", help="train the heads only")
    p.add_argument("--out", required=True, help="output directory")

    p = add("eval", cmd_eval, "evaluate a checkpoint and write probabilities and a report")
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", help="evaluate the test side of this split (default: all records)")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--model-id", help="identifier in the probability file")
    p.add_argument("--out", required=True)

    p = add("ensemble", cmd_ensemble, "soft-vote several models")
    p.add_argument("--probs", help="probability interchange file (sample_id,model_id,p1..pC)")
    p.add_argument("--checkpoints", nargs="+", help="checkpoints to run instead of --probs")
    p.add_argument("--manifest")
    p.add_argument("--split")
    p.add_argument("--out", required=True)

    p = add("report", cmd_report, "metrics, confusion matrix, ROC and audit from a probability file")
    p.add_argument("--probs", required=True)
    p.add_argument("--manifest", required=True, help="manifest supplying the true labels")
    p.add_argument("--model-id", help="report only this model")
    p.add_argument("--by-magnification", action="store_true",
                   help="also write one report per magnification")
    p.add_argument("--out", required=True)

    p = add("attention", cmd_attention, "class-token attention map and overlay for one image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--method", choices=METHODS, default="last-layer")
    p.add_argument("--out", required=True)
    return parser


def run(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 2
    try:
        args.func(args)
    except VitDeitError as exc:
        print(f"error[{exc.category}]: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error[io]: {exc}", file=sys.stderr)
        return 1
    return 0


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
