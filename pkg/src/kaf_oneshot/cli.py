"""Command-line surface: train, evaluate, export, and self-check commands.

Config precedence is flag > config file > default. Exit codes: 0 success,
1 configuration or data error, 2 training divergence, 3 failed gradient
or PSD check.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from .data import (
    Dataset,
    load_idx,
    load_omniglot_dir,
    load_pgm_dir,
    make_synthetic,
    sample_pairs,
    subsample,
)
from .errors import KafOneshotError, TrainingError
from .gradcheck import TOLERANCE, run_suite
from .kaf import KafParams, make_dictionary, psd_check
from .losses import similarity_report, write_similarity_csv
from .models import load_checkpoint, save_checkpoint
from .training import (
    TrainConfig,
    embed_dataset,
    eval_oneshot,
    eval_silhouette,
    train_matching,
    train_siamese,
    write_loss_curve,
    write_metrics,
)

DATASETS = ("mnist", "att", "omniglot", "synthetic")


class _Parser(argparse.ArgumentParser):
    # argparse exits with code 2 on usage errors; the CLI contract says 1
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _add_common(p: _Parser) -> None:
    p.add_argument("--config", default=None, help="JSON config file; flags override its values")
    p.add_argument("--dataset", choices=DATASETS, default="synthetic", help="dataset to load")
    p.add_argument("--data-dir", default=None, help="dataset root directory (mnist/att/omniglot)")
    p.add_argument("--subset", type=int, default=None, help="seeded-shuffle subset size")
    p.add_argument("--seed", type=int, default=0, help="master seed")
    p.add_argument("--classes", type=int, default=10, help="synthetic: number of classes")
    p.add_argument("--per-class", type=int, default=20, help="synthetic: images per class")


def _add_model_flags(p: _Parser) -> None:
    p.add_argument("--activation", choices=("relu", "kaf", "kaf2d"), default="relu",
                   help="activation for every activation slot")
    p.add_argument("--D", dest="kaf_d", type=int, default=20, help="KAF dictionary size")
    p.add_argument("--bound", type=float, default=3.0, help="KAF dictionary half-range")


def build_parser() -> tuple[_Parser, dict[str, _Parser]]:
    parser = _Parser(prog="kaf-oneshot", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    commands: dict[str, _Parser] = {}

    p = commands["train"] = sub.add_parser(
        "train", help="train a model and export artifacts")
    _add_common(p)
    _add_model_flags(p)
    p.add_argument("--model", choices=("siamese", "matching"), default="siamese",
                   help="training objective")
    p.add_argument("--epochs", type=int, default=10, help="training epochs")
    p.add_argument("--lr", type=float, default=0.0005, help="learning rate")
    p.add_argument("--margin", type=float, default=2.0, help="contrastive margin")
    p.add_argument("--batch", type=int, default=32, help="pairs per batch")
    p.add_argument("--optimizer", choices=("adam", "sgd"), default="adam", help="optimizer")
    p.add_argument("--clip-norm", type=float, default=5.0,
                   help="global gradient-norm clip; 0 disables")
    p.add_argument("--nway", type=int, default=5, help="matching: classes per episode")
    p.add_argument("--kshot", type=int, default=1, help="matching: supports per class")
    p.add_argument("--out", required=True, help="output directory for artifacts")

    p = commands["eval-silhouette"] = sub.add_parser(
        "eval-silhouette",
        help="silhouette score of a checkpoint's embeddings")
    _add_common(p)
    p.add_argument("--checkpoint", required=True, help="model checkpoint path")

    p = commands["eval-oneshot"] = sub.add_parser(
        "eval-oneshot",
        help="N-way K-shot accuracy of a checkpoint")
    _add_common(p)
    p.add_argument("--checkpoint", required=True, help="model checkpoint path")
    p.add_argument("--nway", type=int, default=5, help="classes per episode")
    p.add_argument("--kshot", type=int, default=1, help="supports per class")
    p.add_argument("--trials", type=int, default=1000, help="evaluation episodes")

    p = commands["embed"] = sub.add_parser(
        "embed", help="export embeddings.csv for a dataset")
    _add_common(p)
    p.add_argument("--checkpoint", required=True, help="model checkpoint path")
    p.add_argument("--out", required=True, help="output directory")

    p = commands["similarity"] = sub.add_parser(
        "similarity",
        help="export pairwise dissimilarity scores")
    _add_common(p)
    p.add_argument("--checkpoint", required=True, help="model checkpoint path")
    p.add_argument("--batch", type=int, default=32, help="number of sampled pairs")
    p.add_argument("--out", required=True, help="output directory")

    p = commands["gradcheck"] = sub.add_parser(
        "gradcheck",
        help="finite-difference check of every backward pass")
    p.add_argument("--seeds", type=int, default=20, help="random repetitions per check")
    p.add_argument("--corrupt", default=None, help=argparse.SUPPRESS)

    p = commands["psdcheck"] = sub.add_parser(
        "psdcheck",
        help="Gram-matrix eigenvalue check of the kernel dictionary")
    p.add_argument("--D", dest="d_list", default="2,5,10,20",
                   help="comma-separated dictionary sizes")
    p.add_argument("--bound", type=float, default=3.0, help="dictionary half-range")
    return parser, commands


def _apply_config_file(args, parser_defaults: dict) -> None:
    if not getattr(args, "config", None):
        return
    try:
        doc = json.loads(Path(args.config).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise KafOneshotError(f"config file {args.config}: {exc}") from exc
    if not isinstance(doc, dict):
        raise KafOneshotError(f"config file {args.config}: expected a JSON object")
    for key, value in doc.items():
        attr = key.replace("-", "_")
        if attr not in vars(args):
            raise KafOneshotError(f"config file {args.config}: unknown key {key!r}")
        # flags that were given explicitly win over file values
        if getattr(args, attr) == parser_defaults.get(attr):
            setattr(args, attr, value)


def _load_dataset(args) -> Dataset:
    if args.dataset == "synthetic":
        ds = make_synthetic(args.classes, args.per_class, h=28, seed=args.seed)
    elif args.dataset == "mnist":
        if not args.data_dir:
            raise KafOneshotError("mnist requires --data-dir with IDX files")
        root = Path(args.data_dir)
        images = _first_existing(root, ["train-images-idx3-ubyte", "train-images.idx3-ubyte",
                                        "train-images-idx3-ubyte.gz"])
        labels = _first_existing(root, ["train-labels-idx1-ubyte", "train-labels.idx1-ubyte",
                                        "train-labels-idx1-ubyte.gz"])
        ds = load_idx(images, labels, name="mnist")
    elif args.dataset == "att":
        if not args.data_dir:
            raise KafOneshotError("att requires --data-dir with per-subject PGM directories")
        ds = load_pgm_dir(args.data_dir, size=100, name="att")
    else:
        if not args.data_dir:
            raise KafOneshotError("omniglot requires --data-dir with the alphabet tree")
        ds = load_omniglot_dir(args.data_dir, split="background", name="omniglot")
    if args.subset:
        ds = subsample(ds, args.subset, seed=args.seed)
    return ds


def _first_existing(root: Path, names) -> Path:
    for name in names:
        if (root / name).exists():
            return root / name
    raise KafOneshotError(f"{root}: none of {names} exist")


def _train_config(args) -> TrainConfig:
    return TrainConfig(
        lr=args.lr,
        epochs=args.epochs,
        batch_size=args.batch,
        margin=args.margin,
        seed=args.seed,
        activation=args.activation,
        dataset=args.dataset,
        subset=args.subset,
        optimizer=args.optimizer,
        clip_norm=args.clip_norm or None,
        kaf_d=args.kaf_d,
        kaf_bound=args.bound,
        n_way=args.nway,
        k_shot=args.kshot,
    )


def cmd_train(args) -> int:
    ds = _load_dataset(args)
    if args.dataset == "mnist" and args.subset is None:
        ds = subsample(ds, 500, seed=args.seed)
    cfg = _train_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.model == "matching":
        model, record = train_matching(ds, cfg)
    else:
        model, record = train_siamese(ds, cfg)
    save_checkpoint(out / "checkpoint.kaf", model)
    write_loss_curve(out / "loss_curve.csv", record)
    write_metrics(out / "metrics.json", record)
    print(f"trained {args.model} on {ds.name} ({len(ds)} images), "
          f"final loss {record.epoch_losses[-1]:.6f}, artifacts in {out}")
    return 0


def cmd_eval_silhouette(args) -> int:
    model = load_checkpoint(args.checkpoint)
    ds = _load_dataset(args)
    score = eval_silhouette(model, ds)
    counts = ds.class_counts()
    print(f"dataset={ds.name} n={len(ds)} per_class=" +
          ",".join(f"{c}:{n}" for c, n in sorted(counts.items())))
    print(f"silhouette={score:.6f}")
    return 0


def cmd_eval_oneshot(args) -> int:
    model = load_checkpoint(args.checkpoint)
    ds = _load_dataset(args)
    acc = eval_oneshot(model, ds, args.nway, args.trials, seed=args.seed, k_shot=args.kshot)
    print(f"oneshot_accuracy={acc:.6f} nway={args.nway} kshot={args.kshot} trials={args.trials}")
    return 0


def cmd_embed(args) -> int:
    model = load_checkpoint(args.checkpoint)
    ds = _load_dataset(args)
    emb = embed_dataset(model, ds)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "embeddings.csv"
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "label"] + [f"e{i}" for i in range(emb.shape[1])])
        for i in range(emb.shape[0]):
            writer.writerow([i, int(ds.labels[i])] + [repr(float(v)) for v in emb[i]])
    print(f"wrote {path} ({emb.shape[0]} rows, {emb.shape[1]} embedding columns)")
    return 0


def cmd_similarity(args) -> int:
    model = load_checkpoint(args.checkpoint)
    ds = _load_dataset(args)
    batch = sample_pairs(ds, args.batch, args.seed)
    pairs = [(batch.x1[i], batch.x2[i]) for i in range(batch.y.size)]
    scores = similarity_report(pairs, model)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "similarity.csv"
    write_similarity_csv(path, scores)
    print(f"wrote {path} ({len(scores)} pairs)")
    return 0


def cmd_gradcheck(args) -> int:
    results = run_suite(seeds=args.seeds, corrupt=args.corrupt)
    failed = False
    for name, err in results.items():
        ok = err < TOLERANCE
        failed |= not ok
        print(f"{name:24s} max_rel_err={err:.3e} {'ok' if ok else 'FAIL'}")
    if failed:
        worst = max(results, key=results.get)
        print(f"gradcheck FAILED: worst check {worst} at {results[worst]:.3e} (tolerance {TOLERANCE})")
        return 3
    print(f"gradcheck passed ({args.seeds} seeds per check, tolerance {TOLERANCE})")
    return 0


def cmd_psdcheck(args) -> int:
    try:
        sizes = [int(tok) for tok in str(args.d_list).split(",") if tok.strip()]
    except ValueError as exc:
        raise KafOneshotError(f"--D expects comma-separated integers: {exc}") from exc
    if not sizes or any(d < 1 for d in sizes):
        raise KafOneshotError(f"--D expects positive integers, got {args.d_list!r}")
    failed = False
    for d in sizes:
        if d == 1:
            params = KafParams(np.zeros(1), np.zeros(1), 1.0, per_channel=False)
        else:
            dictionary, gamma = make_dictionary(d, args.bound)
            params = KafParams(dictionary, np.zeros(d), gamma, per_channel=False)
        lam = psd_check(params)
        ok = lam >= -1e-8
        failed |= not ok
        print(f"D={d:<4d} lambda_min={lam:+.6e} {'ok' if ok else 'FAIL'}")
    if failed:
        print("psdcheck FAILED: Gram matrix has an eigenvalue below -1e-8")
        return 3
    print("psdcheck passed")
    return 0


_COMMANDS = {
    "train": cmd_train,
    "eval-silhouette": cmd_eval_silhouette,
    "eval-oneshot": cmd_eval_oneshot,
    "embed": cmd_embed,
    "similarity": cmd_similarity,
    "gradcheck": cmd_gradcheck,
    "psdcheck": cmd_psdcheck,
}


def main(argv=None) -> int:
    parser, commands = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse help (0) or usage error (1)
        return int(exc.code or 0)
    defaults = {a.dest: a.default for a in commands[args.command]._actions}
    try:
        _apply_config_file(args, defaults)
        return _COMMANDS[args.command](args)
    except TrainingError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (KafOneshotError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def entry() -> None:  # console_scripts hook
    sys.exit(main())


if __name__ == "__main__":
    sys.exit(main())
