"""Command-line entry points: ``safecf <subcommand> ...``.

Exit codes: 0 success, 1 usage error (bad flags, bad config, invalid target),
2 runtime failure (missing artifacts, unreadable data, non-finite losses).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np
import torch

from safecf.errors import (
    ConfigError,
    DataError,
    InvalidTargetError,
    NumericalError,
    SafeCFError,
)

logger = logging.getLogger("safecf")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _read_config(path: str | None) -> dict:
    if not path:
        return {}
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"config file not found: {p}")
    try:
        values = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {p} is not valid JSON: {exc}") from exc
    if not isinstance(values, dict):
        raise ConfigError(f"config file {p} must hold a JSON object")
    return values


def _require(path: str | Path, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"{what} not found: {p}")
    return p


def _load_split(path: str):
    from safecf.data import load_images, load_manifest

    return load_images(load_manifest(_require(path, "manifest")))


def _load_greybox(path: str):
    from safecf.greybox import load_greybox

    _require(Path(path).with_suffix(".json"), "grey-box descriptor")
    return load_greybox(path)


def _parse_size(values):
    return None if values is None else (int(values[0]), int(values[1]))


# --- toydata ----------------------------------------------------------------


def cmd_toydata(args) -> int:
    from safecf.data import generate_toy_dataset

    size = _parse_size(args.size) or (64, 64)
    manifest = generate_toy_dataset(
        args.n, args.seed, args.out, split=args.split, size=size, radius_range=(args.radius_min, args.radius_max)
    )
    counts = np.bincount([e.label for e in manifest.entries], minlength=2)
    print(f"wrote {len(manifest)} images to {manifest.root} (STOP {counts[0]}, GO {counts[1]})")
    return 0


# --- train-greybox ----------------------------------------------------------


def cmd_train_greybox(args) -> int:
    from safecf.data import background_images
    from safecf.greybox import GreyBoxTrainConfig, save_greybox, train_greybox

    values = _read_config(args.config)
    known = {f.name for f in fields(GreyBoxTrainConfig)}
    unknown = sorted(set(values) - known - {"negatives"})
    if unknown:
        raise ConfigError(f"unknown grey-box config keys: {unknown}")
    negatives_n = values.pop("negatives", 1000)
    for key, flag in (("epochs", args.epochs), ("learning_rate", args.lr), ("batch_size", args.batch_size), ("seed", args.seed)):
        if flag is not None:
            values[key] = flag
    if args.negatives is not None:
        negatives_n = args.negatives
    for key in ("channels", "strides"):
        if key in values:
            values[key] = tuple(values[key])
    config = GreyBoxTrainConfig(**values)

    train = _load_split(args.train)
    val = _load_split(args.val) if args.val else None
    if train.labels is None:
        raise ConfigError("training manifest has no labels")
    _, _, h, w = train.images.shape
    negatives = background_images(negatives_n, config.seed + 10_000, (h, w)) if negatives_n else None
    model, history = train_greybox(
        train.images,
        train.labels,
        config,
        val.images if val else None,
        val.labels if val else None,
        num_classes=len(train.class_names),
        negatives=negatives,
    )
    path = save_greybox(model, args.out)
    summary = {
        "checkpoint": str(path),
        "train_accuracy": history.train_accuracy,
        "val_accuracy": history.val_accuracy,
        "train_loss": history.train_loss,
    }
    path.with_name(path.stem + "_history.json").write_text(json.dumps(summary, indent=2))
    final = history.val_accuracy[-1] if history.val_accuracy else float("nan")
    print(f"saved grey-box to {path} (val accuracy {final:.4f})")
    return 0


# --- train-explainer --------------------------------------------------------

_TRAIN_FLAGS = {
    "epochs": "epochs",
    "lr": "learning_rate",
    "batch_size": "batch_size",
    "seed": "seed",
    "n_critic": "n_critic",
    "saliency_mode": "saliency_mode",
    "checkpoint_interval": "checkpoint_interval",
    "sample_interval": "sample_interval",
}
_WEIGHT_FLAGS = ("lambda_cls", "lambda_gp", "lambda_rec", "lambda_fuse")


def training_config(file_values: dict, args) -> "TrainingConfig":
    """Merge built-in defaults, config-file values and flags, in increasing precedence."""
    from safecf.trainer import TrainingConfig

    values = dict(file_values)
    weights = dict(values.get("loss_weights") or {})
    for flag, key in _TRAIN_FLAGS.items():
        if getattr(args, flag, None) is not None:
            values[key] = getattr(args, flag)
    for key in _WEIGHT_FLAGS:
        if getattr(args, key, None) is not None:
            weights[key] = getattr(args, key)
    if weights:
        values["loss_weights"] = weights
    return TrainingConfig.from_dict(values)


def cmd_train_explainer(args) -> int:
    from safecf.trainer import train

    config = training_config(_read_config(args.config), args)
    greybox = _load_greybox(args.greybox)
    data = _load_split(args.data)
    h, w, _ = greybox.input_shape
    if (h, w) != config.image_size:
        raise ConfigError(f"image_size {config.image_size} does not match the grey-box input {(h, w)}")
    result = train(config, data, greybox, output_dir=args.out, max_steps=args.max_steps)
    print(
        f"trained for {result.state.step} steps ({result.state.g_updates} generator updates); "
        f"checkpoints in {Path(args.out) / 'final'}"
    )
    return 0


# --- explain ----------------------------------------------------------------


def _parse_label(value: str, class_names: list[str]) -> int:
    upper = [c.upper() for c in class_names]
    if value.upper() in upper:
        return upper.index(value.upper())
    try:
        label = int(value)
    except ValueError:
        raise ConfigError(f"unknown label {value!r}; expected one of {class_names} or an index") from None
    if not 0 <= label < len(class_names):
        raise ConfigError(f"label {label} outside [0, {len(class_names)})")
    return label


def cmd_explain(args) -> int:
    from safecf.data import CLASS_NAMES, grid_row, read_image, save_grid, to_uint8
    from safecf.greybox import predict_labels
    from safecf.models import generate, load_network
    from safecf.saliency import grad_cam
    from PIL import Image

    greybox = _load_greybox(args.greybox)
    generator = load_network(_require(Path(args.generator).with_suffix(".json"), "generator descriptor").with_suffix(""))
    h, w, _ = greybox.input_shape
    names = list(CLASS_NAMES) if greybox.num_classes == len(CLASS_NAMES) else [str(i) for i in range(greybox.num_classes)]
    targets = [_parse_label(t, names) for t in args.target]
    if len(targets) == 1:
        targets = targets * len(args.images)
    if len(targets) != len(args.images):
        raise ConfigError("give one --target for all images or one per image")

    x = torch.from_numpy(np.stack([read_image(_require(p, "image"), (h, w)) for p in args.images])).permute(0, 3, 1, 2)
    y = predict_labels(greybox, x)
    y_target = torch.tensor(targets)
    same = (y == y_target).nonzero().flatten().tolist()
    if same:
        bad = ", ".join(f"{args.images[i]} is already {names[int(y[i])]}" for i in same)
        raise InvalidTargetError(f"target label must differ from the current prediction: {bad}")

    s = grad_cam(greybox, x, y)
    with torch.no_grad():
        fake = generate(generator, x, s, y_target).image
    achieved = predict_labels(greybox, fake)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    q = x.permute(0, 2, 3, 1).numpy()
    f = fake.permute(0, 2, 3, 1).numpy()
    records = []
    for i, src in enumerate(args.images):
        stem = Path(src).stem
        Image.fromarray(to_uint8(f[i])).save(out / f"{stem}_cf.png")
        save_grid([grid_row(q[i], s[i].numpy(), f[i])], out / f"{stem}_grid.png")
        records.append(
            {"image": str(src), "label": names[int(y[i])], "target": names[targets[i]], "achieved": names[int(achieved[i])]}
        )
        print(f"{src}: {records[-1]['label']} -> {records[-1]['achieved']} (target {records[-1]['target']})")
    (out / "explanations.json").write_text(json.dumps(records, indent=2))
    return 0


# --- evaluate ---------------------------------------------------------------


def _parse_seeds(text: str) -> list[int]:
    try:
        seeds = [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise ConfigError(f"--seeds must be a comma-separated list of integers, got {text!r}") from None
    if not seeds:
        raise ConfigError("--seeds is empty")
    return seeds


def cmd_evaluate(args) -> int:
    from safecf.metrics import GeneratorExplainer, IdentityExplainer, evaluate, mean_reports, write_pairs_csv, write_report
    from safecf.models import load_network

    if bool(args.identity) == bool(args.generator):
        raise ConfigError("give exactly one of --generator or --identity")
    seeds = _parse_seeds(args.seeds)
    greybox = _load_greybox(args.greybox)
    data = _load_split(args.data)
    images, ids = data.images, data.ids
    if args.max_images:
        images, ids = images[: args.max_images], ids[: args.max_images]

    per_seed = {}
    for seed in seeds:
        if args.identity:
            explainer = IdentityExplainer()
        else:
            # "{seed}" in the path selects one checkpoint per training seed
            path = Path(args.generator.format(seed=seed)).with_suffix("")
            explainer = GeneratorExplainer(load_network(_require(path.with_suffix(".json"), "generator descriptor").with_suffix("")))
        ev = evaluate(explainer, greybox, images, seed=seed, ids=ids, tau=args.tau)
        per_seed[str(seed)] = ev.report.to_dict()
        if args.pairs_csv:
            write_pairs_csv(ev.pairs, Path(args.pairs_csv).with_name(f"{Path(args.pairs_csv).stem}_seed{seed}.csv"), args.tau)
        logger.info("seed %d: %s", seed, ev.report.to_dict())

    from safecf.metrics import MetricsReport

    reports = [MetricsReport(**r) for r in per_seed.values()]
    payload = {"seeds": seeds, "per_seed": per_seed, "mean": mean_reports(reports)}
    write_report(payload, args.out)
    mean = payload["mean"]
    print(
        f"validity {mean['validity']:.3f} proximity {mean['proximity']:.4f} sparsity {mean['sparsity']:.3f} "
        f"fid {mean['fid']:.3f} kid {mean['kid']:.4f} is {mean['inception_score']:.3f} -> {args.out}"
    )
    return 0


# --- parser -----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="safecf", description="Saliency-guided counterfactual explanations.")
    parser.add_argument("-q", "--quiet", action="store_true", help="only print warnings and results")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("toydata", help="render the synthetic STOP/GO disc dataset")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--split", default="train")
    p.add_argument("--size", nargs=2, type=int, metavar=("H", "W"))
    p.add_argument("--radius-min", type=int, default=6)
    p.add_argument("--radius-max", type=int, default=12)
    p.set_defaults(func=cmd_toydata)

    p = sub.add_parser("train-greybox", help="train the toy classifier under explanation")
    p.add_argument("--train", required=True, help="training split directory or manifest.json")
    p.add_argument("--val")
    p.add_argument("--out", required=True, help="checkpoint path (writes .pt and .json)")
    p.add_argument("--config")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--negatives", type=int, help="number of disc-free background images (0 disables)")
    p.set_defaults(func=cmd_train_greybox)

    p = sub.add_parser("train-explainer", help="train the counterfactual generator")
    p.add_argument("--data", required=True)
    p.add_argument("--greybox", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--n-critic", type=int)
    p.add_argument("--saliency-mode", choices=("current", "target", "max"))
    p.add_argument("--checkpoint-interval", type=int)
    p.add_argument("--sample-interval", type=int)
    for key in _WEIGHT_FLAGS:
        p.add_argument("--" + key.replace("_", "-"), dest=key, type=float)
    p.add_argument("--max-steps", type=int)
    p.set_defaults(func=cmd_train_explainer)

    p = sub.add_parser("explain", help="write counterfactuals for individual images")
    p.add_argument("--generator", required=True, help="generator checkpoint path (without suffix)")
    p.add_argument("--greybox", required=True)
    p.add_argument("--images", nargs="+", required=True)
    p.add_argument("--target", nargs="+", required=True, help="class name or index, once or per image")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_explain)

    p = sub.add_parser("evaluate", help="score an explainer on a held-out split")
    group = p.add_mutually_exclusive_group()
    group.add_argument("--generator", help="checkpoint path; may contain {seed}")
    group.add_argument("--identity", action="store_true", help="evaluate the no-op explainer")
    p.add_argument("--greybox", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--seeds", default="0")
    p.add_argument("--tau", type=float, default=0.05)
    p.add_argument("--max-images", type=int)
    p.add_argument("--out", required=True)
    p.add_argument("--pairs-csv")
    p.set_defaults(func=cmd_evaluate)
    return parser


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, InvalidTargetError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (FileNotFoundError, DataError, NumericalError, SafeCFError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
