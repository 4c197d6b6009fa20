"""Command-line entry point: synth, train, eval, predict, inspect.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numeric failure.
Logs go to stderr; parse-friendly results go to stdout; artifacts go to files.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from collections import Counter
from pathlib import Path

import numpy as np

from . import checkpoint as ckio
from .config import RunConfig, from_dict, load_config, merge
from .dataset import ANATOMIES, SplitSpec, load_splits, synth_generate
from .encoder import PRESETS, shape_audit
from .errors import ConfigurationError, FormatError, InputError, NumericError, PartitionError, UndefinedMetricError
from .evaluation import (
    aggregate_study,
    build_report,
    render_csv,
    render_table,
    select_threshold,
    write_predictions,
)
from .head import HeadConfig, head_shapes
from .preprocess import PreprocessConfig, load_png, preprocess
from .training import LOG_HEADER, ImageStore, model_from_checkpoint, predict_studies, train

logger = logging.getLogger("radtriage")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _shared(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON run config; flags override its values")
    p.add_argument("--seed", type=int, help="master seed")
    p.add_argument("--out", help="output directory")
    p.add_argument("--preset", choices=sorted(PRESETS), help="encoder preset")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="radtriage", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="write a synthetic MURA-layout corpus")
    _shared(p)
    p.add_argument("--patients", type=int, default=64)
    p.add_argument("--studies", type=int, default=16, help="studies per patient")
    p.add_argument("--views", type=int, default=2, help="views per study")
    p.add_argument("--image-size", type=int, help="defaults to the preset's image size")
    p.add_argument("--abnormal-fraction", type=float, default=0.5)
    p.add_argument("--cycle-anatomies", action="store_true",
                   help="rotate patients through all seven anatomies")
    p.add_argument("--anatomy", default="wrist", choices=ANATOMIES)

    p = sub.add_parser("train", help="fine-tune the last K encoder blocks plus the head")
    _shared(p)
    p.add_argument("--data", help="dataset root")
    p.add_argument("--unfreeze-k", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr-head", type=float)
    p.add_argument("--lr-encoder", type=float)
    p.add_argument("--no-augment", action="store_true")
    p.add_argument("--dry-run", action="store_true", help="print the parameter shape audit and exit")

    p = sub.add_parser("eval", help="per-anatomy report for a checkpoint")
    _shared(p)
    p.add_argument("checkpoint")
    p.add_argument("--data", help="dataset root (defaults to the one recorded in the checkpoint)")
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.add_argument("--threshold", type=float, help="fixed operating threshold (skips validation-based selection)")

    p = sub.add_parser("predict", help="probabilities for individual images")
    p.add_argument("checkpoint")
    p.add_argument("images", nargs="+")
    p.add_argument("--study", action="store_true", help="also print the mean over all images")

    p = sub.add_parser("inspect", help="describe a checkpoint or a preset")
    p.add_argument("checkpoint", nargs="?")
    p.add_argument("--preset", choices=sorted(PRESETS))
    return parser


def resolve_config(args) -> RunConfig:
    base = {}
    if getattr(args, "config", None):
        base = load_config(args.config).to_dict()
    overrides = {
        "preset": args.preset,
        "out": args.out,
        "data": {"root": getattr(args, "data", None),
                 "split": {"seed": args.seed}},
        "train": {
            "seed": args.seed,
            "unfreeze_k": getattr(args, "unfreeze_k", None),
            "epochs": getattr(args, "epochs", None),
            "batch_size": getattr(args, "batch_size", None),
            "lr_head": getattr(args, "lr_head", None),
            "lr_encoder": getattr(args, "lr_encoder", None),
        },
    }
    if getattr(args, "no_augment", False):
        overrides["preprocess"] = {"augment": {"enabled": False}}
    merged = merge(base, overrides)
    if args.preset and base:
        # a preset flag replaces the file's encoder geometry wholesale
        merged.pop("encoder", None)
        merged.get("head", {}).pop("in_dim", None)
        merged.get("preprocess", {}).pop("image_size", None)
    return from_dict(merged)


# ---------------------------------------------------------------- commands


def cmd_synth(args) -> int:
    preset = PRESETS[args.preset or "tiny"]
    size = args.image_size or preset.image_size
    out = Path(args.out or "data")
    seed = args.seed if args.seed is not None else 0
    records = synth_generate(args.patients, args.studies, args.views, size, args.abnormal_fraction,
                             seed, out, cycle_anatomies=args.cycle_anatomies, anatomy=args.anatomy)
    n_images = sum(len(r.view_paths) for r in records)
    positives = sum(r.label for r in records)
    anatomies = Counter(r.anatomy for r in records)
    print(f"root,{out}")
    print(f"patients,{len({r.patient_id for r in records})}")
    print(f"studies,{len(records)}")
    print(f"images,{n_images}")
    print(f"positive_studies,{positives}")
    for a in ANATOMIES:
        if anatomies[a]:
            print(f"anatomy_{a},{anatomies[a]}")
    return EXIT_OK


def audit_lines(cfg: RunConfig) -> list[str]:
    lines = [f"encoder.{line}" for line in shape_audit(cfg.encoder)]
    for name, shape in head_shapes(cfg.head).items():
        lines.append(f"head.{name:<23} {list(shape)}")
    return lines


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    if args.dry_run:
        cfg.validate(require_data=False)
        for line in audit_lines(cfg):
            print(line)
        return EXIT_OK
    cfg.validate(require_data=True)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    log_path = out / "train_log.csv"
    with open(log_path, "w") as log:
        log.write(",".join(LOG_HEADER) + "\n")

        def on_epoch(entry):
            log.write(entry.line() + "\n")
            log.flush()

        result = train(cfg, on_epoch=on_epoch)
    ckio.save_checkpoint(result.checkpoint, out / "checkpoint.bin")
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")

    _, val_recs, _ = result.splits
    model = model_from_checkpoint(result.checkpoint)
    store = ImageStore(cfg.preprocess.image_size)
    preds = predict_studies(model, val_recs, store, cfg.preprocess)
    labels = [r.label for r in val_recs]
    try:
        threshold = select_threshold([p.prob for p in preds], labels)
    except UndefinedMetricError:
        logger.warning("validation split is single-class; reporting at threshold 0.5")
        threshold = 0.5
    report = build_report(preds, labels, threshold)
    _write_report(out, "val_report", report)
    print(f"checkpoint,{out / 'checkpoint.bin'}")
    print(f"best_epoch,{result.checkpoint.metrics['best_epoch']}")
    print(f"val_auroc,{result.checkpoint.metrics['val_auroc']!r}")
    return EXIT_OK


def _write_report(out: Path, stem: str, report) -> None:
    (out / f"{stem}.csv").write_text(render_csv(report))
    (out / f"{stem}.txt").write_text(render_table(report))
    (out / f"{stem}.json").write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")


def _checkpoint_run_config(ckpt) -> RunConfig:
    return from_dict(ckpt.config)


def cmd_eval(args) -> int:
    ckpt = ckio.load_checkpoint(args.checkpoint)
    run = _checkpoint_run_config(ckpt)
    root = args.data or run.data_root
    if not root or not Path(root).is_dir():
        raise InputError(f"dataset root {root!r} not found")
    split = run.split if args.seed is None else SplitSpec(run.split.fractions, args.seed)
    train_recs, val_recs, test_recs = load_splits(root, split)
    chosen = {"train": train_recs, "val": val_recs, "test": test_recs}[args.split]
    if not chosen:
        raise InputError(f"split {args.split!r} is empty")
    model = model_from_checkpoint(ckpt)
    store = ImageStore(run.preprocess.image_size)

    if args.threshold is not None:
        threshold = args.threshold
    else:
        val_preds = predict_studies(model, val_recs, store, run.preprocess)
        threshold = select_threshold([p.prob for p in val_preds], [r.label for r in val_recs])
    preds = predict_studies(model, chosen, store, run.preprocess)
    labels = [r.label for r in chosen]
    report = build_report(preds, labels, threshold)

    out = Path(args.out or Path(args.checkpoint).parent / f"eval_{args.split}")
    out.mkdir(parents=True, exist_ok=True)
    _write_report(out, "report", report)
    write_predictions(out / "predictions.csv", preds, labels)
    sys.stdout.write(render_table(report))
    return EXIT_OK


def cmd_predict(args) -> int:
    ckpt = ckio.load_checkpoint(args.checkpoint)
    run = _checkpoint_run_config(ckpt)
    model = model_from_checkpoint(ckpt)
    dtype = next(iter(model.encoder.values())).dtype
    probs, failed = [], 0
    for path in args.images:
        try:
            x = preprocess(load_png(path), run.preprocess).tensor
        except InputError as exc:
            print(f"{path},error,{exc}", file=sys.stderr)
            failed += 1
            continue
        p = float(model.predict_proba(x[None].astype(dtype))[0])
        probs.append(p)
        print(f"{path},{p!r}")
    if args.study and probs:
        print(f"study,{aggregate_study(probs)!r}")
    return EXIT_DATA if failed else EXIT_OK


def cmd_inspect(args) -> int:
    if args.checkpoint:
        manifest = ckio.read_manifest(args.checkpoint)
        print(f"version,{manifest['version']}")
        for block in ("preset", "encoder", "head", "train", "preprocess", "data"):
            print(f"config.{block},{json.dumps(manifest['config'].get(block), sort_keys=True)}")
        metrics = {k: v for k, v in manifest["metrics"].items() if k != "history"}
        print(f"metrics,{json.dumps(metrics, sort_keys=True)}")
        total = 0
        for t in manifest["tensors"]:
            if t["kind"] == "param":
                total += int(np.prod(t["shape"], dtype=np.int64))
                print(f"tensor,{t['name']},{'x'.join(map(str, t['shape']))}")
        print(f"parameters,{total}")
        return EXIT_OK
    cfg = from_dict({"preset": args.preset or "paper"})
    for line in audit_lines(cfg):
        print(line)
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "predict": cmd_predict,
    "inspect": cmd_inspect,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # --help or a usage error
        return int(exc.code or 0)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        return COMMANDS[args.command](args)
    except ConfigurationError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (InputError, PartitionError, FormatError, UndefinedMetricError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
