"""Command-line entry point.

Subcommands: synth, split, train, eval, ablate, compare, params, gradcheck.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import data as datamod
from . import gradcheck as gc
from . import models, training
from .config import ConfigError, load_config
from .metrics import report_text


def _add_synth(sub) -> None:
    p = sub.add_parser("synth", help="generate a synthetic desk-scale corpus")
    p.add_argument("--out", required=True, help="directory to create")
    p.add_argument("--num-per-class", type=int, default=100)
    p.add_argument("--image-size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)


def _add_split(sub) -> None:
    p = sub.add_parser("split", help="ingest, balance and split a corpus into a manifest")
    p.add_argument("--root", required=True, help="folder-per-class corpus root")
    p.add_argument("--out", required=True, help="manifest JSON to write")
    p.add_argument("--balance-seed", type=int, default=0)
    p.add_argument("--seed", type=int, default=0, help="split shuffle seed")
    p.add_argument("--test-fraction", type=float, default=None)
    p.add_argument("--validation-fraction", type=float, default=None)
    p.add_argument("--counts", default=None,
                   help="per-class train,validation,test sizes, e.g. 70,15,15")


def _add_config_cmd(sub, name: str, help_text: str) -> None:
    p = sub.add_parser(name, help=help_text)
    p.add_argument("--config", required=True, help="run config JSON")


def _add_eval(sub) -> None:
    p = sub.add_parser("eval", help="re-evaluate a checkpoint on one split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", required=True,
                   choices=sorted(datamod.SPLITS))
    p.add_argument("--batch-size", type=int, default=32)


def _add_params(sub) -> None:
    p = sub.add_parser("params", help="parameter count and shape trace for an architecture")
    p.add_argument("--arch", required=True, choices=sorted(models.ARCHITECTURES))
    p.add_argument("--width-scale", type=float, default=1.0)
    p.add_argument("--input-size", type=int, default=256)
    p.add_argument("--channels", type=int, default=3)
    p.add_argument("--classes", type=int, default=3)


def _add_gradcheck(sub) -> None:
    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    p.add_argument("--configs-per-kind", type=int, default=20)
    p.add_argument("--epsilon", type=float, default=1e-5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threshold", type=float, default=1e-4)
    p.add_argument("--model", action="store_true",
                   help="also check a small full network end to end")


def _cmd_synth(args) -> int:
    root = datamod.generate_synthetic(args.out, args.num_per_class,
                                      args.image_size, args.seed)
    total = args.num_per_class * len(datamod.SYNTHETIC_CLASSES)
    print(f"wrote {total} images under {root}")
    return 0


def _cmd_split(args) -> int:
    if args.counts is not None:
        if args.test_fraction is not None or args.validation_fraction is not None:
            print("give either --counts or the fraction pair, not both", file=sys.stderr)
            return 1
        parts = tuple(int(v) for v in args.counts.split(","))
        spec = datamod.SplitSpec(seed=args.seed, counts=parts)
    else:
        if args.test_fraction is None or args.validation_fraction is None:
            print("need --test-fraction and --validation-fraction (or --counts)",
                  file=sys.stderr)
            return 1
        spec = datamod.SplitSpec(seed=args.seed, test_fraction=args.test_fraction,
                                 validation_fraction=args.validation_fraction)
    manifest = datamod.ingest(args.root)
    manifest = datamod.balance(manifest, args.balance_seed)
    manifest = datamod.split(manifest, spec)
    manifest.save(args.out)
    counts = {s: len(manifest.by_split(s)) for s in sorted(datamod.SPLITS)}
    print(f"wrote {args.out}: " + ", ".join(f"{k}={v}" for k, v in counts.items()))
    return 0


def _cmd_train(args) -> int:
    record = training.train(load_config(args.config))
    print(json.dumps(record.to_json(), indent=2))
    return 0 if record.status == "completed" else 1


def _cmd_eval(args) -> int:
    rep, _ = training.evaluate(args.checkpoint, args.split, args.batch_size)
    print(report_text(rep))
    return 0


def _cmd_ablate(args) -> int:
    cfg = load_config(args.config)
    rows = training.ablate(cfg)
    failed = sum(1 for r in rows if r["test_accuracy"] is None)
    print(f"wrote {Path(cfg.output_dir) / 'ablation.csv'} "
          f"({len(rows)} runs, {failed} failed)")
    return 0 if failed == 0 else 1


def _cmd_compare(args) -> int:
    cfg = load_config(args.config)
    rows = training.compare_architectures(cfg)
    failed = sum(1 for r in rows if r["test_accuracy"] is None)
    print(f"wrote {Path(cfg.output_dir) / 'comparison.csv'} "
          f"({len(rows)} runs, {failed} failed)")
    return 0 if failed == 0 else 1


def _cmd_params(args) -> int:
    shape = (args.input_size, args.input_size, args.channels)
    spec = models.build_model(args.arch, shape, args.classes, args.width_scale)
    print(f"{args.arch} (width scale {args.width_scale}, input {shape}): "
          f"{models.count_parameters(spec):,} parameters")
    for label, out_shape in models.trace_shapes(spec):
        print(f"  {label:<20} {out_shape}")
    return 0


def _cmd_gradcheck(args) -> int:
    worst = gc.run_layer_suite(args.configs_per_kind, args.epsilon, args.seed)
    ok = True
    for kind, err in worst.items():
        status = "pass" if err < args.threshold else "FAIL"
        ok &= err < args.threshold
        print(f"{kind:<16} worst relative error {err:.3e}  {status}")
    if args.model:
        spec = models.build_model("resnet50", (64, 64, 3), 3, 0.0625)
        rng = np.random.default_rng(1)
        batch = rng.random((2, 64, 64, 3))
        labels = np.eye(3)[rng.integers(0, 3, 2)]
        err = gc.model_gradient_check(spec, batch, labels, seed=1, max_coords=3)
        status = "pass" if err < 1e-3 else "FAIL"
        ok &= err < 1e-3
        print(f"{'full network':<16} worst relative error {err:.3e}  {status}")
    return 0 if ok else 1


_COMMANDS = {
    "synth": _cmd_synth,
    "split": _cmd_split,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "ablate": _cmd_ablate,
    "compare": _cmd_compare,
    "params": _cmd_params,
    "gradcheck": _cmd_gradcheck,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cxrnet",
        description="Train and evaluate small convolutional classifiers "
                    "on chest X-ray style corpora.")
    parser.add_argument("--verbose", action="store_true", help="log progress")
    sub = parser.add_subparsers(dest="command", required=True)
    _add_synth(sub)
    _add_split(sub)
    _add_config_cmd(sub, "train", "train one run from a config")
    _add_eval(sub)
    _add_config_cmd(sub, "ablate", "train all 32 augmentation flag subsets")
    _add_config_cmd(sub, "compare", "train each architecture on the same data")
    _add_params(sub)
    _add_gradcheck(sub)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s")
    try:
        return _COMMANDS[args.command](args)
    except (ConfigError, datamod.CorpusError, training.CheckpointError,
            FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
