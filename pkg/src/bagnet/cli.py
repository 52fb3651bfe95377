"""Command-line entry point: ``bagnet {synth,train,eval,predict,gradcheck}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

log = logging.getLogger("bagnet")

GRADCHECK_TOLERANCE = {"float32": 1e-3, "float64": 1e-6}


def _size(text: str):
    parts = text.lower().replace(",", "x").split("x")
    if len(parts) == 1:
        parts = parts * 2
    try:
        return int(parts[0]), int(parts[1])
    except ValueError:
        raise argparse.ArgumentTypeError(f"size must look like 64 or 64x64, got {text!r}") from None


def _load_configs(args):
    """TrainConfig plus the BagnetConfig keyword arguments from ``--config`` and flag overrides."""
    from .train import TrainConfig, split_config_dict

    raw = {}
    if args.config:
        raw = json.loads(Path(args.config).read_text())
    train_kw, model_kw = split_config_dict(raw)
    overrides = {
        "epochs": args.epochs,
        "batch_size": args.batch_size,
        "learning_rate": args.lr,
        "folds": args.folds,
        "seed": args.seed,
    }
    train_kw.update({k: v for k, v in overrides.items() if v is not None})
    return TrainConfig(**train_kw), model_kw


def cmd_synth(args) -> int:
    from .data import synth_dataset

    m = synth_dataset(args.n, args.size, args.seed, args.out)
    print(f"wrote {len(m)} samples and {Path(args.out) / 'manifest.tsv'}")
    return 0


def cmd_train(args) -> int:
    from .data import parse_manifest
    from .model import BagnetConfig
    from .train import train

    manifest = parse_manifest(args.manifest)
    config, model_kw = _load_configs(args)
    model_kw.setdefault("input_size", manifest.target_size)
    model_config = BagnetConfig(**model_kw)
    folds = None if args.all_folds or args.fold is None else [args.fold]
    record = train(manifest, config, model_config, out_dir=args.out_dir, folds_to_run=folds)
    agg = record.aggregate
    for name in ("accuracy", "jaccard", "precision", "recall", "specificity", "dice"):
        print(f"{name:>12s}: {100 * agg['mean'][name]:6.2f} +/- {100 * agg['std'][name]:5.2f}")
    print(f"outputs in {args.out_dir}")
    return 0


def cmd_eval(args) -> int:
    from .data import parse_manifest
    from .metrics import mean_report
    from .train import evaluate

    manifest = parse_manifest(args.manifest)
    rows = evaluate(args.checkpoint, manifest, csv_path=args.out, skip_errors=args.skip_errors,
                    overlays_dir=args.overlays)
    if rows:
        mean = mean_report([r for _, r in rows])
        print(" ".join(f"{k}={100 * v:.2f}" for k, v in mean.as_dict().items()))
    print(f"{len(rows)} images scored, CSV written to {args.out}")
    return 0


def cmd_predict(args) -> int:
    from PIL import Image

    from .checkpoint import load_checkpoint
    from .data import read_gray
    from .metrics import threshold
    from .train import predict_probs

    params, _ = load_checkpoint(args.checkpoint)
    raw = read_gray(Path(args.image), args.image)
    h, w = params.config.input_size
    img = Image.fromarray((raw / 255.0).astype(np.float32)).resize((w, h), Image.Resampling.BILINEAR)
    arr = np.clip(np.asarray(img, dtype=np.float32), 0, 1).reshape(1, 1, h, w)
    mask = threshold(predict_probs(params, arr)[0, 0], args.threshold) * 255
    out = Image.fromarray(mask.astype(np.uint8)).resize((raw.shape[1], raw.shape[0]), Image.Resampling.NEAREST)
    out.save(args.out)
    print(f"mask written to {args.out}")
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import model_gradcheck
    from .model import TINY_CONFIG, BagnetConfig

    config = TINY_CONFIG if args.tiny_config else BagnetConfig(input_size=(16, 16))
    dtype = np.float64 if args.f64 else np.float32
    res = model_gradcheck(config, dtype=dtype, n_coords=args.coords, seed=args.seed)
    tol = GRADCHECK_TOLERANCE[res.dtype]
    ok = res.max_rel_error < tol
    print(f"gradcheck {res.dtype}: max relative error {res.max_rel_error:.3e} "
          f"(tolerance {tol:.0e}, {len(res.coordinates)} coordinates, {res.seconds:.1f}s) "
          f"{'PASS' if ok else 'FAIL'}")
    if res.points_tried > 1 or res.straddling_skipped:
        print(f"  screening: {res.points_tried} point(s) drawn, {res.straddling_skipped} kink-straddling coordinate(s) replaced")
    return 0 if ok else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bagnet", description="Two-branch lesion segmentation network")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic lesion dataset")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--size", type=_size, default=(64, 64), help="e.g. 64 or 64x64")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train with k-fold cross-validation")
    p.add_argument("--manifest", required=True)
    p.add_argument("--config", help="JSON file with TrainConfig / BagnetConfig fields")
    p.add_argument("--out-dir", required=True)
    g = p.add_mutually_exclusive_group()
    g.add_argument("--fold", type=int, help="run a single fold")
    g.add_argument("--all-folds", action="store_true", help="run every fold (default)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--folds", type=int)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on a manifest")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="metrics CSV path")
    p.add_argument("--overlays", help="directory for boundary overlay PNGs")
    p.add_argument("--skip-errors", action="store_true", help="log and skip unreadable samples instead of aborting")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="segment one image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--threshold", type=float, default=0.5)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("gradcheck", help="finite-difference check of the network gradients")
    p.add_argument("--tiny-config", action="store_true", help="channels 4/8 instead of 32/64")
    p.add_argument("--f64", action="store_true", help="compute analytic gradients in float64")
    p.add_argument("--coords", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
