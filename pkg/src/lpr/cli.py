"""Command-line entry point: ``lpr gen-data | train | eval | ablate | sweep-alpha``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .checkpoint import load_checkpoint
from .dataset import generate_synthetic, load_features, save_features
from .evaluation import format_table
from .objective import FusionWeights
from .runner import (
    CONFIG_KEYS,
    SYNTHETIC_KEYS,
    alpha_sweep,
    build_config,
    evaluate,
    parse_config_text,
    parse_grid,
    path_ablation,
    train,
)

# flag dest -> config key
_OVERRIDES = ("epochs", "batch_size", "seed", "lr", "alpha", "beta", "lambda1", "lambda2", "mask", "patience",
              "dataset", "weight_decay")


def _add_overrides(p: argparse.ArgumentParser):
    p.add_argument("--config", help="flat key = value config file")
    for key in _OVERRIDES:
        p.add_argument(f"--{key.replace('_', '-')}", dest=key, default=None)
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override any config key")


def _config(args):
    values = parse_config_text(Path(args.config).read_text()) if args.config else {}
    for key in _OVERRIDES:
        if getattr(args, key, None) is not None:
            values[key] = getattr(args, key)
    for item in args.set:
        key, _, value = item.partition("=")
        if key not in CONFIG_KEYS and key not in SYNTHETIC_KEYS:
            raise ValueError(f"unknown config key {key!r}")
        values[key] = value
    return build_config(values)


def _write(stem: Path, payload: dict, text: str):
    stem.parent.mkdir(parents=True, exist_ok=True)
    Path(f"{stem}.json").write_text(json.dumps(payload, indent=2))
    Path(f"{stem}.txt").write_text(text)


def cmd_gen_data(args):
    cfg = _config(args)
    ds = generate_synthetic(cfg.synthetic)
    digest = save_features(args.out, ds)
    print(f"wrote {args.out} ({len(ds.records)} records, sha256 {digest[:12]})")


def cmd_train(args):
    cfg = _config(args)
    cfg.checkpoint = args.out
    ds = load_features(args.data)
    ckpt, manifest = train(cfg, ds)
    report = evaluate(ckpt, ds, "closed", cfg.fusion, seed=cfg.seed, out=f"{args.out}.closed")
    print(f"wrote {args.out} (best epoch {manifest.best_epoch}, checkpoint {manifest.checkpoint_hash[:12]})")
    print(report.to_text(), end="")


def cmd_eval(args):
    ds = load_features(args.data)
    ckpt = load_checkpoint(args.ckpt, ds.space, ds.bank.dim)
    alpha = 0.4 if args.alpha is None else float(args.alpha)
    beta = None if args.beta is None else float(args.beta)
    fw = FusionWeights(alpha, beta)
    mask = None
    if args.mask:
        from .runner import parse_mask

        mask = parse_mask(args.mask)
    out = args.out or f"{args.ckpt}.eval-{args.regime}"
    report = evaluate(ckpt, ds, args.regime, fw, mask, out=out)
    print(report.to_text(), end="")


def cmd_ablate(args):
    cfg = _config(args)
    ds = load_features(args.data)
    out = Path(args.out or f"{args.data}.ablation")
    rows = path_ablation(cfg, ds, checkpoint_dir=str(out.parent / (out.name + "-ckpt")))
    text = format_table(rows)
    _write(out, {"rows": rows, "config": cfg.to_dict()}, text)
    print(text, end="")


def cmd_sweep_alpha(args):
    ds = load_features(args.data)
    ckpt = load_checkpoint(args.ckpt, ds.space, ds.bank.dim)
    rows = alpha_sweep(ckpt, ds, parse_grid(args.grid), args.regime)
    text = format_table(rows, ["alpha", "S", "U", "HM", "AUC"])
    _write(Path(args.out or f"{args.ckpt}.alpha-sweep"), {"rows": rows}, text)
    print(text, end="")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lpr", description="Learning primitive relations for CZSL")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic feature file")
    _add_overrides(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model on a feature file")
    _add_overrides(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--regime", choices=("closed", "open"), default="closed")
    p.add_argument("--alpha", default=None)
    p.add_argument("--beta", default=None)
    p.add_argument("--mask", default=None)
    p.add_argument("--out", default=None, help="report path stem")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train and evaluate all seven branch masks")
    _add_overrides(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", default=None, help="report path stem")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("sweep-alpha", help="inference-only sweep of the fusion weight")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--grid", default="0.2:0.8:0.1")
    p.add_argument("--regime", choices=("closed", "open"), default="open")
    p.add_argument("--out", default=None, help="report path stem")
    p.set_defaults(func=cmd_sweep_alpha)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        args.func(args)
    except Exception as exc:  # one machine-parseable line, nonzero exit
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
