"""Command-line surface.

Subcommands: gen-data, train, eval, ablate, gradcheck, export-masks.
Exit codes: 0 success, 2 usage error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
import time

from .errors import ConfigurationError, ContractError, DimensionError, NumericError

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_NUMERIC = 3


def _load_config(path: str | None):
    from .config import Config

    if path is None:
        return Config()
    with open(path, "r", encoding="utf-8") as fh:
        return Config.from_json(fh.read())


def _cmd_gen_data(args) -> int:
    from . import data as data_mod

    config = _load_config(args.spec)
    splits = {"train": config.train_size}
    if config.val_size:
        splits["val"] = config.val_size
    for split, size in splits.items():
        samples = data_mod.gen_split(config, split, size)
        out_dir = os.path.join(args.out, split)
        data_mod.export_split(samples, out_dir)
        print(f"wrote {size} samples to {out_dir}")
    return EXIT_OK


def _cmd_train(args) -> int:
    from .train import train

    config = _load_config(args.config)
    result = train(config, out_dir=args.out)
    evals = [r for r in result.runlog if r["kind"] == "epoch_eval" and r["split"] == "train"]
    if evals:
        print(f"final train miou: {evals[-1]['miou']:.4f}")
    print(f"checkpoint + runlog written to {args.out}")
    return EXIT_OK


def _cmd_eval(args) -> int:
    from . import data as data_mod
    from .train import evaluate, load_model

    model, config, _ = load_model(args.ckpt)
    samples = data_mod.load_split(args.data, max_len=config.max_len)
    report = evaluate(model, samples)
    payload = report.to_dict()
    with open(args.report, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(json.dumps({k: payload[k] for k in ("miou", "pr")}, sort_keys=True))
    return EXIT_OK


def _cmd_ablate(args) -> int:
    from .ablate import AXES, rows_to_csv, run_axis

    config = _load_config(args.config)
    if args.axis not in AXES:
        print(f"unknown axis {args.axis!r}; choose from {', '.join(AXES)}", file=sys.stderr)
        return EXIT_USAGE
    rows = run_axis(args.axis, config)
    csv_text = rows_to_csv(rows)
    with open(args.out, "w", encoding="utf-8") as fh:
        fh.write(csv_text)
    print(csv_text, end="")
    return EXIT_OK


def _cmd_gradcheck(args) -> int:
    from .train import gradcheck

    config = _load_config(args.config) if args.config else None
    started = time.time()
    report = gradcheck(config)
    print(report.summary())
    print(f"runtime: {time.time() - started:.1f}s")
    return EXIT_OK if report.passed else EXIT_NUMERIC


def _cmd_export_masks(args) -> int:
    import numpy as np

    from . import data as data_mod
    from .train import load_model, predict_mask

    model, config, _ = load_model(args.ckpt)
    samples = data_mod.load_split(args.data, max_len=config.max_len)
    os.makedirs(args.out, exist_ok=True)
    for i, sample in enumerate(samples):
        mask = predict_mask(model, sample)
        h, w = mask.shape
        path = os.path.join(args.out, str(i).zfill(3) + ".pgm")
        data_mod._write_pnm(path, b"P5", mask.astype(np.uint8) * np.uint8(255), w, h)
    print(f"wrote {len(samples)} predicted masks to {args.out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="refseg",
                                     description="desk-scale referring image segmentation")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate and export synthetic splits")
    p.add_argument("--spec", help="data/config JSON (defaults apply if omitted)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_gen_data)

    p = sub.add_parser("train", help="train a model from a config")
    p.add_argument("--config", help="config JSON")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on an exported split")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True, help="split directory")
    p.add_argument("--report", required=True, help="metric report JSON path")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("ablate", help="run one ablation axis, emit CSV")
    p.add_argument("--config", help="base config JSON")
    p.add_argument("--axis", required=True)
    p.add_argument("--out", required=True, help="CSV path")
    p.set_defaults(func=_cmd_ablate)

    p = sub.add_parser("gradcheck", help="finite-difference check of the full loss")
    p.add_argument("--config", help="config JSON (miniature dims by default)")
    p.set_defaults(func=_cmd_gradcheck)

    p = sub.add_parser("export-masks", help="write predicted masks for a split")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_export_masks)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK
    try:
        return args.func(args)
    except (ConfigurationError, ContractError, DimensionError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
