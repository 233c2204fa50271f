"""Command-line entry point; a thin layer over the library.

Subcommands: train, build-bank, edit, eval, serve, make-toydata. Exit code 0
on success, 2 on usage errors (argparse default), 1 with a one-line
diagnostic otherwise.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from .config import PipelineConfig
from .errors import SiedobError


def _load_config(path: str) -> PipelineConfig:
    return PipelineConfig.from_json(path)


def _cmd_train(args) -> int:
    from .pipeline import train_stage

    config = _load_config(args.config)
    result = train_stage(config, args.stage.lower())
    print(
        f"stage {result.stage}: {result.steps_run} steps, final metric "
        f"{result.final_metric:.4f}{' (early stop)' if result.stopped_early else ''}"
    )
    print(f"checkpoints: {result.checkpoint_dir}")
    print(f"loss log: {result.csv_path}")
    return 0


def _cmd_build_bank(args) -> int:
    from .pipeline import build_bank

    config = _load_config(args.config)
    bank = build_bank(config)
    counts = ", ".join(f"class {c}: {bank.count(c)}" for c in bank.classes())
    print(f"style bank written to {config.bank_path} ({counts})")
    return 0


def _cmd_edit(args) -> int:
    from .data import load_image_01, load_instances_png, load_labels_png, save_image_01
    from .pipeline import EditPipeline

    config = _load_config(args.config)
    pipeline = EditPipeline.load(config, args.checkpoints)
    image = load_image_01(args.image)
    labels = load_labels_png(args.seg)
    mask = (load_labels_png(args.mask) > 0).astype(np.uint8)
    inst = load_instances_png(args.inst) if args.inst else None

    style_choices = {}
    for pick in args.style or []:
        key, _, idx = pick.partition(":")
        style_choices[int(key)] = int(idx)

    out, report = pipeline.edit(
        image, labels, mask, inst, style_choices=style_choices or None, seed=args.seed
    )
    save_image_01(args.out, out)
    for info in report.instances:
        style = f" style={info['used_style_index']}" if info["used_style_index"] is not None else ""
        print(
            f"instance {info['instance_index']}: {info['class_name']} "
            f"{info['mode']} bbox={tuple(info['bbox'])}{style}"
        )
    print(f"wrote {args.out} ({report.timing_ms:.0f} ms)")
    return 0


def _cmd_eval(args) -> int:
    from .pipeline import evaluate

    config = _load_config(args.config)
    report = evaluate(config)
    for name, entry in report.metrics.items():
        print(f"{name}: {entry['value']:.6f} (n={entry['sample_count']})")
    print(f"report: {Path(config.out_dir) / 'eval_report.json'}")
    return 0


def _cmd_serve(args) -> int:
    import uvicorn

    from .service import create_app

    config = _load_config(args.config)
    app = create_app(config, checkpoint_dir=args.checkpoints)
    uvicorn.run(app, host=args.host, port=args.port, log_level="warning")
    return 0


def _cmd_make_toydata(args) -> int:
    from .toydata import make_toy_dataset

    root = make_toy_dataset(args.out, num_samples=args.samples, size=args.size, seed=args.seed)
    print(f"toy dataset with {args.samples} samples at {root}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="siedob", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one stage")
    p.add_argument("--stage", required=True, choices=["BACKGROUND", "OBJECT_INPAINT", "OBJECT_GEN", "FUSION"],
                   type=str.upper)
    p.add_argument("--config", required=True)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("build-bank", help="build the style bank from the trained encoder")
    p.add_argument("--config", required=True)
    p.set_defaults(func=_cmd_build_bank)

    p = sub.add_parser("edit", help="run one edit")
    p.add_argument("--config", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--seg", required=True)
    p.add_argument("--mask", required=True)
    p.add_argument("--inst", default=None)
    p.add_argument("--style", action="append", metavar="INSTANCE:INDEX")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--checkpoints", default=None)
    p.set_defaults(func=_cmd_edit)

    p = sub.add_parser("eval", help="run the evaluation protocol")
    p.add_argument("--config", required=True)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("serve", help="start the HTTP edit service")
    p.add_argument("--config", required=True)
    p.add_argument("--port", type=int, default=8000)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--checkpoints", default=None)
    p.set_defaults(func=_cmd_serve)

    p = sub.add_parser("make-toydata", help="write a synthetic toy dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--samples", type=int, default=8)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_make_toydata)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except SiedobError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
