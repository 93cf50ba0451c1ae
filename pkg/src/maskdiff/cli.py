"""Command-line entry points.

Subcommands mirror the pipeline stages plus standalone dataset generation and
cascade sampling. Exit codes: 0 success, 1 validation/usage error, 2 runtime
failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

STAGE_COMMANDS = ("pretrain", "finetune-cond", "train-seg", "build-d1", "build-d2", "run-variants")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="maskdiff", description=__doc__)
    sub = parser.add_subparsers(dest="command", metavar="command")

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment config JSON (defaults to <out>/config.json or the profile preset)")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--profile", choices=("desk", "paper"), default="desk")
    common.add_argument("--out", required=True, help="run directory")

    p = sub.add_parser("toygen", help="generate the procedural toy dataset")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--resolution", type=int, required=True)
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="dataset output directory")

    for name, help_text in (
        ("pretrain", "pretrain the unconditional diffusion cascade"),
        ("finetune-cond", "fine-tune the cascade with mask conditioning"),
        ("train-seg", "train the base segmentation model on real pairs"),
        ("build-d1", "sample d1: unconditional images + predicted masks"),
        ("build-d2", "sample d2: mask-conditioned images from d1 masks"),
        ("run-variants", "train and evaluate the segmentation variants"),
    ):
        sub.add_parser(name, parents=[common], help=help_text)

    p = sub.add_parser("report", help="print the variant comparison table")
    p.add_argument("--out", required=True, help="run directory of a completed run")

    p = sub.add_parser("sample", help="cascade-sample one image from a mask")
    p.add_argument("--config", help="cascade spec JSON (required)")
    p.add_argument("--mask", help="indexed PNG mask; omitted = empty mask")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--guidance", type=float, default=None)
    p.add_argument("--stages", type=int, default=None, help="use only the first N cascade stages")
    p.add_argument("--trace", default=None, help="dump per-step x0 predictions into this directory")
    p.add_argument("--out", required=True, help="output image path")
    return parser


def _resolve_config(args):
    from . import pipeline

    run_config = Path(args.out) / "config.json"
    if args.config:
        cfg = pipeline.ExperimentConfig.from_json_dict(json.loads(Path(args.config).read_text()))
    elif run_config.exists():
        cfg = pipeline.ExperimentConfig.from_json_dict(json.loads(run_config.read_text()))
    elif args.profile == "paper":
        cfg = pipeline.paper_config()
    else:
        cfg = pipeline.desk_config()
    if args.seed is not None:
        cfg = pipeline.ExperimentConfig.from_json_dict({**cfg.to_json_dict(), "seed": args.seed})
    return cfg


def _run_stage(command: str, args) -> int:
    from . import pipeline

    cfg = _resolve_config(args)
    run, state = pipeline.init_run(args.out, cfg)
    stage_fn = {
        "pretrain": pipeline.pretrain_unconditional,
        "finetune-cond": pipeline.finetune_conditional,
        "train-seg": pipeline.train_seg_real,
        "build-d1": pipeline.build_d1,
        "build-d2": pipeline.build_d2,
        "run-variants": pipeline.run_variants,
    }[command]
    result = stage_fn(run, state, cfg)
    if command == "run-variants":
        from . import metrics

        print(metrics.render_table(result), end="")
    return 0


def _cmd_toygen(args) -> int:
    from . import datapipe

    manifest = datapipe.make_toy_dataset(args.n, args.resolution, args.classes, args.seed, args.out)
    print(f"wrote {len(manifest.records)} records to {args.out}")
    return 0


def _cmd_report(args) -> int:
    table = Path(args.out) / "reports" / "table.txt"
    if not table.exists():
        raise FileNotFoundError(f"no report at {table}; run run-variants first")
    print(table.read_text(), end="")
    return 0


def _cmd_sample(args) -> int:
    import numpy as np
    import torch

    from . import datapipe
    from .denoiser import ConditioningBundle
    from .sampler import CascadeSpec, cascade_sample, stage_model

    if not args.config:
        raise ValueError("missing required flag --config (cascade spec JSON)")
    spec = CascadeSpec.from_json(args.config)
    if args.stages is not None:
        spec = CascadeSpec(stages=spec.stages[: args.stages])
    if args.guidance is not None:
        for s in spec.stages:
            s.guidance_weight = args.guidance
    num_classes = stage_model(spec.stages[0]).config.num_classes
    res = spec.final_resolution
    if args.mask:
        mask = datapipe.load_mask(args.mask)
    else:
        mask = np.zeros((res, res), dtype=np.int64)
    onehot = torch.from_numpy(datapipe.mask_to_onehot(mask, num_classes))[None]
    image = cascade_sample(spec, ConditioningBundle(mask=onehot), seed=args.seed, trace_dir=args.trace)
    datapipe.save_image(args.out, image[0].permute(1, 2, 0).numpy())
    print(f"wrote {args.out}")
    return 0


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else 1
    if args.command is None:
        parser.print_usage()
        return 1
    try:
        if args.command == "toygen":
            return _cmd_toygen(args)
        if args.command == "report":
            return _cmd_report(args)
        if args.command == "sample":
            return _cmd_sample(args)
        if args.command in STAGE_COMMANDS:
            return _run_stage(args.command, args)
        parser.print_usage()
        return 1
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
