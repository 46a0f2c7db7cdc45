"""Command-line entry point: ``diffgf <command> [options]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import pipeline
from .config import RunConfig, load_config


def _global(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="flat YAML config (dotted keys); defaults apply when omitted")
    p.add_argument("--seed", type=int, help="overrides the config seed")
    p.add_argument("--deterministic", action="store_true", help="single-threaded, deterministic kernels")
    p.add_argument("--out", type=Path, default=Path("runs/default"), help="run directory (checkpoints, logs, reports)")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="diffgf", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="build the synthetic dataset under OUT/data")
    _global(p)

    for name, helptext in (
        ("train-codec", "train the latent codec"),
        ("train-diffusion", "train the latent denoiser (needs the codec)"),
        ("train-refiner", "train the harmonization network (needs the codec)"),
    ):
        p = sub.add_parser(name, help=helptext)
        _global(p)
        p.add_argument("--data", type=Path, help="dataset root (default OUT/data)")
        if name == "train-refiner":
            p.add_argument("--variant", default="designed", choices=sorted(pipeline.REFINER_VARIANTS))

    p = sub.add_parser("restore", help="restore the test split, or one --image with its --mask")
    _global(p)
    p.add_argument("--checkpoint", type=Path, help="default OUT/diffgf.ckpt")
    p.add_argument("--data", type=Path)
    p.add_argument("--image", type=Path)
    p.add_argument("--mask", type=Path)
    p.add_argument("--steps", type=int, help="sampling steps (default from config)")
    p.add_argument("--no-refiner", action="store_true", help="diffusion-only restoration")
    p.add_argument("--dest", type=Path, help="output directory (default OUT/restored)")

    p = sub.add_parser("baseline", help="directional interpolation across the gaps")
    _global(p)
    p.add_argument("--data", type=Path)
    p.add_argument("--image", type=Path)
    p.add_argument("--mask", type=Path)
    p.add_argument("--dest", type=Path, help="output directory (default OUT/baseline)")

    p = sub.add_parser("evaluate", help="score restored test patches against the ground truth")
    _global(p)
    p.add_argument("--restored", type=Path, required=True)
    p.add_argument("--data", type=Path)
    p.add_argument("--method", default="restored")

    p = sub.add_parser("ablate", help="variant table over the test split")
    _global(p)
    p.add_argument("--data", type=Path)
    p.add_argument("--train-missing", action="store_true", help="train absent refiner variants first")

    p = sub.add_parser("bench", help="per-patch restoration latency for 2, 4 and 8 steps")
    _global(p)
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--repetitions", type=int, default=20)
    return parser


def resolve_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.deterministic:
        overrides["deterministic"] = True
    return cfg.replace(**overrides) if overrides else cfg


def run(args) -> dict:
    cfg = resolve_config(args)
    out: Path = args.out
    data = getattr(args, "data", None) or out / "data"
    ckpt = getattr(args, "checkpoint", None) or out / pipeline.CHECKPOINT
    cmd = args.command
    if cmd == "simulate":
        return pipeline.cmd_simulate(cfg, out / "data")
    if cmd == "train-codec":
        return pipeline.cmd_train_codec(cfg, data, out)
    if cmd == "train-diffusion":
        return pipeline.cmd_train_diffusion(cfg, data, out)
    if cmd == "train-refiner":
        return pipeline.cmd_train_refiner(cfg, data, out, variant=args.variant)
    if cmd in ("restore", "baseline") and (args.image is None) != (args.mask is None):
        raise SystemExit("--image and --mask go together")
    if cmd == "restore":
        dest = args.dest or out / ("restored_diffusion_only" if args.no_refiner else "restored")
        return pipeline.cmd_restore(
            cfg, ckpt, dest, data_dir=data, image=args.image, mask=args.mask, steps=args.steps, no_refiner=args.no_refiner
        )
    if cmd == "baseline":
        return pipeline.cmd_baseline(cfg, args.dest or out / "baseline", data_dir=data, image=args.image, mask=args.mask)
    if cmd == "evaluate":
        return pipeline.cmd_evaluate(cfg, args.restored, data, out / "reports", method=args.method)
    if cmd == "ablate":
        return pipeline.cmd_ablate(cfg, data, out, train_missing=args.train_missing)
    if cmd == "bench":
        return pipeline.cmd_bench(cfg, ckpt, out / "bench", repetitions=args.repetitions)
    raise SystemExit(f"unknown command {cmd}")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        summary = run(args)
    except (pipeline.StageError, pipeline.CheckpointError, FileNotFoundError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    print(json.dumps(summary, indent=2, default=str, ensure_ascii=False))
    return 0


if __name__ == "__main__":
    sys.exit(main())
