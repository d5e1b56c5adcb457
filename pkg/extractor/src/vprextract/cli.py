"""Command-line entry point mirroring ExtractorConfig."""

from __future__ import annotations

import argparse
import sys

from .export import ConfigError, ExtractorConfig, export_dense


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vpr-extract",
        description="Export dense CNN feature maps and attention to a VPRD file.",
    )
    parser.add_argument("--images", required=True, help="directory of input images")
    parser.add_argument("--out", required=True, help="VPRD output path")
    parser.add_argument("--backbone", default="vgg16")
    parser.add_argument("--layer", default="features.23",
                        help="dotted submodule path to tap (default: vgg16 pool4)")
    parser.add_argument("--image-size", type=int, default=224)
    parser.add_argument("--batch-size", type=int, default=8)
    parser.add_argument("--weights", choices=("auto", "pretrained", "random"),
                        default="auto")
    parser.add_argument("--seed", type=int, default=0,
                        help="weight seed for the random fallback")
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else 1
    try:
        cfg = ExtractorConfig(
            backbone=args.backbone,
            layer=args.layer,
            image_size=args.image_size,
            batch_size=args.batch_size,
            weights=args.weights,
            seed=args.seed,
        )
        count = export_dense(args.images, cfg, args.out)
    except ConfigError as exc:
        print(f"vpr-extract: config error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"vpr-extract: error: {exc}", file=sys.stderr)
        return 2
    print(f"exported {count} images to {args.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
