"""Command-line front end mirroring the ExportSpec fields."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import __version__
from .export import ExportError, ExportSpec, export_profiles


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gradexport",
        description="Export per-filter gradient saliency profiles from a "
        "torchvision model in the filterpot manifest format",
    )
    parser.add_argument("--version", action="version", version=f"gradexport {__version__}")
    parser.add_argument("--model", required=True, help="torchvision model name, e.g. resnet18")
    parser.add_argument("--data", required=True, help="dataset root (image-folder layout)")
    parser.add_argument("--split", required=True, help="split subdirectory under --data")
    parser.add_argument("--batch-size", type=int, default=16)
    parser.add_argument("--image-size", type=int, default=64)
    parser.add_argument("--weights-file", default=None, help="optional state-dict .pt file")
    parser.add_argument("--group-rule", choices=("resnet", "toplevel"), default="resnet")
    parser.add_argument("--device", default="cpu")
    parser.add_argument("--out", required=True, help="output directory")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    spec = ExportSpec(
        model=args.model,
        data_dir=Path(args.data),
        split=args.split,
        out_dir=Path(args.out),
        batch_size=args.batch_size,
        image_size=args.image_size,
        weights_file=Path(args.weights_file) if args.weights_file else None,
        group_rule=args.group_rule,
        device=args.device,
    )
    try:
        manifest = export_profiles(spec)
    except (ExportError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(f"wrote {manifest}", file=sys.stderr)
    return 0


if __name__ == "__main__":
    sys.exit(main())
