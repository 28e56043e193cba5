"""cf-export command line: checkpoint and probe conversion."""

from __future__ import annotations

import argparse
import sys

from .export import ExportError, ExportSpec, export_model
from .probes import export_probes


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cf-export",
                                     description="Export checkpoints/probes to cfmodel formats")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("model", help="convert a framework checkpoint")
    p.add_argument("--checkpoint", required=True, help="state_dict file (.pt/.pth)")
    p.add_argument("--arch", required=True,
                   help="template id (vgg16-cifar, resnet56-cifar) or custom template JSON")
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("probes", help="export calibration images")
    p.add_argument("--dataset", required=True, choices=["cifar10"])
    p.add_argument("--data-dir", default="cifar-10-batches-bin",
                   help="directory with the CIFAR-10 binaries")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    return parser


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    try:
        if args.command == "model":
            path = export_model(ExportSpec(args.checkpoint, args.arch, args.out))
        else:
            path = export_probes(args.data_dir, args.count, args.seed, args.out)
    except ExportError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    print(path)
    return 0


if __name__ == "__main__":
    sys.exit(main())
