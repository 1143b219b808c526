"""Command line entry point.

    export --dataset <name> --split <train|test> --backbone <name> --out <path> [--l2]

(installed both as ``export`` and, since ``export`` collides with the shell
builtin in interactive use, as ``csrms-export``). ``verify`` re-checks an
existing file.
"""

from __future__ import annotations

import argparse
import json
import sys

from .backbones import ALLOWED_BACKBONES
from .datasets import ALLOWED_DATASETS
from .errors import ExportError, VerifyError
from .export import ExportJob, export_features
from .verify import verify_file


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="csrms-export", description=__doc__)
    sub = parser.add_subparsers(dest="command")

    run = sub.add_parser("run", help="export embeddings (default command)")
    for p in (parser, run):
        p.add_argument("--dataset", help=f"one of: {', '.join(ALLOWED_DATASETS)}")
        p.add_argument("--split", choices=("train", "test"), default="train")
        p.add_argument("--backbone", help=f"one of: {', '.join(ALLOWED_BACKBONES)}")
        p.add_argument("--out", help="output FSB1 path")
        p.add_argument("--batch-size", type=int, default=32)
        p.add_argument("--device", default="cpu")
        p.add_argument("--l2", action="store_true", help="L2-normalize embeddings")

    check = sub.add_parser("verify", help="integrity-check an FSB1 file")
    check.add_argument("path")

    args = parser.parse_args(argv)
    try:
        if args.command == "verify":
            report = verify_file(args.path)
            if report["nan_count"]:
                print(json.dumps(report, sort_keys=True))
                print("non-finite features present", file=sys.stderr)
                return 1
            print(json.dumps(report, sort_keys=True))
            return 0
        if not (args.dataset and args.backbone and args.out):
            parser.error("--dataset, --backbone and --out are required")
        job = ExportJob(
            dataset=args.dataset,
            split=args.split,
            backbone=args.backbone,
            out=args.out,
            batch_size=args.batch_size,
            device=args.device,
            l2_normalize=args.l2,
        )
        print(json.dumps(export_features(job), sort_keys=True))
        return 0
    except (ExportError, VerifyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
