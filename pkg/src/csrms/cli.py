"""Command line entry point.

    csrms synth|cluster|graph|train|eval|export-repr --config cfg.json [--key value ...]

Any flat config key can be overridden with ``--key value``. Exit codes:
0 success, 1 invalid configuration (prints the field), 2 missing upstream
artifact (prints the path).
"""

from __future__ import annotations

import argparse
import json
import sys

from . import pipeline
from .pipeline import ConfigError, MissingArtifact

_COMMANDS = ("synth", "cluster", "graph", "train", "eval", "export-repr")


def _parse_overrides(pairs: list[str]) -> dict:
    overrides = {}
    i = 0
    while i < len(pairs):
        token = pairs[i]
        if not token.startswith("--"):
            raise ConfigError(token, "expected --key value")
        key = token[2:].replace("-", "_")
        if i + 1 >= len(pairs):
            raise ConfigError(key, "missing value")
        overrides[key] = pipeline.coerce_value(key, pairs[i + 1])
        i += 2
    return overrides


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="csrms", description=__doc__)
    parser.add_argument("command", choices=_COMMANDS)
    parser.add_argument("--config", default=None, help="flat JSON config file")
    parser.add_argument("--out", default=None, help="output path for export-repr")
    args, rest = parser.parse_known_args(argv)

    try:
        cfg = pipeline.load_config(args.config, _parse_overrides(rest))
        if args.command == "synth":
            result = pipeline.cmd_synth(cfg)
        elif args.command == "cluster":
            result = pipeline.cmd_cluster(cfg)
        elif args.command == "graph":
            result = pipeline.cmd_graph(cfg)
        elif args.command == "train":
            result = pipeline.cmd_train(cfg)
        elif args.command == "eval":
            result = pipeline.cmd_eval(cfg)
        else:
            result = pipeline.cmd_export_repr(cfg, args.out)
    except ConfigError as exc:
        print(f"invalid config: {exc.field} ({exc})", file=sys.stderr)
        return 1
    except MissingArtifact as exc:
        print(f"missing artifact: {exc.path}", file=sys.stderr)
        return 2

    print(json.dumps(result, sort_keys=True))
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
