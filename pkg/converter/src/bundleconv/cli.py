"""Converter command line: `bundleconv convert --src DIR --out DIR`."""

from __future__ import annotations

import argparse
import sys

from .convert import PROFILES, Truncation, convert
from .reader import CheckpointError


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bundleconv", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("convert", help="convert a safetensors checkpoint to a bundle")
    p.add_argument("--src", required=True, help="source checkpoint directory")
    p.add_argument("--profile", default="llama-like", choices=sorted(PROFILES))
    p.add_argument("--truncate-layers", type=int, default=None, metavar="K",
                   help="keep only the first K layers")
    p.add_argument("--truncate-dff", type=int, default=None, metavar="M",
                   help="keep only the first M FFN channels per layer")
    p.add_argument("--truncate-heads", type=int, default=None, metavar="H",
                   help="keep only the first H attention heads per layer")
    p.add_argument("--replicate-kv", action="store_true",
                   help="expand grouped-query K/V heads by duplication")
    p.add_argument("--out", required=True, help="bundle output directory")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    truncation = Truncation(
        n_layers=args.truncate_layers, d_ff=args.truncate_dff, n_heads=args.truncate_heads
    )
    try:
        out = convert(
            args.src,
            profile=args.profile,
            truncation=truncation,
            out_dir=args.out,
            replicate_kv=args.replicate_kv,
        )
    except (CheckpointError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 2
    print(f"bundle written to {out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
