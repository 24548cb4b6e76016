"""Command line entry point.

    embed-export --in texts.jsonl --model <hub-id> --pool mean --out feats.jsonl

Exit codes: 0 success, 2 bad input (flags or corpus records), 1 environment
failure (encoder download/load) or export runtime failure.
"""

from __future__ import annotations

import argparse
import sys

from .errors import ExportError, ModelLoadError, RecordError
from .exporter import CACHE_ENV, export_embeddings


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="embed-export",
        description="Export frozen transformer embeddings into cepc feature files.",
        epilog=f"Set {CACHE_ENV} to pin the model cache directory.",
    )
    p.add_argument("--in", dest="in_path", required=True, help="input text corpus (JSONL)")
    p.add_argument("--model", required=True, help="encoder model id or local path")
    p.add_argument("--pool", choices=("cls", "mean"), default="mean", help="pooling mode")
    p.add_argument("--out", required=True, help="output feature file (.bin selects binary)")
    p.add_argument("--batch", type=int, default=32, help="encoder batch size")
    p.add_argument("--max-len", type=int, default=256, help="token truncation length")
    p.add_argument("--revision", default=None, help="model revision to pin")
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        rows, dim = export_embeddings(
            args.in_path,
            args.model,
            args.pool,
            args.out,
            batch=args.batch,
            max_len=args.max_len,
            revision=args.revision,
        )
    except RecordError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except ModelLoadError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except ExportError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    print(f"wrote {rows} rows x {dim} dims to {args.out}")
    return 0


def entry() -> None:
    sys.exit(main())
