"""Command-line front end: export-embeddings."""

from __future__ import annotations

import argparse
import sys

from .exporter import REPRESENTATIONS, SCOPES, ExportError, ExportSpec, export


def build_parser():
    parser = argparse.ArgumentParser(
        prog="export-embeddings",
        description="Convert a document corpus into a feature file of mean "
                    "word embeddings, sentence embeddings, or focus-word vectors.",
    )
    parser.add_argument("--input", required=True, help="corpus TSV (id, text, focus)")
    parser.add_argument("--repr", required=True, choices=REPRESENTATIONS,
                        dest="representation")
    parser.add_argument("--source", required=True,
                        help="word-vector file (mwe/focus) or sentence encoder name")
    parser.add_argument("--out", required=True, help="feature file to write")
    parser.add_argument("--scope", choices=SCOPES, default="train_plus_test",
                        help="which corpus the input file holds")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    spec = ExportSpec(
        input_path=args.input,
        representation=args.representation,
        source=args.source,
        output_path=args.out,
        scope=args.scope,
    )
    try:
        export(spec)
    except ExportError as exc:
        print(f"[export] {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
