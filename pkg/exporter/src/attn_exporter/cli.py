"""Command line front end.

    export-attn --model <id> --in passages.jsonl --out attn.jsonl \
        --batch 16 --max-len 128

Exit codes: 0 success, 2 invalid arguments, 3 model or input file not
found. Malformed passage lines are skipped with a warning and the skip
count is reported on stderr.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .export import ExportJob, export_attention, load_encoder


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="export-attn",
        description="Dump last-layer [CLS] attention (head-averaged) as JSONL term weights.",
    )
    parser.add_argument("--model", required=True, help="model identifier or local path")
    parser.add_argument("--in", dest="input", required=True, help="passage JSONL file")
    parser.add_argument("--out", required=True, help="output JSONL file")
    parser.add_argument("--batch", type=int, default=16, help="inference batch size")
    parser.add_argument("--max-len", type=int, default=128, help="truncation length")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.batch < 1:
        print(f"export-attn: invalid --batch {args.batch}: must be >= 1", file=sys.stderr)
        return 2
    if args.max_len < 3:
        print(
            f"export-attn: invalid --max-len {args.max_len}: must fit [CLS], [SEP] "
            "and at least one content token",
            file=sys.stderr,
        )
        return 2
    if not Path(args.input).is_file():
        print(f"export-attn: no such input file: {args.input}", file=sys.stderr)
        return 3

    try:
        encoder = load_encoder(args.model)
    except OSError:
        print(f"export-attn: model not found: {args.model}", file=sys.stderr)
        return 3

    job = ExportJob(
        model_id=args.model,
        input_path=Path(args.input),
        output_path=Path(args.out),
        batch_size=args.batch,
        max_length=args.max_len,
    )
    report = export_attention(job, encoder=encoder)
    if report.n_skipped:
        print(f"export-attn: skipped {report.n_skipped} malformed line(s)", file=sys.stderr)
    print(f"export-attn: wrote {report.n_records} records to {args.out}", file=sys.stderr)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
