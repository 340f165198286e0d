"""plotkit render <export-or-csv> [--kind auto] [--out fig.png]

Exit codes: 0 ok, 1 bad input/schema, 2 render failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from .figures import FigureJob, render
from .schema import SchemaError


def detect_kind(path: str) -> str:
    if path.endswith(".csv"):
        return "curves"
    with open(path, "r", encoding="utf-8") as fh:
        try:
            return json.load(fh).get("kind", "")
        except json.JSONDecodeError as exc:
            raise SchemaError(f"{path}: not valid JSON ({exc})") from exc


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="plotkit", description=__doc__)
    sub = parser.add_subparsers(dest="verb", required=True)
    rend = sub.add_parser("render", help="render one export or metrics CSV")
    rend.add_argument("input")
    rend.add_argument("--kind", default="auto", help="plane|surface|spectrum|curves|heatmap|auto")
    rend.add_argument("--out", default=None, help="output image (default: alongside input, .png)")
    rend.add_argument("--dpi", type=int, default=120)
    args = parser.parse_args(argv)

    try:
        kind = args.kind if args.kind != "auto" else detect_kind(args.input)
        out = args.out or os.path.splitext(args.input)[0] + ".png"
        path = render(FigureJob(args.input, kind, out, style={"dpi": args.dpi}))
        print(f"wrote {path}")
        return 0
    except (SchemaError, FileNotFoundError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # matplotlib failures and friends
        print(f"render error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
