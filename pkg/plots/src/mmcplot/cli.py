"""Command line entry point: ``plot <kind> --in <csv> [--in ...] --out <file>``."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .figures import FigureSpec, render
from .schema import COLUMNS_BY_KIND, SchemaError


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="plot", description="Render figures from manifoldmc experiment CSVs"
    )
    parser.add_argument("kind", choices=sorted(COLUMNS_BY_KIND))
    parser.add_argument(
        "--in",
        dest="inputs",
        action="append",
        required=True,
        help="input CSV (repeatable)",
    )
    parser.add_argument("--out", required=True, type=Path)
    args = parser.parse_args(argv)
    spec = FigureSpec(inputs=tuple(args.inputs), kind=args.kind, output=args.out)
    try:
        path = render(spec)
    except SchemaError as err:
        print(str(err), file=sys.stderr)
        return 2
    except FileNotFoundError as err:
        print(str(err), file=sys.stderr)
        return 2
    print(path)
    return 0


if __name__ == "__main__":
    sys.exit(main())
