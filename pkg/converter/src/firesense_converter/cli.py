"""Command-line front end.

Exit codes match the main toolkit: 0 success, 1 usage errors, 2 missing
or malformed source data.
"""

import argparse
import sys

from firesense.data import save_dataset

from .convert import convert
from .errors import SourceFormatError


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would sys.exit(2); keep codes ours
        raise _UsageError(f"{self.prog}: {message}")


def _build_parser() -> _Parser:
    parser = _Parser(prog="firesense-convert",
                     description="Convert benchmark TFRecord files into a "
                                 "firesense dataset container")
    parser.add_argument("sources", nargs="*",
                        help="TFRecord files, converted in order")
    parser.add_argument("--out", required=True, help="output container path")
    parser.add_argument("--limit", type=int, default=None,
                        help="stop after this many samples")
    return parser


def main(argv=None) -> int:
    try:
        args = _build_parser().parse_args(argv)
        if args.limit is not None and args.limit < 0:
            raise _UsageError(f"--limit must be >= 0, got {args.limit}")
        dataset, summary = convert(args.sources, limit=args.limit)
        save_dataset(dataset, args.out)
        print("channel,min,max,mean")
        for row in summary:
            print(f"{row['channel']},{row['min']!r},{row['max']!r},{row['mean']!r}")
        print(f"wrote {len(dataset)} samples to {args.out}")
        return 0
    except _UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (SourceFormatError, FileNotFoundError, IsADirectoryError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
