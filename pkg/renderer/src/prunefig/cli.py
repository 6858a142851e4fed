"""CLI: render a report bundle into the standard figure set.

Exit codes: 0 success, 1 bad arguments/bundle, 2 rendering failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .figures import RenderError, render_all


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="prunefig", description="Render prunelens report-bundle figures.")
    sub = parser.add_subparsers(dest="command", required=True)
    r = sub.add_parser("render", help="render the standard figure set")
    r.add_argument("--bundle", required=True, help="report bundle directory")
    r.add_argument("--out", required=True, help="output directory for images")
    r.add_argument("--only", default=None,
                   choices=["heatmap", "lines", "histogram", "grid"],
                   help="render only figures of this kind")
    args = parser.parse_args(argv)

    bundle = Path(args.bundle)
    if not bundle.is_dir():
        print(f"bundle directory not found: {bundle}", file=sys.stderr)
        return 1
    try:
        manifest = render_all(bundle, args.out, only=args.only)
    except RenderError as err:
        print(f"rendering failed: {err}", file=sys.stderr)
        return 2
    n_ok = len(manifest["rendered"])
    n_skip = len(manifest["skipped"])
    print(f"rendered {n_ok} figures, skipped {n_skip}")
    if n_ok == 0 and n_skip:
        print("warning: nothing rendered; bundle may be empty", file=sys.stderr)
    return 0


if __name__ == "__main__":
    sys.exit(main())
