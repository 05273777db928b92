"""plotfig command line: render figures from a metakernels output directory."""

from __future__ import annotations

import argparse
import sys

from .figures import FigureSpec, SchemaError, render_diagnostics, render_sweeps


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="plotfig",
        description="Render sweep panels and diagnostic plots from metakernels "
                    "CSV/JSON outputs.",
    )
    parser.add_argument("--in", dest="input_dir", required=True,
                        help="directory holding the CSV/JSON outputs")
    parser.add_argument("--out", dest="output_dir", required=True,
                        help="directory for the rendered images")
    parser.add_argument("--format", choices=("png", "svg"), default="png")
    args = parser.parse_args(argv)
    spec = FigureSpec(input_dir=args.input_dir, output_dir=args.output_dir,
                      image_format=args.format)
    written = []
    errors = []
    for renderer in (render_sweeps, render_diagnostics):
        try:
            written.extend(renderer(spec))
        except (SchemaError, OSError) as exc:
            errors.append(str(exc))
    for path in written:
        print(path)
    if errors and not written:
        print("error: " + "; ".join(errors), file=sys.stderr)
        return 1
    for message in errors:
        print(f"warning: {message}", file=sys.stderr)
    return 0


if __name__ == "__main__":
    sys.exit(main())
