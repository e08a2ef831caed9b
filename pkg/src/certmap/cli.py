"""Command line entry point.

    certmap run <scenario> [--seed N] [--oracle] [--out DIR] [--fraction F] [--iterations K]
    certmap fig3 <scenario> [--out FILE]
    certmap fig5 <scenario> [--out FILE]
    certmap slice <snapshot> --z Z [--out FILE]

Exit codes: 0 ok, 1 usage, 2 scenario error, 3 certification violation.
Log verbosity comes from ``CERTMAP_LOG_LEVEL`` (default WARNING).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from .scenario import ScenarioError

EXIT_OK, EXIT_USAGE, EXIT_SCENARIO, EXIT_VIOLATION = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _fraction(text: str) -> float:
    f = float(text)
    if not 0.0 < f <= 1.0:
        raise argparse.ArgumentTypeError("fraction must be in (0, 1]")
    return f


def _positive_int(text: str) -> int:
    n = int(text)
    if n < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return n


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="certmap", description="Certified registration and mapping on simulated scenarios.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    run = sub.add_parser("run", help="simulate, register and map a scenario")
    run.add_argument("scenario", help="scenario file or bundled name (e.g. lab-yaw)")
    run.add_argument("--seed", type=int, default=None, help="master seed (default: scenario seed)")
    run.add_argument("--oracle", action="store_true", help="check every published distance against the scene")
    run.add_argument("--out", default="runs/latest", help="output directory")
    run.add_argument("--fraction", type=_fraction, default=None, help="pair-graph edge fraction")
    run.add_argument("--iterations", type=_positive_int, default=None, help="rotation-bound sampling iterations")
    run.add_argument("--frames", type=_positive_int, default=None, help="stop after this many frames")
    run.add_argument("--correspondence-file", default=None, help="matched points with '# frame K' blocks")

    for name, default in (("fig3", "fig3.csv"), ("fig5", "fig5.csv")):
        fig = sub.add_parser(name, help=f"write {name} data as CSV")
        fig.add_argument("scenario")
        fig.add_argument("--out", default=default)
        fig.add_argument("--seed", type=int, default=0)

    sl = sub.add_parser("slice", help="export a z-slice of a saved grid as CSV")
    sl.add_argument("snapshot")
    sl.add_argument("--z", type=float, required=True)
    sl.add_argument("--out", default=None, help="CSV path (default: next to the snapshot)")
    return p


def main(argv=None) -> int:
    logging.basicConfig(
        level=os.environ.get("CERTMAP_LOG_LEVEL", "WARNING").upper(),
        format="%(levelname)s %(name)s: %(message)s",
    )
    args = build_parser().parse_args(argv)
    # imported late so `--help` stays fast
    from . import cesdf, pipeline

    try:
        if args.command == "run":
            cfg = pipeline.RunConfig(
                args.scenario, seed=args.seed, oracle=args.oracle, out_dir=args.out,
                fraction=args.fraction, iterations=args.iterations, max_frames=args.frames,
                correspondence_file=args.correspondence_file,
            )
            summary, _ = pipeline.run_scenario(cfg)
            print(json.dumps(
                {k: getattr(summary, k) for k in ("scenario", "frames", "rms_rre", "rms_rte", "rms_epsilon_r",
                                                   "rms_epsilon_t", "violations", "baseline_violations", "bound_failures")},
                indent=2,
            ))
            if args.oracle and not summary.certified:
                return EXIT_VIOLATION
        elif args.command == "fig3":
            rows, _ = pipeline.export_fig3_data(args.scenario, args.out, seed=args.seed)
            print(f"wrote {len(rows)} rows to {args.out}")
        elif args.command == "fig5":
            rows = pipeline.export_fig5_data(args.scenario, args.out, seed=args.seed)
            print(f"wrote {len(rows)} rows to {args.out}")
        elif args.command == "slice":
            grid, _ = cesdf.load_snapshot(args.snapshot)
            out = args.out or str(Path(args.snapshot).with_name(f"slice_z{args.z:g}.csv"))
            n = cesdf.export_slice(grid, args.z, out)
            print(f"wrote {n} rows to {out}")
    except ScenarioError as exc:
        print(f"scenario error: {exc}", file=sys.stderr)
        return EXIT_SCENARIO
    except pipeline.StageError as exc:
        print(f"run failed: {exc}", file=sys.stderr)
        return EXIT_SCENARIO
    except (FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
