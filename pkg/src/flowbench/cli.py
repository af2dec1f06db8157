"""Command line entry point for the benchmark drivers.

Each subcommand runs one experiment from `flowbench.app`, prints its
convergence table or timing summary followed by one line per built-in
assertion, and exits 0 only when every assertion passed.  Values from
--config files are overridden by explicit flags.
"""

import argparse
import sys

from . import app


def _parser():
    parser = argparse.ArgumentParser(
        prog="flowbench",
        description="High-order matrix-free flow solver benchmarks.")
    sub = parser.add_subparsers(dest="command", required=True)
    descriptions = {
        "bench-op": "operator apply/assembly timings and degree scaling",
        "subproblems": "CG robustness of mass, Poisson, and Helmholtz solves",
        "stokes-steady": "steady Stokes manufactured-solution convergence",
        "stokes-unsteady": "SDIRK temporal orders on a periodic Stokes flow",
        "kovasznay": "spatial convergence on the Kovasznay wake",
        "taylor-green-2d": "temporal orders and energy decay on the vortex",
    }
    for command in app.DRIVERS:
        cmd = sub.add_parser(command, help=descriptions.get(command, command))
        cmd.add_argument("--config", help="key=value config file")
        cmd.add_argument("--p", type=int, help="polynomial degree")
        cmd.add_argument("--mesh", help="element counts, e.g. 8x8 or 4x4x4")
        cmd.add_argument("--dim", type=int, choices=(2, 3),
                         help="space dimension for operator benchmarks")
        cmd.add_argument("--dt", type=float, help="time step")
        cmd.add_argument("--nu", type=float, help="kinematic viscosity")
        cmd.add_argument("--final-time", type=float, dest="final_time",
                         help="end time of the march")
        cmd.add_argument("--order", type=int,
                         help="time integration order for projection runs")
        cmd.add_argument("--tableau", help="SDIRK tableau name")
        cmd.add_argument("--rel-tol", type=float, dest="rel_tol",
                         help="Krylov relative tolerance")
        cmd.add_argument("--seed", type=int, help="random seed")
        cmd.add_argument("--backend", choices=("numba", "numpy"),
                         help="kernel backend override")
        cmd.add_argument("--out", help="directory for results.csv and rates.txt")
        cmd.add_argument("--vtk", action="store_true", default=None,
                         help="also write structured-grid VTK fields")
    return parser


def main(argv=None):
    args = _parser().parse_args(argv)
    file_values = app.load_config_file(args.config) if args.config else {}
    overrides = {key: val for key, val in vars(args).items()
                 if key not in ("command", "config")}
    try:
        config = app.build_config(args.command, file_values, overrides)
    except ValueError as exc:
        print(f"flowbench: {exc}", file=sys.stderr)
        return 2
    result = app.run(args.command, config)
    if result.summary:
        print(result.summary.rstrip("\n"))
    for assertion in result.assertions:
        print(assertion.line())
    return 0 if result.ok else 1


if __name__ == "__main__":
    sys.exit(main())
