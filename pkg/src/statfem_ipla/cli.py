"""Command line entry points for the experiment suite.

Usage follows ``statfem-ipla <command> [--config file.json] [--key=value ...]``
where dotted overrides reach into nested settings, e.g.
``--ipla.step_size=0.005``. Exit codes: 0 on success, 2 for configuration
or usage errors, 3 when an experiment fails numerically.
"""

import argparse
import logging
import sys

import numpy as np

from .experiments import (
    ConfigError,
    NumericalFailure,
    cmd_condition_numbers,
    cmd_convergence_order,
    cmd_diffusivity,
    cmd_eigs,
    cmd_nonlinear,
    cmd_posterior_variance,
    cmd_solve,
    cmd_stability,
    load_config,
)
from .model_nonlinear import NewtonError

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3

# command name -> (runner, default problem, help line)
_COMMANDS = {
    "convergence": (
        cmd_convergence_order, "poisson-1d",
        "particle-count convergence of the forcing estimate",
    ),
    "posterior-variance": (
        cmd_posterior_variance, "poisson-1d",
        "empirical vs closed-form posterior variance",
    ),
    "stability": (
        cmd_stability, "poisson-1d",
        "largest stable step size across mesh sizes and length scales",
    ),
    "condition": (
        cmd_condition_numbers, "poisson-1d",
        "condition numbers of the plain and preconditioned potential",
    ),
    "diffusivity": (
        cmd_diffusivity, "diffusivity-1d",
        "scalar diffusivity estimation with warm starts",
    ),
    "nonlinear": (
        cmd_nonlinear, "nonlinear-1d",
        "Gaussian approximation comparison for the nonlinear solver",
    ),
    "solve": (cmd_solve, "poisson-1d", "single forward solve to CSV"),
    "eigs": (cmd_eigs, "poisson-1d", "export Laplacian eigenpairs to CSV"),
}


def build_parser():
    parser = argparse.ArgumentParser(
        prog="statfem-ipla",
        description="Experiment suite for statistical FEM estimation with "
                    "interacting particle Langevin samplers.",
    )
    parser.add_argument("--version", action="version",
                        version=f"%(prog)s {_version()}")
    sub = parser.add_subparsers(dest="command", required=True,
                                metavar="command")
    for name, (_, _, help_line) in _COMMANDS.items():
        sp = sub.add_parser(name, help=help_line)
        sp.add_argument("--config", default=None, metavar="FILE",
                        help="JSON experiment config")
        sp.add_argument("--output-dir", default=None, metavar="DIR",
                        help="where CSV and metadata files go")
        sp.add_argument("--seed", default=None, type=int,
                        help="base seed for all derived streams")
        sp.add_argument("-v", "--verbose", action="store_true",
                        help="debug-level logging")
    return parser


def _version():
    from statfem_ipla import __version__

    return __version__


def _collect_overrides(args, extras):
    overrides = []
    for text in extras:
        if not text.startswith("--") or "=" not in text:
            raise ConfigError(
                f"unrecognized argument '{text}' (overrides look like "
                "--section.key=value)"
            )
        overrides.append(text[2:])
    if args.output_dir is not None:
        overrides.append(f"output_dir={args.output_dir}")
    if args.seed is not None:
        overrides.append(f"ipla.seed={args.seed}")
    return overrides


def main(argv=None):
    parser = build_parser()
    args, extras = parser.parse_known_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    runner, default_problem, _ = _COMMANDS[args.command]
    try:
        config = load_config(args.config, _collect_overrides(args, extras),
                             default_problem=default_problem)
    except ConfigError as exc:
        logger.error("configuration error: %s", exc)
        return EXIT_CONFIG
    try:
        runner(config)
    except ConfigError as exc:
        logger.error("configuration error: %s", exc)
        return EXIT_CONFIG
    except (NumericalFailure, NewtonError, np.linalg.LinAlgError) as exc:
        logger.error("numerical failure: %s", exc)
        return EXIT_NUMERICAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
