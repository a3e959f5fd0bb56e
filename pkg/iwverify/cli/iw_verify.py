#!/usr/bin/env python3

from argparse import ArgumentParser, ArgumentDefaultsHelpFormatter, Namespace
import logging
from pathlib import Path
import sys

from iwverify.experiments import (
    StudyReport,
    run_feps_study,
    run_mollifier_suite,
    run_reduction_suite,
    run_residual_study,
)
from iwverify.feps import FepsParams
from iwverify.field import StateBoxError
from iwverify.mollifier import MollifierParams, QuadratureOverflowError
from iwverify.scenario import ScenarioConfig, ScenarioError, load_scenario
from iwverify.schedules import ConfigError, JumpBoundError, ScheduleMismatchError


logger = logging.getLogger("iwverify.cli")

# problems with the input rather than with the formula under test
INPUT_ERRORS = (
    ConfigError,
    JumpBoundError,
    OSError,
    QuadratureOverflowError,
    ScheduleMismatchError,
    StateBoxError,
)


def _scenario(args: Namespace) -> ScenarioConfig:
    cfg = load_scenario(args.config)
    return cfg.with_overrides(
        master_seed=args.seed, n_paths=args.paths, refinement_levels=args.levels
    )


def _verify_iw(args: Namespace) -> StudyReport:
    return run_residual_study(_scenario(args), workers=args.workers)


def _reductions(args: Namespace) -> StudyReport:
    return run_reduction_suite(
        _scenario(args), workers=args.workers, n_scenarios=args.scenarios
    )


def _checked(factory, *args):
    """Build study parameters from the command line; bad values are bad input."""
    try:
        return factory(*args)
    except ValueError as e:
        raise ConfigError(str(e)) from None


def _mollifier(args: Namespace) -> StudyReport:
    for eps in args.eps_grid:
        _checked(MollifierParams, eps, 1, args.nodes, args.radius)
    return run_mollifier_suite(args.eps_grid, args.nodes, args.radius)


def _feps(args: Namespace) -> StudyReport:
    cfg = _scenario(args)
    params = _checked(
        FepsParams, tuple(args.eps_grid), args.nodes, args.radius, cfg.n_paths
    )
    return run_feps_study(cfg, params, workers=args.workers)


def _parser() -> ArgumentParser:
    common = ArgumentParser(add_help=False)
    common.add_argument(
        "--format",
        "-f",
        choices=("csv", "json"),
        default="csv",
        help="report format",
    )
    common.add_argument(
        "--out",
        "-o",
        type=Path,
        help="write the report to this file instead of stdout",
    )
    common.add_argument(
        "--verbose",
        "-v",
        action="count",
        default=0,
        help="log progress to stderr; repeat for debug output",
    )

    scenario = ArgumentParser(add_help=False)
    scenario.add_argument("config", type=Path, help="scenario YAML document")
    scenario.add_argument(
        "--seed", "-s", type=int, help="override the master seed of the scenario"
    )
    scenario.add_argument(
        "--paths", "-n", type=int, help="override the number of Monte Carlo paths"
    )
    scenario.add_argument(
        "--levels", "-l", type=int, help="override the number of refinement levels"
    )
    scenario.add_argument(
        "--workers",
        "-w",
        type=int,
        default=1,
        help="worker processes for the path loop; the report does not depend "
        "on this",
    )

    quadrature = ArgumentParser(add_help=False)
    quadrature.add_argument(
        "--nodes", type=int, default=64, help="Gauss–Legendre nodes per axis"
    )
    quadrature.add_argument(
        "--radius",
        type=float,
        default=8.0,
        help="quadrature cutoff radius in units of ε",
    )

    parser = ArgumentParser(
        description="Numerical verification of the generalized Itô–Wentzell "
        "formula for jump-diffusions",
        formatter_class=ArgumentDefaultsHelpFormatter,
    )
    commands = parser.add_subparsers(dest="command", required=True)
    verify = commands.add_parser(
        "verify-iw",
        parents=[scenario, common],
        formatter_class=ArgumentDefaultsHelpFormatter,
        help="pathwise residual of the formula over the refinement levels",
    )
    verify.set_defaults(study=_verify_iw)
    reductions = commands.add_parser(
        "reductions",
        parents=[scenario, common],
        formatter_class=ArgumentDefaultsHelpFormatter,
        help="reductions to the classical Itô–Wentzell formula, the "
        "generalized Itô formula and the chain rule",
    )
    reductions.add_argument(
        "--scenarios",
        type=int,
        default=100,
        help="size of the random jump-free scenario matrix",
    )
    reductions.set_defaults(study=_reductions)
    mollifier = commands.add_parser(
        "mollifier",
        parents=[quadrature, common],
        formatter_class=ArgumentDefaultsHelpFormatter,
        help="bound checks of the Gaussian mollifier",
    )
    mollifier.add_argument(
        "--eps-grid",
        type=float,
        nargs="+",
        default=[0.5, 0.1, 0.02],
        help="mollifier widths",
    )
    mollifier.set_defaults(study=_mollifier)
    feps = commands.add_parser(
        "feps",
        parents=[scenario, quadrature, common],
        formatter_class=ArgumentDefaultsHelpFormatter,
        help="mean-square convergence of the mollified field",
    )
    feps.add_argument(
        "--eps-grid",
        type=float,
        nargs="+",
        default=[0.4, 0.2, 0.1, 0.05],
        help="strictly decreasing mollifier widths",
    )
    feps.set_defaults(study=_feps)
    return parser


def run(argv: list[str] | None = None) -> int:
    """
    Run one study and write its report.

    Returns:
        int: 0 if every check passed, 1 if one failed, 2 on bad input.
    """
    args = _parser().parse_args(argv)
    logging.basicConfig(
        level=(logging.WARNING, logging.INFO, logging.DEBUG)[min(args.verbose, 2)],
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        report = args.study(args)
    except ScenarioError as e:
        print(f"invalid scenario: {e}", file=sys.stderr)
        return 2
    except INPUT_ERRORS as e:
        print(f"{type(e).__name__}: {e}", file=sys.stderr)
        return 2

    if args.out:
        with open(args.out, "w") as f:
            report.write(f, args.format)
    else:
        report.write(sys.stdout, args.format)
    if not report.passed:
        logger.warning("%s: at least one check failed", report.kind)
        return 1
    return 0


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
