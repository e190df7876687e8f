from __future__ import annotations

import argparse
import logging
from dataclasses import replace
from typing import Any
from typing import Dict
from typing import List
from typing import NoReturn
from typing import Optional
from typing import Sequence
from typing import Tuple

from ddbounds.config import config_hash
from ddbounds.config import load_problem_config
from ddbounds.driver import AdaptivePlan
from ddbounds.driver import RunReport
from ddbounds.driver import StartFunction
from ddbounds.driver import StopPolicy
from ddbounds.driver import cracked_benchmark
from ddbounds.driver import emit_reports
from ddbounds.driver import random_start
from ddbounds.driver import run_adaptive
from ddbounds.driver import run_estimate
from ddbounds.driver import run_global_benchmark
from ddbounds.driver import square_benchmark
from ddbounds.mesh import partition_regular
from ddbounds.utils._errors import DDBoundsError

_LOGGER = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_BUDGET = 2

_APPROACHES = {"bdd": "primal_bdd", "feti": "dual_feti"}
_STOPS = {"tol": "tolerance", "envelope": "envelope", "tenth": "discr_tenth"}
_LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


class _Parser(argparse.ArgumentParser):
    """Argument parser reporting usage errors as `ValueError` so they map to the error exit code."""

    def error(self, message: str) -> NoReturn:
        """Raises instead of exiting."""
        msg = f"{self.prog}: {message}"
        raise ValueError(msg)


def parse_grid(text: str) -> Tuple[int, int]:
    """Parses `NXxNY`, e.g. `3x3`."""
    try:
        nx, ny = (int(v) for v in text.lower().split("x"))
    except ValueError as exc:
        msg = f"Grid must read NXxNY, e.g. 3x3. Found {text!r}"
        raise argparse.ArgumentTypeError(msg) from exc
    if nx < 1 or ny < 1:
        msg = f"Grid sizes must be positive. Found {text!r}"
        raise argparse.ArgumentTypeError(msg)
    return nx, ny


def parse_sizes(text: str) -> List[int]:
    """Parses a comma separated list of mesh subdivisions, e.g. `6,12,24`."""
    try:
        sizes = [int(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        msg = f"Sizes must be comma separated integers. Found {text!r}"
        raise argparse.ArgumentTypeError(msg) from exc
    if not sizes or min(sizes) < 1:
        msg = f"Sizes must be positive integers. Found {text!r}"
        raise argparse.ArgumentTypeError(msg)
    return sizes


def _add_solver_options(parser: argparse.ArgumentParser, *, grid: str, stop: str) -> None:
    parser.add_argument("--approach", choices=sorted(_APPROACHES), default="bdd", help="Substructuring approach.")
    parser.add_argument("--grid", type=parse_grid, default=parse_grid(grid), help="Partition grid NXxNY.")
    parser.add_argument("--patch-refine", type=int, default=4, help="Star patch subdivision factor.")
    parser.add_argument("--tol", type=float, default=1e-8, help="Relative residual tolerance.")
    parser.add_argument("--max-iter", type=int, default=500, help="Iteration budget per solve.")
    parser.add_argument("--stop", choices=sorted(_STOPS), default=stop, help="Stopping rule.")
    parser.add_argument("--estimate-every", action="store_true", help="Estimate at every iteration.")
    parser.add_argument("--perturb-start", type=float, default=0.0, metavar="SCALE", help="Random initial guess.")
    parser.add_argument("--seed", type=int, default=None, help="Seed of the random initial guess.")
    parser.add_argument("--out", default="ddbounds-out", metavar="DIR", help="Report directory.")


def _add_adaptive_options(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--target-precision", type=float, default=0.05, help="Relative QoI interval width to reach.")
    parser.add_argument("--max-cycles", type=int, default=3, help="Number of meshes at most.")
    parser.add_argument(
        "--recycle", action=argparse.BooleanOptionalAction, default=True, help="Recycle search directions."
    )


def build_parser() -> argparse.ArgumentParser:
    """Command line parser of the `ddbounds` console script."""
    parser = _Parser(prog="ddbounds", description="Guaranteed error bounds for substructured elasticity solvers.")
    verbosity = parser.add_mutually_exclusive_group()
    verbosity.add_argument("-v", "--verbose", action="store_true", help="Debug logging.")
    verbosity.add_argument("-q", "--quiet", action="store_true", help="Warnings only.")
    commands = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    square = commands.add_parser("bench-square", help="h-convergence study on the square benchmark.")
    square.add_argument("--sizes", type=parse_sizes, default=parse_sizes("6,12,24"), help="Subdivisions per side.")
    square.add_argument("--half-width", type=float, default=1.0, help="Length l of the square [-3l, 3l]^2.")
    _add_solver_options(square, grid="3x3", stop="tol")

    cracked = commands.add_parser("bench-cracked", help="Adaptive goal-oriented run on the plate with a slit.")
    cracked.add_argument("--cells-per-unit", type=int, default=4, help="Grid cells per unit length.")
    _add_solver_options(cracked, grid="4x4", stop="envelope")
    _add_adaptive_options(cracked)

    adaptive = commands.add_parser("adaptive", help="Adaptive goal-oriented run.")
    adaptive.add_argument("--config", default=None, help="Problem configuration; square benchmark when omitted.")
    adaptive.add_argument("--subdivisions", type=int, default=6, help="Square benchmark subdivisions.")
    _add_solver_options(adaptive, grid="3x3", stop="envelope")
    _add_adaptive_options(adaptive)

    single = commands.add_parser("estimate", help="Single solve with its error bounds.")
    single.add_argument("--config", required=True, help="Problem configuration.")
    _add_solver_options(single, grid="1x1", stop="tol")
    return parser


def _policy(args: argparse.Namespace) -> StopPolicy:
    return StopPolicy(kind=_STOPS[args.stop], tolerance=args.tol, max_iterations=args.max_iter)


def _plan(args: argparse.Namespace) -> AdaptivePlan:
    return AdaptivePlan(
        target_precision=args.target_precision,
        max_cycles=args.max_cycles,
        recycle=args.recycle,
        patch_refinement=args.patch_refine,
        estimate_every=args.estimate_every,
    )


def _start(args: argparse.Namespace) -> Optional[StartFunction]:
    return random_start(args.perturb_start, args.seed) if args.perturb_start > 0 else None


def _arguments_hash(args: argparse.Namespace) -> str:
    payload: Dict[str, Any] = {k: v for k, v in vars(args).items() if k not in {"out", "verbose", "quiet"}}
    return config_hash({k: list(v) if isinstance(v, tuple) else v for k, v in payload.items()})


def _run(args: argparse.Namespace) -> RunReport:
    approach = _APPROACHES[args.approach]
    common = {"approach": approach, "policy": _policy(args), "start": _start(args)}
    if args.command == "bench-square":
        report = run_global_benchmark(
            args.sizes,
            args.grid,
            approach,
            half_width=args.half_width,
            policy=common["policy"],
            r=args.patch_refine,
            estimate_every=args.estimate_every,
            start=common["start"],
        )
        digest = _arguments_hash(args)
    elif args.command == "bench-cracked":
        report = run_adaptive(cracked_benchmark(args.cells_per_unit), _plan(args), grid=args.grid, **common)
        digest = _arguments_hash(args)
    elif args.command == "adaptive" and args.config is None:
        report = run_adaptive(square_benchmark(args.subdivisions), _plan(args), grid=args.grid, **common)
        digest = _arguments_hash(args)
    elif args.command == "adaptive":
        config = load_problem_config(args.config)
        report = run_adaptive(config.problem, _plan(args), partition=config.partition, **common)
        digest = config.digest
    else:
        config = load_problem_config(args.config)
        partition = config.partition
        if "partition" not in config.payload:
            partition = partition_regular(config.problem.mesh, args.grid)
        report = run_estimate(
            config.problem,
            partition,
            approach=approach,
            policy=common["policy"],
            r=args.patch_refine,
            estimate_every=args.estimate_every,
            start=common["start"],
        )
        digest = config.digest
    return replace(report, config_hash=digest)


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Entry point of the `ddbounds` console script.

    Returns:
        0 when the run completed or met its target, 2 when the adaptive cycle budget was exhausted, 1 on error.
    """
    try:
        args = build_parser().parse_args(argv)
    except ValueError as exc:
        logging.basicConfig(format=_LOG_FORMAT)
        _LOGGER.error("%s", exc)  # noqa: TRY400
        return EXIT_ERROR

    level = logging.DEBUG if args.verbose else logging.WARNING if args.quiet else logging.INFO
    logging.basicConfig(level=level, format=_LOG_FORMAT)
    try:
        report = _run(args)
        emit_reports(report, args.out)
    except (DDBoundsError, ValueError, OSError) as exc:
        _LOGGER.error("%s: %s", type(exc).__name__, exc)  # noqa: TRY400
        return EXIT_ERROR

    if report.status == "budget_exhausted":
        _LOGGER.warning("Target precision not reached within %s cycles", len(report.cycles))
        return EXIT_BUDGET
    return EXIT_OK
