import argparse
import math
import sys
from dataclasses import asdict, replace
from datetime import datetime
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
from loguru import logger

from regimemfg import __version__
from regimemfg.cli.run_directory import (
    CONVERGENCE_FILE,
    DIAGNOSTICS_FILE,
    SCENARIO_FILE,
    STRATEGY_FILE,
    THETA_DIAGONAL_FILE,
    THETA_TAU_FILE,
    VALIDATION_FILE,
    ZETA_FILE,
    RunDirectory,
    RunDirectoryError,
    RunManifest,
    read_binary,
    read_convergence_csv,
    write_binary,
    write_convergence_csv,
    write_tensor_csv,
)
from regimemfg.equilibrium.base import (
    EquilibriumResult,
    EquilibriumStatus,
    contraction_report,
    fit_contraction,
    fixed_point_certificate,
    fp_iteration,
)
from regimemfg.flow.base import DensityField, StrategyField, StrategyShapeError
from regimemfg.flow.fokker_planck import SchemeInstabilityError
from regimemfg.flow.probes import flow_p_lipschitz_probe, strategy_p_lipschitz_probe
from regimemfg.hjb.base import HjbNumericError, ValueTensor
from regimemfg.scenario.base import Scenario, ScenarioError, lint_psi, scenario_hash
from regimemfg.scenario.expressions import ExpressionEvaluationError
from regimemfg.scenario.parser import load_scenario, parse_scenario
from regimemfg.validation.ito import functional_ito_check
from regimemfg.validation.local_optimality import (
    DEFAULT_EPS_STEPS,
    ProbeError,
    improving_action,
    local_optimality_test,
    random_probes,
)
from regimemfg.validation.nplayer import nplayer_simulate
from regimemfg.workers import NodeSweeper, WorkerPoolError

EXIT_OK = 0
EXIT_INPUT_ERROR = 1
EXIT_DIVERGED = 2
EXIT_VALIDATION_FAILED = 3

NPLAYER_W2_TOLERANCE = 0.05
NUMERICAL_ERRORS = (HjbNumericError, SchemeInstabilityError, ExpressionEvaluationError, FloatingPointError)
INPUT_ERRORS = (ScenarioError, RunDirectoryError, StrategyShapeError, ProbeError, WorkerPoolError)

LOCAL_OPTIMALITY_CSV = "local_optimality.csv"
NPLAYER_CSV = "nplayer_w2.csv"
EXPORT_DIRECTORY = "exports"
EXPORTS = ("theta", "strategy", "zeta", "convergence")


class ArgumentParser(argparse.ArgumentParser):
    """
    Usage errors exit with the input-error code instead of argparse's 2, which is reserved for divergence.
    """

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INPUT_ERROR, f"{self.prog}: error: {message}\n")


def configure_logging(verbose: bool = False) -> None:
    logger.remove()
    logger.add(sys.stderr, level="DEBUG" if verbose else "INFO")


def _positive_float(text: str) -> float:
    value = float(text)
    if not value > 0:
        raise argparse.ArgumentTypeError(f"must be positive, got {text}")
    return value


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be at least 1, got {text}")
    return value


def _non_negative_int(text: str) -> int:
    value = int(text)
    if value < 0:
        raise argparse.ArgumentTypeError(f"must be non-negative, got {text}")
    return value


def _agent_count(text: str) -> int:
    value = int(text)
    if value < 2:
        raise argparse.ArgumentTypeError(f"needs at least 2 agents, got {text}")
    return value


def _damping(text: str) -> float:
    value = float(text)
    if not 0 <= value < 1:
        raise argparse.ArgumentTypeError(f"must be in [0, 1), got {text}")
    return value


def _retained_taus(text: str):
    if text.strip() == "all":
        return "all"
    try:
        return tuple(int(part) for part in text.split(",") if part.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected 'all' or comma-separated tau indices, got {text!r}") from None


def build_parser() -> ArgumentParser:
    parser = ArgumentParser(prog="regimemfg", description="Closed-loop equilibria of regime-switching mean-field games")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    commands = parser.add_subparsers(dest="command", required=True, parser_class=ArgumentParser)

    solve = commands.add_parser("solve", help="Solve a scenario and write a run directory")
    solve.add_argument("scenario", type=Path, help="Scenario file")
    solve.add_argument("out_dir", type=Path, help="Run directory to create")
    solve.add_argument("--tol", type=_positive_float, help="Fixed-point tolerance (sup norm)")
    solve.add_argument("--max-iter", type=_positive_int, help="Maximal number of fixed-point iterations")
    solve.add_argument("--damping", type=_damping, help="Damping gamma of the fixed-point update")
    solve.add_argument("--seed", type=int, help="Seed recorded for later validation runs")
    solve.add_argument("--threads", type=_positive_int, help="Worker threads (default: MFG_THREADS or 1)")
    solve.add_argument(
        "--retain-tau", type=_retained_taus, default=(0,), help="Tau indices to keep besides the diagonal, or 'all'"
    )
    solve.add_argument("--verbose", action="store_true", help="Log every sweep")

    validate = commands.add_parser("validate", help="Run the validation suites on a run directory")
    validate.add_argument("run_dir", type=Path, help="Run directory written by 'solve'")
    validate.add_argument("--nplayer", type=_agent_count, help="Simulate this many players")
    validate.add_argument("--chains", type=_positive_int, default=20, help="Chain draws of the N-player simulation")
    validate.add_argument("--local-opt", type=_non_negative_int, default=5, help="Number of local-optimality probes")
    validate.add_argument("--strategy-override", type=Path, help="Binary strategy dump validated instead")
    validate.add_argument("--ito", action="store_true", help="Also run the functional Ito check")
    validate.add_argument("--seed", type=int, help="Seed of probes and simulations (default: the run's seed)")
    validate.add_argument("--threads", type=_positive_int, help="Worker threads (default: MFG_THREADS or 1)")
    validate.add_argument("--verbose", action="store_true", help="Log every sweep")

    export = commands.add_parser("export", help="Export one artifact of a run directory")
    export.add_argument("run_dir", type=Path, help="Run directory written by 'solve'")
    export.add_argument("--what", choices=EXPORTS, required=True, help="Artifact to export")
    export.add_argument("--format", choices=("csv", "binary"), default="csv", help="Output format")
    export.add_argument("--output", type=Path, help=f"Output file (default: RUN_DIR/{EXPORT_DIRECTORY}/...)")
    export.add_argument("--verbose", action="store_true", help="Log debug messages")
    return parser


# solve


def write_run(run: RunDirectory, result: EquilibriumResult, manifest: RunManifest) -> RunManifest:
    scenario, tree = result.scenario, result.tree
    run.write_text(SCENARIO_FILE, scenario.source_text)
    run.write_binary(STRATEGY_FILE, result.strategy.values)
    run.write_binary(ZETA_FILE, result.zeta.masses)
    run.write_binary(THETA_DIAGONAL_FILE, result.theta.diagonal)
    taus = result.theta.retained_taus
    if taus:
        run.write_binary(THETA_TAU_FILE, np.stack([result.theta.slices[tau] for tau in taus]))
    run.write_convergence(result.distance_history)

    diagnostics = contraction_report(result)
    diagnostics["tree"] = tree.diagnostics().to_dict()
    diagnostics["flow_p_lipschitz"] = flow_p_lipschitz_probe(result.zeta, tree, seed=scenario.solver.seed).to_dict()
    diagnostics["strategy_p_lipschitz"] = strategy_p_lipschitz_probe(
        result.strategy, tree, seed=scenario.solver.seed
    ).to_dict()
    diagnostics["strategy_lipschitz_max"] = float(np.max(result.strategy.spatial_lipschitz()))
    diagnostics["psi_jumps"] = [asdict(jump) for jump in lint_psi(scenario)]
    run.write_json(DIAGNOSTICS_FILE, diagnostics)

    manifest.status = result.status.name
    manifest.retained_taus = taus
    return run.finish(manifest)


def _solver_overrides(args) -> dict:
    overrides = {"tol": args.tol, "max_iter": args.max_iter, "damping": args.damping, "seed": args.seed}
    return {key: value for key, value in overrides.items() if value is not None}


def cmd_solve(args, argv: Sequence[str]) -> int:
    started = datetime.now().isoformat()
    try:
        scenario = load_scenario(args.scenario)
    except ScenarioError as error:
        logger.error(f"{args.scenario}: {error}")
        return EXIT_INPUT_ERROR
    overrides = _solver_overrides(args)
    scenario = scenario.with_solver(**overrides)

    try:
        with NodeSweeper(args.threads) as sweeper:
            tree = scenario.build_tree()
            logger.info(f"Path tree with {tree.n_nodes} nodes ({len(tree.level(tree.n_steps))} leaves)")
            result = fp_iteration(scenario, tree=tree, retain=args.retain_tau, sweeper=sweeper)
    except NUMERICAL_ERRORS as error:
        logger.error(f"Numerical failure: {error}")
        return EXIT_DIVERGED
    except (ValueError, WorkerPoolError) as error:
        logger.error(f"Invalid input: {error}")
        return EXIT_INPUT_ERROR

    manifest = RunManifest(
        scenario_hash=scenario_hash(scenario.source_text),
        seed=scenario.solver.seed,
        tool_version=__version__,
        command=list(argv),
        started=started,
        solver=overrides,
    )
    try:
        write_run(RunDirectory(args.out_dir).create(), result, manifest)
    except (RunDirectoryError, OSError) as error:
        logger.error(f"Cannot write the run directory: {error}")
        return EXIT_INPUT_ERROR

    if result.converged:
        return EXIT_OK
    fit = fit_contraction(result.distance_history)
    logger.error(
        f"No equilibrium: {result.status.name} after {result.iterations} iterations, "
        f"empirical contraction {result.empirical_contraction:.3g}, fitted rate {fit.rate:.3g} "
        f"(see {args.out_dir / DIAGNOSTICS_FILE})"
    )
    return EXIT_DIVERGED


# validate


def load_run(run: RunDirectory):
    """
    Rebuild the scenario and the equilibrium of a verified run directory.
    """
    manifest = run.verify()
    scenario = parse_scenario((run / SCENARIO_FILE).read_text(encoding="utf-8"))
    scenario = scenario.with_solver(**manifest.solver)
    tree = scenario.build_tree()
    grid = scenario.grid

    theta = ValueTensor(tree, grid, manifest.retained_taus)
    theta.diagonal[:] = _tensor(run.read_binary(THETA_DIAGONAL_FILE), theta.diagonal.shape, THETA_DIAGONAL_FILE)
    if manifest.retained_taus:
        shape = (len(manifest.retained_taus),) + theta.diagonal.shape
        slices = _tensor(run.read_binary(THETA_TAU_FILE), shape, THETA_TAU_FILE)
        for tau, values in zip(manifest.retained_taus, slices):
            theta.slices[tau][:] = values

    distances = read_convergence_csv(run / CONVERGENCE_FILE)
    try:
        status = EquilibriumStatus[manifest.status]
    except KeyError:
        raise RunDirectoryError(f"Unknown run status {manifest.status!r}") from None
    result = EquilibriumResult(
        scenario=scenario,
        tree=tree,
        strategy=StrategyField(tree, grid, run.read_binary(STRATEGY_FILE)),
        zeta=DensityField.from_masses(tree, grid, run.read_binary(ZETA_FILE)),
        theta=theta,
        iterations=len(distances),
        distance_history=tuple(distances),
        status=status,
        empirical_contraction=fit_contraction(distances).max_ratio,
        damping=scenario.solver.damping,
    )
    return manifest, result


def _tensor(values: np.ndarray, shape, name: str) -> np.ndarray:
    if values.shape != tuple(shape):
        raise RunDirectoryError(f"{name} has shape {values.shape}, expected {tuple(shape)}")
    return values


def _ito_test_function(t, regimes, x):
    return np.sin(x) * (1 + 0.1 * regimes) + t


def _deviations(scenario: Scenario, result: EquilibriumResult, probe) -> List[float]:
    candidates = [scenario.u_min, min(max(0.0, scenario.u_min), scenario.u_max), scenario.u_max]
    candidates.append(improving_action(result, probe))
    return sorted(set(candidates))


def run_suites(result: EquilibriumResult, args, seed: int, sweeper: NodeSweeper) -> dict:
    scenario, tree = result.scenario, result.tree
    suites = {}

    certificate = fixed_point_certificate(scenario, tree, result, sweeper=sweeper)
    suites["fixed_point"] = {"passed": certificate.passed, **certificate.to_dict()}

    if args.local_opt:
        eps_steps = tuple(steps for steps in DEFAULT_EPS_STEPS if steps < tree.n_steps) or (1,)
        reports = []
        for probe in random_probes(result, args.local_opt, seed=seed, max_eps_steps=max(eps_steps)):
            for u0 in _deviations(scenario, result, probe):
                reports.append(local_optimality_test(result, probe, u0, eps_steps=eps_steps))
        suites["local_optimality"] = {
            "passed": all(report.passed for report in reports),
            "max_improvement_rate": max(report.improvement_rate for report in reports),
            "reports": [report.to_dict() for report in reports],
        }

    if args.nplayer:
        simulation = nplayer_simulate(
            scenario, result.strategy, result.zeta, tree, args.nplayer, args.chains, rng_seed=seed, sweeper=sweeper
        )
        median = simulation.median_terminal_w2
        suites["nplayer"] = {
            "passed": math.isfinite(median) and median <= NPLAYER_W2_TOLERANCE,
            "tolerance": NPLAYER_W2_TOLERANCE,
            **simulation.to_dict(),
        }

    if args.ito:
        node = tree.root
        x = result.zeta.mean(node)
        report = functional_ito_check(
            scenario, result.strategy, result.zeta, node, x, _ito_test_function, eps_steps=1, seed=seed
        )
        suites["ito"] = report.to_dict()
    return suites


def cmd_validate(args) -> int:
    run = RunDirectory(args.run_dir)
    try:
        manifest, result = load_run(run)
        if args.strategy_override is not None:
            override = StrategyField(result.tree, result.scenario.grid, read_binary(args.strategy_override))
            logger.warning(f"Validating the strategy from {args.strategy_override} instead of the equilibrium")
            result = replace(result, strategy=override)
    except INPUT_ERRORS as error:
        logger.error(f"Cannot load {args.run_dir}: {error}")
        return EXIT_INPUT_ERROR

    if not result.converged:
        logger.warning(f"Run status is {result.status.name}; the checks assume a converged equilibrium")
    seed = manifest.seed if args.seed is None else args.seed
    try:
        with NodeSweeper(args.threads) as sweeper:
            suites = run_suites(result, args, seed, sweeper)
    except (ProbeError, WorkerPoolError) as error:
        logger.error(f"Invalid validation request: {error}")
        return EXIT_INPUT_ERROR
    except NUMERICAL_ERRORS as error:
        logger.error(f"Numerical failure during validation: {error}")
        return EXIT_VALIDATION_FAILED

    passed = all(suite["passed"] for suite in suites.values())
    report = {
        "passed": passed,
        "seed": seed,
        "strategy_override": str(args.strategy_override) if args.strategy_override else None,
        "suites": suites,
    }
    _write_validation(run, manifest, report)
    for name, suite in suites.items():
        logger.info(f"{name}: {'PASS' if suite['passed'] else 'FAIL'}")
    return EXIT_OK if passed else EXIT_VALIDATION_FAILED


def _write_validation(run: RunDirectory, manifest: RunManifest, report: dict) -> None:
    suites = report["suites"]
    run.write_json(VALIDATION_FILE, report)
    if "local_optimality" in suites:
        rows = []
        for entry in suites["local_optimality"]["reports"]:
            probe = entry["probe"]
            for eps, gain, error in zip(entry["eps"], entry["gains"], entry["std_errors"]):
                rows.append(
                    (
                        str(probe["time_index"]),
                        str(probe["node_id"]),
                        str(probe["x_index"]),
                        repr(entry["u0"]),
                        repr(eps),
                        repr(gain),
                        repr(error),
                        repr(entry["limit"]),
                        str(entry["passed"]).lower(),
                    )
                )
        run.write_csv(
            LOCAL_OPTIMALITY_CSV,
            ("time_index", "node_id", "x_index", "u0", "eps", "gain", "std_error", "limit", "passed"),
            rows,
        )
    if "nplayer" in suites:
        rows = [
            (str(draw["draw"]), str(time_index), repr(w2))
            for draw in suites["nplayer"]["draws"]
            for time_index, w2 in enumerate(draw["w2"])
        ]
        run.write_csv(NPLAYER_CSV, ("draw", "time_index", "w2"), rows)
    run.extend(manifest)


# export


def _export_path(args) -> Path:
    if args.output is not None:
        return args.output
    suffix = "csv" if args.format == "csv" else "bin"
    return args.run_dir / EXPORT_DIRECTORY / f"{args.what}.{suffix}"


def export_artifact(result: EquilibriumResult, what: str, fmt: str, path: Path) -> None:
    tree, grid = result.tree, result.scenario.grid
    theta = result.theta
    if what == "convergence":
        if fmt == "csv":
            write_convergence_csv(path, result.distance_history)
        else:
            write_binary(path, np.array(result.distance_history, dtype=float))
    elif what == "theta":
        taus = theta.retained_taus
        if fmt == "csv":
            write_tensor_csv(path, tree, grid, [(None, theta.diagonal)] + [(tau, theta.slices[tau]) for tau in taus])
        else:
            write_binary(path, np.stack([theta.diagonal] + [theta.slices[tau] for tau in taus]))
    else:
        values = result.strategy.values if what == "strategy" else result.zeta.masses
        if fmt == "csv":
            write_tensor_csv(path, tree, grid, [(None, values)])
        else:
            write_binary(path, values)


def cmd_export(args) -> int:
    run = RunDirectory(args.run_dir)
    try:
        manifest, result = load_run(run)
    except INPUT_ERRORS as error:
        logger.error(f"Cannot load {args.run_dir}: {error}")
        return EXIT_INPUT_ERROR

    path = _export_path(args)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        export_artifact(result, args.what, args.format, path)
    except OSError as error:
        logger.error(f"Cannot write {path}: {error}")
        return EXIT_INPUT_ERROR

    try:
        name = path.resolve().relative_to(run.path.resolve()).as_posix()
    except ValueError:
        name = None
    if name is not None:
        run.track(name)
        run.extend(manifest)
    logger.info(f"Exported {args.what} as {args.format} to {path}")
    return EXIT_OK


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    configure_logging(args.verbose)
    if args.command == "solve":
        return cmd_solve(args, ["regimemfg"] + argv)
    elif args.command == "validate":
        return cmd_validate(args)
    else:
        return cmd_export(args)


if __name__ == "__main__":
    sys.exit(main())
