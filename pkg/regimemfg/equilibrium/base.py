import math
from dataclasses import dataclass
from enum import Enum, auto
from typing import List, Optional, Sequence, Tuple

import numpy as np
from loguru import logger

from regimemfg.flow.base import DensityField, StrategyField, StrategyShapeError
from regimemfg.flow.fokker_planck import propagate_flow
from regimemfg.hjb.base import Retain, ValueTensor, hjb_backward_solve
from regimemfg.paths.tree import PathTree
from regimemfg.scenario.base import Scenario
from regimemfg.workers import NodeSweeper

DIVERGENCE_FACTOR = 10.0


class EquilibriumStatus(Enum):
    CONVERGED = auto()
    MAX_ITERATIONS = auto()
    DIVERGED = auto()


@dataclass(frozen=True)
class EquilibriumResult:
    scenario: Scenario
    tree: PathTree
    strategy: StrategyField
    zeta: DensityField
    theta: ValueTensor
    iterations: int
    distance_history: Tuple[float, ...]
    status: EquilibriumStatus
    empirical_contraction: float
    damping: float = 0.0

    @property
    def converged(self) -> bool:
        return self.status == EquilibriumStatus.CONVERGED


def strategy_distance(strategy1: StrategyField, strategy2: StrategyField) -> float:
    """
    ``max |u1 - u2|`` over every node and grid point.
    """
    if strategy1.values.shape != strategy2.values.shape:
        raise StrategyShapeError(f"Strategies have shapes {strategy1.values.shape} and {strategy2.values.shape}")
    return float(np.max(np.abs(strategy1.values - strategy2.values)))


def initial_strategy(scenario: Scenario, tree: PathTree) -> StrategyField:
    """
    The zero-gradient feedback ``psi(t_k, i, x, 0)``.
    """
    x = scenario.grid.x
    return StrategyField.from_function(
        tree, scenario.grid, lambda node: scenario.psi_values(node.time, node.regime, np.zeros_like(x))
    )


def _max_ratio(distances: Sequence[float]) -> float:
    ratios = [after / before for before, after in zip(distances, distances[1:]) if before > 0]
    return max(ratios) if ratios else math.nan


def fp_iteration(
    scenario: Scenario,
    u0: Optional[StrategyField] = None,
    tol: Optional[float] = None,
    max_iter: Optional[int] = None,
    tree: Optional[PathTree] = None,
    retain: Retain = (0,),
    sweeper: Optional[NodeSweeper] = None,
) -> EquilibriumResult:
    """
    Iterate ``u -> T2(T1(u))``: propagate the flow under ``u``, solve the HJB system against it, damp, and stop once
    consecutive strategies are within ``tol`` in the sup norm.

    The run is declared diverged as soon as a distance exceeds ten times the smallest one seen.
    """
    settings = scenario.solver
    tol = settings.tol if tol is None else tol
    max_iter = settings.max_iter if max_iter is None else max_iter
    damping = settings.damping
    assert tol > 0, f"Tolerance must be positive, got {tol}"
    tree = tree or scenario.build_tree()
    strategy = u0 if u0 is not None else initial_strategy(scenario, tree)
    if damping > 0:
        logger.warning(f"Damping the fixed-point iteration with gamma={damping}")

    distances = []  # type: List[float]
    status = EquilibriumStatus.MAX_ITERATIONS
    smallest = math.inf
    zeta, theta = None, None
    for iteration in range(1, max_iter + 1):
        zeta = propagate_flow(scenario, strategy, tree, sweeper)
        theta, updated = hjb_backward_solve(scenario, zeta, tree, retain=retain, sweeper=sweeper)
        if damping > 0:
            updated = StrategyField(tree, scenario.grid, (1 - damping) * updated.values + damping * strategy.values)

        distance = strategy_distance(updated, strategy)
        distances.append(distance)
        strategy = updated
        logger.info(f"Iteration {iteration}: distance {distance:.3e}")

        if distance <= tol:
            status = EquilibriumStatus.CONVERGED
            break
        smallest = min(smallest, distance)
        if distance > DIVERGENCE_FACTOR * smallest:
            status = EquilibriumStatus.DIVERGED
            break

    contraction = _max_ratio(distances)
    if status == EquilibriumStatus.CONVERGED:
        logger.info(f"Converged after {len(distances)} iterations (empirical contraction {contraction:.3g})")
    else:
        logger.warning(f"Stopped with status {status.name} after {len(distances)} iterations")
    return EquilibriumResult(
        scenario=scenario,
        tree=tree,
        strategy=strategy,
        zeta=zeta,
        theta=theta,
        iterations=len(distances),
        distance_history=tuple(distances),
        status=status,
        empirical_contraction=contraction,
        damping=damping,
    )


@dataclass(frozen=True)
class ContractionFit:
    ratios: Tuple[float, ...]
    max_ratio: float
    rate: float
    monotone: bool
    flags: Tuple[str, ...]


def fit_contraction(distances: Sequence[float]) -> ContractionFit:
    """
    Consecutive ratios of a distance history and the geometric rate fitted to its positive entries on a log scale.
    """
    distances = [float(distance) for distance in distances]
    ratios = tuple(after / before for before, after in zip(distances, distances[1:]) if before > 0)
    positive = [(index, distance) for index, distance in enumerate(distances) if distance > 0]

    flags = []  # type: List[str]
    if len(distances) < 2:
        flags.append("insufficient data")
    if len(positive) >= 2:
        index, distance = np.array(positive).T
        rate = float(np.exp(np.polyfit(index, np.log(distance), 1)[0]))
    else:
        rate = math.nan
    monotone = all(ratio <= 1 for ratio in ratios)
    if not monotone:
        flags.append("non-monotone history")
    max_ratio = max(ratios) if ratios else math.nan
    if max_ratio >= 1:
        flags.append("no empirical contraction")
    return ContractionFit(ratios, max_ratio, rate, monotone, tuple(flags))


def contraction_report(result: EquilibriumResult) -> dict:
    """
    Convergence diagnostics: distance ratios and fitted rate, plus the tree truncation and flow leakage figures.
    """
    fit = fit_contraction(result.distance_history)
    tree_diagnostics = result.tree.diagnostics()
    report = {
        "status": result.status.name,
        "iterations": result.iterations,
        "distance_history": list(result.distance_history),
        "ratios": list(fit.ratios),
        "max_ratio": fit.max_ratio,
        "empirical_contraction": result.empirical_contraction,
        "fitted_rate": fit.rate,
        "monotone": fit.monotone,
        "flags": list(fit.flags),
        "damping": result.damping,
        "truncated_mass": tree_diagnostics.truncated_mass,
        "truncation_bound": tree_diagnostics.truncation_bound,
        "flow": result.zeta.diagnostics().to_dict() if result.zeta is not None else None,
        "hjb": result.theta.diagnostics.to_dict() if result.theta is not None else None,
    }
    return report


@dataclass(frozen=True)
class FixedPointCertificate:
    move: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.move <= 2 * self.tol

    def to_dict(self) -> dict:
        return {"move": self.move, "tol": self.tol, "passed": self.passed}


def fixed_point_certificate(
    scenario: Scenario,
    tree: PathTree,
    result: EquilibriumResult,
    tol: Optional[float] = None,
    sweeper: Optional[NodeSweeper] = None,
) -> FixedPointCertificate:
    """
    Apply ``T2(T1(.))`` once more to the returned strategy and measure how far it moves.
    """
    zeta = propagate_flow(scenario, result.strategy, tree, sweeper)
    _, strategy = hjb_backward_solve(scenario, zeta, tree, retain=None, sweeper=sweeper)
    move = strategy_distance(strategy, result.strategy)
    certificate = FixedPointCertificate(move, scenario.solver.tol if tol is None else tol)
    logger.info(f"Fixed-point certificate: move {move:.3e} ({'passed' if certificate.passed else 'failed'})")
    return certificate
