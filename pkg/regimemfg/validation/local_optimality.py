import math
from dataclasses import dataclass
from enum import Enum
from typing import List, Optional, Sequence, Tuple

import numpy as np
from loguru import logger

from regimemfg.equilibrium.base import EquilibriumResult
from regimemfg.flow.base import StrategyField
from regimemfg.hjb.base import evaluate_policy, spatial_gradient
from regimemfg.paths.tree import PathNode
from regimemfg.validation.base import (
    euler_step,
    feedback_at,
    mean_and_error,
    particle_drift,
    running_cost,
    terminal_cost,
)

DEFAULT_EPS_STEPS = (4, 2, 1)
LOCAL_TOLERANCE = 1e-3
MONTE_CARLO_SAMPLES = 20_000


class ProbeError(ValueError):
    pass


class EstimationMethod(Enum):
    PDE = "pde"
    MONTE_CARLO = "monte_carlo"


@dataclass(frozen=True)
class Probe:
    time_index: int
    node_id: int
    x_index: int

    def to_dict(self) -> dict:
        return {"time_index": self.time_index, "node_id": self.node_id, "x_index": self.x_index}


@dataclass(frozen=True)
class LocalOptimalityReport:
    """
    Deviation gains ``(J(u0 then u*) - J(u*)) / eps`` for decreasing ``eps`` and their extrapolation to ``eps = 0``.
    Costs are minimized, so an equilibrium has a non-negative limit.
    """

    probe: Probe
    u0: float
    method: EstimationMethod
    eps: Tuple[float, ...]
    gains: Tuple[float, ...]
    std_errors: Tuple[float, ...]
    limit: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.limit >= -self.tol

    @property
    def improvement_rate(self) -> float:
        return max(0.0, -self.limit)

    def to_dict(self) -> dict:
        return {
            "probe": self.probe.to_dict(),
            "u0": self.u0,
            "method": self.method.value,
            "eps": list(self.eps),
            "gains": list(self.gains),
            "std_errors": list(self.std_errors),
            "limit": self.limit,
            "improvement_rate": self.improvement_rate,
            "tol": self.tol,
            "passed": self.passed,
        }


def extrapolate(eps: Sequence[float], gains: Sequence[float]) -> float:
    """
    The value at ``eps = 0`` of the polynomial through the points (degree at most two).
    """
    if len(eps) == 1:
        return float(gains[0])
    degree = min(len(eps) - 1, 2)
    return float(np.polyval(np.polyfit(eps, gains, degree), 0.0))


def _check_probe(result: EquilibriumResult, probe: Probe, u0: float, eps_steps: Sequence[int]) -> PathNode:
    tree, scenario = result.tree, result.scenario
    k = probe.time_index
    if not 0 <= k < tree.n_steps:
        raise ProbeError(f"Probe time index {k} is outside 0..{tree.n_steps - 1}")
    if not 0 <= probe.node_id < tree.n_nodes or tree.nodes[probe.node_id].time_index != k:
        raise ProbeError(f"Node {probe.node_id} is not on level {k}")
    if not 0 <= probe.x_index < scenario.grid.n_points:
        raise ProbeError(f"Grid index {probe.x_index} is outside 0..{scenario.grid.n_points - 1}")
    if not scenario.u_min <= u0 <= scenario.u_max:
        raise ProbeError(f"Deviation {u0} is outside the action set [{scenario.u_min}, {scenario.u_max}]")
    if not eps_steps or min(eps_steps) < 1 or k + max(eps_steps) > tree.n_steps:
        raise ProbeError(f"Deviation lengths {list(eps_steps)} do not fit between level {k} and the horizon")
    return tree.nodes[probe.node_id]


def splice(strategy: StrategyField, node: PathNode, x_index: int, u0: float, n_steps: int, bounds) -> StrategyField:
    """
    Shift the feedback on the first ``n_steps`` levels of the subtree of ``node`` by the constant that makes it
    ``u0`` at the probe point, clamped to the action set.  The spliced field equals ``strategy`` when
    ``u0 = u*(probe)``.
    """
    shift = u0 - strategy.at(node)[x_index]
    values = strategy.values.copy()
    last_level = node.time_index + n_steps
    for descendant in node.tree.subtree(node):
        if descendant.time_index >= last_level:
            break
        values[descendant.node_id] = np.clip(values[descendant.node_id] + shift, *bounds)
    return StrategyField(strategy.tree, strategy.grid, values)


def _pde_gains(result, strategy, node, probe, u0, eps_steps) -> Tuple[List[float], List[float]]:
    scenario, tree = result.scenario, result.tree
    k = probe.time_index
    bounds = (scenario.u_min, scenario.u_max)

    def cost(control: StrategyField) -> float:
        values = evaluate_policy(scenario, result.zeta, tree, control, root=node, tau_indices=(k,))[k]
        return float(values[node.node_id, probe.x_index])

    baseline = cost(strategy)
    gains = []
    for steps in eps_steps:
        eps = float(tree.time_grid[k + steps] - tree.time_grid[k])
        gains.append((cost(splice(strategy, node, probe.x_index, u0, steps, bounds)) - baseline) / eps)
    return gains, [0.0] * len(gains)


def _monte_carlo_gains(result, strategy, node, probe, u0, eps_steps, n_samples, seed):
    """
    Particles start at the probe point and follow random chain continuations; the baseline and spliced runs share
    every random number.  The measure is frozen at the flow's node moments.
    """
    scenario, tree, zeta = result.scenario, result.tree, result.zeta
    time_grid = tree.time_grid
    k = probe.time_index
    tau = float(time_grid[k])
    bounds = (scenario.u_min, scenario.u_max)
    rng = np.random.default_rng(seed)
    n_steps = tree.n_steps - k

    chain_draws = rng.random((n_steps, n_samples))
    noise = rng.standard_normal((n_steps, n_samples))

    def cost(control: StrategyField) -> np.ndarray:
        x = np.full(n_samples, scenario.grid.x[probe.x_index])
        node_ids = np.full(n_samples, node.node_id)
        total = np.zeros(n_samples)
        for step, s in enumerate(range(k, tree.n_steps)):
            t, dt = float(time_grid[s]), float(time_grid[s + 1] - time_grid[s])
            following = np.empty_like(node_ids)
            for node_id in np.unique(node_ids):
                current = tree.nodes[node_id]
                members = node_ids == node_id
                m1, m2 = zeta.node_moments(current)
                u = feedback_at(control, current, x[members])
                total[members] += running_cost(scenario, tau, t, current.regime, x[members], u, m1, m2) * dt
                drift = particle_drift(scenario, t, current.regime, x[members], u, m1, m2)
                x[members] = euler_step(scenario, t, dt, drift, x[members], noise[step, members])
                cumulative = np.cumsum([link.weight for link in current.children])
                cumulative[-1] = 1.0
                choice = np.searchsorted(cumulative, chain_draws[step, members], side="right")
                following[members] = [current.children[index].node.node_id for index in choice]
            node_ids = following
        for node_id in np.unique(node_ids):
            leaf = tree.nodes[node_id]
            members = node_ids == node_id
            m1, m2 = zeta.node_moments(leaf)
            total[members] += terminal_cost(scenario, tau, leaf.regime, x[members], m1, m2)
        return total

    baseline = cost(strategy)
    gains, errors = [], []
    for steps in eps_steps:
        eps = float(time_grid[k + steps] - time_grid[k])
        spliced = cost(splice(strategy, node, probe.x_index, u0, steps, bounds))
        gain, error = mean_and_error((spliced - baseline) / eps)
        gains.append(gain)
        errors.append(error)
    return gains, errors


def local_optimality_test(
    result: EquilibriumResult,
    probe: Probe,
    u0: float,
    eps_steps: Sequence[int] = DEFAULT_EPS_STEPS,
    tol: float = LOCAL_TOLERANCE,
    method: EstimationMethod = EstimationMethod.PDE,
    strategy: Optional[StrategyField] = None,
    n_samples: int = MONTE_CARLO_SAMPLES,
    seed: int = 0,
) -> LocalOptimalityReport:
    """
    Deviate to ``u0`` near the probe for ``eps = steps * dt`` and measure the first-order cost change against the
    measure flow of ``result``.

    ``strategy`` replaces the equilibrium strategy (to check that a perturbed strategy is detected).  The PDE method
    evaluates both costs by backward policy evaluation on the probe's subtree; the Monte-Carlo method simulates
    particles and reports standard errors.
    """
    method = EstimationMethod(method)
    eps_steps = sorted(set(int(steps) for steps in eps_steps), reverse=True)
    node = _check_probe(result, probe, u0, eps_steps)
    strategy = strategy if strategy is not None else result.strategy

    if method == EstimationMethod.PDE:
        gains, errors = _pde_gains(result, strategy, node, probe, u0, eps_steps)
    else:
        gains, errors = _monte_carlo_gains(result, strategy, node, probe, u0, eps_steps, n_samples, seed)

    time_grid = result.tree.time_grid
    eps = tuple(float(time_grid[probe.time_index + steps] - time_grid[probe.time_index]) for steps in eps_steps)
    limit = extrapolate(eps, gains)
    if method == EstimationMethod.MONTE_CARLO:
        tol = max(tol, 3 * max(errors)) if all(math.isfinite(error) for error in errors) else tol
    report = LocalOptimalityReport(probe, float(u0), method, eps, tuple(gains), tuple(errors), limit, tol)
    logger.info(
        f"Local optimality at {probe.to_dict()} with u0={u0}: limit {limit:.3e} ({'PASS' if report.passed else 'FAIL'})"
    )
    return report


def improving_action(result: EquilibriumResult, probe: Probe, strategy: Optional[StrategyField] = None) -> float:
    """
    ``psi`` at the gradient of the probe node's own cost-to-go under ``strategy``: the deviation a one-step policy
    improvement would pick.  At an equilibrium it reproduces the strategy up to discretization.
    """
    scenario, tree = result.scenario, result.tree
    strategy = strategy if strategy is not None else result.strategy
    node = _check_probe(result, probe, scenario.u_min, (1,))
    k = probe.time_index
    values = evaluate_policy(scenario, result.zeta, tree, strategy, root=node, tau_indices=(k,))[k][node.node_id]
    control = scenario.psi_values(node.time, node.regime, spatial_gradient(values, scenario.grid.dx))
    return float(np.clip(control[probe.x_index], scenario.u_min, scenario.u_max))


def random_probes(result: EquilibriumResult, n_probes: int, seed: int = 0, max_eps_steps: int = 4) -> List[Probe]:
    """
    Probes on random nodes of levels that leave room for the longest deviation, at grid points away from the
    boundary layer.
    """
    tree, grid = result.tree, result.scenario.grid
    rng = np.random.default_rng(seed)
    last_level = tree.n_steps - max_eps_steps
    if last_level < 0:
        raise ProbeError(f"The tree has {tree.n_steps} steps, fewer than the deviation length {max_eps_steps}")
    margin = grid.n_points // 4
    probes = []
    for _ in range(n_probes):
        k = int(rng.integers(0, last_level + 1))
        level = tree.level(k)
        node = level[int(rng.integers(0, len(level)))]
        probes.append(Probe(k, node.node_id, int(rng.integers(margin, grid.n_points - margin))))
    return probes
