import math
from dataclasses import dataclass
from typing import Tuple

import numpy as np
from loguru import logger
from scipy.integrate import solve_ivp

from regimemfg.flow.base import DensityField, StrategyField
from regimemfg.hjb.base import diffusion_step, spatial_gradient
from regimemfg.paths.tree import PathTree
from regimemfg.scenario.base import DiscountKind, Scenario
from regimemfg.scenario.expressions import Number

ODE_RTOL = 1e-10
ODE_ATOL = 1e-12
BLOW_UP = 1e8
MEAN_TOLERANCE = 1e-11
MAX_MEAN_ITERATIONS = 200


class OracleDomainError(ValueError):
    pass


@dataclass(frozen=True)
class LqProblem:
    """
    ``dX = (a X + bc v + kappa_m E[X]) dt + sigma dW`` with running cost ``c_x x^2 + c_v v^2``, terminal cost
    ``c_T x^2`` and exponential discount rate ``lam``; ``m0`` is the initial mean.
    """

    a: float
    bc: float
    c_x: float
    c_v: float
    c_T: float
    horizon: float
    sigma: float
    lam: float = 0.0
    kappa_m: float = 0.0
    m0: float = 0.0
    u_bounds: Tuple[float, float] = (-math.inf, math.inf)


@dataclass(frozen=True)
class RiccatiSolution:
    """
    ``V(t, x) = P(t) x^2 + r(t) x + s(t)`` and the mean path on an increasing time grid.
    """

    problem: LqProblem
    times: np.ndarray
    p: np.ndarray
    r: np.ndarray
    s: np.ndarray
    mean: np.ndarray
    mean_iterations: int

    def _at(self, values: np.ndarray, t: float) -> float:
        return float(np.interp(t, self.times, values))

    def value(self, t: float, x: Number) -> Number:
        return self._at(self.p, t) * np.square(x) + self._at(self.r, t) * np.asarray(x) + self._at(self.s, t)

    def feedback(self, t: float, x: Number) -> Number:
        problem = self.problem
        control = -problem.bc * (2 * self._at(self.p, t) * np.asarray(x) + self._at(self.r, t)) / (2 * problem.c_v)
        return np.clip(control, *problem.u_bounds)


def _backward(problem: LqProblem, mean, times: np.ndarray):
    a, bc2, c_v, lam = problem.a, problem.bc**2, problem.c_v, problem.lam
    kappa, sigma2 = problem.kappa_m, problem.sigma**2

    def rhs(t, y):
        p, r, _s = y
        m = mean(t)
        return [
            -(2 * a * p - bc2 * p * p / c_v + problem.c_x - lam * p),
            -((a - bc2 * p / c_v - lam) * r + 2 * p * kappa * m),
            -(sigma2 * p - bc2 * r * r / (4 * c_v) + kappa * m * r - lam * _s),
        ]

    def blow_up(t, y):
        return BLOW_UP - abs(y[0])

    blow_up.terminal = True
    solution = solve_ivp(
        rhs,
        (problem.horizon, 0.0),
        [problem.c_T, 0.0, 0.0],
        method="DOP853",
        rtol=ODE_RTOL,
        atol=ODE_ATOL,
        dense_output=True,
        events=blow_up,
    )
    if solution.status != 0 or not np.all(np.isfinite(solution.y)):
        raise OracleDomainError(f"Riccati equation blows up before t=0 ({solution.message})")
    return solution.sol


def _forward_mean(problem: LqProblem, coefficients, times: np.ndarray) -> np.ndarray:
    a, bc2, c_v, kappa = problem.a, problem.bc**2, problem.c_v, problem.kappa_m

    def rhs(t, y):
        p, r, _s = coefficients(t)
        return [(a + kappa) * y[0] - bc2 * (2 * p * y[0] + r) / (2 * c_v)]

    solution = solve_ivp(
        rhs, (0.0, problem.horizon), [problem.m0], method="DOP853", rtol=ODE_RTOL, atol=ODE_ATOL, t_eval=times
    )
    if solution.status != 0 or not np.all(np.isfinite(solution.y)):
        raise OracleDomainError(f"Mean equation fails ({solution.message})")
    return solution.y[0]


def riccati_oracle(problem: LqProblem, n_times: int = 2001) -> RiccatiSolution:
    """
    Solve the LQ mean-field system with a high-order integrator.  ``P, r, s`` run backward from ``(c_T, 0, 0)``; the
    mean runs forward under the unconstrained optimal feedback, and the two are iterated to a fixed point when
    ``kappa_m != 0``.
    """
    if not problem.c_v > 0:
        raise OracleDomainError(f"c_v must be positive, got {problem.c_v}")
    if not problem.horizon > 0:
        raise OracleDomainError(f"Horizon must be positive, got {problem.horizon}")

    times = np.linspace(0.0, problem.horizon, n_times)
    mean_values = np.full(n_times, problem.m0)
    iterations = 0
    while True:
        iterations += 1
        coefficients = _backward(problem, lambda t, values=mean_values: np.interp(t, times, values), times)
        if problem.kappa_m == 0:
            break
        updated = _forward_mean(problem, coefficients, times)
        change = float(np.max(np.abs(updated - mean_values)))
        mean_values = updated
        if change < MEAN_TOLERANCE:
            break
        if iterations >= MAX_MEAN_ITERATIONS:
            raise OracleDomainError(f"Mean fixed point did not converge (last change {change:.3e})")

    p, r, s = coefficients(times)
    if problem.kappa_m == 0:
        mean_values = _forward_mean(problem, coefficients, times)
    logger.debug(f"Riccati oracle: P(0)={p[0]:.6g}, r(0)={r[0]:.6g}, {iterations} mean iterations")
    return RiccatiSolution(problem, times, p, r, s, mean_values, iterations)


@dataclass(frozen=True)
class ClassicalSolution:
    values: np.ndarray
    strategy: StrategyField

    def at(self, node) -> np.ndarray:
        return self.values[node.node_id]


def _step_discount(scenario: Scenario) -> float:
    discount = scenario.discount
    if discount.is_trivial:
        return 1.0
    if discount.kind == DiscountKind.EXPONENTIAL:
        return math.exp(-discount.rate * scenario.dt)
    raise OracleDomainError(f"The classical oracle cannot handle {discount.kind.value} discounting")


def classical_hjb_oracle(scenario: Scenario, zeta: DensityField, tree: PathTree) -> ClassicalSolution:
    """
    The time-consistent HJB solved with a single value function per node.  Exponential discounting enters as the
    factor ``exp(-lam dt)`` on the continuation value; anything depending on tau otherwise is refused.
    """
    if any(expression.uses("tau") for expression in scenario.g2 + scenario.h):
        raise OracleDomainError("Costs depend on tau; the classical oracle needs a time-consistent problem")
    factor = _step_discount(scenario)

    grid = scenario.grid
    time_grid = tree.time_grid
    horizon = np.array([time_grid[-1]])
    values = np.full((tree.n_nodes, grid.n_points), np.nan)
    controls = np.full((tree.n_nodes, grid.n_points), np.nan)

    for leaf in tree.leaves:
        m1, m2 = zeta.node_moments(leaf)
        values[leaf.node_id] = scenario.h_values(horizon, leaf.regime, m1, m2)[0]
        gradient = spatial_gradient(values[leaf.node_id], grid.dx)
        controls[leaf.node_id] = scenario.psi_values(time_grid[-1], leaf.regime, gradient)

    for k in range(tree.n_steps - 1, -1, -1):
        sigma = scenario.sigma_values(float(time_grid[k]))
        for node in tree.level(k):
            continuation = factor * sum(link.weight * values[link.node.node_id] for link in node.children)
            values[node.node_id], controls[node.node_id] = _classical_step(scenario, zeta, node, continuation, sigma)

    return ClassicalSolution(values, StrategyField(tree, grid, controls))


def _classical_step(
    scenario: Scenario, zeta: DensityField, node, continuation: np.ndarray, sigma: np.ndarray
) -> Tuple[np.ndarray, np.ndarray]:
    time_grid = node.tree.time_grid
    k, i = node.time_index, node.regime
    t = float(time_grid[k])
    dt = float(time_grid[k + 1] - time_grid[k])
    dx = scenario.grid.dx
    m1, m2 = zeta.node_moments(node)
    mean_field_drift = scenario.b2_values(t, i, m1, m2)
    mean_field_cost = scenario.g2_values(np.array([t]), t, i, m1, m2)[0]

    def step(control):
        drift = scenario.b1_values(t, i, control) + mean_field_drift
        cost = scenario.g1_values(t, i, control) + mean_field_cost
        return diffusion_step(continuation, drift, cost, sigma, dt, scenario.grid)

    control = scenario.psi_values(t, i, spatial_gradient(continuation, dx))
    for _ in range(scenario.solver.inner_iters):
        control = scenario.psi_values(t, i, spatial_gradient(step(control), dx))
    return step(control), control


def lq_problem(lam: float = 0.0, m0: float = 0.5, **arguments) -> LqProblem:
    """
    The ``LqProblem`` equivalent of ``lq_scenario(**arguments)``, whose running cost is
    ``control_cost v^2 / 2 + state_cost x^2``.  ``lam`` and ``m0`` must match the scenario's discount rate and
    initial mean.
    """
    return LqProblem(
        a=arguments.get("drift_coefficient", 0.0),
        bc=1.0,
        c_x=arguments.get("state_cost", 0.5),
        c_v=arguments.get("control_cost", 1.0) / 2,
        c_T=arguments.get("terminal_cost", 0.5),
        horizon=arguments.get("horizon", 0.5),
        sigma=arguments.get("sigma", 0.5),
        lam=lam,
        kappa_m=arguments.get("mean_coupling", 0.2),
        m0=m0,
        u_bounds=tuple(arguments.get("u_bounds", (-10.0, 10.0))),
    )
