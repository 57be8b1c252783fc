from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional, Tuple, Union

import numpy as np
from loguru import logger
from scipy.linalg import solve_banded

from regimemfg.flow.base import DensityField, StrategyField
from regimemfg.paths.tree import PathNode, PathTree
from regimemfg.scenario.base import Scenario, SpatialGrid
from regimemfg.workers import NodeSweeper

CHUNK_SIZE = 64

Retain = Union[str, Iterable[int], None]


class HjbNumericError(ArithmeticError):
    def __init__(self, msg=None, tau_index=None, time_index=None, node_id=None):
        super().__init__(msg)
        self.tau_index = tau_index
        self.time_index = time_index
        self.node_id = node_id


def spatial_gradient(values: np.ndarray, dx: float) -> np.ndarray:
    """
    Centered differences in the interior, one-sided at both ends, along the last axis.
    """
    return np.gradient(values, dx, axis=-1)


def second_derivative(values: np.ndarray, dx: float) -> np.ndarray:
    values = np.asarray(values, dtype=float)
    result = np.zeros_like(values)
    result[..., 1:-1] = (values[..., 2:] - 2 * values[..., 1:-1] + values[..., :-2]) / dx**2
    result[..., 0] = result[..., 1]
    result[..., -1] = result[..., -2]
    return result


def _generator_bands(drift: np.ndarray, sigma: np.ndarray, dt: float, dx: float) -> np.ndarray:
    """
    Banded ``I - dt L`` for ``L = (sigma^2 / 2) d^2/dx^2 + drift d/dx``.

    Interior rows use central drift differences where the cell Peclet number ``|drift| dx / sigma^2`` is at most 1
    and upwind differences elsewhere, so every off-diagonal of ``L`` is non-negative.  The end rows drop the second
    derivative and keep the drift only when it points into the domain.
    """
    n_points = len(drift)
    diffusion = sigma**2 / 2 / dx**2
    lower = np.zeros(n_points)
    upper = np.zeros(n_points)

    inner = slice(1, n_points - 1)
    b = drift[inner]
    central = np.abs(b) * dx <= sigma[inner] ** 2
    lower[inner] = np.where(central, diffusion[inner] - b / (2 * dx), diffusion[inner] + np.maximum(-b, 0) / dx)
    upper[inner] = np.where(central, diffusion[inner] + b / (2 * dx), diffusion[inner] + np.maximum(b, 0) / dx)
    upper[0] = max(drift[0], 0.0) / dx
    lower[-1] = max(-drift[-1], 0.0) / dx

    bands = np.zeros((3, n_points))
    bands[0, 1:] = -dt * upper[:-1]
    bands[1] = 1.0 + dt * (lower + upper)
    bands[2, :-1] = -dt * lower[1:]
    return bands


def diffusion_step(
    values: np.ndarray, drift: np.ndarray, cost: np.ndarray, sigma: np.ndarray, dt: float, grid: SpatialGrid
) -> np.ndarray:
    """
    One backward Euler step of ``d/dt V + (sigma^2 / 2) V_xx + drift V_x + cost = 0`` from ``t + dt`` to ``t``.

    ``values`` may hold several slices as rows sharing ``drift`` and ``sigma``; ``cost`` broadcasts against it.
    """
    assert dt > 0, f"Time step must be positive, got {dt}"
    shape = (grid.n_points,)
    drift = np.broadcast_to(np.asarray(drift, dtype=float), shape)
    sigma = np.broadcast_to(np.asarray(sigma, dtype=float), shape)
    values = np.asarray(values, dtype=float)
    rhs = values + dt * np.broadcast_to(cost, values.shape)
    bands = _generator_bands(drift, sigma, dt, grid.dx)
    if values.ndim == 1:
        return solve_banded((1, 1), bands, rhs)
    return solve_banded((1, 1), bands, rhs.T).T


@dataclass(frozen=True)
class HjbDiagnostics:
    max_gradient: float
    max_second_derivative: float
    gradient_bound: float
    max_inner_change: float

    @property
    def gradient_flagged(self) -> bool:
        return self.max_gradient > self.gradient_bound or self.max_second_derivative > self.gradient_bound

    def to_dict(self) -> dict:
        return {
            "max_gradient": self.max_gradient,
            "max_second_derivative": self.max_second_derivative,
            "gradient_bound": self.gradient_bound,
            "gradient_flagged": self.gradient_flagged,
            "max_inner_change": self.max_inner_change,
        }


class ValueTensor:
    """
    The value family ``Theta(tau; t_k, node, x)`` on the tau grid (= time grid).

    The diagonal ``tau = t_k`` is kept for every node.  Other tau-slices are kept only when requested: slice ``tau``
    is defined on the levels ``k >= tau`` and NaN before.
    """

    def __init__(self, tree: PathTree, grid: SpatialGrid, retained: Iterable[int] = ()):
        self.tree = tree
        self.grid = grid
        self.diagonal = np.full((tree.n_nodes, grid.n_points), np.nan)
        self.slices = {
            int(tau): np.full((tree.n_nodes, grid.n_points), np.nan) for tau in sorted(set(retained))
        }  # type: Dict[int, np.ndarray]
        self.diagnostics = None  # type: Optional[HjbDiagnostics]

    @property
    def retained_taus(self) -> List[int]:
        return sorted(self.slices)

    def at_diagonal(self, node: PathNode) -> np.ndarray:
        return self.diagonal[node.node_id]

    def value(self, tau_index: int, node: PathNode) -> np.ndarray:
        if tau_index == node.time_index:
            return self.diagonal[node.node_id]
        if tau_index > node.time_index:
            raise ValueError(f"Slice tau={tau_index} is not defined at time index {node.time_index}")
        if tau_index not in self.slices:
            raise KeyError(f"Slice tau={tau_index} was not retained")
        return self.slices[tau_index][node.node_id]

    def gradient(self, node: PathNode) -> np.ndarray:
        return spatial_gradient(self.diagonal[node.node_id], self.grid.dx)

    def __eq__(self, other) -> bool:
        if not isinstance(other, ValueTensor) or self.retained_taus != other.retained_taus:
            return False
        same_slices = all(np.array_equal(self.slices[tau], other.slices[tau], equal_nan=True) for tau in self.slices)
        return same_slices and np.array_equal(self.diagonal, other.diagonal, equal_nan=True)


def _retained(retain: Retain, n_steps: int) -> List[int]:
    if retain is None:
        return []
    if isinstance(retain, str):
        if retain != "all":
            raise ValueError(f"Unknown retention {retain!r}")
        return list(range(n_steps + 1))
    taus = sorted({int(tau) for tau in retain})
    if taus and not 0 <= taus[0] <= taus[-1] <= n_steps:
        raise ValueError(f"Retained tau indices must be in 0..{n_steps}, got {taus}")
    return taus


def _check_finite(values: np.ndarray, tau_indices: np.ndarray, node: PathNode) -> None:
    bad = ~np.all(np.isfinite(values), axis=-1)
    if np.any(bad):
        tau = int(tau_indices[int(np.argmax(bad))])
        raise HjbNumericError(
            f"Non-finite value at tau={tau}, time index {node.time_index}, node {node.node_id}",
            tau,
            node.time_index,
            node.node_id,
        )


def terminal_slices(scenario: Scenario, zeta: DensityField, node: PathNode, tau_indices: np.ndarray) -> np.ndarray:
    """
    ``nu(tau, T) h(tau; i, x, zeta(T, node))`` for the requested tau indices, shape ``(len(tau_indices), n_points)``.
    """
    time_grid = node.tree.time_grid
    taus = time_grid[tau_indices]
    m1, m2 = zeta.node_moments(node)
    weights = np.broadcast_to(scenario.discount(taus, time_grid[-1]), taus.shape)
    return weights[:, None] * scenario.h_values(taus, node.regime, m1, m2)


def mix_children(node: PathNode, next_values: np.ndarray, next_first_id: int, n_slices: int) -> np.ndarray:
    """
    ``sum_j weight_j Theta(k + 1, child_j)`` for the first ``n_slices`` rows of every child.
    """
    mixed = np.zeros((n_slices, next_values.shape[-1]))
    for link in node.children:
        mixed += link.weight * next_values[link.node.node_id - next_first_id, :n_slices]
    return mixed


def node_step(
    scenario: Scenario,
    zeta: DensityField,
    node: PathNode,
    mixed: np.ndarray,
    tau_indices: np.ndarray,
    control: np.ndarray,
    sigma: np.ndarray,
) -> np.ndarray:
    """
    Step the mixed slices of ``node`` back from ``t_{k+1}`` to ``t_k`` under a fixed control row.
    """
    tree = node.tree
    k = node.time_index
    t = float(tree.time_grid[k])
    dt = float(tree.time_grid[k + 1] - tree.time_grid[k])
    taus = tree.time_grid[tau_indices]
    m1, m2 = zeta.node_moments(node)
    i = node.regime

    drift = scenario.b1_values(t, i, control) + scenario.b2_values(t, i, m1, m2)
    weights = np.broadcast_to(scenario.discount(taus, t), taus.shape)
    cost = weights[:, None] * (scenario.g1_values(t, i, control)[None, :] + scenario.g2_values(taus, t, i, m1, m2))
    return diffusion_step(mixed, drift, cost, sigma, dt, scenario.grid)


class _DiagonalRule:
    """
    The equilibrium feedback at one node: ``psi`` at the gradient of the diagonal slice, refined by re-stepping.
    """

    def __init__(self, scenario: Scenario, zeta: DensityField):
        self.scenario = scenario
        self.zeta = zeta

    def __call__(self, node: PathNode, diagonal: np.ndarray, sigma: np.ndarray) -> Tuple[np.ndarray, float]:
        scenario = self.scenario
        t = node.time
        dx = scenario.grid.dx
        control = scenario.psi_values(t, node.regime, spatial_gradient(diagonal, dx))
        change = 0.0
        k = np.array([node.time_index])
        for _ in range(scenario.solver.inner_iters):
            provisional = node_step(scenario, self.zeta, node, diagonal[None, :], k, control, sigma)
            _check_finite(provisional, k, node)
            refined = scenario.psi_values(t, node.regime, spatial_gradient(provisional[0], dx))
            change = float(np.max(np.abs(refined - control)))
            control = refined
        return control, change


def hjb_backward_solve(
    scenario: Scenario,
    zeta: DensityField,
    tree: PathTree,
    retain: Retain = (0,),
    sweeper: Optional[NodeSweeper] = None,
) -> Tuple[ValueTensor, StrategyField]:
    """
    Backward induction of the equilibrium HJB system over the tree.

    At level ``k`` every node carries the slices ``tau = 0..k``.  Children are mixed with their transition weights,
    the feedback is ``psi`` at the gradient of the mixed ``tau = k`` slice (with ``inner_iters`` refinements), then
    all slices take one implicit step with that feedback.  Returns the value tensor and the diagonal strategy.
    """
    sweeper = sweeper or NodeSweeper(1)
    grid = scenario.grid
    n_steps = tree.n_steps
    time_grid = tree.time_grid
    theta = ValueTensor(tree, grid, _retained(retain, n_steps))
    controls = np.full((tree.n_nodes, grid.n_points), np.nan)
    rule = _DiagonalRule(scenario, zeta)
    max_inner_change = 0.0

    leaves = tree.level(n_steps)
    all_taus = np.arange(n_steps + 1)
    next_values = np.empty((len(leaves), n_steps + 1, grid.n_points))
    for position, leaf in enumerate(leaves):
        next_values[position] = terminal_slices(scenario, zeta, leaf, all_taus)
        _check_finite(next_values[position], all_taus, leaf)
        gradient = spatial_gradient(next_values[position, n_steps], grid.dx)
        controls[leaf.node_id] = scenario.psi_values(time_grid[-1], leaf.regime, gradient)
    _store_level(theta, leaves, next_values, n_steps)

    for k in range(n_steps - 1, -1, -1):
        level = tree.level(k)
        next_first_id = tree.level(k + 1)[0].node_id
        sigma = scenario.sigma_values(float(time_grid[k]))
        tau_indices = np.arange(k + 1)
        chunks = [level[start : start + CHUNK_SIZE] for start in range(0, len(level), CHUNK_SIZE)]

        def solve_chunk(chunk: List[PathNode]) -> List[Tuple[np.ndarray, np.ndarray, float]]:
            results = []
            for node in chunk:
                mixed = mix_children(node, next_values, next_first_id, k + 1)
                control, change = rule(node, mixed[k], sigma)
                stepped = node_step(scenario, zeta, node, mixed, tau_indices, control, sigma)
                _check_finite(stepped, tau_indices, node)
                results.append((stepped, control, change))
            return results

        values = np.empty((len(level), k + 1, grid.n_points))
        position = 0
        for chunk_results in sweeper.sweep(solve_chunk, chunks):
            for stepped, control, change in chunk_results:
                values[position] = stepped
                controls[level[position].node_id] = control
                max_inner_change = max(max_inner_change, change)
                position += 1
        _store_level(theta, level, values, k)
        next_values = values
        logger.debug(f"HJB level {k}: {len(level)} nodes, {k + 1} tau-slices")

    theta.diagnostics = _diagnostics(theta, scenario.solver.gradient_bound, max_inner_change)
    if theta.diagnostics.gradient_flagged:
        logger.warning(
            f"Value gradients exceed the sanity bound {scenario.solver.gradient_bound:g} "
            f"(|D_x| {theta.diagnostics.max_gradient:.3g}, |D_xx| {theta.diagnostics.max_second_derivative:.3g})"
        )
    return theta, StrategyField(tree, grid, controls)


def _store_level(theta: ValueTensor, level: List[PathNode], values: np.ndarray, k: int) -> None:
    ids = [node.node_id for node in level]
    theta.diagonal[ids] = values[:, k]
    for tau, stored in theta.slices.items():
        if tau <= k:
            stored[ids] = values[:, tau]


def _diagnostics(theta: ValueTensor, bound: float, max_inner_change: float) -> HjbDiagnostics:
    dx = theta.grid.dx
    return HjbDiagnostics(
        max_gradient=float(np.max(np.abs(spatial_gradient(theta.diagonal, dx)))),
        max_second_derivative=float(np.max(np.abs(second_derivative(theta.diagonal, dx)))),
        gradient_bound=bound,
        max_inner_change=max_inner_change,
    )


def evaluate_policy(
    scenario: Scenario,
    zeta: DensityField,
    tree: PathTree,
    strategy: StrategyField,
    root: Optional[PathNode] = None,
    tau_indices: Iterable[int] = (0,),
) -> Dict[int, np.ndarray]:
    """
    The cost ``J(tau; t_k, node, x)`` of following ``strategy`` (no optimization) against the fixed flow ``zeta``.

    Only the subtree of ``root`` (the whole tree by default) is visited.  Returns one ``(n_nodes, n_points)`` array
    per tau index, NaN outside the subtree and on levels before ``tau``.
    """
    taus = np.array(sorted({int(tau) for tau in tau_indices}), dtype=int)
    assert len(taus) > 0 and 0 <= taus[0] and taus[-1] <= tree.n_steps, f"Invalid tau indices {taus.tolist()}"
    grid = scenario.grid
    root = root or tree.root
    values = np.full((len(taus), tree.n_nodes, grid.n_points), np.nan)

    by_level = {}  # type: Dict[int, List[PathNode]]
    for node in tree.subtree(root):
        by_level.setdefault(node.time_index, []).append(node)

    for node in by_level[tree.n_steps]:
        values[:, node.node_id] = terminal_slices(scenario, zeta, node, taus)
        _check_finite(values[:, node.node_id], taus, node)

    for k in range(tree.n_steps - 1, root.time_index - 1, -1):
        sigma = scenario.sigma_values(float(tree.time_grid[k]))
        active = taus <= k
        for node in by_level[k]:
            mixed = np.zeros((int(active.sum()), grid.n_points))
            for link in node.children:
                mixed += link.weight * values[active, link.node.node_id]
            stepped = node_step(scenario, zeta, node, mixed, taus[active], strategy.at(node), sigma)
            _check_finite(stepped, taus[active], node)
            values[active, node.node_id] = stepped

    return {int(tau): values[index] for index, tau in enumerate(taus)}
