from dataclasses import dataclass
from typing import Callable, Tuple, Union

import numpy as np

from regimemfg.paths.tree import PathNode, PathTree
from regimemfg.scenario.base import SpatialGrid

NodeRef = Union[PathNode, int]

BOUNDARY_CELLS = 2
LEAKAGE_WARNING = 1e-6


class StrategyShapeError(ValueError):
    pass


def _node_id(node: NodeRef) -> int:
    return node if isinstance(node, (int, np.integer)) else node.node_id


def density_moments(masses: np.ndarray, x: np.ndarray) -> Tuple[float, float]:
    """
    First and second moments of a grid density (masses at the points ``x``).
    """
    return float(np.dot(masses, x)), float(np.dot(masses, x * x))


class StrategyField:
    """
    Feedback controls ``u(t_k, node, x)``: one row of control values on the spatial grid per tree node.
    """

    def __init__(self, tree: PathTree, grid: SpatialGrid, values: np.ndarray):
        values = np.asarray(values, dtype=float)
        if values.shape != (tree.n_nodes, grid.n_points):
            raise StrategyShapeError(
                f"Strategy has shape {values.shape}, expected ({tree.n_nodes}, {grid.n_points})"
            )
        self.tree = tree
        self.grid = grid
        self.values = values

    @classmethod
    def from_function(cls, tree: PathTree, grid: SpatialGrid, control: Callable[[PathNode], np.ndarray]):
        values = np.empty((tree.n_nodes, grid.n_points))
        for node in tree.nodes:
            values[node.node_id] = control(node)
        return cls(tree, grid, values)

    @classmethod
    def constant(cls, tree: PathTree, grid: SpatialGrid, value: float) -> "StrategyField":
        return cls(tree, grid, np.full((tree.n_nodes, grid.n_points), float(value)))

    def __eq__(self, other) -> bool:
        return isinstance(other, StrategyField) and np.array_equal(self.values, other.values)

    def at(self, node: NodeRef) -> np.ndarray:
        return self.values[_node_id(node)]

    def copy(self) -> "StrategyField":
        return StrategyField(self.tree, self.grid, self.values.copy())

    def clipped(self, u_min: float, u_max: float) -> "StrategyField":
        return StrategyField(self.tree, self.grid, np.clip(self.values, u_min, u_max))

    def within(self, u_min: float, u_max: float) -> bool:
        return bool(np.all(self.values >= u_min) and np.all(self.values <= u_max))

    def spatial_lipschitz(self) -> np.ndarray:
        """
        Per-node estimate ``max |u(x_{j+1}) - u(x_j)| / dx``.
        """
        return np.max(np.abs(np.diff(self.values, axis=1)), axis=1) / self.grid.dx


@dataclass(frozen=True)
class FlowDiagnostics:
    max_boundary_mass: float
    worst_boundary_node: int
    max_mass_error: float
    leaking_nodes: int

    def to_dict(self) -> dict:
        return {
            "max_boundary_mass": self.max_boundary_mass,
            "worst_boundary_node": self.worst_boundary_node,
            "max_mass_error": self.max_mass_error,
            "leaking_nodes": self.leaking_nodes,
        }


class DensityField:
    """
    The conditional law ``zeta(t_k, node)`` as a probability vector on the spatial grid for every tree node, with
    cached moments and the mass sitting in the outermost cells.  Rows are written once.
    """

    def __init__(self, tree: PathTree, grid: SpatialGrid):
        self.tree = tree
        self.grid = grid
        self.masses = np.full((tree.n_nodes, grid.n_points), np.nan)
        self.moments = np.full((tree.n_nodes, 2), np.nan)
        self.boundary_mass = np.full(tree.n_nodes, np.nan)

    @classmethod
    def from_masses(cls, tree: PathTree, grid: SpatialGrid, masses: np.ndarray) -> "DensityField":
        masses = np.asarray(masses, dtype=float)
        if masses.shape != (tree.n_nodes, grid.n_points):
            raise StrategyShapeError(f"Densities have shape {masses.shape}, expected ({tree.n_nodes}, {grid.n_points})")
        field = cls(tree, grid)
        for node_id, row in enumerate(masses):
            field.set_density(node_id, row)
        return field

    def set_density(self, node: NodeRef, masses: np.ndarray) -> None:
        node_id = _node_id(node)
        assert np.isnan(self.masses[node_id, 0]), f"Density of node {node_id} is already set"
        self.masses[node_id] = masses
        self.moments[node_id] = density_moments(masses, self.grid.x)
        self.boundary_mass[node_id] = masses[:BOUNDARY_CELLS].sum() + masses[-BOUNDARY_CELLS:].sum()

    def density(self, node: NodeRef) -> np.ndarray:
        return self.masses[_node_id(node)]

    def node_moments(self, node: NodeRef) -> Tuple[float, float]:
        m1, m2 = self.moments[_node_id(node)]
        return float(m1), float(m2)

    def mean(self, node: NodeRef) -> float:
        return float(self.moments[_node_id(node), 0])

    def variance(self, node: NodeRef) -> float:
        m1, m2 = self.node_moments(node)
        return m2 - m1 * m1

    @property
    def complete(self) -> bool:
        return not np.any(np.isnan(self.masses))

    def diagnostics(self) -> FlowDiagnostics:
        worst = int(np.nanargmax(self.boundary_mass))
        return FlowDiagnostics(
            max_boundary_mass=float(self.boundary_mass[worst]),
            worst_boundary_node=worst,
            max_mass_error=float(np.nanmax(np.abs(self.masses.sum(axis=1) - 1.0))),
            leaking_nodes=int(np.sum(self.boundary_mass > LEAKAGE_WARNING)),
        )

    def __eq__(self, other) -> bool:
        return isinstance(other, DensityField) and np.array_equal(self.masses, other.masses)
