import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from loguru import logger

from regimemfg.chain.base import Generator, ensure_valid, transition_matrix
from regimemfg.paths.base import RegimePath, concat


class TreeError(ValueError):
    pass


@dataclass(frozen=True)
class ChildLink:
    regime: int
    weight: float
    node: "PathNode"


class PathNode:
    """
    A node of the enumerated path tree at grid time ``t_k``.

    ``path`` is the regime history on ``[0, t_k)`` and ``regime`` the regime in force on ``[t_k, t_{k+1})``.  The
    root has an empty path and carries the initial regime.  ``grid_states`` is the sequence of regimes at
    ``t_0, ..., t_k`` and ``n_switches`` counts its changes.
    """

    def __init__(
        self,
        tree: "PathTree",
        node_id: int,
        time_index: int,
        regime: int,
        path: RegimePath,
        parent: Optional["PathNode"],
        weight_from_parent: float,
        grid_states: Tuple[int, ...],
        n_switches: int,
        uncapped_from_parent: Optional[float] = None,
    ):
        self.tree = tree
        self.node_id = node_id
        self.time_index = time_index
        self.regime = regime
        self.path = path
        self.parent = parent
        self.weight_from_parent = weight_from_parent
        self.cumulative_weight = weight_from_parent * (parent.cumulative_weight if parent is not None else 1.0)
        if uncapped_from_parent is None:
            uncapped_from_parent = weight_from_parent
        # lineage probability under the untruncated chain
        self.uncapped_weight = uncapped_from_parent * (parent.uncapped_weight if parent is not None else 1.0)
        self.grid_states = grid_states
        self.n_switches = n_switches
        self.children = ()  # type: Tuple[ChildLink, ...]

    def __repr__(self) -> str:
        return f"PathNode(node_id={self.node_id}, time_index={self.time_index}, signature={self.signature!r})"

    @property
    def time(self) -> float:
        return float(self.tree.time_grid[self.time_index])

    @property
    def is_leaf(self) -> bool:
        return len(self.children) == 0

    @property
    def at_cap(self) -> bool:
        return self.n_switches >= self.tree.jump_cap

    @property
    def signature(self) -> str:
        """
        The initial regime followed by ``time_index:new_regime`` for every switch, separated by semicolons.
        """
        parts = [str(self.grid_states[0])]
        for k in range(1, len(self.grid_states)):
            if self.grid_states[k] != self.grid_states[k - 1]:
                parts.append(f"{k}:{self.grid_states[k]}")
        return ";".join(parts)

    @property
    def extended_path(self) -> RegimePath:
        """
        The history through ``t_{k+1}``: the node's path followed by its own regime for one step.  Leaves use the
        last grid step.
        """
        grid = self.tree.time_grid
        if self.time_index < self.tree.n_steps:
            dt = grid[self.time_index + 1] - grid[self.time_index]
        else:
            dt = grid[-1] - grid[-2]
        return concat(self.path, RegimePath.constant(self.regime, self.path.span_end, self.path.span_end + dt))

    def lineage(self) -> List["PathNode"]:
        """
        The nodes from the root down to this node.
        """
        nodes = []
        current = self  # type: Optional[PathNode]
        while current is not None:
            nodes.append(current)
            current = current.parent
        return nodes[::-1]


@dataclass(frozen=True)
class TreeDiagnostics:
    nodes_per_level: Tuple[int, ...]
    leaf_count: int
    truncated_mass: float
    truncation_bound: float
    jump_cap: int

    def to_dict(self) -> dict:
        return {
            "nodes_per_level": list(self.nodes_per_level),
            "leaf_count": self.leaf_count,
            "truncated_mass": self.truncated_mass,
            "truncation_bound": self.truncation_bound,
            "jump_cap": self.jump_cap,
        }


def expected_leaf_count(n_steps: int, m: int, jump_cap: int) -> int:
    return sum(math.comb(n_steps, j) * (m - 1) ** j for j in range(min(jump_cap, n_steps) + 1))


class PathTree:
    """
    All per-interval-constant regime histories from the initial regime with at most ``jump_cap`` switches, levelled
    by grid time.  Node ids are assigned breadth first, children in ascending regime order.
    """

    def __init__(self, time_grid: np.ndarray, generator: Generator, jump_cap: int, initial_regime: int):
        self.time_grid = time_grid
        self.generator = generator
        self.jump_cap = jump_cap
        self.initial_regime = initial_regime
        self.nodes = []  # type: List[PathNode]
        self.levels = []  # type: List[List[PathNode]]
        self.truncated_mass = 0.0
        self._by_states = {}  # type: Dict[Tuple[int, ...], PathNode]

    @property
    def m(self) -> int:
        return self.generator.m

    @property
    def n_steps(self) -> int:
        return len(self.time_grid) - 1

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def root(self) -> PathNode:
        return self.nodes[0]

    @property
    def leaves(self) -> List[PathNode]:
        return self.levels[-1]

    def level(self, time_index: int) -> List[PathNode]:
        return self.levels[time_index]

    def level_ids(self, time_index: int) -> np.ndarray:
        return np.array([node.node_id for node in self.levels[time_index]], dtype=int)

    def _add_node(self, **kwargs) -> PathNode:
        node = PathNode(self, len(self.nodes), **kwargs)
        self.nodes.append(node)
        self._by_states[node.grid_states] = node
        return node

    def find_node(self, grid_states: Sequence[int]) -> PathNode:
        """
        The node whose regimes at ``t_0, ..., t_k`` are ``grid_states``.
        """
        key = tuple(int(state) for state in grid_states)
        try:
            return self._by_states[key]
        except KeyError:
            raise TreeError(f"No node with grid states {key} (jump cap {self.jump_cap})") from None

    def subtree(self, node: PathNode) -> List[PathNode]:
        """
        ``node`` and all its descendants, breadth first.
        """
        result = [node]
        frontier = [node]
        while frontier:
            frontier = [link.node for current in frontier for link in current.children]
            result.extend(frontier)
        return result

    def diagnostics(self) -> TreeDiagnostics:
        q = self.generator.q
        rate = float(np.max(np.abs(np.diag(q)))) if q.size else 0.0
        horizon = float(self.time_grid[-1] - self.time_grid[0])
        order = self.jump_cap + 1
        bound = (rate * horizon) ** order / math.factorial(order)
        return TreeDiagnostics(
            nodes_per_level=tuple(len(level) for level in self.levels),
            leaf_count=len(self.leaves),
            truncated_mass=self.truncated_mass,
            truncation_bound=bound,
            jump_cap=self.jump_cap,
        )


def enumerate_tree(
    time_grid: Sequence[float], m: int, jump_cap: int, initial_regime: int, generator: Generator
) -> PathTree:
    """
    Enumerate the truncated path tree.

    Children of a node carry the entries of the row of ``exp(Q dt_k)`` for the node's regime.  A node that already
    used all ``jump_cap`` switches has only the no-switch child with weight 1; the probability it would have switched
    is added to the tree's truncated mass, weighted by the node's lineage probability
    under the untruncated chain.
    """
    grid = np.asarray(time_grid, dtype=float)
    if grid.ndim != 1 or len(grid) < 2:
        raise TreeError(f"The time grid needs at least two points, got {len(grid)}")
    if np.any(np.diff(grid) <= 0):
        raise TreeError("The time grid must be strictly increasing")
    if jump_cap < 0:
        raise TreeError(f"Jump cap must be non-negative, got {jump_cap}")
    if generator.m != m:
        raise TreeError(f"Generator has {generator.m} regimes, expected {m}")
    if not 1 <= initial_regime <= m:
        raise TreeError(f"Initial regime must be in 1..{m}, got {initial_regime}")
    ensure_valid(generator)

    grid.setflags(write=False)
    tree = PathTree(grid, generator, jump_cap, initial_regime)
    root = tree._add_node(
        time_index=0,
        regime=initial_regime,
        path=RegimePath(initial_regime, (), span_end=float(grid[0]), span_start=float(grid[0])),
        parent=None,
        weight_from_parent=1.0,
        grid_states=(initial_regime,),
        n_switches=0,
    )
    tree.levels.append([root])

    for k in range(tree.n_steps):
        step = transition_matrix(generator, grid[k + 1] - grid[k])
        next_level = []
        for node in tree.levels[k]:
            row = step[node.regime - 1]
            child_path = concat(node.path, RegimePath.constant(node.regime, float(grid[k]), float(grid[k + 1])))

            if node.at_cap:
                allowed = {node.regime: 1.0}
                tree.truncated_mass += node.uncapped_weight * (1.0 - row[node.regime - 1])
            else:
                total = row.sum()
                allowed = {j + 1: row[j] / total for j in range(m)}

            links = []
            for regime, weight in allowed.items():
                child = tree._add_node(
                    time_index=k + 1,
                    regime=regime,
                    path=child_path,
                    parent=node,
                    weight_from_parent=float(weight),
                    grid_states=node.grid_states + (regime,),
                    n_switches=node.n_switches + (regime != node.regime),
                    uncapped_from_parent=float(row[regime - 1]),
                )
                links.append(ChildLink(regime, float(weight), child))
                next_level.append(child)
            node.children = tuple(links)
        tree.levels.append(next_level)
        logger.debug(f"Level {k + 1}: {len(next_level)} nodes")

    if tree.truncated_mass > 0:
        logger.warning(f"Jump cap {jump_cap} truncates probability mass {tree.truncated_mass:.3e}")
    logger.info(f"Enumerated path tree with {tree.n_nodes} nodes and {len(tree.leaves)} leaves")
    return tree
