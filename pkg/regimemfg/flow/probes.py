import math
from collections import defaultdict
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np
from loguru import logger

from regimemfg.flow.base import DensityField, StrategyField
from regimemfg.flow.wasserstein import wasserstein2
from regimemfg.paths.base import jump_count, skorohod_distance
from regimemfg.paths.tree import PathNode, PathTree

MAX_PAIRS_PER_LEVEL = 500


@dataclass(frozen=True)
class PLipschitzReport:
    """
    Empirical ``sup d(w, w~) / sqrt(N(w) D(w, w~))`` over same-level node pairs with a finite path-space distance.
    ``level_max`` holds the largest ratio per time index.
    """

    quantity: str
    max_ratio: float
    worst_pair: Optional[Tuple[int, int]]
    n_pairs: int
    level_max: Tuple[float, ...]

    def to_dict(self) -> dict:
        return {
            "quantity": self.quantity,
            "max_ratio": self.max_ratio,
            "worst_pair": list(self.worst_pair) if self.worst_pair is not None else None,
            "n_pairs": self.n_pairs,
            "level_max": list(self.level_max),
        }


def comparable_pairs(
    level: List[PathNode], max_pairs: int, rng: np.random.Generator
) -> List[Tuple[PathNode, PathNode]]:
    """
    Node pairs of one level whose histories switch through the same regimes (the only pairs with distance below 1).
    Pairs are subsampled to ``max_pairs``.
    """
    groups = defaultdict(list)  # type: Dict[Tuple[int, ...], List[PathNode]]
    for node in level:
        if node.path.is_empty or jump_count(node.path) == 0:
            continue
        groups[node.path.states].append(node)

    pairs = []  # type: List[Tuple[PathNode, PathNode]]
    for key in sorted(groups):
        members = groups[key]
        pairs.extend((members[a], members[b]) for a in range(len(members)) for b in range(a + 1, len(members)))
    if len(pairs) > max_pairs:
        chosen = np.sort(rng.choice(len(pairs), size=max_pairs, replace=False))
        pairs = [pairs[index] for index in chosen]
    return pairs


def _probe(
    tree: PathTree,
    quantity: str,
    difference: Callable[[PathNode, PathNode], float],
    max_pairs: int,
    seed: int,
) -> PLipschitzReport:
    rng = np.random.default_rng(seed)
    max_ratio, worst_pair, n_pairs = 0.0, None, 0
    level_max = []  # type: List[float]
    for k in range(tree.n_steps + 1):
        best = 0.0
        for node1, node2 in comparable_pairs(tree.level(k), max_pairs, rng):
            distance = skorohod_distance(node1.path, node2.path)
            if not 0 < distance < 1:
                continue
            n_pairs += 1
            ratio = difference(node1, node2) / math.sqrt(jump_count(node1.path) * distance)
            best = max(best, ratio)
            if ratio > max_ratio:
                max_ratio, worst_pair = ratio, (node1.node_id, node2.node_id)
        level_max.append(best)

    logger.debug(f"P-Lipschitz probe of {quantity}: max ratio {max_ratio:.4g} over {n_pairs} pairs")
    return PLipschitzReport(quantity, max_ratio, worst_pair, n_pairs, tuple(level_max))


def flow_p_lipschitz_probe(
    zeta: DensityField, tree: PathTree, max_pairs: int = MAX_PAIRS_PER_LEVEL, seed: int = 0
) -> PLipschitzReport:
    assert zeta.tree is tree, "Density field belongs to another tree"

    def difference(node1: PathNode, node2: PathNode) -> float:
        return wasserstein2(zeta.density(node1), zeta.density(node2), zeta.grid)

    return _probe(tree, "zeta", difference, max_pairs, seed)


def strategy_p_lipschitz_probe(
    strategy: StrategyField, tree: PathTree, max_pairs: int = MAX_PAIRS_PER_LEVEL, seed: int = 0
) -> PLipschitzReport:
    assert strategy.tree is tree, "Strategy belongs to another tree"

    def difference(node1: PathNode, node2: PathNode) -> float:
        return float(np.max(np.abs(strategy.at(node1) - strategy.at(node2))))

    return _probe(tree, "strategy", difference, max_pairs, seed)
