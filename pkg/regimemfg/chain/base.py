from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from loguru import logger
from scipy.linalg import expm

from regimemfg.paths.base import RegimePath

ROW_SUM_TOLERANCE = 1e-12

SeedType = Union[int, np.random.SeedSequence, np.random.Generator, None]


class GeneratorError(ValueError):
    def __init__(self, msg=None, violations=None):
        super().__init__(msg)
        self.violations = violations or []


@dataclass(frozen=True, eq=False)
class Generator:
    """
    The generator ``Q = (q_ij)`` of the regime chain, rates in 1/time units.
    """

    q: np.ndarray

    def __post_init__(self):
        q = np.array(self.q, dtype=float)
        if q.ndim != 2 or q.shape[0] != q.shape[1] or q.shape[0] < 1:
            raise GeneratorError(f"Generator must be a non-empty square matrix, got shape {q.shape}")
        q.setflags(write=False)
        object.__setattr__(self, "q", q)

    @property
    def m(self) -> int:
        return self.q.shape[0]

    def rate(self, i: int, j: int) -> float:
        """
        ``q_ij`` for regimes numbered from 1.
        """
        return float(self.q[i - 1, j - 1])

    def __eq__(self, other: "Generator") -> bool:
        return isinstance(other, Generator) and self.q.shape == other.q.shape and bool(np.all(self.q == other.q))

    def __hash__(self):
        return hash(self.q.tobytes())


@dataclass(frozen=True)
class GeneratorViolation:
    row: int
    column: Optional[int]
    reason: str

    def __str__(self) -> str:
        if self.column is None:
            return f"row {self.row}: {self.reason}"
        return f"entry ({self.row}, {self.column}): {self.reason}"


@dataclass(frozen=True)
class GeneratorReport:
    violations: Tuple[GeneratorViolation, ...] = field(default_factory=tuple)

    @property
    def ok(self) -> bool:
        return len(self.violations) == 0

    def __str__(self) -> str:
        if self.ok:
            return "ok"
        return "; ".join(str(violation) for violation in self.violations)


def validate(generator: Generator) -> GeneratorReport:
    """
    Check that off-diagonal rates are non-negative and that every row sums to zero.  Rows and columns in the report
    are numbered from 1.
    """
    violations = []  # type: List[GeneratorViolation]
    q = generator.q
    for i in range(generator.m):
        if not np.all(np.isfinite(q[i])):
            violations.append(GeneratorViolation(i + 1, None, "contains non-finite rates"))
            continue
        for j in range(generator.m):
            if i != j and q[i, j] < 0:
                violations.append(GeneratorViolation(i + 1, j + 1, f"negative off-diagonal rate {q[i, j]}"))
        row_sum = float(q[i].sum())
        if abs(row_sum) > ROW_SUM_TOLERANCE:
            violations.append(GeneratorViolation(i + 1, None, f"sums to {row_sum}"))
    return GeneratorReport(tuple(violations))


def ensure_valid(generator: Generator) -> None:
    report = validate(generator)
    if not report.ok:
        raise GeneratorError(f"Invalid generator: {report}", list(report.violations))


def transition_matrix(generator: Generator, dt: float) -> np.ndarray:
    """
    The one-step transition matrix ``exp(Q dt)``, computed by scaling and squaring with a Padé approximant.  Rows are
    renormalized so they sum to one to machine precision.
    """
    if dt < 0:
        raise GeneratorError(f"Time step must be non-negative, got {dt}")
    if dt == 0:
        return np.eye(generator.m)

    matrix = expm(generator.q * dt)
    matrix = np.clip(matrix, 0.0, None)
    return matrix / matrix.sum(axis=1, keepdims=True)


def _as_rng(seed: SeedType) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def sample_grid_states(
    generator: Generator,
    initial_regime: int,
    time_grid: Sequence[float],
    rng_seed: SeedType = None,
    n_paths: int = 1,
) -> np.ndarray:
    """
    Sample the chain at the grid times.  Returns an integer array of shape ``(n_paths, len(time_grid))`` whose column
    ``k`` is the regime at ``time_grid[k]``; column 0 is ``initial_regime``.  Each step draws from the corresponding
    row of ``exp(Q dt_k)``.
    """
    assert 1 <= initial_regime <= generator.m, f"Initial regime must be in 1..{generator.m}, got {initial_regime}"
    rng = _as_rng(rng_seed)
    grid = np.asarray(time_grid, dtype=float)

    states = np.empty((n_paths, len(grid)), dtype=int)
    states[:, 0] = initial_regime
    for k in range(len(grid) - 1):
        cumulative = np.cumsum(transition_matrix(generator, grid[k + 1] - grid[k]), axis=1)
        cumulative[:, -1] = 1.0
        draws = rng.random(n_paths)
        rows = cumulative[states[:, k] - 1]
        states[:, k + 1] = (rows > draws[:, None]).argmax(axis=1) + 1
    return states


def sample_path(
    generator: Generator, initial_regime: int, time_grid: Sequence[float], rng_seed: SeedType = None
) -> RegimePath:
    """
    Sample one chain path on ``[time_grid[0], time_grid[-1])``.  The regime on ``[t_k, t_{k+1})`` is the chain's
    state at ``t_k``, so switches can only happen at interior grid times.
    """
    states = sample_grid_states(generator, initial_regime, time_grid, rng_seed, n_paths=1)[0]
    return RegimePath.from_interval_states(states[:-1], time_grid)


class DetachedNodeError(ValueError):
    pass


def path_probability(node) -> float:
    """
    The probability of the node's regime history: the product of the per-step child weights along its lineage.
    """
    tree = getattr(node, "tree", None)
    if tree is None or node.node_id >= tree.n_nodes or tree.nodes[node.node_id] is not node:
        raise DetachedNodeError(f"Node {node!r} does not belong to an enumerated path tree")

    probability = 1.0
    current = node
    while current.parent is not None:
        probability *= current.weight_from_parent
        current = current.parent
    logger.debug(f"Path probability of node {node.node_id}: {probability}")
    return probability
