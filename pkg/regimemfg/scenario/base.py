import hashlib
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import List, Optional, Tuple, Union

import numpy as np
from loguru import logger
from scipy.stats import norm

from regimemfg.chain.base import Generator, validate
from regimemfg.paths.tree import PathTree, enumerate_tree
from regimemfg.scenario.expressions import Expression, Number, parse_expression

SIGMA_VARIABLES = frozenset(("t", "x"))
B1_VARIABLES = frozenset(("t", "i", "x", "v"))
G1_VARIABLES = B1_VARIABLES
B2_VARIABLES = frozenset(("t", "i", "x", "m1", "m2"))
G2_VARIABLES = frozenset(("tau", "t", "i", "x", "m1", "m2"))
H_VARIABLES = frozenset(("tau", "i", "x", "m1", "m2"))
PSI_VARIABLES = frozenset(("t", "i", "x", "p"))

SLOT_VARIABLES = {
    "sigma": SIGMA_VARIABLES,
    "b1": B1_VARIABLES,
    "g1": G1_VARIABLES,
    "b2": B2_VARIABLES,
    "g2": G2_VARIABLES,
    "h": H_VARIABLES,
    "psi": PSI_VARIABLES,
}

# grid size used when spot-checking expression properties
LQ_CHECK_CONTROLS = np.linspace(-2.0, 2.0, 9)
LQ_CHECK_TOLERANCE = 1e-9
SIGMA_BOUND = 1e3


class ScenarioError(ValueError):
    def __init__(self, msg=None, line=None, column=None):
        super().__init__(msg)
        self.line = line
        self.column = column

    def __str__(self) -> str:
        message = super().__str__()
        if self.line is None:
            return message
        if self.column is None:
            return f"line {self.line}: {message}"
        return f"line {self.line}, column {self.column}: {message}"


@dataclass(frozen=True)
class SpatialGrid:
    """
    ``n_points`` equally spaced points on ``[x_min, x_max]``.  Densities on the grid are masses of atoms at the
    points; cell ``j`` is the interval between the midpoints around ``x[j]``.
    """

    x_min: float
    x_max: float
    n_points: int

    @property
    def x(self) -> np.ndarray:
        return np.linspace(self.x_min, self.x_max, self.n_points)

    @property
    def dx(self) -> float:
        return (self.x_max - self.x_min) / (self.n_points - 1)

    @property
    def edges(self) -> np.ndarray:
        """
        Cell boundaries, with the outer cells reaching to infinity.
        """
        x = self.x
        return np.concatenate(([-np.inf], (x[1:] + x[:-1]) / 2, [np.inf]))

    def nearest_index(self, value: float) -> int:
        return int(np.clip(np.rint((value - self.x_min) / self.dx), 0, self.n_points - 1))


class InitialKind(Enum):
    GAUSSIAN = "gaussian"
    POINT = "point"
    HISTOGRAM = "histogram"


@dataclass(frozen=True)
class InitialDensity:
    kind: InitialKind
    parameters: Tuple[float, ...]

    @classmethod
    def gaussian(cls, mean: float, std: float) -> "InitialDensity":
        return cls(InitialKind.GAUSSIAN, (float(mean), float(std)))

    @classmethod
    def point(cls, location: float) -> "InitialDensity":
        return cls(InitialKind.POINT, (float(location),))

    @classmethod
    def histogram(cls, masses) -> "InitialDensity":
        return cls(InitialKind.HISTOGRAM, tuple(float(mass) for mass in masses))

    def discretize(self, grid: SpatialGrid) -> np.ndarray:
        """
        Masses on the grid: cell averages for a Gaussian, the nearest atom for a point, the normalized weights for a
        histogram.
        """
        if self.kind == InitialKind.GAUSSIAN:
            mean, std = self.parameters
            masses = np.diff(norm.cdf(grid.edges, loc=mean, scale=std))
        elif self.kind == InitialKind.POINT:
            masses = np.zeros(grid.n_points)
            masses[grid.nearest_index(self.parameters[0])] = 1.0
        else:
            masses = np.array(self.parameters, dtype=float)
            assert len(masses) == grid.n_points, f"Histogram has {len(masses)} entries for {grid.n_points} points"
        return masses / masses.sum()

    def describe(self) -> str:
        if self.kind == InitialKind.HISTOGRAM:
            return f"histogram({len(self.parameters)} cells)"
        return f"{self.kind.value}({', '.join(repr(value) for value in self.parameters)})"


@dataclass(frozen=True)
class PsiSpec:
    """
    The minimizer map: either the built-in linear-quadratic family ``clamp(-p / control_cost, u_min, u_max)`` or an
    expression in ``(t, i, x, p)`` that is clamped to the action bounds.
    """

    control_cost: Optional[float] = None
    expression: Optional[Expression] = None

    @property
    def is_lq(self) -> bool:
        return self.expression is None


class DiscountKind(Enum):
    NONE = "none"
    EXPONENTIAL = "exponential"
    HYPERBOLIC = "hyperbolic"


def discount_factor(kind: Union[DiscountKind, str], rate: float, tau: Number, s: Number) -> Number:
    """
    The weight a player deciding at ``tau`` gives to costs incurred at ``s``; equals 1 when ``s == tau``.
    """
    kind = DiscountKind(kind)
    elapsed = np.subtract(s, tau)
    if kind == DiscountKind.NONE or rate == 0:
        return np.ones_like(elapsed, dtype=float) if np.ndim(elapsed) else 1.0
    if kind == DiscountKind.EXPONENTIAL:
        return np.exp(-rate * elapsed)
    return 1.0 / (1.0 + rate * elapsed)


@dataclass(frozen=True)
class Discount:
    kind: DiscountKind = DiscountKind.NONE
    rate: float = 0.0

    @property
    def is_trivial(self) -> bool:
        return self.kind == DiscountKind.NONE or self.rate == 0

    def __call__(self, tau: Number, s: Number) -> Number:
        return discount_factor(self.kind, self.rate, tau, s)


@dataclass(frozen=True)
class SolverSettings:
    tol: float = 1e-6
    max_iter: int = 50
    inner_iters: int = 2
    damping: float = 0.0
    seed: int = 0
    gradient_bound: float = 1e4


def _const(text: str, slot: str) -> Expression:
    return parse_expression(text, SLOT_VARIABLES[slot])


@dataclass(frozen=True)
class Scenario:
    """
    The complete problem datum.  Regime-indexed coefficients hold one expression per regime (index ``i - 1``);
    the regime number is also bound as ``i`` during evaluation.
    """

    horizon: float
    n_steps: int
    generator: Generator
    grid: SpatialGrid
    mu0: InitialDensity
    sigma: Expression
    b1: Tuple[Expression, ...]
    g1: Tuple[Expression, ...]
    h: Tuple[Expression, ...]
    psi: PsiSpec
    u_min: float
    u_max: float
    b2: Tuple[Expression, ...] = ()
    g2: Tuple[Expression, ...] = ()
    initial_regime: int = 1
    jump_cap: int = 2
    discount: Discount = field(default_factory=Discount)
    solver: SolverSettings = field(default_factory=SolverSettings)
    source_text: Optional[str] = None

    def __post_init__(self):
        m = self.generator.m
        for slot in ("b1", "g1", "h", "b2", "g2"):
            expressions = getattr(self, slot)
            if isinstance(expressions, Expression):
                expressions = (expressions,)
            if len(expressions) == 0:
                expressions = (_const("0", slot),)
            if len(expressions) == 1:
                expressions = tuple(expressions) * m
            if len(expressions) != m:
                raise ScenarioError(f"{slot} has {len(expressions)} expressions for {m} regimes")
            object.__setattr__(self, slot, tuple(expressions))

    @property
    def m(self) -> int:
        return self.generator.m

    @property
    def time_grid(self) -> np.ndarray:
        return np.linspace(0.0, self.horizon, self.n_steps + 1)

    @property
    def dt(self) -> float:
        return self.horizon / self.n_steps

    @property
    def tau_dependent(self) -> bool:
        """
        Whether any cost depends on the evaluation time, either explicitly or through discounting.
        """
        explicit = any(expr.uses("tau") for expr in self.g2 + self.h)
        return explicit or not self.discount.is_trivial

    @property
    def measure_dependent(self) -> bool:
        return any(expr.uses("m1") or expr.uses("m2") for expr in self.b2 + self.g2 + self.h)

    def with_solver(self, **changes) -> "Scenario":
        return replace(self, solver=replace(self.solver, **changes))

    def build_tree(self) -> PathTree:
        return enumerate_tree(self.time_grid, self.m, self.jump_cap, self.initial_regime, self.generator)

    # Coefficient evaluation on the spatial grid.  All return arrays of the grid's shape (or broadcast against it).

    def _on_grid(self, value: Number, shape) -> np.ndarray:
        return np.broadcast_to(np.asarray(value, dtype=float), shape).copy()

    def sigma_values(self, t: float, x: Optional[np.ndarray] = None) -> np.ndarray:
        x = self.grid.x if x is None else x
        return self._on_grid(self.sigma(t=t, x=x), np.shape(x))

    def b1_values(self, t: float, i: int, u: Number, x: Optional[np.ndarray] = None) -> np.ndarray:
        x = self.grid.x if x is None else x
        shape = np.broadcast(x, u).shape
        return self._on_grid(self.b1[i - 1](t=t, i=i, x=x, v=u), shape)

    def g1_values(self, t: float, i: int, u: Number, x: Optional[np.ndarray] = None) -> np.ndarray:
        x = self.grid.x if x is None else x
        shape = np.broadcast(x, u).shape
        return self._on_grid(self.g1[i - 1](t=t, i=i, x=x, v=u), shape)

    def b2_values(self, t: float, i: int, m1: float, m2: float, x: Optional[np.ndarray] = None) -> np.ndarray:
        x = self.grid.x if x is None else x
        return self._on_grid(self.b2[i - 1](t=t, i=i, x=x, m1=m1, m2=m2), np.shape(x))

    def g2_values(self, tau: np.ndarray, t: float, i: int, m1: float, m2: float) -> np.ndarray:
        """
        Shape ``(len(tau), n_points)``.
        """
        x = self.grid.x
        taus = np.asarray(tau, dtype=float)[:, None]
        return self._on_grid(self.g2[i - 1](tau=taus, t=t, i=i, x=x, m1=m1, m2=m2), (len(taus), len(x)))

    def h_values(self, tau: np.ndarray, i: int, m1: float, m2: float) -> np.ndarray:
        """
        Shape ``(len(tau), n_points)``.
        """
        x = self.grid.x
        taus = np.asarray(tau, dtype=float)[:, None]
        return self._on_grid(self.h[i - 1](tau=taus, i=i, x=x, m1=m1, m2=m2), (len(taus), len(x)))

    def psi_values(self, t: float, i: int, p: Number, x: Optional[np.ndarray] = None) -> np.ndarray:
        x = self.grid.x if x is None else x
        return self._on_grid(psi_eval(self, t, i, x, p), np.broadcast(x, p).shape)

    def validate(self) -> List[str]:
        """
        Every invariant violation of the scenario, as readable messages.  An empty list means the scenario is valid.
        """
        problems = []  # type: List[str]

        report = validate(self.generator)
        if not report.ok:
            problems.append(f"generator: {report}")
        if not 1 <= self.initial_regime <= self.m:
            problems.append(f"initial regime {self.initial_regime} is not in 1..{self.m}")
        if self.jump_cap < 0:
            problems.append(f"jump cap {self.jump_cap} is negative")
        if not self.horizon > 0:
            problems.append(f"horizon {self.horizon} must be positive")
        if self.n_steps < 1:
            problems.append(f"time steps {self.n_steps} must be at least 1")
        if not self.grid.x_min < self.grid.x_max:
            problems.append(f"x_min {self.grid.x_min} must be below x_max {self.grid.x_max}")
        if self.grid.n_points < 3:
            problems.append(f"x_points {self.grid.n_points} must be at least 3")
        if not (np.isfinite(self.u_min) and np.isfinite(self.u_max) and self.u_min < self.u_max):
            problems.append(f"action set [{self.u_min}, {self.u_max}] must be a bounded non-empty interval")
        if problems:
            return problems

        for slot in SLOT_VARIABLES:
            expressions = (self.sigma,) if slot == "sigma" else getattr(self, slot, ())
            if slot == "psi":
                expressions = () if self.psi.is_lq else (self.psi.expression,)
            for expression in expressions:
                extra = sorted(expression.variables - SLOT_VARIABLES[slot])
                if extra:
                    problems.append(f"{slot}: variable {extra[0]!r} is not allowed in {expression.text!r}")
        if problems:
            return problems

        problems.extend(self._check_ellipticity())
        if self.psi.is_lq:
            problems.extend(self._check_lq())
        if self.mu0.kind == InitialKind.GAUSSIAN and not self.mu0.parameters[1] > 0:
            problems.append(f"initial Gaussian standard deviation {self.mu0.parameters[1]} must be positive")
        if self.mu0.kind == InitialKind.HISTOGRAM:
            masses = np.array(self.mu0.parameters)
            if len(masses) != self.grid.n_points or np.any(masses < 0) or masses.sum() <= 0:
                problems.append("initial histogram must have one non-negative mass per grid point")
        if self.discount.rate < 0:
            problems.append(f"discount rate {self.discount.rate} is negative")

        settings = self.solver
        if not settings.tol > 0:
            problems.append(f"tol {settings.tol} must be positive")
        if settings.max_iter < 1:
            problems.append(f"max_iter {settings.max_iter} must be at least 1")
        if settings.inner_iters < 0:
            problems.append(f"inner_iters {settings.inner_iters} must be non-negative")
        if not 0 <= settings.damping < 1:
            problems.append(f"damping {settings.damping} must be in [0, 1)")
        return problems

    def _check_ellipticity(self) -> List[str]:
        times = np.linspace(0.0, self.horizon, min(self.n_steps, 50) + 1)
        smallest, largest = np.inf, 0.0
        for t in times:
            try:
                values = np.abs(self.sigma_values(t))
            except ValueError as error:
                return [f"sigma: {error}"]
            if not np.all(np.isfinite(values)):
                return [f"sigma is not finite at t={t:g}"]
            smallest = min(smallest, float(np.min(values)))
            largest = max(largest, float(np.max(values)))
        if not smallest > 0:
            return [f"sigma must stay away from 0 (uniform ellipticity), smallest sampled value {smallest}"]
        if largest > SIGMA_BOUND:
            return [f"sigma must stay below {SIGMA_BOUND:g} (uniform ellipticity), largest sampled value {largest}"]
        return []

    def _check_lq(self) -> List[str]:
        cost = self.psi.control_cost
        if cost is None or not cost > 0:
            return [f"built-in lq psi needs a positive control_cost, got {cost}"]

        problems = []
        x = self.grid.x[:: max(1, self.grid.n_points // 7)]
        for i in range(1, self.m + 1):
            for t in (0.0, self.horizon):
                for v in LQ_CHECK_CONTROLS:
                    drift = self.b1_values(t, i, v, x)
                    running = self.g1_values(t, i, v, x) - self.g1_values(t, i, 0.0, x)
                    if np.max(np.abs(drift - v)) > LQ_CHECK_TOLERANCE * max(1.0, abs(v)):
                        problems.append(f"built-in lq psi needs b1 = v in regime {i}")
                        return problems
                    if np.max(np.abs(running - cost * v**2 / 2)) > LQ_CHECK_TOLERANCE * max(1.0, v**2):
                        problems.append(f"built-in lq psi needs g1 = {cost} v^2 / 2 + (terms without v) in regime {i}")
                        return problems
        return problems

    def ensure_valid(self) -> "Scenario":
        problems = self.validate()
        if problems:
            raise ScenarioError("; ".join(problems))
        return self


def psi_eval(scenario: Scenario, t: float, i: int, x: Number, p: Number) -> Number:
    """
    The minimizer of ``v -> p b1(t, i, x, v) + g1(t, i, x, v)`` over the action set.
    """
    if scenario.psi.is_lq:
        value = np.negative(p) / scenario.psi.control_cost
    else:
        value = scenario.psi.expression(t=t, i=i, x=x, p=p)
    result = np.clip(value, scenario.u_min, scenario.u_max)
    if np.ndim(result) == 0:
        return float(result)
    return result


@dataclass(frozen=True)
class PsiJump:
    t: float
    i: int
    x: float
    p: float
    jump: float


def lint_psi(scenario: Scenario, threshold: float = 0.5, n_samples: int = 201) -> List[PsiJump]:
    """
    Sample ``p -> psi(t, i, x, p)`` on a fine gradient grid and report consecutive differences larger than
    ``threshold``.  Only a hint: a steep continuous psi can be flagged and a discontinuity between samples missed.
    """
    jumps = []  # type: List[PsiJump]
    if scenario.psi.is_lq:
        return jumps

    gradients = np.linspace(-10.0, 10.0, n_samples)
    x_samples = scenario.grid.x[:: max(1, scenario.grid.n_points // 11)]
    for i in range(1, scenario.m + 1):
        for t in (0.0, scenario.horizon / 2, scenario.horizon):
            for x in x_samples:
                values = np.broadcast_to(psi_eval(scenario, t, i, x, gradients), gradients.shape)
                differences = np.abs(np.diff(values))
                worst = int(np.argmax(differences))
                if differences[worst] > threshold:
                    jumps.append(PsiJump(t, i, float(x), float(gradients[worst]), float(differences[worst])))

    if jumps:
        logger.warning(f"psi jumps by more than {threshold} at {len(jumps)} sampled points")
    return jumps


def canonical_text(text: str) -> str:
    lines = text.replace("\r\n", "\n").replace("\r", "\n").split("\n")
    return "\n".join(line.rstrip() for line in lines).strip("\n") + "\n"


def scenario_hash(text: str) -> str:
    return hashlib.sha256(canonical_text(text).encode("utf-8")).hexdigest()
