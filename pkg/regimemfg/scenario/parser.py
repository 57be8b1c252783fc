import json
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

from loguru import logger

from regimemfg.chain.base import Generator, GeneratorError
from regimemfg.scenario.base import (
    SLOT_VARIABLES,
    Discount,
    DiscountKind,
    InitialDensity,
    PsiSpec,
    Scenario,
    ScenarioError,
    SolverSettings,
    SpatialGrid,
)
from regimemfg.scenario.expressions import Expression, ExpressionError, parse_expression

SECTION_PATTERN = re.compile(r"^\[(?P<name>[A-Za-z_]+)\]$")
ENTRY_PATTERN = re.compile(r"^(?P<key>[A-Za-z_][A-Za-z0-9_]*)(?:\[(?P<index>\d+)\])?\s*=\s*(?P<value>.*)$")
BARE_WORD_PATTERN = re.compile(r"^[A-Za-z_][A-Za-z0-9_]*$")
INITIAL_PATTERN = re.compile(r"^\s*(?P<kind>gaussian|point)\s*\((?P<arguments>[^)]*)\)\s*$")

# section -> key -> (type, required)
KEYS = {
    "chain": {"regimes": (int, False), "initial": (int, False), "generator": (list, True), "jump_cap": (int, False)},
    "grids": {
        "horizon": (float, True),
        "time_steps": (int, True),
        "x_min": (float, True),
        "x_max": (float, True),
        "x_points": (int, True),
    },
    "dynamics": {
        "sigma": (Expression, True),
        "b1": (Expression, True),
        "b2": (Expression, False),
        "mu0": (str, True),
        "u_min": (float, True),
        "u_max": (float, True),
    },
    "cost": {
        "g1": (Expression, True),
        "g2": (Expression, False),
        "h": (Expression, True),
        "psi": (str, True),
        "control_cost": (float, False),
    },
    "discount": {"kind": (str, False), "rate": (float, False)},
    "solver": {
        "tol": (float, False),
        "max_iter": (int, False),
        "inner_iters": (int, False),
        "damping": (float, False),
        "seed": (int, False),
        "gradient_bound": (float, False),
    },
}  # type: Dict[str, Dict[str, Tuple[type, bool]]]

REGIME_INDEXED = ("b1", "b2", "g1", "g2", "h")


@dataclass(frozen=True)
class Entry:
    section: str
    key: str
    index: Optional[int]
    raw: str
    line: int
    column: int

    @property
    def quoted(self) -> bool:
        return self.raw.startswith('"')


def _strip_comment(line: str) -> str:
    in_string = False
    for position, character in enumerate(line):
        if character == '"':
            in_string = not in_string
        elif character == "#" and not in_string:
            return line[:position]
    return line


def _read_entries(text: str) -> List[Entry]:
    entries = []  # type: List[Entry]
    seen = set()
    section = None  # type: Optional[str]
    for line_number, raw_line in enumerate(text.splitlines(), start=1):
        line = _strip_comment(raw_line).rstrip()
        stripped = line.strip()
        if not stripped:
            continue
        indent = len(line) - len(line.lstrip())

        section_match = SECTION_PATTERN.match(stripped)
        if section_match:
            section = section_match.group("name")
            if section not in KEYS:
                raise ScenarioError(f"Unknown section [{section}]", line_number, indent + 1)
            continue

        entry_match = ENTRY_PATTERN.match(stripped)
        if entry_match is None:
            raise ScenarioError("Expected 'key = value' or '[section]'", line_number, indent + 1)
        if section is None:
            raise ScenarioError("Entry before the first section", line_number, indent + 1)

        key = entry_match.group("key")
        if key not in KEYS[section]:
            raise ScenarioError(f"Unknown key {key!r} in section [{section}]", line_number, indent + 1)
        index = entry_match.group("index")
        if index is not None and key not in REGIME_INDEXED:
            raise ScenarioError(f"Key {key!r} cannot be regime-indexed", line_number, indent + 1)
        index = int(index) if index is not None else None
        if (section, key, index) in seen:
            raise ScenarioError(f"Duplicate key {key!r}", line_number, indent + 1)
        seen.add((section, key, index))

        column = indent + entry_match.start("value") + 1
        entries.append(Entry(section, key, index, entry_match.group("value").strip(), line_number, column))
    return entries


def _decode(entry: Entry) -> Any:
    try:
        return json.loads(entry.raw)
    except json.JSONDecodeError as error:
        if BARE_WORD_PATTERN.match(entry.raw):
            return entry.raw
        message = f"Cannot read value {entry.raw!r}: {error.msg}"
        raise ScenarioError(message, entry.line, entry.column + error.pos) from None


def _convert(entry: Entry, expected: type) -> Any:
    value = _decode(entry)
    if expected is Expression:
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            value = repr(value)
        if not isinstance(value, str):
            raise ScenarioError(f"{entry.key} must be an expression string", entry.line, entry.column)
        try:
            return parse_expression(value, SLOT_VARIABLES[entry.key])
        except ExpressionError as error:
            offset = (error.column or 0) + (1 if entry.quoted else 0)
            raise ScenarioError(f"{entry.key}: {error}", entry.line, entry.column + offset) from None
    if expected is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ScenarioError(f"{entry.key} must be a number", entry.line, entry.column)
        return float(value)
    if expected is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ScenarioError(f"{entry.key} must be an integer", entry.line, entry.column)
        return value
    if expected is list:
        if not isinstance(value, list):
            raise ScenarioError(f"{entry.key} must be a list", entry.line, entry.column)
        return value
    if expected is str and isinstance(value, list):
        return value
    if not isinstance(value, str):
        raise ScenarioError(f"{entry.key} must be a string", entry.line, entry.column)
    return value


def _parse_initial(entry: Entry, value: Union[str, list]) -> InitialDensity:
    if isinstance(value, list):
        if not all(isinstance(mass, (int, float)) and not isinstance(mass, bool) for mass in value):
            raise ScenarioError("mu0 histogram must be a list of numbers", entry.line, entry.column)
        return InitialDensity.histogram(value)
    match = INITIAL_PATTERN.match(value)
    if match is None:
        raise ScenarioError(
            "mu0 must be 'gaussian(mean, std)', 'point(x0)' or a list of masses", entry.line, entry.column
        )
    try:
        arguments = [float(argument) for argument in match.group("arguments").split(",")]
    except ValueError:
        raise ScenarioError(f"mu0 arguments must be numbers: {value!r}", entry.line, entry.column) from None
    if match.group("kind") == "gaussian":
        if len(arguments) != 2:
            raise ScenarioError("gaussian(mean, std) takes two arguments", entry.line, entry.column)
        return InitialDensity.gaussian(*arguments)
    if len(arguments) != 1:
        raise ScenarioError("point(x0) takes one argument", entry.line, entry.column)
    return InitialDensity.point(arguments[0])


def parse_scenario(text: str, validate: bool = True) -> Scenario:
    """
    Parse a scenario file.  With ``validate`` (the default) every scenario invariant is checked and violations are
    raised as one ``ScenarioError``.
    """
    entries = _read_entries(text)
    values = {}  # type: Dict[Tuple[str, str, Optional[int]], Any]
    lines = {}  # type: Dict[Tuple[str, str, Optional[int]], Entry]
    for entry in entries:
        expected, _ = KEYS[entry.section][entry.key]
        values[(entry.section, entry.key, entry.index)] = _convert(entry, expected)
        lines[(entry.section, entry.key, entry.index)] = entry

    present = {(section, key) for section, key, _ in values}
    for section, keys in KEYS.items():
        for key, (_, required) in keys.items():
            if required and (section, key) not in present:
                raise ScenarioError(f"Missing required key {key!r} in section [{section}]")

    def get(section, key, default=None):
        return values.get((section, key, None), default)

    generator_entry = lines[("chain", "generator", None)]
    try:
        generator = Generator(get("chain", "generator"))
    except (GeneratorError, ValueError, TypeError) as error:
        raise ScenarioError(f"generator: {error}", generator_entry.line, generator_entry.column) from None
    m = generator.m
    regimes = get("chain", "regimes", m)
    if regimes != m:
        entry = lines[("chain", "regimes", None)]
        raise ScenarioError(f"regimes = {regimes} but the generator is {m}x{m}", entry.line, entry.column)

    indexed = {}
    for slot in REGIME_INDEXED:
        section = "dynamics" if slot in ("b1", "b2") else "cost"
        shared = get(section, slot)
        per_regime = []
        for i in range(1, m + 1):
            expression = values.get((section, slot, i), shared)
            if expression is None and slot in ("b1", "g1", "h"):
                raise ScenarioError(f"No {slot} given for regime {i}")
            per_regime.append(expression if expression is not None else parse_expression("0"))
        for (entry_section, key, index), entry in lines.items():
            if key == slot and index is not None and not 1 <= index <= m:
                raise ScenarioError(f"{slot}[{index}]: regimes are numbered 1..{m}", entry.line, entry.column)
        indexed[slot] = tuple(per_regime)

    psi_text = get("cost", "psi")
    if psi_text == "lq":
        psi = PsiSpec(control_cost=get("cost", "control_cost", 1.0))
    else:
        entry = lines[("cost", "psi", None)]
        try:
            psi = PsiSpec(expression=parse_expression(psi_text, SLOT_VARIABLES["psi"]))
        except ExpressionError as error:
            offset = (error.column or 0) + (1 if entry.quoted else 0)
            raise ScenarioError(f"psi: {error}", entry.line, entry.column + offset) from None

    kind_text = get("discount", "kind", "none")
    try:
        kind = DiscountKind(kind_text)
    except ValueError:
        entry = lines[("discount", "kind", None)]
        raise ScenarioError(
            f"discount kind must be one of none, exponential, hyperbolic, got {kind_text!r}", entry.line, entry.column
        ) from None

    defaults = SolverSettings()
    solver = SolverSettings(
        tol=get("solver", "tol", defaults.tol),
        max_iter=get("solver", "max_iter", defaults.max_iter),
        inner_iters=get("solver", "inner_iters", defaults.inner_iters),
        damping=get("solver", "damping", defaults.damping),
        seed=get("solver", "seed", defaults.seed),
        gradient_bound=get("solver", "gradient_bound", defaults.gradient_bound),
    )

    scenario = Scenario(
        horizon=get("grids", "horizon"),
        n_steps=get("grids", "time_steps"),
        generator=generator,
        grid=SpatialGrid(get("grids", "x_min"), get("grids", "x_max"), get("grids", "x_points")),
        mu0=_parse_initial(lines[("dynamics", "mu0", None)], get("dynamics", "mu0")),
        sigma=get("dynamics", "sigma"),
        b1=indexed["b1"],
        g1=indexed["g1"],
        h=indexed["h"],
        psi=psi,
        u_min=get("dynamics", "u_min"),
        u_max=get("dynamics", "u_max"),
        b2=indexed["b2"],
        g2=indexed["g2"],
        initial_regime=get("chain", "initial", 1),
        jump_cap=get("chain", "jump_cap", 2),
        discount=Discount(kind, get("discount", "rate", 0.0)),
        solver=solver,
        source_text=text,
    )

    if validate:
        problems = scenario.validate()
        if problems:
            raise ScenarioError("Invalid scenario: " + "; ".join(problems))
    logger.debug(f"Parsed scenario with {m} regimes, {scenario.n_steps} steps and {scenario.grid.n_points} points")
    return scenario


def load_scenario(path: Union[str, Path], validate: bool = True) -> Scenario:
    path = Path(path)
    logger.info(f"Loading scenario {path}")
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as error:
        raise ScenarioError(f"Cannot read scenario {path}: {error}") from None
    return parse_scenario(text, validate=validate)
