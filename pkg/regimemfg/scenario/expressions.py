"""
A small arithmetic language for scenario coefficients.

Grammar (``^`` binds tighter than unary minus and associates to the right)::

    expression := term (("+" | "-") term)*
    term       := unary (("*" | "/") unary)*
    unary      := "-" unary | power
    power      := atom ("^" unary)?
    atom       := number | name | name "(" expression ("," expression)* ")" | "(" expression ")"

Evaluation is vectorized: bindings may be numpy arrays and broadcast against each other.
"""
import math
import re
from dataclasses import dataclass
from typing import Callable, Dict, FrozenSet, Iterable, List, Optional, Tuple, Union

import numpy as np

Number = Union[float, np.ndarray]

CONSTANTS = {"pi": math.pi, "e": math.e}


class ExpressionError(ValueError):
    def __init__(self, msg=None, column=None):
        super().__init__(msg)
        self.column = column


class ExpressionEvaluationError(ExpressionError):
    pass


def _guarded_log(value):
    if np.any(value <= 0):
        raise ExpressionEvaluationError("log of a non-positive value")
    return np.log(value)


def _guarded_sqrt(value):
    if np.any(value < 0):
        raise ExpressionEvaluationError("sqrt of a negative value")
    return np.sqrt(value)


def _clamp(value, low, high):
    return np.minimum(np.maximum(value, low), high)


# name -> (implementation, allowed argument counts)
FUNCTIONS = {
    "exp": (np.exp, (1,)),
    "log": (_guarded_log, (1,)),
    "sin": (np.sin, (1,)),
    "cos": (np.cos, (1,)),
    "tanh": (np.tanh, (1,)),
    "sqrt": (_guarded_sqrt, (1,)),
    "abs": (np.abs, (1,)),
    "min": (np.minimum, (2,)),
    "max": (np.maximum, (2,)),
    "clamp": (_clamp, (3,)),
}  # type: Dict[str, Tuple[Callable, Tuple[int, ...]]]


@dataclass(frozen=True)
class Token:
    kind: str
    text: str
    column: int


TOKEN_PATTERN = re.compile(
    r"\s*(?:(?P<number>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)|(?P<name>[A-Za-z_][A-Za-z_0-9]*)|(?P<op>[-+*/^(),]))"
)


def tokenize(text: str) -> List[Token]:
    tokens = []
    position = 0
    while position < len(text):
        if text[position:].strip() == "":
            break
        match = TOKEN_PATTERN.match(text, position)
        if match is None:
            column = position + len(text[position:]) - len(text[position:].lstrip())
            raise ExpressionError(f"Unexpected character {text[column]!r}", column)
        kind = match.lastgroup
        tokens.append(Token(kind, match.group(kind), match.start(kind)))
        position = match.end()
    tokens.append(Token("end", "", len(text)))
    return tokens


class Node:
    def evaluate(self, bindings: Dict[str, Number]) -> Number:
        raise NotImplementedError  # pragma: no cover

    def variables(self) -> FrozenSet[str]:
        raise NotImplementedError  # pragma: no cover

    def to_string(self) -> str:
        raise NotImplementedError  # pragma: no cover


@dataclass(frozen=True)
class Constant(Node):
    value: float
    name: Optional[str] = None

    def evaluate(self, bindings):
        return self.value

    def variables(self):
        return frozenset()

    def to_string(self):
        return self.name if self.name is not None else repr(float(self.value))


@dataclass(frozen=True)
class Variable(Node):
    name: str

    def evaluate(self, bindings):
        try:
            return bindings[self.name]
        except KeyError:
            raise ExpressionError(f"Unbound variable {self.name!r}") from None

    def variables(self):
        return frozenset((self.name,))

    def to_string(self):
        return self.name


@dataclass(frozen=True)
class Negate(Node):
    operand: Node

    def evaluate(self, bindings):
        return -self.operand.evaluate(bindings)

    def variables(self):
        return self.operand.variables()

    def to_string(self):
        return f"(-{self.operand.to_string()})"


@dataclass(frozen=True)
class BinaryOp(Node):
    op: str
    left: Node
    right: Node

    def evaluate(self, bindings):
        left = self.left.evaluate(bindings)
        right = self.right.evaluate(bindings)
        if self.op == "+":
            return left + right
        if self.op == "-":
            return left - right
        if self.op == "*":
            return left * right
        if self.op == "/":
            if np.any(np.asarray(right) == 0):
                raise ExpressionEvaluationError("division by zero")
            return np.true_divide(left, right)
        with np.errstate(all="ignore"):
            result = np.power(np.asarray(left, dtype=float), right)
        if not np.all(np.isfinite(result)):
            raise ExpressionEvaluationError(f"{self.to_string()} is not finite")
        return result

    def variables(self):
        return self.left.variables() | self.right.variables()

    def to_string(self):
        return f"({self.left.to_string()} {self.op} {self.right.to_string()})"


@dataclass(frozen=True)
class Call(Node):
    name: str
    arguments: Tuple[Node, ...]

    def evaluate(self, bindings):
        function, _ = FUNCTIONS[self.name]
        values = [argument.evaluate(bindings) for argument in self.arguments]
        with np.errstate(over="ignore"):
            result = function(*values)
        if not np.all(np.isfinite(result)):
            raise ExpressionEvaluationError(f"{self.to_string()} is not finite")
        return result

    def variables(self):
        names = frozenset()  # type: FrozenSet[str]
        for argument in self.arguments:
            names = names | argument.variables()
        return names

    def to_string(self):
        return f"{self.name}({', '.join(argument.to_string() for argument in self.arguments)})"


class _Parser:
    def __init__(self, text: str):
        self.text = text
        self.tokens = tokenize(text)
        self.index = 0

    @property
    def current(self) -> Token:
        return self.tokens[self.index]

    def _advance(self) -> Token:
        token = self.current
        self.index += 1
        return token

    def _expect(self, text: str) -> Token:
        if self.current.text != text:
            found = self.current.text or "end of expression"
            raise ExpressionError(f"Expected {text!r}, found {found!r}", self.current.column)
        return self._advance()

    def parse(self) -> Node:
        node = self._expression()
        if self.current.kind != "end":
            raise ExpressionError(f"Unexpected {self.current.text!r}", self.current.column)
        return node

    def _expression(self) -> Node:
        node = self._term()
        while self.current.text in ("+", "-"):
            op = self._advance().text
            node = BinaryOp(op, node, self._term())
        return node

    def _term(self) -> Node:
        node = self._unary()
        while self.current.text in ("*", "/"):
            op = self._advance().text
            node = BinaryOp(op, node, self._unary())
        return node

    def _unary(self) -> Node:
        if self.current.text == "-":
            self._advance()
            return Negate(self._unary())
        if self.current.text == "+":
            self._advance()
            return self._unary()
        return self._power()

    def _power(self) -> Node:
        node = self._atom()
        if self.current.text == "^":
            self._advance()
            node = BinaryOp("^", node, self._unary())
        return node

    def _atom(self) -> Node:
        token = self.current
        if token.kind == "number":
            self._advance()
            return Constant(float(token.text))
        if token.kind == "name":
            self._advance()
            if self.current.text == "(":
                return self._call(token)
            if token.text in CONSTANTS:
                return Constant(CONSTANTS[token.text], token.text)
            if token.text in FUNCTIONS:
                raise ExpressionError(f"Function {token.text!r} needs arguments", token.column)
            return Variable(token.text)
        if token.text == "(":
            self._advance()
            node = self._expression()
            self._expect(")")
            return node
        found = token.text or "end of expression"
        raise ExpressionError(f"Unexpected {found!r}", token.column)

    def _call(self, name: Token) -> Node:
        if name.text not in FUNCTIONS:
            raise ExpressionError(f"Unknown function {name.text!r}", name.column)
        self._expect("(")
        arguments = [self._expression()]
        while self.current.text == ",":
            self._advance()
            arguments.append(self._expression())
        self._expect(")")

        _, counts = FUNCTIONS[name.text]
        if len(arguments) not in counts:
            raise ExpressionError(
                f"{name.text} takes {' or '.join(str(count) for count in counts)} arguments, got {len(arguments)}",
                name.column,
            )
        return Call(name.text, tuple(arguments))


class Expression:
    """
    A parsed coefficient expression.  Calling it evaluates with keyword bindings.
    """

    def __init__(self, text: str, root: Node):
        self.text = text
        self.root = root

    def __repr__(self) -> str:
        return f"Expression({self.text!r})"

    def __eq__(self, other) -> bool:
        return isinstance(other, Expression) and self.root == other.root

    def __hash__(self):
        return hash(self.root)

    @property
    def variables(self) -> FrozenSet[str]:
        return self.root.variables()

    @property
    def is_constant(self) -> bool:
        return len(self.variables) == 0

    def uses(self, name: str) -> bool:
        return name in self.variables

    def __call__(self, **bindings: Number) -> Number:
        return eval_coefficient(self, bindings)

    def to_string(self) -> str:
        return expression_to_string(self)


def parse_expression(text: str, allowed_variables: Optional[Iterable[str]] = None) -> Expression:
    """
    Parse ``text``.  With ``allowed_variables`` any other free variable is an error.
    """
    expression = Expression(text, _Parser(text).parse())
    if allowed_variables is not None:
        allowed = set(allowed_variables)
        unknown = sorted(expression.variables - allowed)
        if unknown:
            column = _first_column(text, unknown[0])
            raise ExpressionError(
                f"Variable {unknown[0]!r} is not allowed here (allowed: {', '.join(sorted(allowed))})", column
            )
    return expression


def _first_column(text: str, name: str) -> Optional[int]:
    for token in tokenize(text):
        if token.kind == "name" and token.text == name:
            return token.column
    return None  # pragma: no cover


def eval_coefficient(expression: Expression, bindings: Dict[str, Number]) -> Number:
    """
    Evaluate with the given bindings.  Array bindings broadcast; a purely scalar evaluation returns a float.
    """
    missing = sorted(expression.variables - set(bindings))
    if missing:
        raise ExpressionError(f"Unbound variable {missing[0]!r} in {expression.text!r}")
    result = expression.root.evaluate(bindings)
    if np.ndim(result) == 0:
        return float(result)
    return np.asarray(result, dtype=float)


def expression_to_string(expression: Union[Expression, Node]) -> str:
    """
    A fully parenthesized rendering that parses back to the same tree.
    """
    root = expression.root if isinstance(expression, Expression) else expression
    return root.to_string()
