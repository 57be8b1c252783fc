from typing import Callable, Optional

from regimemfg.chain.base import Generator
from regimemfg.paths.base import PathError, RegimePath, concat, extend, restrict
from regimemfg.paths.tree import PathNode

# F(t, w) where w is a regime history on [0, t)
PathFunctional = Callable[[float, RegimePath], float]


class TerminalNodeError(PathError):
    pass


def cylinder(f: Callable[[float, int], float]) -> PathFunctional:
    """
    The functional ``F(t, w) = f(t, w(t-))`` that reads only the current regime.
    """

    def functional(time: float, path: RegimePath) -> float:
        return f(time, path.terminal_state)

    return functional


def _default_step(node: PathNode) -> float:
    grid = node.tree.time_grid
    return float(grid[node.time_index + 1] - grid[node.time_index])


def _check_not_terminal(node: PathNode) -> None:
    if node.time_index >= node.tree.n_steps:
        raise TerminalNodeError(f"Node {node.node_id} sits at the terminal time; it has no forward extension")


def horizontal_derivative(functional: PathFunctional, node: PathNode, h_step: Optional[float] = None) -> float:
    """
    Forward difference of ``F`` along the continuous extension of the node's history.
    """
    _check_not_terminal(node)
    h_step = h_step or _default_step(node)
    time = node.time
    return (functional(time + h_step, extend(node.path, h_step)) - functional(time, node.path)) / h_step


def vertical_value(functional: PathFunctional, node: PathNode, regime: int, h_step: float) -> float:
    """
    ``F`` on the history bumped into ``regime`` just before the current time.

    When there is room the last ``h_step`` of the history is replaced by ``regime``; at the start of the horizon the
    bump is appended on ``[t, t + h_step)`` and ``F`` is read there.
    """
    time = node.time
    path = node.path
    if path.span >= h_step:
        bumped = concat(restrict(path, h_step), RegimePath.constant(regime, time - h_step, time))
        return functional(time, bumped)
    bumped = concat(path, RegimePath.constant(regime, time, time + h_step))
    return functional(time + h_step, bumped)


def alpha_derivative(
    functional: PathFunctional, node: PathNode, generator: Generator, h_step: Optional[float] = None
) -> float:
    """
    The discrete alpha-derivative ``dH F + sum_j q_ij F(w bumped to j)`` at the node, with ``i`` the regime the
    history ends in.  ``h_step`` defaults to the node's grid step.
    """
    _check_not_terminal(node)
    h_step = h_step or _default_step(node)

    current = node.path.terminal_state
    total = horizontal_derivative(functional, node, h_step)
    for regime in range(1, generator.m + 1):
        rate = generator.rate(current, regime)
        if rate != 0.0:
            total += rate * vertical_value(functional, node, regime, h_step)
    return total
