import numpy as np

from regimemfg.scenario.base import SpatialGrid


class GridMismatchError(ValueError):
    pass


def _quantile_distance(x1: np.ndarray, p1: np.ndarray, x2: np.ndarray, p2: np.ndarray) -> float:
    """
    ``W2`` between two atomic laws on the real line by the monotone (quantile) coupling of their step quantile
    functions.  Atoms must be sorted.
    """
    c1 = np.cumsum(p1) / np.sum(p1)
    c2 = np.cumsum(p2) / np.sum(p2)
    levels = np.unique(np.clip(np.concatenate((c1, c2)), 0.0, 1.0))
    widths = np.diff(levels, prepend=0.0)
    keep = widths > 0
    levels, widths = levels[keep], widths[keep]
    middle = levels - widths / 2
    q1 = x1[np.minimum(np.searchsorted(c1, middle, side="left"), len(x1) - 1)]
    q2 = x2[np.minimum(np.searchsorted(c2, middle, side="left"), len(x2) - 1)]
    return float(np.sqrt(np.sum(widths * (q1 - q2) ** 2)))


def _check_density(density: np.ndarray, grid: SpatialGrid, name: str) -> np.ndarray:
    density = np.asarray(density, dtype=float)
    if density.shape != (grid.n_points,):
        raise GridMismatchError(f"{name} has shape {density.shape}, grid has {grid.n_points} points")
    return density


def wasserstein2(density1: np.ndarray, density2: np.ndarray, grid: SpatialGrid) -> float:
    """
    The 2-Wasserstein distance between two grid densities (masses at the grid points).
    """
    density1 = _check_density(density1, grid, "first density")
    density2 = _check_density(density2, grid, "second density")
    return _quantile_distance(grid.x, density1, grid.x, density2)


def wasserstein2_samples(samples: np.ndarray, density: np.ndarray, grid: SpatialGrid) -> float:
    """
    The 2-Wasserstein distance between the empirical law of ``samples`` and a grid density.
    """
    density = _check_density(density, grid, "density")
    ordered = np.sort(np.asarray(samples, dtype=float).ravel())
    if len(ordered) == 0:
        raise ValueError("No samples given")
    return _quantile_distance(ordered, np.full(len(ordered), 1.0 / len(ordered)), grid.x, density)
