import numpy as np

from regimemfg.scenario.base import SpatialGrid
from regimemfg.scenario.expressions import Number


class UnsupportedCoefficientError(ValueError):
    pass


def gauss_kernel(t: float, x: Number, s: float, y: Number, a: float) -> Number:
    """
    The fundamental solution ``(4 pi (s - t) a)^(-1/2) exp(-(x - y)^2 / (4 (s - t) a))`` of ``d/ds = a d^2/dy^2``,
    a Gaussian in ``y`` with variance ``2 a (s - t)``.  The backward operator ``(sigma^2 / 2) d^2/dx^2`` therefore
    uses ``a = sigma^2 / 2``.
    """
    if not s > t:
        raise ValueError(f"Kernel needs s > t, got t={t}, s={s}")
    assert a > 0, f"Diffusion coefficient must be positive, got {a}"
    elapsed = s - t
    return np.exp(-((np.subtract(x, y)) ** 2) / (4 * elapsed * a)) / np.sqrt(4 * np.pi * elapsed * a)


def kernel_propagate(values: np.ndarray, dt: float, sigma: Number, grid: SpatialGrid) -> np.ndarray:
    """
    One backward step of ``d/dt + (sigma^2 / 2) d^2/dx^2`` by quadrature against the Gaussian kernel.  Kernel rows are
    normalized on the grid, so constants are preserved exactly; values near the ends feel the truncation.
    """
    sigma_values = np.atleast_1d(np.asarray(sigma, dtype=float))
    if not np.allclose(sigma_values, sigma_values.flat[0], rtol=0, atol=1e-14):
        raise UnsupportedCoefficientError("Kernel propagation needs a spatially constant sigma")

    x = grid.x
    weights = gauss_kernel(0.0, x[:, None], dt, x[None, :], float(sigma_values.flat[0]) ** 2 / 2)
    weights = weights / weights.sum(axis=1, keepdims=True)
    return np.asarray(values, dtype=float) @ weights.T
