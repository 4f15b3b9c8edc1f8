"""Central finite differences, used as an independent gradient oracle in tests."""

import numpy as np


def finite_difference_grad(f, x: np.ndarray, h: float = 1e-5, indices=None) -> np.ndarray:
    """(f(x + h e) - f(x - h e)) / 2h for each coordinate of ``x``.

    ``x`` is perturbed in place and restored, so ``f`` may close over it.
    With ``indices`` (flat positions), only those coordinates are computed and
    the rest of the returned array stays zero.
    """
    grad = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for k in range(flat.size) if indices is None else indices:
        orig = flat[k]
        flat[k] = orig + h
        fp = f(x)
        flat[k] = orig - h
        fm = f(x)
        flat[k] = orig
        gflat[k] = (fp - fm) / (2.0 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-12) -> float:
    """||a - n|| / max(||a||, ||n||, floor)."""
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    scale = max(np.linalg.norm(a), np.linalg.norm(n), floor)
    return float(np.linalg.norm(a - n) / scale)
