"""Small numerical helpers: angle wrapping, covariance hygiene, gates."""

from functools import lru_cache

import numpy as np
from scipy.stats import chi2

SYMMETRY_RTOL = 1e-9
PSD_RTOL = 1e-9


def wrap_angle(angle):
    """Wrap scalar or array angles into (-pi, pi]."""
    wrapped = np.mod(np.asarray(angle, dtype=float) + np.pi, 2.0 * np.pi) - np.pi
    # mod maps +pi to -pi; the interval is closed on the right
    wrapped = np.where(wrapped <= -np.pi, wrapped + 2.0 * np.pi, wrapped)
    if np.ndim(wrapped) == 0:
        return float(wrapped)
    return wrapped


def symmetrize(matrix: np.ndarray) -> np.ndarray:
    """Return (M + M^T) / 2."""
    return 0.5 * (matrix + matrix.T)


def is_symmetric(matrix: np.ndarray, rtol: float = SYMMETRY_RTOL) -> bool:
    """Symmetric within a tolerance relative to the largest entry."""
    scale = max(float(np.max(np.abs(matrix))), 1e-300)
    return float(np.max(np.abs(matrix - matrix.T))) <= rtol * scale


def is_psd(matrix: np.ndarray, rtol: float = PSD_RTOL) -> bool:
    """Numerically PSD: min eigenvalue >= -rtol * max eigenvalue."""
    eig = np.linalg.eigvalsh(symmetrize(matrix))
    top = max(float(eig[-1]), 0.0)
    return float(eig[0]) >= -rtol * top


def is_covariance(matrix: np.ndarray) -> bool:
    """Finite, symmetric and numerically PSD."""
    return bool(np.all(np.isfinite(matrix))) and is_symmetric(matrix) and is_psd(matrix)


@lru_cache(maxsize=64)
def chi2_gate(dof: int, probability: float) -> float:
    """Chi-square quantile used to gate normalized innovation squared."""
    return float(chi2.ppf(probability, dof))
