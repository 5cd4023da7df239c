"""Dense complex kernels used by the rate formula.

Everything here accepts stacks of matrices (leading batch axes) so the rate
evaluation can run over samples, subcarriers and users in one call.
"""
from __future__ import annotations

import numpy as np


class ShapeError(ValueError):
    pass


class DefinitenessError(ValueError):
    pass


def hermitian(a: np.ndarray) -> np.ndarray:
    """Conjugate transpose over the last two axes."""
    return np.conj(np.swapaxes(a, -1, -2))


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def hpd_factor(a: np.ndarray) -> np.ndarray:
    """Lower Cholesky factor of a (stack of) Hermitian positive definite matrices."""
    a = np.asarray(a)
    if a.shape[-1] != a.shape[-2]:
        raise ShapeError(f"expected square matrices, got {a.shape}")
    try:
        return np.linalg.cholesky(a)
    except np.linalg.LinAlgError as exc:
        raise DefinitenessError("matrix is not Hermitian positive definite") from exc


def inverse_and_logdet_hpd(a: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Inverse and natural log-determinant from one Cholesky pass."""
    chol = hpd_factor(a)
    k = a.shape[-1]
    eye = np.broadcast_to(np.eye(k, dtype=chol.dtype), chol.shape)
    linv = np.linalg.solve(chol, eye)
    inv = hermitian(linv) @ linv
    logdet = 2.0 * np.sum(np.log(np.real(np.diagonal(chol, axis1=-2, axis2=-1))), axis=-1)
    return inv, logdet


def inverse_hpd(a: np.ndarray) -> np.ndarray:
    return inverse_and_logdet_hpd(a)[0]


def logdet_hpd(a: np.ndarray) -> np.ndarray | float:
    """ln det(A) for HPD A. Divide by ln 2 for bits."""
    chol = hpd_factor(a)
    out = 2.0 * np.sum(np.log(np.real(np.diagonal(chol, axis1=-2, axis2=-1))), axis=-1)
    return float(out) if np.ndim(out) == 0 else out


def block_diag_expand(v_col, mt: int) -> np.ndarray:
    """diag(v_1, ..., v_B) kron I_mt.

    Relaxed gates in [0, 1] are accepted as well as binary ones.
    """
    v_col = np.asarray(v_col, dtype=float).reshape(-1)
    return np.diag(np.repeat(v_col, mt)).astype(complex)
