"""Conversions of the temporal-influence matrix between discretization steps.

A system discretized at a fine step delta = delta_star / rho induces, after
composing rho steps, an exact coarse-step system. These helpers map the
influence matrix and the trend coefficients between the two scales and to
the continuous-time limit. The forward and inverse maps are exact algebraic
inverses of each other; round-trip identity is the contract the tests pin.
"""

from __future__ import annotations

import numpy as np
from scipy.linalg import expm, fractional_matrix_power


class ConversionError(ValueError):
    """Requested conversion has no real principal solution."""


def _as_matrix(A):
    A = np.asarray(A, dtype=float)
    if A.ndim == 0:
        A = A.reshape(1, 1)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ConversionError(f"expected a square matrix, got shape {A.shape}")
    return A


def fine_to_coarse(A, delta_star: float, rho: int) -> np.ndarray:
    """Constant fine-step influence matrix composed into the coarse step.

    Returns ((I + (delta_star/rho) A)^rho - I) / delta_star.
    """
    A = _as_matrix(A)
    rho = int(rho)
    if rho < 1:
        raise ConversionError("rho must be a positive integer")
    if rho == 1:  # exact identity, no add-subtract roundoff
        return A.copy()
    T = np.eye(A.shape[0]) + (delta_star / rho) * A
    return (np.linalg.matrix_power(T, rho) - np.eye(A.shape[0])) / delta_star


def fine_to_coarse_path(A_path, delta_star: float) -> np.ndarray:
    """Time-varying fine-step matrices composed into one coarse step.

    `A_path` holds the rho fine-step matrices on the interval in time order;
    the product applies the latest step leftmost.
    """
    A_path = np.asarray(A_path, dtype=float)
    rho = A_path.shape[0]
    D = A_path.shape[1]
    prod = np.eye(D)
    for l in range(rho):
        prod = (np.eye(D) + (delta_star / rho) * A_path[l]) @ prod
    return (prod - np.eye(D)) / delta_star


def coarse_to_fine(A_star, delta_star: float, rho: int) -> np.ndarray:
    """Fine-step influence matrix whose rho-fold composition gives A_star.

    Uses the real principal rho-th root of I + delta_star*A_star; eigenvalues
    on the closed negative real axis make that root non-real and raise.
    """
    A_star = _as_matrix(A_star)
    rho = int(rho)
    if rho < 1:
        raise ConversionError("rho must be a positive integer")
    if rho == 1:
        return A_star.copy()
    M = np.eye(A_star.shape[0]) + delta_star * A_star
    eig = np.linalg.eigvals(M)
    on_cut = (eig.real <= 0) & (np.abs(eig.imag) < 1e-12 * max(1.0, np.abs(eig).max()))
    if on_cut.any():
        raise ConversionError(
            "I + delta_star*A_star has eigenvalues on the closed negative real "
            f"axis ({eig[on_cut]}); no real principal {rho}-th root exists")
    root = fractional_matrix_power(M, 1.0 / rho)
    if np.abs(root.imag).max() > 1e-10 * max(1.0, np.abs(root.real).max()):
        raise ConversionError("principal matrix root is not real")
    return (rho / delta_star) * (root.real - np.eye(A_star.shape[0]))


def influence_from_continuous(A_cont, delta_star: float) -> np.ndarray:
    """Coarse-step influence matrix induced by a continuous-time system.

    The rho -> infinity limit of fine_to_coarse: (expm(delta_star*A) - I)/delta_star.
    """
    A_cont = _as_matrix(A_cont)
    return (expm(delta_star * A_cont) - np.eye(A_cont.shape[0])) / delta_star


def psi_sum(A, delta_star: float, rho: int) -> np.ndarray:
    """Sum over s of the transition products from fine step s to step rho.

    For constant A this is sum_{l=0}^{rho-1} (I + (delta_star/rho) A)^l; it
    weights how fine-step drift increments accumulate over one coarse step.
    """
    A = _as_matrix(A)
    T = np.eye(A.shape[0]) + (delta_star / rho) * A
    out = np.zeros_like(A)
    P = np.eye(A.shape[0])
    for _ in range(int(rho)):
        out += P
        P = P @ T
    return out


def trend_fine_to_coarse(gamma, A, delta_star: float, rho: int) -> np.ndarray:
    """Coarse-step trend coefficients matching the fine-step drift."""
    gamma = np.atleast_1d(np.asarray(gamma, dtype=float))
    return psi_sum(A, delta_star, rho) @ gamma / rho


def trend_coarse_to_fine(gamma_star, A, delta_star: float, rho: int) -> np.ndarray:
    """Inverse of trend_fine_to_coarse; `A` is the fine-step influence matrix."""
    gamma_star = np.atleast_1d(np.asarray(gamma_star, dtype=float))
    S = psi_sum(A, delta_star, rho)
    try:
        return np.linalg.solve(S, rho * gamma_star)
    except np.linalg.LinAlgError:
        raise ConversionError("transition-product sum is singular") from None


def trend_from_continuous(gamma, A_cont, delta_star: float) -> np.ndarray:
    """Coarse-step trend induced by continuous dynamics dL = (gamma + A L) dt.

    Computes phi1(delta_star*A) gamma with phi1(M) = (expm(M) - I) M^{-1},
    evaluated through an augmented exponential so singular A needs no special
    case.
    """
    A_cont = _as_matrix(A_cont)
    gamma = np.atleast_1d(np.asarray(gamma, dtype=float))
    D = A_cont.shape[0]
    aug = np.zeros((D + 1, D + 1))
    aug[:D, :D] = delta_star * A_cont
    aug[:D, D] = gamma
    # top-right block of expm is phi1(delta_star*A) gamma, already the
    # average of e^{sA} gamma over the coarse interval
    return expm(aug)[:D, D]
