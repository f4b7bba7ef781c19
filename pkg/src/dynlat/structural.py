"""Latent-system dynamics: influence matrices, transition products and moments.

The latent D-vector evolves on the grid t_j = j * delta through
Lambda(t_{j+1}) = (I + delta*A(t_j)) Lambda(t_j) + delta*(X(t_{j+1}) gamma
+ Z(t_{j+1}) v). `latent_mean` and `latent_covariance` give the closed-form
Gaussian moments of the stacked trajectory; `forward_recursion` runs the
defining recursion for given random effects and serves both as simulation
engine and as an independent oracle for the closed forms.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .modelspec import DesignSet, ModelSpec, SpecError, Theta, assemble_B


@dataclass
class LatentMoments:
    """Stacked mean (D*(J+1),) and covariance of the latent trajectory."""

    mu: np.ndarray
    V: np.ndarray


def influence_at(alpha: np.ndarray, regressors: np.ndarray) -> np.ndarray:
    """Temporal-influence matrix at one occasion: entry (d,d') = R . alpha_dd'."""
    alpha = np.asarray(alpha, dtype=float)
    regressors = np.asarray(regressors, dtype=float)
    if alpha.ndim != 3 or alpha.shape[2] != regressors.shape[-1]:
        raise SpecError(
            f"alpha shape {alpha.shape} does not match {regressors.shape[-1]} regressors")
    return alpha @ regressors


def transition_matrices(design: DesignSet, theta: Theta, spec: ModelSpec) -> np.ndarray:
    """One-step transition matrices I + delta*A(t_j) for j = 0..J-1."""
    D = spec.dimensions
    A = np.einsum("de r, j r -> j de".replace(" ", ""), theta.alpha, design.R[:-1])
    return np.eye(D) + spec.delta * A


def psi(transitions: np.ndarray, t0_index: int, j: int, s: int) -> np.ndarray:
    """Ordered transition product from occasion s to j (latest factor leftmost)."""
    if s > j:
        raise SpecError(f"psi requires s <= j, got s={s}, j={j}")
    D = transitions.shape[1]
    out = np.eye(D)
    for l in range(s, j):
        out = transitions[t0_index + l] @ out
    return out


def forward_recursion(design: DesignSet, theta: Theta, spec: ModelSpec,
                      u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Latent trajectory (J+1, D) for given random effects."""
    J = spec.grid_len
    trans = transition_matrices(design, theta, spec)
    out = np.empty((J + 1, spec.dimensions))
    out[0] = design.X0 @ theta.beta + u
    for j in range(J):
        drift = design.X[j + 1] @ theta.gamma + design.Z[j + 1] @ v
        out[j + 1] = trans[j] @ out[j] + spec.delta * drift
    return out


def latent_mean(design: DesignSet, theta: Theta, spec: ModelSpec) -> np.ndarray:
    """Expected latent trajectory (J+1, D), by direct transition-product sums."""
    J, d = spec.grid_len, spec.delta
    trans = transition_matrices(design, theta, spec)
    base = design.X0 @ theta.beta
    out = np.empty((J + 1, spec.dimensions))
    out[0] = base
    for j in range(1, J + 1):
        mu = psi(trans, 0, j, 0) @ base
        for s in range(1, j + 1):
            mu = mu + d * psi(trans, 0, j, s) @ (design.X[s] @ theta.gamma)
        out[j] = mu
    return out


def latent_covariance(design: DesignSet, theta: Theta, spec: ModelSpec) -> np.ndarray:
    """Covariance of the stacked latent trajectory, shape (D*(J+1), D*(J+1)).

    Block (j, j') is Psi_j0 B_u Psi_j'0^T plus the cross and rate terms built
    from the cumulative transition-weighted random-effect designs. The result
    is symmetrized before return.
    """
    D, q, J, d = spec.dimensions, spec.n_random, spec.grid_len, spec.delta
    trans = transition_matrices(design, theta, spec)
    B = assemble_B(theta.l_params, spec)
    Bu, Buv, Bv = B[:D, :D], B[:D, D:], B[D:, D:]

    Psi0 = np.empty((J + 1, D, D))
    G = np.zeros((J + 1, D, q))
    for j in range(J + 1):
        Psi0[j] = psi(trans, 0, j, 0)
        for s in range(1, j + 1):
            G[j] += d * psi(trans, 0, j, s) @ design.Z[s]

    n = D * (J + 1)
    V = np.empty((n, n))
    for j in range(J + 1):
        for jp in range(J + 1):
            blk = (Psi0[j] @ Bu @ Psi0[jp].T
                   + Psi0[j] @ Buv @ G[jp].T
                   + G[j] @ Buv.T @ Psi0[jp].T
                   + G[j] @ Bv @ G[jp].T)
            V[j * D:(j + 1) * D, jp * D:(jp + 1) * D] = blk
    return 0.5 * (V + V.T)


def latent_moments(design: DesignSet, theta: Theta, spec: ModelSpec) -> LatentMoments:
    mu = latent_mean(design, theta, spec).reshape(-1)
    return LatentMoments(mu=mu, V=latent_covariance(design, theta, spec))
