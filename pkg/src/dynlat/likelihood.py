"""Exact log-likelihood of the transformed markers.

Two routes compute the same quantity:

* a readable per-subject reference (`subject_moments`, `subject_loglik`,
  `total_loglik`) that assembles marker moments occasion by occasion, and
* a vectorized :class:`Evaluator` that batches likelihood evaluation over
  many parameter vectors at once. Subjects sharing design matrices and
  observation patterns are grouped so Cholesky factorizations are done once
  per group, stacked over the parameter batch.

The optimizer consumes the Evaluator; tests pin the two routes against each
other. Non-positive-definite marker covariances go through a small jitter
ladder and finally degrade to a -inf sentinel so a rejected step never
raises across the evaluation boundary.
"""

from __future__ import annotations

import numpy as np

from . import splines
from .data import Dataset, SubjectData
from .measurement import LinkFunction, build_M, ispline_knots_from_data
from .modelspec import ISPLINE, LINEAR, ModelSpec, Theta, assemble_L, build_design, unpack
from .structural import latent_moments

_LOG2PI = np.log(2.0 * np.pi)
_JITTERS = (0.0, 1e-10, 1e-8, 1e-6)


class MarkerMoments:
    """Stacked mean and covariance of one subject's observed transformed markers."""

    def __init__(self, mu: np.ndarray, V: np.ndarray):
        self.mu = mu
        self.V = V


def link_knots(spec: ModelSpec, dataset: Dataset):
    """Per-marker I-spline knots placed from the observed marker values."""
    knots = []
    for k, mk in enumerate(spec.markers):
        if mk.link.family == ISPLINE:
            knots.append(ispline_knots_from_data(dataset.marker_values(k),
                                                 mk.link.n_internal_knots))
        else:
            knots.append(None)
    return knots


def marker_links(spec: ModelSpec, theta: Theta, knots) -> list[LinkFunction]:
    return [LinkFunction(mk.link.family, theta.eta[k], knots[k])
            for k, mk in enumerate(spec.markers)]


# ---------------------------------------------------------------------------
# Reference route
# ---------------------------------------------------------------------------


def subject_moments(theta: Theta, subject: SubjectData, spec: ModelSpec) -> MarkerMoments:
    """Mean and covariance of the subject's observed markers (transformed scale)."""
    design = build_design(spec, subject.covariates)
    lm = latent_moments(design, theta, spec)
    D, K = spec.dimensions, spec.n_markers
    P = spec.projection_matrix()
    Sigma = np.diag(theta.sigma ** 2)

    Ms = [build_M(occ.mask) for occ in subject.occasions]
    js = [occ.j for occ in subject.occasions]
    mu_parts = [M @ P @ lm.mu[j * D:(j + 1) * D] for M, j in zip(Ms, js)]
    mu = np.concatenate(mu_parts) if mu_parts else np.empty(0)

    sizes = [M.shape[0] for M in Ms]
    n = sum(sizes)
    V = np.empty((n, n))
    starts = np.concatenate([[0], np.cumsum(sizes)])
    for a, (Ma, ja) in enumerate(zip(Ms, js)):
        for b, (Mb, jb) in enumerate(zip(Ms, js)):
            blk = Ma @ P @ lm.V[ja * D:(ja + 1) * D, jb * D:(jb + 1) * D] @ P.T @ Mb.T
            if a == b:
                blk = blk + Ma @ Sigma @ Mb.T
            V[starts[a]:starts[a + 1], starts[b]:starts[b + 1]] = blk
    return MarkerMoments(mu=mu, V=0.5 * (V + V.T))


def transform_observations(theta: Theta, subject: SubjectData, spec: ModelSpec, knots):
    """Stacked transformed observations and the summed log link Jacobians."""
    links = marker_links(spec, theta, knots)
    vals, logjac = [], 0.0
    for occ in subject.occasions:
        for k in np.flatnonzero(occ.mask):
            vals.append(float(links[k].transform(occ.values[k])))
            jac = float(links[k].jacobian(occ.values[k]))
            logjac += np.log(np.abs(jac)) if jac != 0.0 else -np.inf
    return np.asarray(vals), logjac


def gaussian_logdensity(x: np.ndarray, mu: np.ndarray, V: np.ndarray) -> float:
    """Multivariate normal log-density via Cholesky, with a jitter ladder.

    Returns -inf when V stays non-positive-definite after the ladder.
    """
    n = x.size
    for jit in _JITTERS:
        try:
            L = np.linalg.cholesky(V + jit * np.eye(n) if jit else V)
        except np.linalg.LinAlgError:
            continue
        z = np.linalg.solve(L, x - mu)
        return float(-0.5 * (z @ z) - np.log(np.diag(L)).sum() - 0.5 * n * _LOG2PI)
    return -np.inf


def subject_loglik(theta: Theta, subject: SubjectData, spec: ModelSpec,
                   knots=None) -> float:
    """One subject's log-likelihood contribution (Jacobian corrected)."""
    if knots is None:
        knots = [None] * spec.n_markers
    mom = subject_moments(theta, subject, spec)
    y, logjac = transform_observations(theta, subject, spec, knots)
    return gaussian_logdensity(y, mom.mu, mom.V) + logjac


def total_loglik(theta: Theta, dataset: Dataset, spec: ModelSpec) -> float:
    """Sum of subject contributions, ordered by subject id (deterministic)."""
    knots = link_knots(spec, dataset)
    out = 0.0
    for subject in dataset.subjects:  # Dataset keeps subjects sorted by id
        out += subject_loglik(theta, subject, spec, knots)
    return out


# ---------------------------------------------------------------------------
# Batched evaluator
# ---------------------------------------------------------------------------


class Evaluator:
    """Vectorized likelihood evaluation over batches of parameter vectors.

    Grouping levels, all precomputed once per (dataset, spec):

    * design class: subjects sharing the influence/trend/random-effect
      designs (the latent covariance and drift recurrences are shared);
    * mean group: within a class, subjects sharing the baseline design;
    * pattern: within a class, subjects sharing the observed
      (occasion, marker) index set (one Cholesky per pattern).
    """

    def __init__(self, dataset: Dataset, spec: ModelSpec, max_batch: int = 64):
        self.spec = spec
        self.dataset = dataset
        self.max_batch = max_batch
        self.knots = link_knots(spec, dataset)
        self._build_plan()

    # ----- plan ---------------------------------------------------------

    def _build_plan(self):
        spec = self.spec
        K = spec.n_markers
        dims = np.array([mk.dimension for mk in spec.markers])

        # Global observation stream, subject-major, occasion-major.
        all_vals, all_marker, subj_slices = [], [], []
        pos = 0
        for subj in self.dataset.subjects:
            n_i = subj.n_observations()
            for occ in subj.occasions:
                for k in np.flatnonzero(occ.mask):
                    all_vals.append(occ.values[k])
                    all_marker.append(k)
            subj_slices.append(slice(pos, pos + n_i))
            pos += n_i
        self.n_obs_total = pos
        self.obs_vals = np.asarray(all_vals, dtype=float)
        self.obs_marker = np.asarray(all_marker, dtype=int)
        self.subj_slices = subj_slices

        # Per-marker transform ingredients.
        self.marker_sel = [np.flatnonzero(self.obs_marker == k) for k in range(K)]
        self.ispline_I, self.ispline_M = [], []
        for k, mk in enumerate(spec.markers):
            if mk.link.family == ISPLINE:
                y = self.obs_vals[self.marker_sel[k]]
                internal, bounds = self.knots[k]
                y = np.clip(y, *bounds)
                self.ispline_I.append(splines.ispline_basis(y, internal, bounds))
                self.ispline_M.append(splines.mspline_basis(y, internal, bounds))
            else:
                self.ispline_I.append(None)
                self.ispline_M.append(None)

        # Design classes / mean groups / patterns.
        classes: dict[bytes, dict] = {}
        for si, subj in enumerate(self.dataset.subjects):
            ds = build_design(spec, subj.covariates)
            ckey = ds.R.tobytes() + ds.X.tobytes() + ds.Z.tobytes()
            cls = classes.setdefault(ckey, {
                "R": ds.R, "X": ds.X, "Z": ds.Z,
                "mean_groups": {}, "patterns": {}, "subjects": []})
            cls["subjects"].append(si)
            mkey = ds.X0.tobytes()
            mg = cls["mean_groups"].setdefault(mkey, {"X0": ds.X0, "subjects": []})
            mg["subjects"].append(si)

            flat_idx = np.concatenate([
                occ.j * K + np.flatnonzero(occ.mask) for occ in subj.occasions
            ]) if subj.occasions else np.empty(0, dtype=int)
            pat = cls["patterns"].setdefault(flat_idx.tobytes(),
                                             {"idx": flat_idx, "subjects": []})
            pat["subjects"].append(si)

        self.classes = []
        for cls in classes.values():
            mean_groups = list(cls["mean_groups"].values())
            mg_of_subject = {}
            for gi, mg in enumerate(mean_groups):
                for si in mg["subjects"]:
                    mg_of_subject[si] = gi
            # Group patterns by observed size for stacked Cholesky.
            by_size: dict[int, list] = {}
            for pat in cls["patterns"].values():
                by_size.setdefault(pat["idx"].size, []).append(pat)
            self.classes.append({
                "R": cls["R"], "X": cls["X"], "Z": cls["Z"],
                "mean_groups": mean_groups,
                "mg_of_subject": mg_of_subject,
                "pattern_sizes": by_size,
            })

        self.marker_dim = dims
        # Row d of the stacked marker-scale moments at occasion j is j*K + k.
        J1 = spec.grid_len + 1
        self.grid_marker_dim = np.tile(dims, J1)
        self.grid_marker_occ = np.repeat(np.arange(J1), K)
        self.sigma_slot = np.tile(np.arange(K), J1)

    # ----- evaluation ---------------------------------------------------

    def loglik(self, thetas: np.ndarray) -> np.ndarray:
        """Log-likelihood for a (B, n_params) stack of flat parameter vectors."""
        thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
        out = np.empty(thetas.shape[0])
        for start in range(0, thetas.shape[0], self.max_batch):
            chunk = thetas[start:start + self.max_batch]
            out[start:start + chunk.shape[0]] = self._loglik_chunk(chunk)
        return out

    def loglik1(self, flat: np.ndarray) -> float:
        return float(self.loglik(flat[None, :])[0])

    def _unpack_batch(self, thetas):
        spec = self.spec
        B = thetas.shape[0]
        pos = 0

        def take(n):
            nonlocal pos
            out = thetas[:, pos:pos + n]
            pos += n
            return out

        beta = take(spec.p0)
        gamma = take(spec.p_trend)
        lp = take(spec.n_l_params())
        free, ones = spec.l_structure()
        n = spec.dimensions + spec.n_random
        L = np.zeros((B, n, n))
        for (i, j) in ones:
            L[:, i, j] = 1.0
        for m, (i, j) in enumerate(free):
            L[:, i, j] = lp[:, m]
        mask = spec.alpha_free_mask()
        alpha = np.zeros((B,) + mask.shape)
        alpha[:, mask] = take(int(mask.sum()))
        sigma = take(spec.n_markers)
        eta = [take(mk.link.n_eta) for mk in spec.markers]
        return beta, gamma, L, alpha, sigma, eta

    def _transform_all(self, eta, sigma):
        """Transformed observations (B, n_obs) and log-Jacobian sums (B,)."""
        B = sigma.shape[0]
        T = np.empty((B, self.n_obs_total))
        logjac = np.zeros(B)
        with np.errstate(divide="ignore", invalid="ignore"):
            for k, mk in enumerate(self.spec.markers):
                sel = self.marker_sel[k]
                if sel.size == 0:
                    continue
                e = eta[k]
                if mk.link.family == LINEAR:
                    T[:, sel] = (self.obs_vals[sel][None, :] - e[:, :1]) / e[:, 1:2]
                    logjac += -sel.size * np.log(np.abs(e[:, 1]))
                else:
                    w2 = e[:, 1:] ** 2
                    T[:, sel] = e[:, :1] + w2 @ self.ispline_I[k].T
                    jac = w2 @ self.ispline_M[k].T
                    logjac += np.where(jac > 0, np.log(np.where(jac > 0, jac, 1.0)),
                                       -np.inf).sum(axis=1)
        return T, logjac

    def _loglik_chunk(self, thetas):
        spec = self.spec
        B = thetas.shape[0]
        D, K, q = spec.dimensions, spec.n_markers, spec.n_random
        J = spec.grid_len
        delta = spec.delta

        beta, gamma, L, alpha, sigma, eta = self._unpack_batch(thetas)
        T, total = self._transform_all(eta, sigma)
        bad = ~np.isfinite(total)

        sig2 = sigma ** 2
        diag_add = sig2[:, self.sigma_slot]  # (B, (J+1)K)

        for cls in self.classes:
            R, X, Z = cls["R"], cls["X"], cls["Z"]
            # One-step transitions (B, J, D, D).
            A = np.einsum("bder,jr->bjde", alpha, R[:-1])
            Atil = np.eye(D)[None, None] + delta * A

            # Recurrences for the random-effect loading and the drift.
            Phi = np.zeros((B, J + 1, D, D + q))
            Phi[:, 0, :, :D] = np.eye(D)
            m = np.zeros((B, J + 1, D))
            driftX = np.einsum("jdp,bp->bjd", X, gamma)
            for j in range(J):
                Phi[:, j + 1] = np.einsum("bde,bef->bdf", Atil[:, j], Phi[:, j])
                Phi[:, j + 1, :, D:] += delta * Z[j + 1]
                m[:, j + 1] = np.einsum("bde,be->bd", Atil[:, j], m[:, j]) \
                    + delta * driftX[:, j + 1]

            PhiL = np.einsum("bjde,bef->bjdf", Phi, L)
            # Marker-scale loading rows: (B, (J+1)K, D+q).
            Gm = PhiL[:, self.grid_marker_occ, self.grid_marker_dim, :]
            W = np.einsum("bif,bjf->bij", Gm, Gm)
            W[:, np.arange(W.shape[1]), np.arange(W.shape[1])] += diag_add

            # Marker-scale means per mean group (B, (J+1)K).
            mu_groups = []
            for mg in cls["mean_groups"]:
                x0b = np.einsum("dp,bp->bd", mg["X0"], beta)
                mu_lat = np.einsum("bjde,be->bjd", Phi[:, :, :, :D], x0b) + m
                mu_groups.append(mu_lat[:, self.grid_marker_occ, self.grid_marker_dim])
            mg_of_subject = cls["mg_of_subject"]

            for n_pat, pats in cls["pattern_sizes"].items():
                if n_pat == 0:
                    continue
                idx = np.stack([p["idx"] for p in pats])          # (m, n)
                Vs = W[:, idx[:, :, None], idx[:, None, :]]       # (B, m, n, n)
                Ls, ok = _chol_stack(Vs)
                bad |= ~ok
                logdet = 2.0 * np.log(
                    np.abs(Ls[:, :, np.arange(n_pat), np.arange(n_pat)])
                ).sum(axis=2)                                     # (B, m)
                for pi, pat in enumerate(pats):
                    res = np.stack([
                        T[:, self.subj_slices[si]] - mu_groups[mg_of_subject[si]][:, pat["idx"]]
                        for si in pat["subjects"]
                    ], axis=2)                                    # (B, n, s)
                    z = np.linalg.solve(Ls[:, pi], res)
                    s_count = len(pat["subjects"])
                    total += (-0.5 * np.einsum("bns,bns->b", z, z)
                              - s_count * (0.5 * logdet[:, pi] + 0.5 * n_pat * _LOG2PI))

        total[bad] = -np.inf
        return total


def _chol_stack(Vs):
    """Cholesky of a (B, m, n, n) stack with a per-batch jitter ladder.

    Returns (L, ok) where ok flags the batch members whose whole stack
    factorized (after at most the ladder's jitter).
    """
    B, m, n, _ = Vs.shape
    try:
        return np.linalg.cholesky(Vs), np.ones(B, dtype=bool)
    except np.linalg.LinAlgError:
        pass
    L = np.zeros_like(Vs)
    ok = np.ones(B, dtype=bool)
    eye = np.eye(n)
    for b in range(B):
        for jit in _JITTERS:
            try:
                L[b] = np.linalg.cholesky(Vs[b] + jit * eye if jit else Vs[b])
                break
            except np.linalg.LinAlgError:
                continue
        else:
            ok[b] = False
    return L, ok


# ---------------------------------------------------------------------------
# Finite-difference derivatives
# ---------------------------------------------------------------------------


class DerivativeError(RuntimeError):
    """Probe points kept returning non-finite values after step shrinking."""


def _axis_probes(flat, f, h0=1e-4, max_shrink=3):
    """Per-coordinate steps and the cached axis probe values f(theta +- h_i e_i)."""
    p = flat.size
    h = h0 * np.maximum(1.0, np.abs(flat))
    for _ in range(max_shrink + 1):
        probes = np.concatenate([flat + np.diag(h), flat - np.diag(h)])
        vals = f(probes)
        fp, fm = vals[:p], vals[p:]
        nonfinite = ~(np.isfinite(fp) & np.isfinite(fm))
        if not nonfinite.any():
            return h, fp, fm
        h[nonfinite] *= 0.1
    raise DerivativeError("non-finite probes persist after shrinking the FD steps")


def gradient_fd(flat: np.ndarray, f) -> np.ndarray:
    """Central-difference gradient; `f` maps a (B, p) stack to (B,) values."""
    flat = np.asarray(flat, dtype=float)
    h, fp, fm = _axis_probes(flat, f)
    return (fp - fm) / (2.0 * h)


def hessian_fd(flat: np.ndarray, f, f0: float | None = None) -> np.ndarray:
    """Second-order central-difference Hessian, symmetric by construction."""
    flat = np.asarray(flat, dtype=float)
    p = flat.size
    if f0 is None:
        f0 = float(f(flat[None, :])[0])
    if not np.isfinite(f0):
        raise DerivativeError("objective not finite at the expansion point")
    h, fp, fm = _axis_probes(flat, f)

    H = np.empty((p, p))
    H[np.arange(p), np.arange(p)] = (fp - 2.0 * f0 + fm) / h ** 2

    pairs = [(i, j) for i in range(p) for j in range(i)]
    if pairs:
        probes = np.empty((4 * len(pairs), p))
        for n, (i, j) in enumerate(pairs):
            for s, (si, sj) in enumerate(((1, 1), (1, -1), (-1, 1), (-1, -1))):
                probe = flat.copy()
                probe[i] += si * h[i]
                probe[j] += sj * h[j]
                probes[4 * n + s] = probe
        vals = f(probes)
        for n, (i, j) in enumerate(pairs):
            fpp, fpm, fmp, fmm = vals[4 * n:4 * n + 4]
            if not np.all(np.isfinite([fpp, fpm, fmp, fmm])):
                fpp, fpm, fmp, fmm = _shrunk_cross(flat, f, i, j, h)
            H[i, j] = H[j, i] = (fpp - fpm - fmp + fmm) / (4.0 * h[i] * h[j])
    return H


def _shrunk_cross(flat, f, i, j, h, max_shrink=3):
    hi, hj = h[i], h[j]
    for _ in range(max_shrink):
        hi *= 0.1
        hj *= 0.1
        probes = []
        for si, sj in ((1, 1), (1, -1), (-1, 1), (-1, -1)):
            probe = flat.copy()
            probe[i] += si * hi
            probe[j] += sj * hj
            probes.append(probe)
        vals = f(np.asarray(probes))
        if np.all(np.isfinite(vals)):
            return vals
    raise DerivativeError(f"non-finite cross probes for coordinates ({i}, {j})")
