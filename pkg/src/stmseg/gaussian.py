"""Dense Gaussian and linear-dynamical-system primitives.

Everything here is a pure function of its arguments. Covariances are plain
``numpy`` arrays; the state dimension may be zero, in which case the
continuous part of a model is absent and only the observation noise remains.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .errors import SingularCovarianceError

PROB_EPS = 1e-12
MAX_COND = 1e12
SYM_TOL = 1e-9
_JITTERS = (1e-12, 1e-10, 1e-8)
_LOG_2PI = math.log(2.0 * math.pi)


def _as_vector(x) -> np.ndarray:
    return np.asarray(x, dtype=float).reshape(-1)


def _as_matrix(x, rows: int, cols: int) -> np.ndarray:
    return np.asarray(x, dtype=float).reshape(rows, cols)


def _symmetrize(S: np.ndarray) -> np.ndarray:
    return 0.5 * (S + np.swapaxes(S, -1, -2))


def psd_violations(S: np.ndarray, name: str, tol: float = SYM_TOL) -> list[str]:
    """Describe how ``S`` fails to be symmetric positive semi-definite."""
    S = np.asarray(S, dtype=float)
    if S.ndim != 2 or S.shape[0] != S.shape[1]:
        return [f"{name}: expected a square matrix, got shape {S.shape}"]
    if S.size == 0:
        return []
    if not np.all(np.isfinite(S)):
        return [f"{name}: non-finite entries"]
    out = []
    asym = float(np.max(np.abs(S - S.T)))
    if asym > tol:
        out.append(f"{name}: asymmetric by {asym:.3g} (tolerance {tol:g})")
    eig = np.linalg.eigvalsh(_symmetrize(S))
    floor = -tol * max(float(eig[-1]), 1.0)
    if eig[0] < floor:
        out.append(f"{name}: eigenvalue {eig[0]:.3g} below {floor:.3g}")
    return out


@dataclass(frozen=True)
class GaussianBelief:
    """Mean and covariance of a Gaussian over the continuous state."""

    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = _as_vector(self.mean)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", _as_matrix(self.cov, mean.size, mean.size))

    @property
    def dim(self) -> int:
        return self.mean.size

    def violations(self) -> list[str]:
        out = [] if np.all(np.isfinite(self.mean)) else ["mean: non-finite entries"]
        return out + psd_violations(self.cov, "cov")


@dataclass(frozen=True)
class LdsParams:
    """One linear-Gaussian regime.

    ``x[t] ~ N(A x[t-1], Q)`` and ``y[t] ~ N(B x[t], R)``.
    """

    A: np.ndarray
    B: np.ndarray
    Q: np.ndarray
    R: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.R, dtype=float)
        p = int(round(math.sqrt(R.size)))
        A = np.asarray(self.A, dtype=float)
        m = int(round(math.sqrt(A.size)))
        object.__setattr__(self, "A", A.reshape(m, m))
        object.__setattr__(self, "B", np.asarray(self.B, dtype=float).reshape(p, m))
        object.__setattr__(self, "Q", _as_matrix(self.Q, m, m))
        object.__setattr__(self, "R", R.reshape(p, p))

    @property
    def state_dim(self) -> int:
        return self.A.shape[0]

    @property
    def obs_dim(self) -> int:
        return self.B.shape[0]

    def violations(self) -> list[str]:
        out = []
        if self.A.shape != (self.state_dim, self.state_dim):
            out.append(f"A: shape {self.A.shape} is not square")
        return out + psd_violations(self.Q, "Q") + psd_violations(self.R, "R")


def _check_conditioning(S: np.ndarray, what: str) -> None:
    if S.size == 0:
        return
    eig = np.linalg.eigvalsh(S)
    if not np.all(np.isfinite(eig)) or eig[0] <= 0 or eig[-1] / eig[0] > MAX_COND:
        raise SingularCovarianceError(
            f"{what} is singular or ill-conditioned (eigenvalues {eig[0]:.3g}..{eig[-1]:.3g})"
        )


def gaussian_logpdf(x, mean, cov) -> float:
    """Log density of ``N(x; mean, cov)``; zero-dimensional inputs give 0."""
    x, mean = _as_vector(x), _as_vector(mean)
    if x.size == 0:
        return 0.0
    cov = _symmetrize(_as_matrix(cov, x.size, x.size))
    L = psd_sqrt(cov)
    if np.any(np.diag(L) <= 0):
        raise SingularCovarianceError("covariance is singular")
    r = np.linalg.solve(L, x - mean)
    logdet = 2.0 * np.sum(np.log(np.diag(L)))
    return float(-0.5 * (x.size * _LOG_2PI + logdet + r @ r))


def _update(mean, cov, y, B, R):
    """Condition ``N(mean, cov)`` on ``y ~ N(B x, R)``."""
    S = _symmetrize(B @ cov @ B.T + R)
    _check_conditioning(S, "innovation covariance")
    innov = y - B @ mean
    L = np.linalg.cholesky(S)
    # K = cov B^T S^-1
    K = np.linalg.solve(L.T, np.linalg.solve(L, B @ cov)).T
    I_KB = np.eye(mean.size) - K @ B
    new_mean = mean + K @ innov
    new_cov = _symmetrize(I_KB @ cov @ I_KB.T + K @ R @ K.T)
    r = np.linalg.solve(L, innov)
    log_ev = -0.5 * (y.size * _LOG_2PI + 2.0 * np.sum(np.log(np.diag(L))) + r @ r)
    return new_mean, new_cov, float(log_ev)


def kalman_step(prior: GaussianBelief, y, lds: LdsParams) -> tuple[GaussianBelief, float]:
    """Predict with ``lds`` then condition on ``y``.

    Returns the filtered belief and ``log N(y; B A m, B (A P A' + Q) B' + R)``.
    """
    y = _as_vector(y)
    mean = lds.A @ prior.mean
    cov = lds.A @ prior.cov @ lds.A.T + lds.Q
    m, P, log_ev = _update(mean, cov, y, lds.B, lds.R)
    return GaussianBelief(m, P), log_ev


def kalman_update(prior: GaussianBelief, y, lds: LdsParams) -> tuple[GaussianBelief, float]:
    """Condition ``prior`` on ``y`` without a prediction step."""
    m, P, log_ev = _update(prior.mean, prior.cov, _as_vector(y), lds.B, lds.R)
    return GaussianBelief(m, P), log_ev


def condition_previous_state(
    chi: GaussianBelief, y, lds: LdsParams
) -> tuple[GaussianBelief, float]:
    """Posterior of the previous state after seeing the next observation.

    With ``H = B A`` and ``y | x_prev ~ N(H x_prev, B Q B' + R)`` the product
    ``chi(x) p(y | x)`` factors as ``c3 * N(x; mu, Sigma)``. Returns
    ``(N(mu, Sigma), log c3)``.
    """
    y = _as_vector(y)
    H = lds.B @ lds.A
    SY = _symmetrize(lds.B @ lds.Q @ lds.B.T + lds.R)
    _check_conditioning(SY, "observation covariance given the previous state")
    m, P, log_c3 = _update(chi.mean, chi.cov, y, H, SY)
    return GaussianBelief(m, P), log_c3


def psd_sqrt(S) -> np.ndarray:
    """Lower-triangular ``L`` with ``L @ L.T == S`` for symmetric PSD ``S``.

    Falls back to escalating diagonal jitter when the plain Cholesky
    factorization fails on a singular matrix.
    """
    S = np.asarray(S, dtype=float)
    if S.size == 0:
        return np.zeros_like(S)
    bad = psd_violations(S, "matrix")
    if bad:
        raise np.linalg.LinAlgError("; ".join(bad))
    S = _symmetrize(S)
    if not np.any(S):
        return np.zeros_like(S)
    try:
        return np.linalg.cholesky(S)
    except np.linalg.LinAlgError:
        pass
    scale = max(1.0, float(np.max(np.abs(np.diag(S)))))
    eye = np.eye(S.shape[0])
    for jitter in _JITTERS:
        try:
            return np.linalg.cholesky(S + jitter * scale * eye)
        except np.linalg.LinAlgError:
            continue
    raise np.linalg.LinAlgError("Cholesky failed after jitter escalation")


def sigma_points(g: GaussianBelief) -> np.ndarray:
    """The ``2M + 1`` points ``mu`` and ``mu +/- (sqrt(M Sigma))_k``, one per row."""
    M = g.dim
    if M == 0:
        return np.zeros((1, 0))
    L = psd_sqrt(M * g.cov)
    return np.vstack([g.mean, g.mean + L.T, g.mean - L.T])


def logistic_gaussian(arg_mean, arg_var):
    """Moment-matched ``E[sigmoid(a)]`` for ``a ~ N(arg_mean, arg_var)``."""
    p = expit(np.asarray(arg_mean) / np.sqrt(1.0 + (math.pi / 8.0) * np.asarray(arg_var)))
    return np.clip(p, PROB_EPS, 1.0 - PROB_EPS)


def sigmoid_gaussian_expectation(offset: float, w, g: GaussianBelief) -> float:
    """Approximate ``E_{x ~ g}[sigmoid(offset + w'x)]``.

    The expectation only depends on the projection of ``g`` onto ``w``.
    """
    w = _as_vector(w)
    mean = offset + float(w @ g.mean) if w.size else float(offset)
    var = float(w @ g.cov @ w) if w.size else 0.0
    return float(logistic_gaussian(mean, max(var, 0.0)))


# -- batched variants used by the particle filter ---------------------------
# Shapes: means (N, M), covs (N, M, M), A (N, M, M), B (N, P, M), Q (N, M, M),
# R (N, P, P), y (P,).

def _batch_update(means, covs, y, B, R):
    S = _symmetrize(B @ covs @ np.swapaxes(B, -1, -2) + R)
    eig = np.linalg.eigvalsh(S)
    if np.any(eig[:, 0] <= 0) or np.any(eig[:, -1] / eig[:, 0] > MAX_COND):
        raise SingularCovarianceError("innovation covariance is singular or ill-conditioned")
    L = np.linalg.cholesky(S)
    innov = y[None, :] - np.einsum("npm,nm->np", B, means)
    BP = B @ covs
    K = np.swapaxes(np.linalg.solve(np.swapaxes(L, -1, -2), np.linalg.solve(L, BP)), -1, -2)
    M = means.shape[1]
    I_KB = np.eye(M)[None] - K @ B
    new_means = means + np.einsum("nmp,np->nm", K, innov)
    new_covs = _symmetrize(
        I_KB @ covs @ np.swapaxes(I_KB, -1, -2) + K @ R @ np.swapaxes(K, -1, -2)
    )
    r = np.linalg.solve(L, innov[..., None])[..., 0]
    logdet = 2.0 * np.sum(np.log(np.diagonal(L, axis1=-2, axis2=-1)), axis=-1)
    log_ev = -0.5 * (y.size * _LOG_2PI + logdet + np.sum(r * r, axis=-1))
    return new_means, new_covs, log_ev


def batch_kalman_step(means, covs, y, A, B, Q, R):
    """Vectorized :func:`kalman_step` over a leading particle axis."""
    pm = np.einsum("nij,nj->ni", A, means)
    pc = A @ covs @ np.swapaxes(A, -1, -2) + Q
    return _batch_update(pm, pc, y, B, R)


def batch_condition_previous_state(means, covs, y, A, B, Q, R):
    """Vectorized :func:`condition_previous_state`."""
    H = B @ A
    SY = B @ Q @ np.swapaxes(B, -1, -2) + R
    return _batch_update(means, covs, y, H, SY)
