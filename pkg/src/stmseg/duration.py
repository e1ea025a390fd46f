"""Logistic duration model, discriminative boundary model and their fitting."""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import expit, log_expit

from .errors import FallbackWarning
from .gaussian import GaussianBelief, sigma_points
from .stm import StageMap

RIDGE = 1e-4
MAX_WEIGHT_NORM = 1e3


@dataclass(frozen=True)
class DurationParams:
    """Per-action ``nu``/``beta`` and per-(action, primitive) ``omega`` rows."""

    nu: np.ndarray
    beta: np.ndarray
    omega: tuple[np.ndarray, ...]  # omega[i] has shape (n_primitives_i, state_dim)

    def __post_init__(self):
        object.__setattr__(self, "nu", np.asarray(self.nu, dtype=float).reshape(-1))
        object.__setattr__(self, "beta", np.asarray(self.beta, dtype=float).reshape(-1))
        object.__setattr__(self, "omega", tuple(np.atleast_2d(np.asarray(w, dtype=float)) for w in self.omega))

    @property
    def n_actions(self) -> int:
        return self.nu.size

    def with_omega(self, omega) -> "DurationParams":
        return DurationParams(self.nu, self.beta, tuple(omega))

    def violations(self) -> list[str]:
        out = []
        if self.beta.size != self.nu.size or len(self.omega) != self.nu.size:
            out.append("duration: nu, beta and omega disagree on the number of actions")
        if np.any(~(self.nu > 0)):
            out.append(f"duration.nu must be positive, got {self.nu.tolist()}")
        if np.any(~(self.beta > 0)):
            out.append(f"duration.beta must be positive, got {self.beta.tolist()}")
        if any(not np.all(np.isfinite(w)) for w in self.omega):
            out.append("duration.omega has non-finite entries")
        return out


@dataclass(frozen=True)
class BoundaryTrainingTuple:
    action: int
    duration: int
    reset_label: float
    primitive_posterior: float
    state_posterior: GaussianBelief = field(repr=False)


def reset_probability(action, primitive, duration, x, params: DurationParams, stages: StageMap) -> float:
    """Probability that the duration counter resets after this frame.

    Zero unless ``primitive`` sits in the terminating stage.
    """
    if stages.g[primitive] != stages.terminal:
        return 0.0
    w = params.omega[action][primitive]
    arg = params.nu[action] * (duration - params.beta[action])
    if w.size:
        arg += float(w @ np.asarray(x, dtype=float).reshape(-1))
    return float(expit(arg))


def duration_pmf(nu: float, beta: float, tau_max: int) -> np.ndarray:
    """``p(dur = tau)`` for ``tau = 1..tau_max`` under an ungated logistic hazard."""
    d = np.arange(1, tau_max + 1, dtype=float)
    arg = nu * (d - beta)
    log_stay = log_expit(-arg)  # log 1/(1+e^arg)
    survive = np.concatenate([[0.0], np.cumsum(log_stay)[:-1]])
    return np.exp(survive + log_expit(arg))


def durations_from_labels(labels: Sequence[int]) -> np.ndarray:
    """Duration counter implied by a label sequence: 1 at each change, else +1."""
    s = np.asarray(labels)
    d = np.ones(s.size, dtype=int)
    for t in range(1, s.size):
        if s[t] == s[t - 1]:
            d[t] = d[t - 1] + 1
    return d


def weighted_logistic_regression(features, offsets, labels, weights, ridge: float = RIDGE,
                                 tol: float = 1e-8, max_iter: int = 100) -> np.ndarray:
    """Ridge-penalized weighted logistic regression solved by IRLS.

    Maximizes ``sum_n w_n [b_n log s_n + (1 - b_n) log(1 - s_n)] - ridge/2 |omega|^2``
    where ``s_n = sigmoid(c_n + omega' x_n)``.
    """
    X = np.asarray(features, dtype=float)
    X = X.reshape(X.shape[0], -1) if X.ndim != 2 else X
    c = np.asarray(offsets, dtype=float).reshape(-1)
    b = np.asarray(labels, dtype=float).reshape(-1)
    w = np.asarray(weights, dtype=float).reshape(-1)
    n, k = X.shape
    if not (c.size == b.size == w.size == n):
        raise ValueError("features, offsets, labels and weights must have equal lengths")
    for name, arr in (("features", X), ("offsets", c), ("labels", b), ("weights", w)):
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"non-finite {name}")
    if np.any(w < 0) or not np.any(w > 0):
        raise ValueError("weights must be nonnegative and not all zero")
    if k == 0:
        return np.zeros(0)

    def objective(beta):
        eta = c + X @ beta
        return float(np.sum(w * (b * log_expit(eta) + (1 - b) * log_expit(-eta)))) - 0.5 * ridge * beta @ beta

    beta = np.zeros(k)
    current = objective(beta)
    for _ in range(max_iter):
        p = expit(c + X @ beta)
        grad = X.T @ (w * (b - p)) - ridge * beta
        H = (X * (w * p * (1 - p))[:, None]).T @ X + ridge * np.eye(k)
        step = np.linalg.solve(H, grad)
        t = 1.0
        while True:
            cand = beta + t * step
            val = objective(cand)
            if val >= current - 1e-12 or t < 1e-10:
                break
            t *= 0.5
        delta = np.max(np.abs(cand - beta))
        beta, current = cand, val
        if delta < tol:
            break
    return beta


def _separation_safe_fit(X, c, b, w, what: str) -> np.ndarray:
    ridge = RIDGE
    beta = weighted_logistic_regression(X, c, b, w, ridge=ridge)
    while np.linalg.norm(beta) > MAX_WEIGHT_NORM:
        ridge *= 10.0
        beta = weighted_logistic_regression(X, c, b, w, ridge=ridge)
    if ridge > RIDGE:
        warnings.warn(f"{what}: data look separable; refit with ridge {ridge:g}", FallbackWarning, stacklevel=3)
    return beta


def fit_logistic_duration(label_sequences: Sequence[Sequence[int]], n_actions: int | None = None,
                          n_primitives: Sequence[int] | None = None,
                          state_dim: int = 0) -> tuple[DurationParams, np.ndarray]:
    """Fit ``nu``, ``beta`` per action and the action transition matrix.

    Each frame with a successor contributes the pair (duration, reset at the
    next frame). The slope of the per-action logistic fit is ``nu`` and its
    intercept ``-nu * beta``. ``omega`` comes back as zeros shaped
    ``(n_primitives[i], state_dim)``.
    """
    seqs = [np.asarray(s, dtype=int) for s in label_sequences]
    if any(s.size == 0 for s in seqs):
        raise ValueError("label sequences must be non-empty")
    if n_actions is None:
        n_actions = int(max(s.max() for s in seqs)) + 1
    dur, nxt, act, seg_lens = [], [], [], [[] for _ in range(n_actions)]
    counts = np.zeros((n_actions, n_actions))
    for s in seqs:
        d = durations_from_labels(s)
        resets = (d[1:] == 1).astype(float)
        dur.append(d[:-1])
        nxt.append(resets)
        act.append(s[:-1])
        for t in np.flatnonzero(resets):
            counts[s[t], s[t + 1]] += 1
        ends = np.flatnonzero(np.r_[d[1:] == 1, True])
        for t in ends:
            seg_lens[s[t]].append(d[t])
    dur, nxt, act = np.concatenate(dur), np.concatenate(nxt), np.concatenate(act)

    nu = np.empty(n_actions)
    beta = np.empty(n_actions)
    for i in range(n_actions):
        sel = act == i
        if not np.any(nxt[sel] > 0):
            lens = seg_lens[i] or [1]
            nu[i], beta[i] = 0.5, float(np.mean(lens))
            warnings.warn(f"action {i}: no observed boundary; using nu=0.5, beta={beta[i]:.3g}",
                          FallbackWarning, stacklevel=2)
            continue
        X = np.column_stack([dur[sel], np.ones(sel.sum())])
        slope, intercept = _separation_safe_fit(X, np.zeros(sel.sum()), nxt[sel], np.ones(sel.sum()),
                                                f"duration fit for action {i}")
        if slope <= 0:
            warnings.warn(f"action {i}: fitted nu={slope:.3g} is not positive; clamped to 1e-3",
                          FallbackWarning, stacklevel=2)
            slope = 1e-3
        nu[i] = slope
        beta[i] = -intercept / slope
        if beta[i] <= 0:
            beta[i] = float(np.mean(seg_lens[i])) if seg_lens[i] else 1.0
            warnings.warn(f"action {i}: fitted beta not positive; using mean length {beta[i]:.3g}",
                          FallbackWarning, stacklevel=2)

    tot = counts.sum(axis=1, keepdims=True)
    a = np.where(tot > 0, counts / np.where(tot > 0, tot, 1.0), 1.0 / n_actions)
    n_primitives = n_primitives or [1] * n_actions
    omega = tuple(np.zeros((k, state_dim)) for k in n_primitives)
    return DurationParams(nu, beta, omega), a


def fit_dbm_omega(tuples: Sequence[BoundaryTrainingTuple], action: int, primitive: int,
                  params: DurationParams) -> np.ndarray:
    """Fit the boundary weights of one (action, terminal primitive) pair.

    ``tuples`` hold posteriors for this primitive; those of other actions are
    ignored. Every tuple becomes ``2M + 1`` sigma-point rows with offset
    ``nu (d - beta)``, label ``b`` and weight ``p_Z / (2M + 1)``.
    """
    rows = [tp for tp in tuples if tp.action == action and tp.primitive_posterior > 0]
    M = tuples[0].state_posterior.dim if tuples else params.omega[action].shape[1]
    if not rows:
        return np.zeros(M)
    nu, beta = params.nu[action], params.beta[action]
    X, c, b, w = [], [], [], []
    for tp in rows:
        pts = sigma_points(tp.state_posterior)
        k = pts.shape[0]
        X.append(pts)
        c.append(np.full(k, nu * (tp.duration - beta)))
        b.append(np.full(k, tp.reset_label))
        w.append(np.full(k, tp.primitive_posterior / k))
    X, c, b, w = np.vstack(X), np.concatenate(c), np.concatenate(b), np.concatenate(w)
    return _separation_safe_fit(X, c, b, w, f"boundary weights ({action}, {primitive})")

