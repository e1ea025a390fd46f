"""Rao-Blackwellised particle filter over (action, duration, primitive).

Particles carry the discrete triple and a per-particle Gaussian belief over
the continuous state, stored as stacked arrays. Each frame:

1. the reset probability is evaluated at the belief mean and used to
   propose a reset or an increment, then an action and a primitive;
2. the weight is multiplied by the observation evidence times the expected
   duration factor under the belief conditioned on the new observation,
   divided by the proposal's duration factor;
3. beliefs are Kalman-updated, weights normalized, marginals recorded and
   the particles resampled (systematically, by default every frame).

Randomness for frame ``t`` comes from a Philox stream keyed by the seed with
``t`` in the counter, so runs are reproducible frame by frame.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import expit, logsumexp

from .errors import FallbackWarning
from .gaussian import (
    PROB_EPS,
    GaussianBelief,
    batch_condition_previous_state,
    batch_kalman_step,
    logistic_gaussian,
)
from .model import FullModel, HiddenPath, log_joint_terms

log = logging.getLogger(__name__)

REFINE_WINDOW = 40


@dataclass(frozen=True)
class Particle:
    s: int
    d: int
    z: int
    belief: GaussianBelief
    log_weight: float


@dataclass(frozen=True)
class FrameMarginals:
    """Weighted statistics of one frame, taken before resampling."""

    s: np.ndarray  # (S,)
    sz: np.ndarray  # (S, Z) joint of action and primitive
    reset: float  # mass on d == 1
    x: np.ndarray  # weighted mean of the beliefs
    log_evidence: float  # log p(y_t | y_1:t-1) estimate


@dataclass(frozen=True)
class FilterState:
    s: np.ndarray
    d: np.ndarray
    z: np.ndarray
    means: np.ndarray  # (N, M)
    covs: np.ndarray  # (N, M, M)
    log_w: np.ndarray  # normalized log-weights
    t: int  # frames consumed
    seed: int
    history: tuple[FrameMarginals, ...] = ()
    ess_threshold: float | None = None
    diagnostics: tuple[str, ...] = field(default=(), repr=False)

    @property
    def n_particles(self) -> int:
        return self.s.size

    @property
    def particles(self) -> list[Particle]:
        return [
            Particle(int(self.s[n]), int(self.d[n]), int(self.z[n]),
                     GaussianBelief(self.means[n], self.covs[n]), float(self.log_w[n]))
            for n in range(self.n_particles)
        ]

    @property
    def log_evidence(self) -> float:
        return float(sum(h.log_evidence for h in self.history))


def _frame_rng(seed: int, frame: int) -> np.random.Generator:
    # key from the seed, the frame in the upper counter words: disjoint streams
    key = int(seed) % (1 << 64)
    return np.random.Generator(np.random.Philox(key=key, counter=[0, 0, int(frame), 0]))


def _categorical(probs: np.ndarray, u: np.ndarray, limit: np.ndarray | None = None) -> np.ndarray:
    """Row-wise inverse-CDF draws; ``limit`` caps the index per row."""
    cdf = np.cumsum(probs, axis=-1)
    idx = np.sum(u[:, None] >= cdf, axis=-1)
    cap = probs.shape[-1] - 1 if limit is None else limit - 1
    return np.minimum(idx, cap)


def systematic_resample(weights: np.ndarray, u: float) -> np.ndarray:
    """Indices drawn by systematic resampling with offset ``u`` in [0, 1)."""
    n = weights.size
    cdf = np.cumsum(weights)
    cdf[-1] = 1.0
    pos = (u + np.arange(n)) / n
    return np.minimum(np.searchsorted(cdf, pos, side="right"), n - 1)


def _marginals(model: FullModel, s, z, d, means, w, log_ev: float) -> FrameMarginals:
    S, Z = model.n_actions, model.max_primitives
    ps = np.bincount(s, weights=w, minlength=S)
    psz = np.bincount(s * Z + z, weights=w, minlength=S * Z).reshape(S, Z)
    return FrameMarginals(ps, psz, float(w[d == 1].sum()), w @ means, float(log_ev))


def _normalize(log_w: np.ndarray, diagnostics: list[str], t: int) -> tuple[np.ndarray, float]:
    good = np.isfinite(log_w)
    if not np.any(good):
        msg = f"frame {t}: every particle weight vanished; weights reset to uniform"
        warnings.warn(msg, FallbackWarning, stacklevel=3)
        diagnostics.append(msg)
        return np.full(log_w.size, -np.log(log_w.size)), -np.inf
    log_w = np.where(good, log_w, -np.inf)
    tot = logsumexp(log_w)
    return log_w - tot, float(tot)


def _finish_frame(model, state_fields, log_w, log_ev, rng, ess_threshold, diagnostics, t, history):
    s, d, z, means, covs = state_fields
    w = np.exp(log_w)
    history = history + (_marginals(model, s, z, d, means, w, log_ev),)
    n = s.size
    resample = True
    if ess_threshold is not None:
        resample = 1.0 / np.sum(w * w) < ess_threshold * n
    if resample:
        idx = systematic_resample(w, rng.random())
        s, d, z, means, covs = s[idx], d[idx], z[idx], means[idx], covs[idx]
        log_w = np.full(n, -np.log(n))
    return s, d, z, means, covs, log_w, history


def _regimes(pk, s, z):
    return pk.A[s, z], pk.B[s, z], pk.Q[s, z], pk.R[s, z]


def init_filter(model: FullModel, y1, n_particles: int, seed: int,
                ess_threshold: float | None = None) -> FilterState:
    """Draw the first frame's particles and weight them by the first observation."""
    if n_particles < 1:
        raise ValueError(f"n_particles must be >= 1, got {n_particles}")
    y1 = np.asarray(y1, dtype=float).reshape(-1)
    if y1.size != model.obs_dim:
        raise ValueError(f"observation has dimension {y1.size}, model expects {model.obs_dim}")
    pk = model.packed
    rng = _frame_rng(seed, 0)
    u = rng.random((n_particles, 2))
    s = _categorical(np.broadcast_to(model.init_action, (n_particles, model.n_actions)), u[:, 0])
    z = _categorical(pk.init_primitive[s], u[:, 1], pk.n_primitives[s])
    d = np.ones(n_particles, dtype=int)
    M = model.state_dim
    means = np.broadcast_to(model.init_state.mean, (n_particles, M)).copy()
    covs = np.broadcast_to(model.init_state.cov, (n_particles, M, M)).copy()
    means, covs, log_ev = batch_kalman_step(means, covs, y1, *_regimes(pk, s, z))
    diagnostics: list[str] = []
    log_w, tot = _normalize(log_ev - np.log(n_particles), diagnostics, 0)
    s, d, z, means, covs, log_w, history = _finish_frame(
        model, (s, d, z, means, covs), log_w, tot, rng, ess_threshold, diagnostics, 0, ())
    return FilterState(s, d, z, means, covs, log_w, 1, seed, history, ess_threshold, tuple(diagnostics))


def step(state: FilterState, y, model: FullModel) -> FilterState:
    """Advance the filter by one observation."""
    y = np.asarray(y, dtype=float).reshape(-1)
    if y.size != model.obs_dim:
        raise ValueError(f"observation has dimension {y.size}, model expects {model.obs_dim}")
    pk = model.packed
    t = state.t
    n = state.n_particles
    rng = _frame_rng(state.seed, t)
    u = rng.random((n, 3))
    i, j, d = state.s, state.z, state.d
    gate = pk.terminal[i, j]
    w = pk.omega[i, j]
    offset = pk.nu[i] * (d - pk.beta[i])
    tilt = np.any(w != 0)

    # proposal: reset probability at the belief mean
    rho_hat = np.where(gate, np.clip(expit(offset + np.sum(w * state.means, axis=1)), PROB_EPS, 1 - PROB_EPS), 0.0)
    reset = u[:, 0] < rho_hat
    s_new = np.where(reset, _categorical(pk.a[i], u[:, 1]), i)
    z_reset = _categorical(pk.init_primitive[s_new], u[:, 2], pk.n_primitives[s_new])
    z_cont = _categorical(pk.theta[i, j], u[:, 2], pk.n_primitives[i])
    z_new = np.where(reset, z_reset, z_cont)
    d_new = np.where(reset, 1, d + 1)
    regimes = _regimes(pk, s_new, z_new)

    # target: evidence times expected duration factor
    means, covs, log_ev = batch_kalman_step(state.means, state.covs, y, *regimes)
    if tilt:
        pm, pc, log_c3 = batch_condition_previous_state(state.means, state.covs, y, *regimes)
        arg_mean = offset + np.sum(w * pm, axis=1)
        arg_var = np.maximum(np.einsum("ni,nij,nj->n", w, pc, w), 0.0)
    else:
        log_c3 = log_ev
        arg_mean, arg_var = offset, np.zeros(n)
    rho = np.where(gate, logistic_gaussian(arg_mean, arg_var), 0.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(reset, np.log(rho) - np.log(rho_hat), np.log1p(-rho) - np.log1p(-rho_hat))
    ratio = np.where(gate, ratio, 0.0)

    diagnostics = list(state.diagnostics)
    log_w, tot = _normalize(state.log_w + log_c3 + ratio, diagnostics, t)
    s, d, z, means, covs, log_w, history = _finish_frame(
        model, (s_new, d_new, z_new, means, covs), log_w, tot, rng, state.ess_threshold, diagnostics, t,
        state.history)
    return replace(state, s=s, d=d, z=z, means=means, covs=covs, log_w=log_w, t=t + 1,
                   history=history, diagnostics=tuple(diagnostics))


def run_filter(model: FullModel, obs, n_particles: int, seed: int,
               ess_threshold: float | None = None) -> FilterState:
    """Filter a whole ``(T, P)`` sequence."""
    y = np.asarray(obs, dtype=float)
    y = y.reshape(y.shape[0], -1)
    if y.shape[0] == 0:
        raise ValueError("empty observation sequence")
    state = init_filter(model, y[0], n_particles, seed, ess_threshold)
    for t in range(1, y.shape[0]):
        state = step(state, y[t], model)
    return state


# -- label extraction ----------------------------------------------------------

def _durations(s: np.ndarray, boundary: np.ndarray) -> np.ndarray:
    d = np.ones(s.size, dtype=int)
    for t in range(1, s.size):
        if not boundary[t]:
            d[t] = d[t - 1] + 1
    return d


def extract_labels(history) -> HiddenPath:
    """Per-frame marginal argmax labels from a filter history.

    Accepts a :class:`FilterState` or its ``history``. The action is the
    argmax of the action marginal, the primitive the argmax of the joint
    within that action (ties to the lower index). A segment starts where the
    action changes or where most of the mass has just reset.
    """
    hist = history.history if isinstance(history, FilterState) else tuple(history)
    if not hist:
        raise ValueError("empty filter history")
    s = np.array([int(np.argmax(h.s)) for h in hist])
    z = np.array([int(np.argmax(h.sz[si])) for h, si in zip(hist, s)])
    reset = np.array([h.reset for h in hist])
    boundary = np.zeros(s.size, dtype=bool)
    boundary[0] = True
    boundary[1:] = (s[1:] != s[:-1]) | (reset[1:] > 0.5)
    x = np.vstack([h.x for h in hist])
    return HiddenPath(s, _durations(s, boundary), z, x)


def dominant_primitive(labels: HiddenPath, segment) -> int:
    """Most frequent primitive in ``range(start, stop)``; ties to the lower index."""
    start, stop = segment
    if not 0 <= start < stop <= len(labels):
        raise ValueError(f"segment {segment} is empty or outside the sequence of length {len(labels)}")
    return int(np.argmax(np.bincount(labels.z[start:stop])))


# -- offline boundary refinement -----------------------------------------------

def _kalman_means(model: FullModel, s, z, y, mean, cov):
    """Filtered means and covariances along a fixed discrete path."""
    pk = model.packed
    T = y.shape[0]
    M = mean.size
    means = np.empty((T, M))
    covs = np.empty((T, M, M))
    for t in range(T):
        A, B, Q, R = pk.A[s[t], z[t]], pk.B[s[t], z[t]], pk.Q[s[t], z[t]], pk.R[s[t], z[t]]
        pm = A @ mean
        pc = A @ cov @ A.T + Q
        Sm = B @ pc @ B.T + R
        K = np.linalg.solve(Sm, B @ pc).T
        mean = pm + K @ (y[t] - B @ pm)
        cov = pc - K @ B @ pc
        cov = 0.5 * (cov + cov.T)
        means[t], covs[t] = mean, cov
    return means, covs


def _segment_primitives(model: FullModel, action: int, y, start: int, stop: int, T: int) -> np.ndarray:
    from .training import assign_primitives

    y_prev = y[start - 1] if start > 0 else None
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", FallbackWarning)
        z, _ = assign_primitives(model.actions[action], y[start:stop], y_prev, last_in_terminal=stop < T)
    return z


def _path_from_segments(model, y, starts, actions):
    T = y.shape[0]
    s = np.empty(T, dtype=int)
    z = np.empty(T, dtype=int)
    d = np.empty(T, dtype=int)
    bounds = list(starts) + [T]
    for k, a in enumerate(actions):
        lo, hi = bounds[k], bounds[k + 1]
        s[lo:hi] = a
        d[lo:hi] = np.arange(1, hi - lo + 1)
        z[lo:hi] = _segment_primitives(model, a, y, lo, hi, T)
    return s, d, z


def refine_boundaries(model: FullModel, obs, labels: HiddenPath, window: int = REFINE_WINDOW) -> HiddenPath:
    """Move each boundary to the best position within ``window/2`` frames.

    Boundaries are visited left to right. For each candidate position the
    two adjacent segments get their primitives re-assigned, states are
    Kalman means along the candidate path, and the candidate is scored by
    the log joint of the frames from the left segment's start to the frame
    after the right segment. The best candidate wins; ties keep the current
    position, then the earliest.
    """
    y = np.asarray(obs, dtype=float)
    y = y.reshape(y.shape[0], -1)
    T = y.shape[0]
    starts = [int(t) for t in np.flatnonzero(labels.d == 1)]
    if half_window(window) == 0 or len(starts) < 2:
        return labels
    actions = [int(labels.s[t]) for t in starts]
    s, d, z = _path_from_segments(model, y, starts, actions)
    m0, P0 = model.init_state.mean, model.init_state.cov
    x, P = _kalman_means(model, s, z, y, m0, P0)
    half = half_window(window)
    for k in range(1, len(starts)):
        prev, b = starts[k - 1], starts[k]
        nxt = starts[k + 1] if k + 1 < len(starts) else T
        lo, hi = max(prev + 1, b - half), min(nxt - 1, b + half)
        if lo > hi:
            continue
        stop = min(nxt + 1, T)
        before = (x[prev - 1], P[prev - 1]) if prev > 0 else (m0, P0)
        best_c, best_score, best_fields = b, -np.inf, None
        for c in range(lo, hi + 1):
            cs, cd, cz = s.copy(), d.copy(), z.copy()
            cs[prev:c], cs[c:nxt] = actions[k - 1], actions[k]
            cd[prev:c] = np.arange(1, c - prev + 1)
            cd[c:nxt] = np.arange(1, nxt - c + 1)
            cz[prev:c] = _segment_primitives(model, actions[k - 1], y, prev, c, T)
            cz[c:nxt] = _segment_primitives(model, actions[k], y, c, nxt, T)
            cx, cP = x.copy(), P.copy()
            cx[prev:stop], cP[prev:stop] = _kalman_means(model, cs[prev:stop], cz[prev:stop], y[prev:stop], *before)
            path = HiddenPath(cs, cd, cz, cx)
            score = float(np.sum(log_joint_terms(model, path, y, prev, stop,
                                                 x_before=before[0] if prev > 0 else None)))
            better = score > best_score or (score == best_score and c == b)
            if better:
                best_c, best_score, best_fields = c, score, (cs, cd, cz, cx, cP)
        if best_fields is None:
            continue
        starts[k] = best_c
        s, d, z, x[prev:stop], P[prev:stop] = (best_fields[0], best_fields[1], best_fields[2],
                                                best_fields[3][prev:stop], best_fields[4][prev:stop])
    # frames past each window were scored against stale states; recompute once
    x, _ = _kalman_means(model, s, z, y, m0, P0)
    return HiddenPath(s, d, z, x)


def half_window(window: int) -> int:
    if window < 0:
        raise ValueError(f"window must be nonnegative, got {window}")
    return int(window) // 2
