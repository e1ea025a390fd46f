"""The full switching model: containers, validation, sampling and scoring.

Indices are 0-based throughout. Frame ``t`` carries action ``s[t]``,
duration ``d[t]`` (1 on the first frame of a segment), primitive ``z[t]``
and continuous state ``x[t]``. The initial-state Gaussian describes the
state *before* the first frame, so ``x[0] ~ N(A m0, A P0 A' + Q)`` under the
first frame's regime.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy.special import expit, log_expit

from .duration import DurationParams
from .gaussian import GaussianBelief, LdsParams, psd_sqrt, psd_violations
from .stm import BLOCK_TOL, ROW_TOL, StageMap, stage_marginal
from .errors import BlockConsistencyError

_LOG_2PI = np.log(2.0 * np.pi)


@dataclass(frozen=True)
class ActionModel:
    """Substructure of one action: transitions, stages, start law and regimes."""

    theta: np.ndarray
    stages: StageMap
    init_primitive: np.ndarray
    lds: tuple[LdsParams, ...]

    def __post_init__(self):
        object.__setattr__(self, "theta", np.asarray(self.theta, dtype=float))
        object.__setattr__(self, "init_primitive", np.asarray(self.init_primitive, dtype=float).reshape(-1))
        object.__setattr__(self, "lds", tuple(self.lds))

    @property
    def n_primitives(self) -> int:
        return self.stages.n_primitives


@dataclass(frozen=True)
class FullModel:
    actions: tuple[ActionModel, ...]
    duration: DurationParams
    transition: np.ndarray
    init_action: np.ndarray
    init_state: GaussianBelief

    def __post_init__(self):
        object.__setattr__(self, "actions", tuple(self.actions))
        object.__setattr__(self, "transition", np.asarray(self.transition, dtype=float))
        object.__setattr__(self, "init_action", np.asarray(self.init_action, dtype=float).reshape(-1))

    @property
    def n_actions(self) -> int:
        return len(self.actions)

    @property
    def state_dim(self) -> int:
        return self.init_state.dim

    @property
    def obs_dim(self) -> int:
        return self.actions[0].lds[0].obs_dim

    @property
    def max_primitives(self) -> int:
        return max(a.n_primitives for a in self.actions)

    @cached_property
    def packed(self) -> "PackedModel":
        return PackedModel.build(self)


@dataclass(frozen=True)
class PackedModel:
    """Dense, padded arrays of a :class:`FullModel` for vectorized code.

    Primitive axes are padded to the largest primitive count; padded slots
    have zero probability everywhere.
    """

    A: np.ndarray  # (S, Z, M, M)
    B: np.ndarray  # (S, Z, P, M)
    Q: np.ndarray
    R: np.ndarray
    LQ: np.ndarray  # Cholesky factors (jittered if singular)
    LR: np.ndarray
    theta: np.ndarray  # (S, Z, Z)
    init_primitive: np.ndarray  # (S, Z)
    terminal: np.ndarray  # (S, Z) bool
    nu: np.ndarray
    beta: np.ndarray
    omega: np.ndarray  # (S, Z, M)
    a: np.ndarray
    init_action: np.ndarray
    n_primitives: np.ndarray

    @classmethod
    def build(cls, model: FullModel) -> "PackedModel":
        S, Z, M, P = model.n_actions, model.max_primitives, model.state_dim, model.obs_dim
        A = np.tile(np.eye(M), (S, Z, 1, 1))
        B = np.zeros((S, Z, P, M))
        Q = np.tile(np.eye(M), (S, Z, 1, 1))
        R = np.tile(np.eye(P), (S, Z, 1, 1))
        theta = np.zeros((S, Z, Z))
        init = np.zeros((S, Z))
        terminal = np.zeros((S, Z), dtype=bool)
        omega = np.zeros((S, Z, M))
        for i, act in enumerate(model.actions):
            k = act.n_primitives
            for j, lds in enumerate(act.lds):
                A[i, j], B[i, j], Q[i, j], R[i, j] = lds.A, lds.B, lds.Q, lds.R
            theta[i, :k, :k] = act.theta
            init[i, :k] = act.init_primitive
            terminal[i, :k] = np.asarray(act.stages.g) == act.stages.terminal
            omega[i, :k] = model.duration.omega[i].reshape(k, M)
        LQ = np.zeros_like(Q)
        LR = np.zeros_like(R)
        for i in range(S):
            for j in range(Z):
                LQ[i, j] = psd_sqrt(Q[i, j]) if M else Q[i, j]
                LR[i, j] = psd_sqrt(R[i, j])
        return cls(A, B, Q, R, LQ, LR, theta, init, terminal, model.duration.nu.copy(),
                   model.duration.beta.copy(), omega, model.transition.copy(),
                   model.init_action.copy(), np.array([a.n_primitives for a in model.actions]))


@dataclass(frozen=True)
class HiddenPath:
    s: np.ndarray
    d: np.ndarray
    z: np.ndarray
    x: np.ndarray  # (T, M)

    def __post_init__(self):
        s = np.asarray(self.s, dtype=int).reshape(-1)
        object.__setattr__(self, "s", s)
        object.__setattr__(self, "d", np.asarray(self.d, dtype=int).reshape(-1))
        object.__setattr__(self, "z", np.asarray(self.z, dtype=int).reshape(-1))
        object.__setattr__(self, "x", np.asarray(self.x, dtype=float).reshape(s.size, -1))

    def __len__(self) -> int:
        return self.s.size

    def boundaries(self) -> np.ndarray:
        """Frames (other than 0) that start a new segment."""
        return np.flatnonzero(self.d == 1)[1:] if self.d.size else self.d

    def segments(self) -> list[tuple[int, int]]:
        """Half-open ``(start, stop)`` frame ranges of the segments."""
        starts = np.flatnonzero(self.d == 1).tolist()
        return list(zip(starts, starts[1:] + [len(self)]))


def path_violations(model: FullModel, path: HiddenPath) -> list[str]:
    """Structural illegalities of a hidden path under ``model``."""
    out = []
    s, d, z = path.s, path.d, path.z
    if s.size == 0:
        return out
    if d[0] != 1:
        out.append("d[0] must be 1")
    for t in range(1, s.size):
        if d[t] == 1:
            act = model.actions[s[t - 1]]
            if act.stages.g[z[t - 1]] != act.stages.terminal:
                out.append(f"frame {t}: reset from non-terminal primitive {z[t - 1]}")
        elif d[t] != d[t - 1] + 1:
            out.append(f"frame {t}: duration {d[t]} does not follow {d[t - 1]}")
        elif s[t] != s[t - 1]:
            out.append(f"frame {t}: action changes without a reset")
    return out


def _prob_vector_violations(p, name, n) -> list[str]:
    p = np.asarray(p, dtype=float)
    if p.shape != (n,):
        return [f"{name}: expected shape ({n},), got {p.shape}"]
    out = []
    if np.any(p < 0) or not np.all(np.isfinite(p)):
        out.append(f"{name}: negative or non-finite entries")
    if abs(p.sum() - 1.0) > ROW_TOL:
        out.append(f"{name}: sums to {p.sum():.12g}, not 1 (tolerance {ROW_TOL:g})")
    return out


def _stochastic_violations(P, name, n) -> list[str]:
    P = np.asarray(P, dtype=float)
    if P.shape != (n, n):
        return [f"{name}: expected shape ({n}, {n}), got {P.shape}"]
    out = []
    if np.any(P < 0) or not np.all(np.isfinite(P)):
        out.append(f"{name}: negative or non-finite entries")
    sums = P.sum(axis=1)
    for i in np.flatnonzero(np.abs(sums - 1.0) > ROW_TOL):
        out.append(f"{name}: row {i} sums to {sums[i]:.12g}, not 1 (tolerance {ROW_TOL:g})")
    return out


def validate(model: FullModel) -> list[str]:
    """List every invariant the model breaks; empty when valid."""
    out = []
    S = model.n_actions
    if S < 1:
        return ["model has no actions"]
    M, P = model.state_dim, model.obs_dim
    out += [f"init_state.{v}" for v in model.init_state.violations()]
    out += _prob_vector_violations(model.init_action, "init_action", S)
    out += _stochastic_violations(model.transition, "transition", S)
    out += model.duration.violations()
    for i, act in enumerate(model.actions):
        tag = f"actions[{i}]"
        k = act.n_primitives
        out += [f"{tag}.stages: {v}" for v in act.stages.violations()]
        out += _stochastic_violations(act.theta, f"{tag}.theta", k)
        out += _prob_vector_violations(act.init_primitive, f"{tag}.init_primitive", k)
        if act.init_primitive.shape == (k,):
            off = [j for j in range(k) if act.stages.g[j] != 0 and act.init_primitive[j] > 0]
            if off:
                out.append(f"{tag}.init_primitive: mass on non-starting primitives {off}")
        if act.theta.shape == (k, k):
            try:
                stage_marginal(act.theta, act.stages)
            except BlockConsistencyError as exc:
                out.append(f"{tag}.theta: block consistency (tolerance {BLOCK_TOL:g}): {exc}")
        if len(act.lds) != k:
            out.append(f"{tag}.lds: {len(act.lds)} regimes for {k} primitives")
        for j, lds in enumerate(act.lds):
            if lds.A.shape != (M, M) or lds.B.shape != (P, M):
                out.append(f"{tag}.lds[{j}]: dimensions A{lds.A.shape} B{lds.B.shape} vs state {M}, obs {P}")
            out += [f"{tag}.lds[{j}].{v}" for v in psd_violations(lds.Q, "Q") + psd_violations(lds.R, "R")]
        if i < len(model.duration.omega) and model.duration.omega[i].shape != (k, M):
            out.append(f"duration.omega[{i}]: shape {model.duration.omega[i].shape}, expected ({k}, {M})")
    return out


def _gaussian_sampler(C: np.ndarray) -> np.ndarray:
    """Square root of a PSD matrix that is exact for singular input."""
    if C.size == 0:
        return C
    w, V = np.linalg.eigh(0.5 * (C + C.T))
    return V * np.sqrt(np.clip(w, 0.0, None))


def sample_sequence(model: FullModel, t_max: int, seed: int) -> tuple[HiddenPath, np.ndarray]:
    """Ancestral sample of ``t_max`` frames. Returns the hidden path and ``y``."""
    rng = np.random.default_rng(seed)
    pk = model.packed
    M, P = model.state_dim, model.obs_dim
    sq_Q = {}
    sq_R = {}

    def regime(i, j):
        if (i, j) not in sq_Q:
            sq_Q[i, j] = _gaussian_sampler(pk.Q[i, j])
            sq_R[i, j] = _gaussian_sampler(pk.R[i, j])
        return pk.A[i, j], pk.B[i, j], sq_Q[i, j], sq_R[i, j]

    s = np.zeros(t_max, dtype=int)
    d = np.ones(t_max, dtype=int)
    z = np.zeros(t_max, dtype=int)
    x = np.zeros((t_max, M))
    y = np.zeros((t_max, P))
    prev = model.init_state.mean + _gaussian_sampler(model.init_state.cov) @ rng.standard_normal(M)
    for t in range(t_max):
        if t == 0:
            s[t] = rng.choice(model.n_actions, p=model.init_action)
            z[t] = rng.choice(pk.init_primitive.shape[1], p=pk.init_primitive[s[t]])
        else:
            i, j = s[t - 1], z[t - 1]
            rho = 0.0
            if pk.terminal[i, j]:
                rho = expit(pk.nu[i] * (d[t - 1] - pk.beta[i]) + pk.omega[i, j] @ prev)
            if rng.random() < rho:
                s[t] = rng.choice(model.n_actions, p=pk.a[i])
                z[t] = rng.choice(pk.init_primitive.shape[1], p=pk.init_primitive[s[t]])
                d[t] = 1
            else:
                s[t] = i
                z[t] = rng.choice(pk.theta.shape[2], p=pk.theta[i, j])
                d[t] = d[t - 1] + 1
        A, B, sQ, sR = regime(s[t], z[t])
        prev = A @ prev + sQ @ rng.standard_normal(M)
        x[t] = prev
        y[t] = B @ prev + sR @ rng.standard_normal(P)
    return HiddenPath(s, d, z, x), y


def _batch_logpdf(resid: np.ndarray, L: np.ndarray) -> np.ndarray:
    """``log N(resid; 0, L L')`` row-wise for stacked Cholesky factors."""
    if resid.shape[-1] == 0:
        return np.zeros(resid.shape[0])
    r = np.linalg.solve(L, resid[..., None])[..., 0]
    logdet = 2.0 * np.sum(np.log(np.diagonal(L, axis1=-2, axis2=-1)), axis=-1)
    return -0.5 * (resid.shape[-1] * _LOG_2PI + logdet + np.sum(r * r, axis=-1))


def _log(p):
    with np.errstate(divide="ignore"):
        return np.log(p)


def log_joint_terms(model: FullModel, path: HiddenPath, obs, start: int = 0, stop: int | None = None,
                    x_before: np.ndarray | None = None) -> np.ndarray:
    """Per-frame log joint contributions for frames ``start..stop-1``.

    Each entry adds the discrete transition into the frame, the state
    transition and the observation term. ``x_before`` replaces
    ``path.x[start - 1]`` when given.
    """
    pk = model.packed
    y = np.asarray(obs, dtype=float)
    stop = len(path) if stop is None else stop
    ts = np.arange(start, stop)
    s, d, z, x = path.s, path.d, path.z, path.x
    M = model.state_dim
    out = np.zeros(ts.size)
    if ts.size == 0:
        return out
    # observation terms
    Bx = np.einsum("tpm,tm->tp", pk.B[s[ts], z[ts]], x[ts])
    out += _batch_logpdf(y[ts] - Bx, pk.LR[s[ts], z[ts]])
    # state terms
    xprev = np.empty((ts.size, M))
    later = ts > 0
    xprev[later] = x[ts[later] - 1]
    if x_before is not None and start > 0:
        xprev[0] = x_before
    A = pk.A[s[ts], z[ts]]
    pred = np.einsum("tij,tj->ti", A, xprev) if M else xprev
    L = pk.LQ[s[ts], z[ts]].copy()
    if ts[0] == 0 and M:
        m0, P0 = model.init_state.mean, model.init_state.cov
        pred[0] = A[0] @ m0
        L[0] = psd_sqrt(A[0] @ P0 @ A[0].T + pk.Q[s[0], z[0]])
    out += _batch_logpdf(x[ts] - pred, L)
    # discrete terms
    for k, t in enumerate(ts):
        if t == 0:
            out[k] += _log(pk.init_action[s[0]]) + _log(pk.init_primitive[s[0], z[0]])
            if d[0] != 1:
                out[k] = -np.inf
            continue
        i, j = s[t - 1], z[t - 1]
        xp = xprev[k]
        arg = pk.nu[i] * (d[t - 1] - pk.beta[i]) + (pk.omega[i, j] @ xp if M else 0.0)
        if d[t] == 1:
            lr = log_expit(arg) if pk.terminal[i, j] else -np.inf
            out[k] += lr + _log(pk.a[i, s[t]]) + _log(pk.init_primitive[s[t], z[t]])
        elif d[t] == d[t - 1] + 1 and s[t] == i:
            lr = log_expit(-arg) if pk.terminal[i, j] else 0.0
            out[k] += lr + _log(pk.theta[i, j, z[t]])
        else:
            out[k] = -np.inf
    return out


def log_joint(model: FullModel, path: HiddenPath, obs) -> float:
    """Log joint density of a complete assignment and its observations."""
    return float(np.sum(log_joint_terms(model, path, obs)))
