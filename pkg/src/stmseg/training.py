"""Learning a full model from labelled observation sequences.

Per action, segments are pooled and a hard EM alternates between fitting
one linear regime per primitive, estimating the block-wise sparse primitive
transitions, and Viterbi re-assignment of primitives. Durations, action
transitions and boundary weights are fitted afterwards.

Only the observable-state convention is supported: the continuous state is
the feature vector itself (``B = I``), so a regime is a first-order vector
autoregression ``y[t] ~ N(A y[t-1], Q)``.
"""
from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.cluster.vq import kmeans2
from scipy.special import logsumexp

from .duration import BoundaryTrainingTuple, DurationParams, durations_from_labels, fit_dbm_omega, fit_logistic_duration
from .errors import FallbackWarning, TrainingError
from .gaussian import GaussianBelief, LdsParams, gaussian_logpdf
from .model import ActionModel, FullModel, validate
from .stm import StageMap, count_transitions, estimate_blockwise_map

log = logging.getLogger(__name__)

OBS_NOISE = 1e-4
Q_RIDGE = 1e-6
STAGE_EDGE = 0.15
LDS_MODES = ("observable-state", "latent")


@dataclass(frozen=True)
class TrainingConfig:
    n_primitives: int = 5
    n_stages: int = 3
    alpha: float | None = None  # None: alpha_fraction * transitions of the action
    alpha_fraction: float = 0.1
    max_em_iters: int = 20
    em_tol: float = 1e-4
    lds_mode: str = "observable-state"
    fit_dbm: bool = True
    seed: int = 0

    def __post_init__(self):
        if not (self.n_primitives >= self.n_stages >= 1):
            raise ValueError(
                f"need n_primitives >= n_stages >= 1, got n_primitives={self.n_primitives}, "
                f"n_stages={self.n_stages}"
            )
        if self.lds_mode not in LDS_MODES:
            raise ValueError(f"lds_mode must be one of {LDS_MODES}, got {self.lds_mode!r}")
        if self.lds_mode != "observable-state":
            raise ValueError("latent-state regimes are not supported; use lds_mode='observable-state'")
        if self.max_em_iters < 1:
            raise ValueError("max_em_iters must be >= 1")


@dataclass(frozen=True)
class LabeledDataset:
    """Observation arrays ``(T, P)`` paired with per-frame action labels."""

    sequences: tuple[tuple[np.ndarray, np.ndarray], ...]

    def __post_init__(self):
        if not self.sequences:
            raise ValueError("dataset has no sequences")
        seqs = []
        for y, lab in self.sequences:
            y = np.asarray(y, dtype=float)
            y = y.reshape(-1, 1) if y.ndim == 1 else y
            lab = np.asarray(lab, dtype=int).reshape(-1)
            if y.shape[0] != lab.size:
                raise ValueError(f"sequence has {y.shape[0]} frames but {lab.size} labels")
            if lab.size == 0:
                raise ValueError("empty sequence")
            if not np.all(np.isfinite(y)):
                raise ValueError("observations must be finite")
            if lab.size and lab.min() < 0:
                raise ValueError("labels must be nonnegative")
            seqs.append((y, lab))
        object.__setattr__(self, "sequences", tuple(seqs))

    @property
    def n_actions(self) -> int:
        return int(max(lab.max() for _, lab in self.sequences)) + 1

    @property
    def obs_dim(self) -> int:
        return self.sequences[0][0].shape[1]


@dataclass
class TrainingResult:
    model: FullModel
    em_curves: list[list[float]]
    tuples: list[BoundaryTrainingTuple] = field(default_factory=list, repr=False)

    def summary(self) -> dict:
        out = {"em_curves": self.em_curves, "actions": []}
        for i, act in enumerate(self.model.actions):
            nz = int(np.count_nonzero(act.theta))
            out["actions"].append({
                "action": i,
                "theta_nonzero": nz,
                "theta_sparsity": 1.0 - nz / act.theta.size,
                "nu": float(self.model.duration.nu[i]),
                "beta": float(self.model.duration.beta[i]),
            })
        return out


# -- initialization ----------------------------------------------------------

def kmeans(vectors, k: int, seed: int, max_iter: int = 50) -> np.ndarray:
    """Lloyd's k-means with k-means++ seeding; returns cluster indices.

    Clusters left empty are re-seeded at the point farthest from its centroid.
    """
    X = np.asarray(vectors, dtype=float)
    X = X.reshape(X.shape[0], -1)
    if k > X.shape[0]:
        raise ValueError(f"k={k} exceeds the number of vectors {X.shape[0]}")
    if k == 1:
        return np.zeros(X.shape[0], dtype=int)
    rng = np.random.default_rng(seed)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        centroids, labels = kmeans2(X, k, iter=max_iter, minit="++", missing="warn", seed=rng)
        for _ in range(k):
            sizes = np.bincount(labels, minlength=k)
            empty = np.flatnonzero(sizes == 0)
            if empty.size == 0:
                break
            dist = np.sum((X - centroids[labels]) ** 2, axis=1)
            for c in empty:
                far = int(np.argmax(dist))
                centroids[c] = X[far]
                dist[far] = -1.0
            centroids, labels = kmeans2(X, centroids, iter=max_iter, minit="matrix", missing="warn")
    return labels.astype(int)


def init_stage_split(segment_length: int, n_stages: int) -> np.ndarray:
    """Initial stage of each frame of a segment.

    The first and last ``ceil(0.15 L)`` frames go to the starting and
    terminating stages; the middle is split evenly among the other stages
    (between the two end stages when there are only two).
    """
    L, Qn = int(segment_length), int(n_stages)
    if Qn == 1:
        return np.zeros(L, dtype=int)
    edge = math.ceil(STAGE_EDGE * L)
    mid = L - 2 * edge
    inner = Qn - 2
    if L < Qn or mid < inner or edge < 1:
        return np.minimum(np.arange(L) * Qn // max(L, 1), Qn - 1)
    out = np.empty(L, dtype=int)
    out[:edge] = 0
    out[L - edge:] = Qn - 1
    k = np.arange(mid)
    if inner == 0:
        out[edge:L - edge] = np.where(k < mid / 2, 0, 1)
    else:
        out[edge:L - edge] = 1 + k * inner // mid
    return out


def _stage_budget(frames_per_stage: np.ndarray, n_primitives: int) -> list[int]:
    """Largest-remainder split of primitives, at least one per stage."""
    n_stages = frames_per_stage.size
    share = frames_per_stage / max(frames_per_stage.sum(), 1)
    extra = n_primitives - n_stages
    raw = share * extra
    budget = np.floor(raw).astype(int)
    order = np.argsort(-(raw - budget), kind="stable")
    budget[order[: extra - budget.sum()]] += 1
    return (budget + 1).tolist()


# -- regimes -----------------------------------------------------------------

def fit_lds(prev, nxt, mode: str = "observable-state", fallback_cov=None) -> LdsParams:
    """Least-squares vector autoregression ``nxt ~ A prev`` with residual ``Q``."""
    if mode != "observable-state":
        raise ValueError("latent-state regimes are not supported")
    X = np.asarray(prev, dtype=float)
    Y = np.asarray(nxt, dtype=float)
    P = Y.shape[1] if Y.ndim == 2 else int(np.asarray(fallback_cov).shape[0])
    X = X.reshape(-1, P)
    Y = Y.reshape(-1, P)
    eye = np.eye(P)
    if X.shape[0] < P + 1:
        warnings.warn(f"only {X.shape[0]} assigned pairs for a {P}-dimensional regime; using identity dynamics",
                      FallbackWarning, stacklevel=2)
        cov = eye if fallback_cov is None else np.asarray(fallback_cov, dtype=float)
        return LdsParams(eye, eye, cov + Q_RIDGE * eye, OBS_NOISE * eye)
    At, *_ = np.linalg.lstsq(X, Y, rcond=None)
    A = At.T
    resid = Y - X @ At
    Q = resid.T @ resid / X.shape[0]
    Q = 0.5 * (Q + Q.T) + Q_RIDGE * eye
    return LdsParams(A, eye, Q, OBS_NOISE * eye)


def _emission_matrix(lds: Sequence[LdsParams], y: np.ndarray, y_prev) -> np.ndarray:
    """``E[t, j] = log N(y[t]; A_j y[t-1], Q_j)``; the first row is 0 without ``y_prev``."""
    L, P = y.shape
    E = np.zeros((L, len(lds)))
    prev = np.vstack([y_prev.reshape(1, P), y[:-1]]) if y_prev is not None else y[:-1]
    cur = y if y_prev is not None else y[1:]
    off = 0 if y_prev is not None else 1
    for j, reg in enumerate(lds):
        resid = cur - prev @ reg.A.T
        Lc = np.linalg.cholesky(reg.Q)
        r = np.linalg.solve(Lc, resid.T)
        logdet = 2.0 * np.sum(np.log(np.diag(Lc)))
        E[off:, j] = -0.5 * (P * np.log(2 * np.pi) + logdet + np.sum(r * r, axis=0))
    return E


def _viterbi(log_init, log_trans, E, last_mask=None):
    L, K = E.shape
    score = log_init + E[0]
    back = np.zeros((L, K), dtype=int)
    for t in range(1, L):
        cand = score[:, None] + log_trans
        back[t] = np.argmax(cand, axis=0)
        score = cand[back[t], np.arange(K)] + E[t]
    if last_mask is not None:
        score = np.where(last_mask, score, -np.inf)
    path = np.empty(L, dtype=int)
    path[-1] = int(np.argmax(score))
    best = float(score[path[-1]])
    for t in range(L - 1, 0, -1):
        path[t - 1] = back[t, path[t]]
    return path, best


def _log(p):
    with np.errstate(divide="ignore"):
        return np.log(p)


def _start_law(action: ActionModel, first_in_start: bool) -> np.ndarray:
    if first_in_start:
        return _log(action.init_primitive)
    return np.zeros(action.n_primitives)


def assign_primitives(action: ActionModel, segment, y_prev=None, *, first_in_start: bool = True,
                      last_in_terminal: bool = False, stage_prior=None) -> tuple[np.ndarray, float]:
    """Most probable primitive path through one segment (hard E-step).

    Frame scores are ``log N(y[t]; A_j y[t-1], Q_j)``; the first frame uses the
    predecessor ``y_prev`` when given and a constant otherwise, plus the
    start law when ``first_in_start``. ``last_in_terminal`` forces the last
    frame into the terminating stage. ``stage_prior`` is an optional
    ``(L, n_stages)`` log-weight added per frame. Returns ``(path, score)``;
    ties go to the lower index. A segment too short to reach the
    terminating stage is decoded without that constraint.
    """
    y = np.asarray(segment, dtype=float)
    y = y.reshape(y.shape[0], -1)
    E = _emission_matrix(action.lds, y, None if y_prev is None else np.asarray(y_prev, dtype=float))
    if stage_prior is not None:
        E = E + np.asarray(stage_prior)[:, list(action.stages.g)]
    g = np.asarray(action.stages.g)
    last = (g == action.stages.terminal) if last_in_terminal else None
    log_init = _start_law(action, first_in_start)
    path, best = _viterbi(log_init, _log(action.theta), E, last)
    if not np.isfinite(best) and last is not None:
        # too short to reach the terminating stage: drop that constraint
        warnings.warn(f"segment of {len(y)} frames cannot end in the terminating stage; constraint dropped",
                      FallbackWarning, stacklevel=2)
        last = None
        path, best = _viterbi(log_init, _log(action.theta), E, last)
    if not np.isfinite(best):
        warnings.warn("no feasible primitive path; retrying with floored transitions", FallbackWarning, stacklevel=2)
        K = action.n_primitives
        floor = 1e-6
        trans = np.log((1 - floor) * action.theta + floor / K)
        init = np.where(np.isfinite(log_init), log_init, np.log(floor))
        path, best = _viterbi(init, trans, E, last)
    return path, best


def primitive_posteriors(action: ActionModel, segment, y_prev=None, *, first_in_start: bool = True,
                         last_in_terminal: bool = False) -> np.ndarray:
    """Per-frame ``p(z[t] = j | segment)`` by forward-backward over primitives."""
    y = np.asarray(segment, dtype=float).reshape(len(segment), -1)
    E = _emission_matrix(action.lds, y, None if y_prev is None else np.asarray(y_prev, dtype=float))
    lt = _log(action.theta)
    L, K = E.shape
    fw = np.empty((L, K))
    fw[0] = _start_law(action, first_in_start) + E[0]
    for t in range(1, L):
        fw[t] = logsumexp(fw[t - 1][:, None] + lt, axis=0) + E[t]
    bw = np.zeros((L, K))
    if last_in_terminal:
        g = np.asarray(action.stages.g)
        bw[-1] = np.where(g == action.stages.terminal, 0.0, -np.inf)
    for t in range(L - 2, -1, -1):
        bw[t] = logsumexp(lt + (E[t + 1] + bw[t + 1])[None, :], axis=1)
    post = fw + bw
    norm = logsumexp(post, axis=1, keepdims=True)
    if not np.all(np.isfinite(norm)):
        if last_in_terminal:
            return primitive_posteriors(action, y, y_prev, first_in_start=first_in_start)
        return np.full((L, K), 1.0 / K)
    return np.exp(post - norm)


# -- per-action hard EM -------------------------------------------------------

@dataclass
class _Segment:
    y: np.ndarray
    y_prev: np.ndarray | None
    ends_with_boundary: bool


def _segments_of(dataset: LabeledDataset, action: int) -> list[_Segment]:
    out = []
    for y, lab in dataset.sequences:
        d = durations_from_labels(lab)
        starts = np.flatnonzero(d == 1).tolist() + [lab.size]
        for a, b in zip(starts[:-1], starts[1:]):
            if lab[a] == action:
                out.append(_Segment(y[a:b], y[a - 1] if a > 0 else None, b < lab.size))
    return out


def _complete_ll(action: ActionModel, segs, paths) -> float:
    """Hard-assignment complete-data log-likelihood (no stage template)."""
    total = 0.0
    lt = _log(action.theta)
    li = _log(action.init_primitive)
    for seg, z in zip(segs, paths):
        E = _emission_matrix(action.lds, seg.y, seg.y_prev)
        total += li[z[0]] + float(np.sum(E[np.arange(len(z)), z]))
        if len(z) > 1:
            total += float(np.sum(lt[z[:-1], z[1:]]))
    return total


def _fit_regimes(segs, paths, n_primitives, fallback_cov) -> tuple[LdsParams, ...]:
    P = segs[0].y.shape[1]
    prev = [[] for _ in range(n_primitives)]
    nxt = [[] for _ in range(n_primitives)]
    for seg, z in zip(segs, paths):
        if seg.y_prev is not None:
            prev[z[0]].append(seg.y_prev[None, :])
            nxt[z[0]].append(seg.y[:1])
        for j in range(n_primitives):
            sel = np.flatnonzero(z[1:] == j) + 1
            if sel.size:
                prev[j].append(seg.y[sel - 1])
                nxt[j].append(seg.y[sel])
    out = []
    for j in range(n_primitives):
        X = np.vstack(prev[j]) if prev[j] else np.zeros((0, P))
        Y = np.vstack(nxt[j]) if nxt[j] else np.zeros((0, P))
        out.append(fit_lds(X, Y, fallback_cov=fallback_cov))
    return tuple(out)


def _initial_paths(segs, config: TrainingConfig, seed: int):
    templates = [init_stage_split(len(seg.y), config.n_stages) for seg in segs]
    stage_of = np.concatenate(templates)
    budget = _stage_budget(np.bincount(stage_of, minlength=config.n_stages).astype(float), config.n_primitives)
    stages = StageMap.from_counts(budget)
    feats = []
    for seg in segs:
        prev = np.vstack([seg.y_prev[None, :] if seg.y_prev is not None else seg.y[:1], seg.y[:-1]])
        feats.append(np.hstack([seg.y, seg.y - prev]))
    F = np.vstack(feats)
    F = (F - F.mean(axis=0)) / np.where(F.std(axis=0) > 0, F.std(axis=0), 1.0)
    z_all = np.empty(F.shape[0], dtype=int)
    first = np.cumsum([0] + budget)
    for q in range(config.n_stages):
        idx = np.flatnonzero(stage_of == q)
        k = min(budget[q], idx.size) if idx.size else 0
        if k == 0:
            continue
        z_all[idx] = first[q] + kmeans(F[idx], k, seed + 7919 * q)
    paths = np.split(z_all, np.cumsum([len(s.y) for s in segs])[:-1])
    return stages, paths, templates


def _template_prior(template: np.ndarray, n_stages: int, weight: float = 0.9) -> np.ndarray:
    if n_stages == 1:
        return np.zeros((template.size, 1))
    out = np.full((template.size, n_stages), math.log((1 - weight) / (n_stages - 1)))
    out[np.arange(template.size), template] = math.log(weight)
    return out


def _first_frame_law(paths, stages: StageMap) -> np.ndarray:
    counts = np.bincount([int(z[0]) for z in paths], minlength=stages.n_primitives).astype(float)
    counts[np.asarray(stages.g) != 0] = 0.0
    if counts.sum() == 0:
        counts[stages.members(0)] = 1.0
    return counts / counts.sum()


def train_action_stm(segs: list[_Segment], config: TrainingConfig, seed: int):
    """Hard EM for one action. Returns ``(ActionModel, em_curve)``."""
    stages, paths, templates = _initial_paths(segs, config, seed)
    K = config.n_primitives
    Y = np.vstack([s.y for s in segs])
    data_cov = np.cov(Y.T).reshape(Y.shape[1], Y.shape[1]) if Y.shape[0] > 1 else np.eye(Y.shape[1])
    n_trans = sum(len(s.y) - 1 for s in segs)
    alpha = config.alpha if config.alpha is not None else config.alpha_fraction * n_trans
    curve: list[float] = []
    best = None
    for it in range(config.max_em_iters):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", FallbackWarning)
            lds = _fit_regimes(segs, paths, K, data_cov)
            theta, _ = estimate_blockwise_map(count_transitions(paths, K), stages, alpha)
        act = ActionModel(theta, stages, _first_frame_law(paths, stages), lds)
        new_paths = []
        for seg, tmpl in zip(segs, templates):
            prior = _template_prior(tmpl, stages.n_stages) if it == 0 else None
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", FallbackWarning)
                z, _ = assign_primitives(act, seg.y, seg.y_prev, last_in_terminal=seg.ends_with_boundary,
                                         stage_prior=prior)
            new_paths.append(z)
        ll = _complete_ll(act, segs, new_paths)
        if curve and ll < curve[-1]:
            log.debug("EM iteration %d decreased the objective; keeping the previous iterate", it)
            break
        curve.append(ll)
        best = act
        converged = len(curve) > 1 and (curve[-1] - curve[-2]) <= config.em_tol * abs(curve[-2])
        if converged or all(np.array_equal(a, b) for a, b in zip(paths, new_paths)) and it > 0:
            break
        paths = new_paths
    return best, curve


# -- boundary tuples ----------------------------------------------------------

def _state_posteriors(lds: LdsParams, y: np.ndarray, y_prev) -> list[GaussianBelief]:
    """Gaussian belief of the state at each frame under one regime."""
    P = y.shape[1]
    R = lds.R
    out = []
    for t in range(y.shape[0]):
        before = y[t - 1] if t > 0 else y_prev
        if before is None:
            prior_m, prior_P = y[t], np.eye(P)
        else:
            prior_m = lds.A @ before
            prior_P = lds.A @ R @ lds.A.T + lds.Q
        S = prior_P + R
        K = np.linalg.solve(S, prior_P).T
        m = prior_m + K @ (y[t] - prior_m)
        C = prior_P - K @ prior_P
        out.append(GaussianBelief(m, 0.5 * (C + C.T)))
    return out


def boundary_tuples(dataset: LabeledDataset, actions: Sequence[ActionModel],
                    duration: DurationParams) -> dict[tuple[int, int], list[BoundaryTrainingTuple]]:
    """Training tuples for every (action, terminating-stage primitive)."""
    out: dict[tuple[int, int], list[BoundaryTrainingTuple]] = {}
    for y, lab in dataset.sequences:
        d = durations_from_labels(lab)
        starts = np.flatnonzero(d == 1).tolist() + [lab.size]
        for a, b in zip(starts[:-1], starts[1:]):
            i = int(lab[a])
            act = actions[i]
            seg_y = y[a:b]
            y_prev = y[a - 1] if a > 0 else None
            post = primitive_posteriors(act, seg_y, y_prev, last_in_terminal=b < lab.size)
            term = act.stages.members(act.stages.terminal)
            stop = b if b < lab.size else b - 1  # the final frame has no successor
            for j in term:
                beliefs = _state_posteriors(act.lds[j], seg_y, y_prev)
                bucket = out.setdefault((i, int(j)), [])
                for t in range(a, stop):
                    pz = float(post[t - a, j])
                    if pz <= 1e-9:
                        continue
                    bucket.append(BoundaryTrainingTuple(i, int(d[t]), 1.0 if t == b - 1 else 0.0,
                                                        pz, beliefs[t - a]))
    return out


# -- top level ----------------------------------------------------------------

def fit(dataset: LabeledDataset, config: TrainingConfig = TrainingConfig()) -> TrainingResult:
    """Train a full model and return it with the per-action EM curves."""
    S = dataset.n_actions
    P = dataset.obs_dim
    actions, curves = [], []
    for i in range(S):
        segs = _segments_of(dataset, i)
        if not segs:
            raise TrainingError(f"action {i} has no training segment")
        total = sum(len(s.y) for s in segs)
        if total < config.n_primitives:
            raise TrainingError(f"action {i} has {total} frames for {config.n_primitives} primitives")
        act, curve = train_action_stm(segs, config, config.seed + 104729 * i)
        actions.append(act)
        curves.append(curve)
    labels = [lab for _, lab in dataset.sequences]
    duration, a = fit_logistic_duration(labels, S, [act.n_primitives for act in actions], P)
    tuples: list[BoundaryTrainingTuple] = []
    if config.fit_dbm:
        groups = boundary_tuples(dataset, actions, duration)
        omega = [w.copy() for w in duration.omega]
        for (i, j), tps in sorted(groups.items()):
            if tps:
                omega[i][j] = fit_dbm_omega(tps, i, j, duration)
                tuples.extend(tps)
        duration = duration.with_omega(omega)
    first = np.vstack([y[0] for y, _ in dataset.sequences])
    init_state = GaussianBelief(first.mean(axis=0), np.eye(P))
    model = FullModel(tuple(actions), duration, a, np.full(S, 1.0 / S), init_state)
    problems = validate(model)
    if problems:
        raise TrainingError("trained model is invalid:\n  " + "\n  ".join(problems))
    return TrainingResult(model, curves, tuples)


def train(dataset: LabeledDataset, config: TrainingConfig = TrainingConfig()) -> FullModel:
    return fit(dataset, config).model
