"""Small hand-built models shared by the tests."""
import numpy as np

from stmseg import ActionModel, DurationParams, FullModel, GaussianBelief, LdsParams, StageMap


def scalar_model(a=0.9, q=0.5, r=0.2, nu=1e-9, beta=5.0, m0=0.0, p0=1.0):
    """One action, one primitive, scalar state and observation."""
    lds = LdsParams([[a]], [[1.0]], [[q]], [[r]])
    act = ActionModel([[1.0]], StageMap.identity(1), [1.0], (lds,))
    return FullModel((act,), DurationParams([nu], [beta], (np.zeros((1, 1)),)), [[1.0]], [1.0],
                     GaussianBelief([m0], [[p0]]))


def discrete_model(means=((0.0, 2.0), (1.0, 3.0)), sigma=0.7, nu=1.0, beta=8.0, stay=0.7,
                   switch=((0.2, 0.8), (0.8, 0.2)), q=0.0):
    """Two actions whose primitives emit fixed-mean Gaussians.

    The state is pinned at 1 (``A = 1``, ``Q = 0``) and ``B`` holds the mean,
    so the continuous part carries no information and the model is a plain
    explicit-duration chain over (action, duration, primitive). A positive
    ``q`` makes the state density proper for log joint evaluation.
    """
    actions = []
    for mu in means:
        lds = tuple(LdsParams([[1.0]], [[m]], [[q]], [[sigma ** 2]]) for m in mu)
        theta = np.array([[stay, 1 - stay], [0.0, 1.0]])
        actions.append(ActionModel(theta, StageMap((0, 1), 2), [1.0, 0.0], lds))
    S = len(means)
    dur = DurationParams(np.full(S, nu), np.full(S, beta), tuple(np.zeros((2, 1)) for _ in range(S)))
    return FullModel(tuple(actions), dur, np.asarray(switch), np.full(S, 1.0 / S), GaussianBelief([1.0], [[0.0]]))


def _rotation(angle):
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s], [s, c]])


def random_model(rng: np.random.Generator, omega_scale=0.0, obs_noise=0.05):
    """Random valid model with 1-3 actions, 1-3 primitives and a 2-D state."""
    S = int(rng.integers(1, 4))
    actions, omega = [], []
    for _ in range(S):
        K = int(rng.integers(1, 4))
        Qn = int(rng.integers(1, K + 1))
        g = np.sort(np.concatenate([np.arange(Qn), rng.integers(0, Qn, K - Qn)]))
        stages = StageMap(g, Qn)
        theta = np.zeros((K, K))
        for i in range(K):
            allowed = np.flatnonzero((g >= g[i]) & (g <= g[i] + 1))
            if g[i] == Qn - 1:
                allowed = np.flatnonzero(g == g[i])
            w = rng.uniform(0.2, 1.0, allowed.size)
            theta[i, allowed] = w / w.sum()
        # block consistency: every row of a stage puts the same mass on each stage
        for q in range(Qn):
            rows = stages.members(q)
            ref = theta[rows[0]] @ stages.indicator()
            for i in rows:
                for r in range(Qn):
                    cols = stages.members(r)
                    tot = theta[i, cols].sum()
                    theta[i, cols] = ref[r] * (theta[i, cols] / tot if tot > 0 else 1.0 / cols.size)
        init = np.where(g == 0, 1.0, 0.0)
        init /= init.sum()
        lds = tuple(
            LdsParams(0.98 * _rotation(rng.uniform(-0.6, 0.6)), np.eye(2), 0.1 * np.eye(2), obs_noise * np.eye(2))
            for _ in range(K)
        )
        actions.append(ActionModel(theta, stages, init, lds))
        omega.append(omega_scale * rng.standard_normal((K, 2)))
    a = rng.uniform(0.1, 1.0, (S, S))
    a /= a.sum(axis=1, keepdims=True)
    dur = DurationParams(rng.uniform(0.5, 2.0, S), rng.uniform(3.0, 10.0, S), tuple(omega))
    return FullModel(tuple(actions), dur, a, np.full(S, 1.0 / S), GaussianBelief(np.array([3.0, 0.0]), np.eye(2)))
