"""Primitive-transition estimation with sparse and block-wise sparse priors.

Primitives and stages are 0-based. A stage map ``g`` sends each primitive to
its stage; stage ``0`` is the starting stage and stage ``n_stages - 1`` the
terminating one.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import BlockConsistencyError, FallbackWarning

ROW_TOL = 1e-9
BLOCK_TOL = 1e-6


@dataclass(frozen=True)
class StageMap:
    """Surjective assignment of primitives to ordered stages."""

    g: tuple[int, ...]
    n_stages: int

    def __post_init__(self):
        object.__setattr__(self, "g", tuple(int(v) for v in self.g))
        object.__setattr__(self, "n_stages", int(self.n_stages))
        bad = self.violations()
        if bad:
            raise ValueError("; ".join(bad))

    @classmethod
    def identity(cls, n: int) -> "StageMap":
        return cls(tuple(range(n)), n)

    @classmethod
    def from_counts(cls, per_stage: Sequence[int]) -> "StageMap":
        """Consecutive primitives, ``per_stage[q]`` of them in stage ``q``."""
        return cls(tuple(q for q, k in enumerate(per_stage) for _ in range(k)), len(per_stage))

    @property
    def n_primitives(self) -> int:
        return len(self.g)

    @property
    def terminal(self) -> int:
        return self.n_stages - 1

    def members(self, q: int) -> np.ndarray:
        return np.flatnonzero(np.asarray(self.g) == q)

    def indicator(self) -> np.ndarray:
        """``n_primitives x n_stages`` 0/1 membership matrix."""
        E = np.zeros((self.n_primitives, self.n_stages))
        E[np.arange(self.n_primitives), self.g] = 1.0
        return E

    def violations(self) -> list[str]:
        out = []
        if self.n_stages < 1:
            out.append(f"n_stages must be >= 1, got {self.n_stages}")
        if any(q < 0 or q >= self.n_stages for q in self.g):
            out.append(f"stage map {self.g} has entries outside [0, {self.n_stages})")
        missing = sorted(set(range(self.n_stages)) - set(self.g))
        if missing:
            out.append(f"stage map is not surjective; empty stages {missing}")
        return out


def count_transitions(primitive_sequences: Iterable[Sequence[int]], n_primitives: int) -> np.ndarray:
    """Matrix of adjacent-pair counts ``xi[i, j]`` over all sequences."""
    xi = np.zeros((n_primitives, n_primitives))
    for seq in primitive_sequences:
        z = np.asarray(seq, dtype=int).reshape(-1)
        if z.size and (z.min() < 0 or z.max() >= n_primitives):
            raise ValueError(f"primitive index out of range [0, {n_primitives}): {z.min()}..{z.max()}")
        if z.size > 1:
            np.add.at(xi, (z[:-1], z[1:]), 1.0)
    return xi


def estimate_sparse_map(xi, alpha: float) -> np.ndarray:
    """Row-wise MAP under a negative-Dirichlet prior with pseudo-count ``alpha``.

    ``theta[i, j] = max(xi[i, j] - alpha, 0) / sum_t max(xi[i, t] - alpha, 0)``.
    Rows whose counts are all thresholded away become uniform.
    """
    xi = np.asarray(xi, dtype=float)
    kept = np.maximum(xi - alpha, 0.0)
    tot = kept.sum(axis=1, keepdims=True)
    dead = tot[:, 0] <= 0
    if np.any(dead):
        warnings.warn(
            f"rows {np.flatnonzero(dead).tolist()} have no count above alpha={alpha}; using uniform rows",
            FallbackWarning,
            stacklevel=2,
        )
    theta = np.where(tot > 0, kept / np.where(tot > 0, tot, 1.0), 1.0 / xi.shape[1])
    return theta


def build_alpha_mask(n_stages: int, alpha: float) -> np.ndarray:
    """Penalty ``alpha`` on every stage transition except self and next-stage."""
    q = np.arange(n_stages)[:, None]
    r = np.arange(n_stages)[None, :]
    free = (r == q) | (r == q + 1)
    return np.where(free, 0.0, float(alpha))


def stage_counts(xi, stages: StageMap) -> np.ndarray:
    """Counts aggregated to stage pairs, ``Xi[q, r]``."""
    E = stages.indicator()
    return E.T @ np.asarray(xi, dtype=float) @ E


def estimate_stage_matrix(xi, stages: StageMap, alpha: float) -> np.ndarray:
    """Stage transition matrix from thresholded stage-aggregated counts."""
    kept = np.maximum(stage_counts(xi, stages) - build_alpha_mask(stages.n_stages, alpha), 0.0)
    phi = np.zeros_like(kept)
    for q in range(stages.n_stages):
        tot = kept[q].sum()
        if tot > 0:
            phi[q] = kept[q] / tot
            continue
        warnings.warn(
            f"stage {q}: every stage transition thresholded away; using uniform self/next fallback",
            FallbackWarning,
            stacklevel=3,
        )
        nxt = [q, q + 1] if q + 1 < stages.n_stages else [q]
        phi[q, nxt] = 1.0 / len(nxt)
    return phi


def estimate_blockwise_map(xi, stages: StageMap, alpha: float) -> tuple[np.ndarray, np.ndarray]:
    """Block-wise sparse MAP of the primitive transition matrix.

    Returns ``(theta, phi)``. Stage transitions are thresholded exactly like
    the row-wise estimator but on stage-aggregated counts with the ordered
    penalty mask; inside each surviving block each row is proportional to
    its counts.
    """
    xi = np.asarray(xi, dtype=float)
    if xi.shape != (stages.n_primitives, stages.n_primitives):
        raise ValueError(f"counts shape {xi.shape} does not match {stages.n_primitives} primitives")
    phi = estimate_stage_matrix(xi, stages, alpha)
    theta = np.zeros_like(xi)
    g = np.asarray(stages.g)
    uniform_blocks = []
    for r in range(stages.n_stages):
        cols = stages.members(r)
        block = xi[:, cols]
        den = block.sum(axis=1)
        mass = phi[g, r]
        for i in range(xi.shape[0]):
            if mass[i] == 0:
                continue
            if den[i] > 0:
                theta[i, cols] = mass[i] * block[i] / den[i]
            else:
                theta[i, cols] = mass[i] / cols.size
                uniform_blocks.append((i, r))
    if uniform_blocks:
        warnings.warn(
            f"no counts inside surviving blocks (row, stage) {uniform_blocks}; spread uniformly",
            FallbackWarning,
            stacklevel=2,
        )
    return theta, phi


def stage_marginal(theta, stages: StageMap, tol: float = BLOCK_TOL) -> np.ndarray:
    """Stage transition matrix implied by a block-consistent ``theta``."""
    theta = np.asarray(theta, dtype=float)
    per_row = theta @ stages.indicator()  # (n_primitives, n_stages)
    phi = np.zeros((stages.n_stages, stages.n_stages))
    for q in range(stages.n_stages):
        rows = per_row[stages.members(q)]
        spread = rows.max(axis=0) - rows.min(axis=0)
        if np.any(spread > tol):
            r = int(np.argmax(spread))
            raise BlockConsistencyError(
                f"stage pair ({q}, {r}): rows of stage {q} put between "
                f"{rows[:, r].min():.6g} and {rows[:, r].max():.6g} mass on stage {r}"
            )
        phi[q] = rows.mean(axis=0)
    return phi


def _xlogy(c, p):
    """``c * log p`` with ``0 * log 0 = 0`` and ``c * log 0 = -inf`` for ``c > 0``."""
    c = np.asarray(c, dtype=float)
    p = np.asarray(p, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(c > 0, c * np.log(np.where(p > 0, p, 1.0)), 0.0)
    return np.where((c > 0) & (p <= 0), -np.inf, out)


def blockwise_objective(theta, xi, stages: StageMap, alpha: float) -> float:
    """Penalized log-likelihood that the block-wise estimator maximizes.

    ``theta`` is split into stage transitions ``phi[q, r]`` and within-block
    conditionals ``c[i, j] = theta[i, j] / phi[g(i), g(j)]``, so that

        sum_ij xi_ij log theta_ij - sum_qr alpha_qr log phi_qr
          = sum_qr (Xi_qr - alpha_qr) log phi_qr + sum_ij xi_ij log c_ij.

    The ordered negative-Dirichlet penalty is improper: a stage block whose
    aggregate count ``Xi_qr`` falls below ``alpha_qr`` drives the literal
    value to ``+inf`` as ``phi_qr -> 0``. The returned value uses the clipped
    weight ``max(Xi_qr - alpha_qr, 0)`` for each stage block instead, which
    is finite wherever the literal objective is, agrees with it when no block
    is thresholded, and is maximized exactly by :func:`estimate_blockwise_map`.
    Blocks with ``phi_qr == 0`` contribute their best within-block term,
    since ``c`` is not identified there.
    """
    theta = np.asarray(theta, dtype=float)
    xi = np.asarray(xi, dtype=float)
    phi = stage_marginal(theta, stages)
    weights = np.maximum(stage_counts(xi, stages) - build_alpha_mask(stages.n_stages, alpha), 0.0)
    total = float(np.sum(_xlogy(weights, phi)))
    g = np.asarray(stages.g)
    phi_ij = phi[g][:, g]
    with np.errstate(divide="ignore", invalid="ignore"):
        cond = np.where(phi_ij > 0, theta / np.where(phi_ij > 0, phi_ij, 1.0), 0.0)
    live = phi_ij > 0
    total += float(np.sum(_xlogy(np.where(live, xi, 0.0), cond)))
    # unidentified blocks: within-block conditional at its optimum
    for r in range(stages.n_stages):
        cols = stages.members(r)
        for i in range(theta.shape[0]):
            if phi[g[i], r] == 0:
                row = xi[i, cols]
                s = row.sum()
                if s > 0:
                    total += float(np.sum(_xlogy(row, row / s)))
    return total
