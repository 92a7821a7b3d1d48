"""Permutation-aware metrics for recovered sources, states and transitions.

Sources and hidden states are identifiable only up to relabeling (and
sources also up to sign), so every score maximizes over permutations.
Exhaustive search is used; n and K are small.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np


@dataclass
class MatchResult:
    """``permutation[j]`` is the estimated column matched to true source j."""

    permutation: tuple
    signs: np.ndarray
    correlations: np.ndarray
    mean_abs_corr: float

    def aligned(self, estimated: np.ndarray) -> np.ndarray:
        """Estimated columns reordered and sign-corrected to the truth."""
        return np.asarray(estimated)[:, list(self.permutation)] * self.signs


@dataclass
class StateMatchResult:
    """``permutation[k-1]`` is the true label assigned to decoded label k."""

    permutation: tuple
    accuracy: float
    confusion: np.ndarray

    def relabel(self, decoded: np.ndarray) -> np.ndarray:
        return np.asarray(self.permutation)[np.asarray(decoded) - 1]


def correlation_matrix(estimated: np.ndarray, truth: np.ndarray) -> np.ndarray:
    """Pearson correlations ``C[i, j] = corr(truth[:, i], estimated[:, j])``
    with population normalization."""
    est = np.asarray(estimated, dtype=float)
    tru = np.asarray(truth, dtype=float)
    if est.shape != tru.shape or est.ndim != 2:
        raise ValueError(f"shape mismatch {est.shape} vs {tru.shape}")
    e = est - est.mean(axis=0)
    r = tru - tru.mean(axis=0)
    se, sr = e.std(axis=0), r.std(axis=0)
    if np.any(se == 0) or np.any(sr == 0):
        raise ValueError("zero-variance column")
    return (r / sr).T @ (e / se) / est.shape[0]


def match_sources(estimated, truth) -> MatchResult:
    C = correlation_matrix(estimated, truth)
    n = C.shape[0]
    absC = np.abs(C)
    best, best_total = None, -np.inf
    for perm in itertools.permutations(range(n)):
        total = absC[np.arange(n), perm].sum()
        if total > best_total:
            best, best_total = perm, total
    picked = C[np.arange(n), best]
    corr = np.minimum(np.abs(picked), 1.0)
    return MatchResult(tuple(int(p) for p in best), np.where(picked < 0, -1.0, 1.0),
                       corr, float(corr.mean()))


def match_states(decoded, truth, K: int) -> StateMatchResult:
    decoded = np.asarray(decoded, dtype=int)
    truth = np.asarray(truth, dtype=int)
    if decoded.shape != truth.shape:
        raise ValueError("decoded and true paths differ in length")
    for path in (decoded, truth):
        if path.size and (path.min() < 1 or path.max() > K):
            raise ValueError(f"state labels must lie in 1..{K}")
    counts = np.zeros((K, K), dtype=int)
    np.add.at(counts, (truth - 1, decoded - 1), 1)
    best, best_hits = None, -1
    for perm in itertools.permutations(range(K)):
        # decoded label k is read as true label perm[k]
        hits = counts[list(perm), np.arange(K)].sum()
        if hits > best_hits:
            best, best_hits = perm, hits
    confusion = np.zeros((K, K), dtype=int)
    np.add.at(confusion, (truth - 1, np.asarray(best)[decoded - 1]), 1)
    return StateMatchResult(tuple(int(p) + 1 for p in best), best_hits / max(truth.size, 1), confusion)


def empirical_transition_matrix(states, K: int) -> tuple[np.ndarray, np.ndarray]:
    """Row-normalized transition counts of a 1-based path.

    Returns ``(matrix, unvisited)``; rows for states never left (no visit
    at t < T) are uniform and flagged in ``unvisited``.
    """
    c = np.asarray(states, dtype=int) - 1
    if c.size < 2:
        raise ValueError("need at least two time steps")
    counts = np.zeros((K, K))
    np.add.at(counts, (c[:-1], c[1:]), 1.0)
    visits = counts.sum(axis=1)
    unvisited = visits == 0
    P = np.full((K, K), 1.0 / K)
    P[~unvisited] = counts[~unvisited] / visits[~unvisited, None]
    return P, unvisited


def diagonal_dominant(P) -> bool:
    """Each diagonal entry exceeds every off-diagonal entry of its row."""
    P = np.asarray(P, dtype=float)
    K = P.shape[0]
    if K == 1:
        return True
    off = np.where(np.eye(K, dtype=bool), -np.inf, P)
    return bool(np.all(np.diag(P) > off.max(axis=1)))


@dataclass
class TransitionAgreement:
    mean_tv: float
    learned_diagonal_dominant: bool
    empirical_diagonal_dominant: bool


def transition_agreement(learned, empirical, permutation=None) -> TransitionAgreement:
    """Mean row-wise total-variation distance after relabeling ``empirical``.

    ``permutation[k-1]`` names the empirical label that corresponds to
    learned label k; rows and columns are permuted together.
    """
    L = np.asarray(learned, dtype=float)
    E = np.asarray(empirical, dtype=float)
    if L.shape != E.shape or L.ndim != 2 or L.shape[0] != L.shape[1]:
        raise ValueError("matrices must be square and of equal shape")
    for M in (L, E):
        if np.any(M < -1e-12) or np.any(np.abs(M.sum(axis=1) - 1.0) > 1e-9):
            raise ValueError("matrices must be row-stochastic")
    K = L.shape[0]
    p = np.arange(K) if permutation is None else np.asarray(permutation, dtype=int) - 1
    if sorted(p.tolist()) != list(range(K)):
        raise ValueError("permutation must be a bijection on 1..K")
    E = E[np.ix_(p, p)]
    tv = 0.5 * np.abs(L - E).sum(axis=1)
    return TransitionAgreement(float(tv.mean()), diagonal_dominant(L), diagonal_dominant(E))
