"""Whittle index baseline on a discretized, optionally history-expanded state.

Transition probabilities are estimated from historical trajectories per
feature cluster. The index of a state is the passive subsidy ``m`` at which
acting and not acting have equal value under the subsidy-augmented Bellman
equations, found by binary search over ``m`` with value iteration inside.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ..core import Discretizer, Trajectory, discretize

log = logging.getLogger(__name__)

DEFAULT_GAMMA = 0.9
VI_TOL = 1e-9
VI_MAX_SWEEPS = 100_000
SEARCH_GAP = 1e-6
BRACKET = 10.0
MAX_WIDENINGS = 4


class IndexabilityWarning(Exception):
    """Acting-minus-passive value did not change sign across the subsidy bracket."""

    def __init__(self, states, lo, hi):
        self.states = np.atleast_1d(states)
        self.lo = lo
        self.hi = hi
        super().__init__(f"no indifference point for states {self.states.tolist()} in [{lo}, {hi}]")


def expanded_transition_matrix(P: np.ndarray, n_bins: int) -> np.ndarray:
    """(S, 2, n_bins) next-bin probabilities -> (S, 2, S) expanded-state matrix.

    Expanded states encode the last ``hw`` bins oldest-first in base
    ``n_bins``; appending a bin shifts out the oldest.
    """
    S = P.shape[0]
    full = np.zeros((S, 2, S))
    succ = (np.arange(S)[:, None] * n_bins) % S + np.arange(n_bins)[None, :]
    for a in range(2):
        np.add.at(full[:, a, :], (np.repeat(np.arange(S), n_bins), succ.ravel()), P[:, a, :].ravel())
    return full


def subsidized_q(P, R, gamma, m, tol=VI_TOL, max_sweeps=VI_MAX_SWEEPS):
    """Q-values under subsidies ``m`` (shape (M,)), solved by value iteration.

    ``P`` is (S, 2, S), ``R`` is (S,). Returns (M, S, 2).
    """
    m = np.asarray(m, dtype=float)
    P0, P1 = P[:, 0, :], P[:, 1, :]
    V = np.zeros((m.size, R.size))
    for _ in range(max_sweeps):
        q0 = m[:, None] + R[None, :] + gamma * V @ P0.T
        q1 = R[None, :] + gamma * V @ P1.T
        V_new = np.maximum(q0, q1)
        if np.max(np.abs(V_new - V)) < tol:
            V = V_new
            break
        V = V_new
    q0 = m[:, None] + R[None, :] + gamma * V @ P0.T
    q1 = R[None, :] + gamma * V @ P1.T
    return np.stack([q0, q1], axis=-1)


def _gap(P, R, gamma, states, m):
    q = subsidized_q(P, R, gamma, m)
    rows = np.arange(len(states))
    return q[rows, states, 0] - q[rows, states, 1]


def mdp_whittle_indices(P, R, gamma: float = DEFAULT_GAMMA, states=None, *, gap: float = SEARCH_GAP) -> np.ndarray:
    """Whittle index for each state in ``states`` (default: all) of one arm MDP.

    Raises IndexabilityWarning listing the states whose passive-minus-active
    value has no sign change even after widening the bracket.
    """
    P = np.asarray(P, dtype=float)
    R = np.asarray(R, dtype=float)
    states = np.arange(R.size) if states is None else np.atleast_1d(np.asarray(states, dtype=np.int64))
    lo = np.full(states.size, -BRACKET)
    hi = np.full(states.size, BRACKET)
    for attempt in range(MAX_WIDENINGS + 1):
        bad_lo = _gap(P, R, gamma, states, lo) >= 0
        bad_hi = _gap(P, R, gamma, states, hi) < 0
        if not (bad_lo.any() or bad_hi.any()):
            break
        if attempt == MAX_WIDENINGS:
            raise IndexabilityWarning(states[bad_lo | bad_hi], float(lo.min()), float(hi.max()))
        lo = np.where(bad_lo, lo * 2, lo)
        hi = np.where(bad_hi, hi * 2, hi)
    while np.max(hi - lo) > gap:
        mid = 0.5 * (lo + hi)
        passive_ok = _gap(P, R, gamma, states, mid) >= 0
        hi = np.where(passive_ok, mid, hi)
        lo = np.where(passive_ok, lo, mid)
    return 0.5 * (lo + hi)


def n_expanded_states(n_bins: int, hw: int) -> int:
    return n_bins ** hw


def encode_history(bins: Sequence[int], n_bins: int) -> int:
    idx = 0
    for b in bins:
        idx = idx * n_bins + int(b)
    return idx


@dataclass
class WhittleModel:
    """Per-cluster expanded-state transition tensors and their index table.

    ``transitions[c, s, a, b]`` is the probability that cluster ``c`` in
    expanded state ``s`` under action ``a`` moves to bin ``b``.
    """

    discretizer: Discretizer
    hw: int
    transitions: np.ndarray
    bin_rewards: np.ndarray
    gamma: float = DEFAULT_GAMMA
    centroids: np.ndarray | None = None
    _table: np.ndarray | None = field(default=None, repr=False)

    @property
    def n_bins(self) -> int:
        return self.discretizer.n_bins

    @property
    def n_states(self) -> int:
        return n_expanded_states(self.n_bins, self.hw)

    @property
    def n_clusters(self) -> int:
        return self.transitions.shape[0]

    def state_rewards(self) -> np.ndarray:
        return self.bin_rewards[np.arange(self.n_states) % self.n_bins]

    def cluster_mdp(self, c: int) -> np.ndarray:
        return expanded_transition_matrix(self.transitions[c], self.n_bins)

    def index_table(self) -> np.ndarray:
        """(clusters, states) Whittle indices, computed once and cached."""
        if self._table is None:
            table = np.empty((self.n_clusters, self.n_states))
            R = self.state_rewards()
            for c in range(self.n_clusters):
                P = self.cluster_mdp(c)
                try:
                    table[c] = mdp_whittle_indices(P, R, self.gamma)
                except IndexabilityWarning as exc:
                    log.warning("cluster %d: %s; those states get index -inf", c, exc)
                    ok = np.setdiff1d(np.arange(self.n_states), exc.states)
                    table[c] = -np.inf
                    if ok.size:
                        table[c, ok] = mdp_whittle_indices(P, R, self.gamma, ok)
            self._table = table
        return self._table

    def assign_clusters(self, features) -> np.ndarray:
        if self.centroids is None or features is None:
            n = 1 if features is None else np.asarray(features).shape[0]
            return np.zeros(n, dtype=np.int64)
        X = np.asarray(features, dtype=float).reshape(-1, self.centroids.shape[1])
        d = ((X[:, None, :] - self.centroids[None, :, :]) ** 2).sum(-1)
        return np.argmin(d, axis=1)

    def expanded_states(self, state_history: np.ndarray) -> np.ndarray:
        """Current expanded state per arm from (N, t) observed states.

        Arms with fewer than ``hw`` observations are padded by repeating
        their first observed bin.
        """
        hist = np.atleast_2d(np.asarray(state_history, dtype=float))
        bins = discretize(hist, self.discretizer)
        t = bins.shape[1]
        if t < self.hw:
            bins = np.hstack([np.repeat(bins[:, :1], self.hw - t, axis=1), bins])
        tail = bins[:, -self.hw:]
        weights = self.n_bins ** np.arange(self.hw - 1, -1, -1)
        return tail @ weights


def whittle_index(wm: WhittleModel, expanded_state: int, cluster: int = 0) -> float:
    """Index of one (cluster, expanded state), solved afresh."""
    P = wm.cluster_mdp(cluster)
    return float(mdp_whittle_indices(P, wm.state_rewards(), wm.gamma, [expanded_state])[0])


def bin_rewards(d: Discretizer) -> np.ndarray:
    """Engagement reward of each bin, judged at the bin's midpoint."""
    return (d.midpoints() >= d.threshold).astype(float)


def count_expanded(trajectories: Sequence[Trajectory], labels, n_clusters, d: Discretizer, hw: int) -> np.ndarray:
    S = n_expanded_states(d.n_bins, hw)
    counts = np.zeros((n_clusters, S, 2, d.n_bins))
    weights = d.n_bins ** np.arange(hw - 1, -1, -1)
    for tr, c in zip(trajectories, labels):
        L = len(tr)
        if L < hw + 1:
            continue
        bins = discretize(tr.states, d)
        pos = np.arange(hw - 1, L - 1)
        windows = bins[pos[:, None] + np.arange(-(hw - 1), 1)[None, :]]
        np.add.at(counts[c], (windows @ weights, tr.actions[pos], bins[pos + 1]), 1)
    return counts


def estimate_transitions(
    trajectories: Sequence[Trajectory],
    d: Discretizer,
    hw: int = 1,
    n_clusters: int = 1,
    *,
    gamma: float = DEFAULT_GAMMA,
    seed: int = 0,
) -> WhittleModel:
    """Cluster arms by features, then count expanded-state transitions per cluster.

    Unobserved rows are filled by ``fill_unseen``.
    """
    trajectories = list(trajectories)
    if not trajectories:
        raise ValueError("estimate_transitions: empty dataset")
    if n_clusters < 1 or hw < 1:
        raise ValueError("n_clusters and hw must be >= 1")
    have_features = all(tr.features is not None for tr in trajectories)
    centroids = None
    if n_clusters > 1:
        if not have_features:
            raise ValueError("clustering needs features on every trajectory")
        from sklearn.cluster import KMeans

        X = np.stack([tr.features for tr in trajectories])
        km = KMeans(n_clusters=n_clusters, max_iter=100, n_init=10, random_state=seed, algorithm="lloyd").fit(X)
        labels = km.labels_
        centroids = km.cluster_centers_
    else:
        labels = np.zeros(len(trajectories), dtype=np.int64)

    counts = count_expanded(trajectories, labels, n_clusters, d, hw)
    if counts.sum() == 0:
        raise ValueError("estimate_transitions: no trajectory is long enough for the history order")
    return WhittleModel(d, hw, fill_unseen(counts, d.n_bins), bin_rewards(d), gamma, centroids)


def fill_unseen(counts: np.ndarray, n_bins: int) -> np.ndarray:
    """Normalize (C, S, 2, n_bins) counts into probabilities.

    Rows with no data fall back, in order, to: the same cluster pooled over
    older history (same current bin and action), the same expanded state
    pooled over clusters, and finally the uniform distribution.
    """
    C, S = counts.shape[:2]
    current_bin = np.arange(S) % n_bins
    by_bin = np.stack([counts[:, current_bin == b].sum(axis=1) for b in range(n_bins)], axis=1)  # (C, n_bins, 2, n_bins)
    pooled = counts.sum(axis=0)
    probs = np.empty_like(counts, dtype=float)
    for c in range(C):
        for s in range(S):
            for a in range(2):
                for row in (counts[c, s, a], by_bin[c, current_bin[s], a], pooled[s, a]):
                    if row.sum() > 0:
                        probs[c, s, a] = row / row.sum()
                        break
                else:
                    probs[c, s, a] = 1.0 / n_bins
    return probs
