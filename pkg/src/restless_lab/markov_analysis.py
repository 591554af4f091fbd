"""How far from Markov is the data?

Fit order-h empirical transition models in-sample and compare trajectory
log-likelihoods across h. An order-h chain is an order-1 chain on tuples of
the last h bins, so counting is just keyed on those tuples.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .core import Discretizer, Trajectory, discretize

DEFAULT_MAX_ORDER = 7
MARKOV_CSV_HEADER = ["h", "mean_negloglik", "relative_improvement_pct"]

Key = tuple[tuple[int, ...], int]


@dataclass
class TransitionCounts:
    h: int
    n_bins: int
    counts: dict[Key, np.ndarray] = field(default_factory=dict)

    def add(self, key: Key, nxt: int, n: int = 1) -> None:
        row = self.counts.get(key)
        if row is None:
            row = self.counts[key] = np.zeros(self.n_bins, dtype=np.int64)
        row[nxt] += n

    def merge(self, other: "TransitionCounts") -> "TransitionCounts":
        if (other.h, other.n_bins) != (self.h, self.n_bins):
            raise ValueError("cannot merge counts of different order or bin count")
        out = TransitionCounts(self.h, self.n_bins, {k: v.copy() for k, v in self.counts.items()})
        for k, v in other.counts.items():
            out.add(k, 0, 0)
            out.counts[k] += v
        return out

    @property
    def total(self) -> int:
        return int(sum(int(v.sum()) for v in self.counts.values()))


def _bins(tr: Trajectory, d: Discretizer) -> np.ndarray:
    return np.asarray(discretize(tr.states, d), dtype=np.int64).reshape(-1)


def _keys(bins: np.ndarray, actions: np.ndarray, h: int):
    # positions t = h-1 .. L-2 (0-indexed): window ends at t, predicts t+1
    for t in range(h - 1, len(bins) - 1):
        yield (tuple(int(b) for b in bins[t - h + 1: t + 1]), int(actions[t])), int(bins[t + 1])


def count_transitions(trajectories: Sequence[Trajectory], h: int, d: Discretizer) -> TransitionCounts:
    if h < 1:
        raise ValueError(f"order h must be >= 1, got {h}")
    tc = TransitionCounts(h, d.n_bins)
    for tr in trajectories:
        if len(tr) < h + 1:
            continue
        for key, nxt in _keys(_bins(tr, d), tr.actions, h):
            tc.add(key, nxt)
    return tc


def empirical_probs(counts: TransitionCounts, key: Key) -> np.ndarray:
    key = (tuple(int(b) for b in key[0]), int(key[1]))
    row = counts.counts.get(key)
    if row is None or row.sum() == 0:
        raise KeyError(f"transition key {key} never observed")
    return row / row.sum()


def trajectory_negloglik(tr: Trajectory, counts: TransitionCounts, d: Discretizer) -> float:
    total = 0.0
    for key, nxt in _keys(_bins(tr, d), tr.actions, counts.h):
        p = empirical_probs(counts, key)[nxt]
        total -= math.log(p)
    return total


def mean_negloglik(trajectories: Sequence[Trajectory], h: int, d: Discretizer) -> float:
    """In-sample order-h negative log-likelihood, summed per trajectory, averaged over trajectories.

    Trajectories shorter than h+1 are left out of the average.
    """
    trajectories = [tr for tr in trajectories if len(tr) >= h + 1]
    if not trajectories:
        raise ValueError(f"no trajectory has at least {h + 1} steps")
    counts = count_transitions(trajectories, h, d)
    return float(np.mean([trajectory_negloglik(tr, counts, d) for tr in trajectories]))


@dataclass
class LikelihoodReport:
    orders: list[int]
    negloglik: list[float]

    def relative_improvement(self) -> np.ndarray:
        return relative_improvement(self.negloglik)

    def rows(self):
        ri = self.relative_improvement()
        return [(h, l, 100.0 * r) for h, l, r in zip(self.orders, self.negloglik, ri)]


def relative_improvement(negloglik) -> np.ndarray:
    """-(l(h) - l(1)) / l(1) as fractions; the first entry is order 1."""
    ll = np.asarray(negloglik, dtype=float)
    if ll[0] <= 0:
        raise ValueError("l(1) is zero: the data are deterministic at order 1, relative improvement undefined")
    out = -(ll - ll[0]) / ll[0]
    out[0] = 0.0
    return out


def likelihood_report(trajectories: Sequence[Trajectory], d: Discretizer, max_order: int = DEFAULT_MAX_ORDER) -> LikelihoodReport:
    orders = list(range(1, max_order + 1))
    return LikelihoodReport(orders, [mean_negloglik(trajectories, h, d) for h in orders])


def write_report_csv(path, report: LikelihoodReport) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MARKOV_CSV_HEADER)
        for h, l, pct in report.rows():
            w.writerow([h, repr(float(l)), repr(float(pct))])


def planted_order_process(n_traj: int, length: int, order: int, flip: float, rng: np.random.Generator) -> list[Trajectory]:
    """Binary chain x[t+1] = x[t+1-order] XOR Bernoulli(flip), passive actions, states in {0, 1}.

    Only the bin ``order`` steps back matters, so orders below ``order`` see
    independent-looking data.
    """
    out = []
    for i in range(n_traj):
        x = np.empty(length, dtype=np.int64)
        x[:order] = rng.integers(0, 2, order)
        noise = rng.random(length) < flip
        for t in range(order, length):
            x[t] = x[t - order] ^ noise[t]
        out.append(Trajectory(i, x.astype(float), np.zeros(length, dtype=np.int64)))
    return out
