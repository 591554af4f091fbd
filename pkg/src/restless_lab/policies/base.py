"""Budgeted arm selection and the planners the episode engine drives."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from ..core import DEFAULT_THRESHOLD
from ..forecast import ForecastModel
from .tari import tari_indices
from .whittle import WhittleModel

log = logging.getLogger(__name__)


def check_decision(decision, n_arms: int, k: int) -> None:
    d = np.asarray(decision)
    if d.size != k:
        raise ValueError(f"decision selects {d.size} arms, budget is {k}")
    if np.unique(d).size != d.size:
        raise ValueError("decision selects an arm twice")
    if d.size and (d.min() < 0 or d.max() >= n_arms):
        raise ValueError(f"decision references arms outside 0..{n_arms - 1}")


def select_top_k(scores, k: int, rng: np.random.Generator) -> np.ndarray:
    """Positions of the ``k`` largest scores, ties broken uniformly at random."""
    scores = np.asarray(scores, dtype=float)
    if not (0 <= k <= scores.size):
        raise ValueError(f"k={k} outside 0..{scores.size}")
    jitter = rng.random(scores.size)
    # lexsort: last key is primary
    order = np.lexsort((jitter, -scores))
    return np.sort(order[:k])


def round_robin_select(cursor: int, n_arms: int, k: int) -> tuple[np.ndarray, int]:
    """Arms cursor..cursor+k-1 (mod N) and the advanced cursor."""
    chosen = (cursor + np.arange(min(k, n_arms))) % n_arms
    return np.sort(chosen), (cursor + k) % n_arms


def random_select(n_arms: int, k: int, rng: np.random.Generator) -> np.ndarray:
    return np.sort(rng.choice(n_arms, size=k, replace=False))


def control_select() -> np.ndarray:
    return np.empty(0, dtype=np.int64)


@dataclass
class Observation:
    """What a planner sees at decision week t (1-indexed).

    ``states`` is (N, t) including the current week; ``actions`` is (N, t-1).
    """

    t: int
    states: np.ndarray
    actions: np.ndarray
    features: np.ndarray | None = None
    arm_ids: np.ndarray | None = None


class Policy:
    name = "policy"
    budgeted = True

    def reset(self) -> None:
        pass

    def select(self, obs: Observation, k: int, rng: np.random.Generator) -> np.ndarray:
        raise NotImplementedError


class ControlPolicy(Policy):
    name = "control"
    budgeted = False

    def select(self, obs, k, rng):
        return control_select()


class RandomPolicy(Policy):
    name = "random"

    def select(self, obs, k, rng):
        return random_select(obs.states.shape[0], k, rng)


class RoundRobinPolicy(Policy):
    name = "round_robin"

    def __init__(self):
        self.cursor = 0

    def reset(self):
        self.cursor = 0

    def select(self, obs, k, rng):
        chosen, self.cursor = round_robin_select(self.cursor, obs.states.shape[0], k)
        return chosen


class HistoricalPolicy(Policy):
    """Replays recorded actions; used to check offline replay."""

    name = "historical"
    budgeted = False

    def __init__(self, actions: np.ndarray, arm_ids=None):
        self.actions = np.asarray(actions)
        self.arm_ids = None if arm_ids is None else np.asarray(arm_ids)

    def select(self, obs, k, rng):
        rows = np.arange(self.actions.shape[0])
        if obs.arm_ids is not None and self.arm_ids is not None:
            pos = {a: i for i, a in enumerate(self.arm_ids)}
            rows = np.array([pos[a] for a in obs.arm_ids], dtype=np.int64)
        return np.flatnonzero(self.actions[rows, obs.t - 1])


class TariPolicy(Policy):
    name = "tari"

    def __init__(self, model: ForecastModel, threshold: float = DEFAULT_THRESHOLD, horizon: int = 52):
        self.model = model
        self.threshold = threshold
        self.horizon = horizon

    def context(self, obs: Observation):
        """Current states plus the h-1 preceding steps, padded with the first observation."""
        h = self.model.h
        n, t = obs.states.shape
        need = h - 1
        past_s = obs.states[:, :-1][:, t - 1 - min(need, t - 1):]
        past_a = obs.actions[:, t - 1 - min(need, t - 1):]
        if past_s.shape[1] < need:
            pad = need - past_s.shape[1]
            past_s = np.hstack([np.repeat(obs.states[:, :1], pad, axis=1), past_s])
            past_a = np.hstack([np.zeros((n, pad), dtype=np.int64), past_a])
        return past_s, past_a.astype(np.int64), obs.states[:, -1]

    def scores(self, obs: Observation) -> tuple[np.ndarray, np.ndarray]:
        past_s, past_a, cur = self.context(obs)
        aux = obs.features if self.model.aux_dim else None
        return tari_indices(self.model, past_s, past_a, aux, cur, self.threshold, self.horizon)

    def select(self, obs, k, rng):
        u, v = self.scores(obs)
        return select_top_k(u / v, k, rng)


class WhittlePolicy(Policy):
    name = "whittle"

    def __init__(self, model: WhittleModel):
        self.model = model

    def scores(self, obs: Observation) -> np.ndarray:
        table = self.model.index_table()
        clusters = self.model.assign_clusters(obs.features)
        return table[clusters, self.model.expanded_states(obs.states)]

    def select(self, obs, k, rng):
        return select_top_k(self.scores(obs), k, rng)


def whittle_select(wm: WhittleModel, state_history, features, k: int, rng) -> np.ndarray:
    obs = Observation(t=np.asarray(state_history).shape[1], states=np.asarray(state_history, dtype=float),
                      actions=np.zeros((len(state_history), 0), dtype=np.int64), features=features)
    return WhittlePolicy(wm).select(obs, k, rng)
