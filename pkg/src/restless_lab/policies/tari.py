"""Time-series arm ranking index.

For each arm, forecast how long it keeps engaging if acted on once now and
never again (``u``), and how long if never acted on (``v``). The index is
``u / v``; the planner acts on the ``k`` arms with the largest index.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ..core import DEFAULT_THRESHOLD, Step
from ..forecast import ForecastModel, predict_next


@dataclass(frozen=True)
class TariIndex:
    arm_id: int
    u: int
    v: int

    @property
    def index(self) -> float:
        return self.u / self.v


def _steps_engaged(model, history, aux, s_t, first_action, threshold, H) -> int:
    hist = list(history)
    a, n, s = first_action, 1, s_t
    s_next = predict_next(model, hist, aux, s, a)
    while s_next >= threshold and n <= H:
        hist = hist[1:] + [Step(s, a)]
        s, a, n = s_next, 0, n + 1
        s_next = predict_next(model, hist, aux, s, a)
    return n


def tari_index(
    model: ForecastModel,
    history: Sequence[Step],
    aux,
    s_t: float,
    threshold: float = DEFAULT_THRESHOLD,
    H: int = 52,
    arm_id: int = 0,
) -> TariIndex:
    """Index of one arm, computed step by step with ``predict_next``.

    ``history`` holds the ``h`` steps before the current state ``s_t``.
    """
    model.begin_rollout()
    u = _steps_engaged(model, history, aux, s_t, 1, threshold, H)
    model.begin_rollout()
    v = _steps_engaged(model, history, aux, s_t, 0, threshold, H)
    return TariIndex(arm_id, u, v)


def _batch_steps_engaged(model, past_s, past_a, aux, s0, first_action, threshold, H) -> np.ndarray:
    B = s0.size
    n = np.ones(B, dtype=np.int64)
    running = np.ones(B, dtype=bool)
    s = s0.astype(float).copy()
    a = np.full(B, first_action, dtype=np.int64)
    model.begin_rollout()
    while True:
        win_s = np.column_stack([past_s, s])
        win_a = np.column_stack([past_a, a])
        s_next = model.predict_windows(win_s, win_a, aux)
        running &= (s_next >= threshold) & (n <= H)
        if not running.any():
            return n
        n += running
        past_s, past_a = win_s[:, 1:], win_a[:, 1:]
        s = s_next
        a = np.zeros(B, dtype=np.int64)


def tari_indices(
    model: ForecastModel,
    past_states: np.ndarray,
    past_actions: np.ndarray,
    aux: np.ndarray | None,
    current: np.ndarray,
    threshold: float = DEFAULT_THRESHOLD,
    H: int = 52,
) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized (u, v) for many arms at once.

    ``past_states``/``past_actions`` are (B, h-1): the steps immediately
    before each arm's current state. Arms that have already stopped keep
    being forecast alongside the others but their counts are frozen.
    """
    current = np.asarray(current, dtype=float)
    past_states = np.asarray(past_states, dtype=float).reshape(current.size, -1)
    past_actions = np.asarray(past_actions, dtype=np.int64).reshape(current.size, -1)
    u = _batch_steps_engaged(model, past_states, past_actions, aux, current, 1, threshold, H)
    v = _batch_steps_engaged(model, past_states, past_actions, aux, current, 0, threshold, H)
    return u, v
