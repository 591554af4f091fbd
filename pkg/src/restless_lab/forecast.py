"""Next-state forecasting for arm trajectories.

A forecaster sees a window of ``h`` (state, action) pairs whose last pair is
the current state and the action under consideration, plus optional static
features, and predicts the next state. Multi-step forecasts are produced by
feeding predictions back in (iterated multi-step).
"""

from __future__ import annotations

import abc
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, NamedTuple, Sequence

import numpy as np

from .core import Step, Trajectory
from .synthgen import AgentKind, AgentSpec, AgentState, step_agent

log = logging.getLogger(__name__)

DEFAULT_H_SYNTHETIC = 7
DEFAULT_H_REAL = 8
DEFAULT_RIDGE = 1e-4
DEFAULT_SPLIT = (0.64, 0.16, 0.20)

MODEL_MAGIC = "restless_lab.linear_ar"
MODEL_VERSION = 1


class ForecastModel(abc.ABC):
    """Predict-only handle. Implementations clamp predictions to [0, 1]."""

    h: int
    aux_dim: int

    @abc.abstractmethod
    def predict_windows(self, states: np.ndarray, actions: np.ndarray, aux: np.ndarray | None) -> np.ndarray:
        """Batch prediction. ``states``/``actions`` are (B, h), ``aux`` is (B, aux_dim) or None."""

    def begin_rollout(self) -> None:
        """Called before each recursive forecast. Stateless models ignore it."""


class WindowSample(NamedTuple):
    history: list[Step]
    aux: np.ndarray | None
    target: float


@dataclass
class WindowDataset:
    """Sliding-window samples stored column-wise.

    Row i holds the window ``states[i], actions[i]`` (oldest first), the
    arm's static features and the state that followed the window.
    """

    states: np.ndarray
    actions: np.ndarray
    aux: np.ndarray | None
    targets: np.ndarray
    arm_ids: np.ndarray
    skipped: int = 0

    @property
    def h(self) -> int:
        return self.states.shape[1]

    def __len__(self) -> int:
        return int(self.targets.size)

    def __iter__(self) -> Iterator[WindowSample]:
        for i in range(len(self)):
            yield self[i]

    def __getitem__(self, i: int) -> WindowSample:
        history = [Step(float(s), int(a)) for s, a in zip(self.states[i], self.actions[i])]
        aux = None if self.aux is None else self.aux[i]
        return WindowSample(history, aux, float(self.targets[i]))

    def subset(self, mask) -> WindowDataset:
        return WindowDataset(
            self.states[mask],
            self.actions[mask],
            None if self.aux is None else self.aux[mask],
            self.targets[mask],
            self.arm_ids[mask],
        )


def build_windows(trajectories: Sequence[Trajectory], h: int) -> WindowDataset:
    """Slide a length-``h`` window one step at a time over every trajectory.

    A trajectory of length L yields L - h samples; shorter ones are skipped.
    """
    if h < 1:
        raise ValueError(f"window length must be >= 1, got {h}")
    states, actions, aux, targets, arms = [], [], [], [], []
    skipped = 0
    aux_dim = None
    for tr in trajectories:
        L = len(tr)
        if L < h + 1:
            skipped += 1
            continue
        n = L - h
        idx = np.arange(n)[:, None] + np.arange(h)[None, :]
        states.append(tr.states[idx])
        actions.append(tr.actions[idx])
        targets.append(tr.states[h:])
        arms.append(np.full(n, tr.arm_id))
        if tr.features is not None:
            if aux_dim is None:
                aux_dim = tr.features.size
            elif tr.features.size != aux_dim:
                raise ValueError(f"arm {tr.arm_id}: feature length {tr.features.size} != {aux_dim}")
            aux.append(np.tile(tr.features, (n, 1)))
    if skipped:
        log.warning("build_windows: skipped %d trajectories shorter than h+1=%d", skipped, h + 1)
    if not targets:
        return WindowDataset(
            np.empty((0, h)), np.empty((0, h), dtype=np.int64), None, np.empty(0), np.empty(0, dtype=np.int64), skipped
        )
    if aux and len(aux) != len(targets):
        raise ValueError("either all or none of the trajectories must carry features")
    return WindowDataset(
        np.concatenate(states),
        np.concatenate(actions).astype(np.int64),
        np.concatenate(aux) if aux else None,
        np.concatenate(targets),
        np.concatenate(arms),
        skipped,
    )


def split_arms(arm_ids, ratios=DEFAULT_SPLIT, rng=None) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Partition distinct arm ids into train/val/test groups."""
    if len(ratios) != 3 or not math.isclose(sum(ratios), 1.0, abs_tol=1e-9) or min(ratios) < 0:
        raise ValueError(f"ratios must be three nonnegative numbers summing to 1, got {ratios}")
    arms = np.unique(np.asarray(arm_ids))
    n = arms.size
    if n < 3:
        raise ValueError(f"need at least 3 arms to split, got {n}")
    rng = np.random.default_rng(rng)
    arms = rng.permutation(arms)
    n_train = max(1, int(round(ratios[0] * n)))
    n_val = max(1, int(round(ratios[1] * n)))
    if n - n_train - n_val < 1:
        n_train = n - n_val - 1
    return arms[:n_train], arms[n_train:n_train + n_val], arms[n_train + n_val:]


def split_dataset(samples: WindowDataset, ratios=DEFAULT_SPLIT, rng=None):
    """Split by arm so that no arm contributes windows to two partitions."""
    parts = split_arms(samples.arm_ids, ratios, rng)
    return tuple(samples.subset(np.isin(samples.arm_ids, p)) for p in parts)


# --- linear autoregressive baseline -----------------------------------------


@dataclass(frozen=True, eq=False)
class LinearARModel(ForecastModel):
    """Ridge regression on min-max scaled windows.

    Inputs are laid out as [h states, h actions, aux features]; ``weights``
    carries one coefficient per input plus a trailing bias.
    """

    h: int
    aux_dim: int
    ridge: float
    scale_min: np.ndarray
    scale_max: np.ndarray
    weights: np.ndarray
    train_mae: float = field(default=float("nan"), compare=False)

    def _design(self, states, actions, aux) -> np.ndarray:
        states = np.asarray(states, dtype=float).reshape(-1, self.h)
        actions = np.asarray(actions, dtype=float).reshape(-1, self.h)
        parts = [states, actions]
        if self.aux_dim:
            if aux is None:
                raise ValueError(f"model expects {self.aux_dim} auxiliary features")
            parts.append(np.asarray(aux, dtype=float).reshape(-1, self.aux_dim))
        X = np.hstack(parts)
        return _apply_scaler(X, self.scale_min, self.scale_max)

    def predict_windows(self, states, actions, aux=None) -> np.ndarray:
        Xs = self._design(states, actions, aux)
        return np.clip(Xs @ self.weights[:-1] + self.weights[-1], 0.0, 1.0)

    def raw_coefficients(self) -> tuple[np.ndarray, float]:
        """Coefficients and intercept in the original (unscaled) input units."""
        span = _span(self.scale_min, self.scale_max)
        coef = self.weights[:-1] / span
        intercept = self.weights[-1] - float(np.sum(coef * self.scale_min))
        return coef, intercept


def _span(lo, hi):
    span = hi - lo
    return np.where(span > 0, span, 1.0)


def _apply_scaler(X, lo, hi):
    return (X - lo) / _span(lo, hi)


def fit_linear_ar(train: WindowDataset, ridge: float = DEFAULT_RIDGE) -> LinearARModel:
    """Closed-form ridge fit via the normal equations. The bias is not penalized."""
    if len(train) == 0:
        raise ValueError("fit_linear_ar needs at least one sample")
    if ridge < 0:
        raise ValueError(f"ridge must be >= 0, got {ridge}")
    h = train.h
    parts = [train.states.astype(float), train.actions.astype(float)]
    aux_dim = 0
    if train.aux is not None:
        aux_dim = train.aux.shape[1]
        parts.append(train.aux.astype(float))
    X = np.hstack(parts)
    lo, hi = X.min(axis=0), X.max(axis=0)
    Xs = np.hstack([_apply_scaler(X, lo, hi), np.ones((X.shape[0], 1))])
    y = train.targets.astype(float)

    A = Xs.T @ Xs
    penalty = np.full(A.shape[0], ridge)
    penalty[-1] = 0.0
    A[np.diag_indices_from(A)] += penalty
    if ridge == 0 and np.linalg.matrix_rank(A) < A.shape[0]:
        raise np.linalg.LinAlgError(
            "normal equations are singular with ridge=0 (constant or collinear inputs); use ridge > 0"
        )
    w = np.linalg.solve(A, Xs.T @ y)
    if not np.all(np.isfinite(w)):
        raise np.linalg.LinAlgError("non-finite weights; increase ridge")
    model = LinearARModel(h, aux_dim, float(ridge), lo, hi, w)
    mae = float(np.mean(np.abs(model.predict_windows(train.states, train.actions, train.aux) - y)))
    object.__setattr__(model, "train_mae", mae)
    log.info("fit_linear_ar: %d samples, h=%d, train MAE %.4f", len(train), h, mae)
    return model


def save_linear_ar(model: LinearARModel, path) -> None:
    lines = [f"{MODEL_MAGIC} {MODEL_VERSION}", str(model.h), str(model.aux_dim), repr(model.ridge)]
    n_in = model.scale_min.size
    lines.append(str(n_in))
    lines += [repr(float(x)) for x in model.scale_min]
    lines += [repr(float(x)) for x in model.scale_max]
    lines += [repr(float(x)) for x in model.weights]
    Path(path).write_text("\n".join(lines) + "\n")


def load_linear_ar(path) -> LinearARModel:
    lines = Path(path).read_text().splitlines()
    magic = lines[0].split() if lines else []
    if len(magic) != 2 or magic[0] != MODEL_MAGIC:
        raise ValueError(f"{path}:1: not a linear AR model file")
    if int(magic[1]) != MODEL_VERSION:
        raise ValueError(f"{path}:1: unsupported model version {magic[1]}")
    h, aux_dim, ridge, n_in = int(lines[1]), int(lines[2]), float(lines[3]), int(lines[4])
    if n_in != 2 * h + aux_dim:
        raise ValueError(f"{path}:5: input count {n_in} inconsistent with h={h}, aux_dim={aux_dim}")
    vals = np.array([float(x) for x in lines[5:]])
    if vals.size != 3 * n_in + 1:
        raise ValueError(f"{path}: expected {3 * n_in + 1} numeric lines after header, got {vals.size}")
    return LinearARModel(h, aux_dim, ridge, vals[:n_in], vals[n_in:2 * n_in], vals[2 * n_in:])


# --- ground-truth oracle ----------------------------------------------------


class OracleModel(ForecastModel):
    """Forecasts with an agent's true dynamics, for testing planners.

    The habit timer is hidden from the window, so the oracle follows the
    rollout it is driven through: it starts from the snapshot taken at
    construction and tracks the true agent state along the predictions it
    has made since the last ``begin_rollout``. Random agents are forecast to
    stay where they are.
    """

    def __init__(self, spec: AgentSpec, state: AgentState, history: Sequence[Step], h: int):
        if len(history) != h:
            raise ValueError(f"oracle needs {h} history steps, got {len(history)}")
        self.spec = spec
        self.h = h
        self.aux_dim = 0
        self.snapshot = state
        past = list(history)[len(history) - (h - 1):] if h > 1 else []
        self._snapshot_key = (
            tuple(float(s) for s, _ in past) + (float(state.current),),
            tuple(int(a) for _, a in past),
        )
        self.begin_rollout()

    def begin_rollout(self) -> None:
        # window key -> true agent state; latest write wins, so a window that
        # repeats with a different habit timer resolves to the newest one
        self._known = {self._snapshot_key: self.snapshot}

    def _predict_one(self, states, actions) -> float:
        s, a = float(states[-1]), int(actions[-1])
        if self.spec.kind == AgentKind.RANDOM:
            return s
        key = (tuple(float(x) for x in states), tuple(int(x) for x in actions[:-1]))
        st = self._known.get(key, AgentState(s, 0))
        nxt = step_agent(self.spec, st, a)
        self._known[(key[0][1:] + (nxt.current,), tuple(int(x) for x in actions[1:]))] = nxt
        return nxt.current

    def predict_windows(self, states, actions, aux=None) -> np.ndarray:
        states = np.asarray(states, dtype=float).reshape(-1, self.h)
        actions = np.asarray(actions).reshape(-1, self.h)
        return np.array([self._predict_one(s, a) for s, a in zip(states, actions)])


# --- prediction and rollouts -------------------------------------------------


def _history_arrays(history, h: int) -> tuple[np.ndarray, np.ndarray]:
    hist = list(history)
    if len(hist) != h:
        raise ValueError(f"history has {len(hist)} steps but the model window is h={h}")
    if h == 1:
        return np.empty(0), np.empty(0, dtype=np.int64)
    past = hist[1:]
    return np.array([float(s) for s, _ in past]), np.array([int(a) for _, a in past], dtype=np.int64)


def _aux_row(model: ForecastModel, aux):
    if not model.aux_dim:
        return None
    if aux is None:
        raise ValueError(f"model expects {model.aux_dim} auxiliary features")
    return np.asarray(aux, dtype=float).reshape(1, model.aux_dim)


def predict_next(model: ForecastModel, history: Sequence[Step], aux, s: float, a: int) -> float:
    """One-step forecast given the ``h`` steps preceding the current state ``s``.

    The model window is the trailing h-1 history steps followed by ``(s, a)``.
    """
    past_s, past_a = _history_arrays(history, model.h)
    states = np.append(past_s, float(s))[None, :]
    actions = np.append(past_a, int(a))[None, :]
    return float(model.predict_windows(states, actions, _aux_row(model, aux))[0])


def rollout_context(
    model: ForecastModel,
    past_states: np.ndarray,
    past_actions: np.ndarray,
    aux: np.ndarray | None,
    s0: np.ndarray,
    plan: np.ndarray,
) -> np.ndarray:
    """Batched iterated forecasts.

    ``past_states``/``past_actions`` are (B, h-1), ``s0`` is (B,) and
    ``plan`` is (B, T). Returns predicted states (B, T).
    """
    past_states = np.asarray(past_states, dtype=float)
    past_actions = np.asarray(past_actions, dtype=np.int64)
    plan = np.asarray(plan, dtype=np.int64)
    s = np.asarray(s0, dtype=float).copy()
    out = np.empty(plan.shape)
    model.begin_rollout()
    for j in range(plan.shape[1]):
        a = plan[:, j]
        win_s = np.column_stack([past_states, s])
        win_a = np.column_stack([past_actions, a])
        nxt = model.predict_windows(win_s, win_a, aux)
        out[:, j] = nxt
        past_states, past_actions = win_s[:, 1:], win_a[:, 1:]
        s = nxt
    return out


def rollout_ims(model: ForecastModel, history: Sequence[Step], aux, s0: float, action_plan) -> np.ndarray:
    """Forecast the states that follow ``s0`` under ``action_plan``."""
    plan = np.asarray(action_plan, dtype=np.int64).reshape(1, -1)
    if plan.size == 0:
        raise ValueError("action plan must be non-empty")
    past_s, past_a = _history_arrays(history, model.h)
    return rollout_context(model, past_s[None, :], past_a[None, :], _aux_row(model, aux), np.array([s0]), plan)[0]


def walk_forward_mae(model: ForecastModel, trajectories: Sequence[Trajectory], h: int | None = None, steps_ahead: int = 1) -> float:
    """MAE of recursive forecasts against realized states.

    Every position with a full window behind it and ``steps_ahead`` realized
    states after it is an anchor; forecasts follow the recorded actions. The
    error is averaged over all forecast positions of all anchors.
    """
    if steps_ahead < 1:
        raise ValueError("steps_ahead must be >= 1")
    h = model.h if h is None else h
    if h != model.h:
        raise ValueError(f"h={h} does not match the model window {model.h}")
    total, count = 0.0, 0
    for tr in trajectories:
        L = len(tr)
        anchors = np.arange(h - 1, L - steps_ahead)
        if anchors.size == 0:
            continue
        back = np.arange(-(h - 1), 0)
        past_s = tr.states[anchors[:, None] + back]
        past_a = tr.actions[anchors[:, None] + back]
        fwd = np.arange(steps_ahead)
        plan = tr.actions[anchors[:, None] + fwd]
        truth = tr.states[anchors[:, None] + fwd + 1]
        aux = None
        if model.aux_dim:
            aux = np.tile(tr.features, (anchors.size, 1))
        pred = rollout_context(model, past_s, past_a, aux, tr.states[anchors], plan)
        total += float(np.abs(pred - truth).sum())
        count += pred.size
    if count == 0:
        raise ValueError("no valid anchor points: trajectories too short for h and steps_ahead")
    return total / count
