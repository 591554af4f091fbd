"""Domain types shared by every planner: states, actions, trajectories and
problem instances, plus the engagement reward and state discretization.

States are plain floats in [0, 1]. Out-of-range values raise instead of being
clamped so that bad input data surfaces early.
"""

from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

import numpy as np

DEFAULT_THRESHOLD = 0.25
MESSAGE_SECONDS = 120.0

TRAJECTORY_HEADER = ["arm_id", "week", "state", "action"]


def engagement_state(value: float) -> float:
    """Validate ``value`` as an engagement level and return it as a float."""
    value = float(value)
    if not (0.0 <= value <= 1.0):
        raise ValueError(f"engagement state must lie in [0, 1], got {value!r}")
    return value


class Action(enum.IntEnum):
    PASSIVE = 0
    ACTIVE = 1


class Step(NamedTuple):
    state: float
    action: int


@dataclass(frozen=True)
class Trajectory:
    """One arm's observed path. ``states[t]`` and ``actions[t]`` belong to week t+1."""

    arm_id: int
    states: np.ndarray
    actions: np.ndarray
    features: np.ndarray | None = None

    def __post_init__(self):
        states = np.asarray(self.states, dtype=float).reshape(-1)
        actions = np.asarray(self.actions, dtype=np.int64).reshape(-1)
        if self.arm_id < 0:
            raise ValueError(f"arm_id must be nonnegative, got {self.arm_id}")
        if states.size == 0:
            raise ValueError(f"trajectory for arm {self.arm_id} is empty")
        if states.shape != actions.shape:
            raise ValueError(
                f"arm {self.arm_id}: {states.size} states but {actions.size} actions"
            )
        if np.any(~np.isfinite(states)) or np.any((states < 0.0) | (states > 1.0)):
            raise ValueError(f"arm {self.arm_id}: states must lie in [0, 1]")
        if np.any((actions != 0) & (actions != 1)):
            raise ValueError(f"arm {self.arm_id}: actions must be 0 or 1")
        states.setflags(write=False)
        actions.setflags(write=False)
        object.__setattr__(self, "states", states)
        object.__setattr__(self, "actions", actions)
        if self.features is not None:
            feats = np.asarray(self.features, dtype=float).reshape(-1)
            feats.setflags(write=False)
            object.__setattr__(self, "features", feats)

    def __len__(self) -> int:
        return int(self.states.size)

    @property
    def steps(self) -> list[Step]:
        return [Step(float(s), int(a)) for s, a in zip(self.states, self.actions)]


@dataclass(frozen=True)
class ProblemInstance:
    n_arms: int
    budget: int
    horizon: int
    threshold: float = DEFAULT_THRESHOLD

    def __post_init__(self):
        if self.n_arms < 1:
            raise ValueError(f"ProblemInstance: n_arms must be positive, got {self.n_arms}")
        if not (1 <= self.budget <= self.n_arms):
            raise ValueError(
                f"ProblemInstance: budget must satisfy 1 <= k <= N, got k={self.budget}, N={self.n_arms}"
            )
        if self.horizon < 1:
            raise ValueError(f"ProblemInstance: horizon must be >= 1, got {self.horizon}")
        engagement_state(self.threshold)


@dataclass(frozen=True)
class Discretizer:
    """Maps continuous states to bins.

    Two bins split at ``threshold`` (engaging vs. not); more bins are equal
    width over [0, 1] with 1.0 falling in the last bin.
    """

    n_bins: int = 2
    threshold: float = DEFAULT_THRESHOLD

    def __post_init__(self):
        if self.n_bins < 2:
            raise ValueError(f"Discretizer needs at least 2 bins, got {self.n_bins}")
        engagement_state(self.threshold)

    def __call__(self, state):
        return discretize(state, self)

    def midpoints(self) -> np.ndarray:
        """A representative state inside each bin."""
        if self.n_bins == 2:
            return np.array([self.threshold / 2.0, (1.0 + self.threshold) / 2.0])
        return (np.arange(self.n_bins) + 0.5) / self.n_bins


def reward(state, threshold: float = DEFAULT_THRESHOLD):
    """1 when the arm is engaging (state >= threshold), else 0. Vectorizes over arrays."""
    out = np.asarray(state) >= threshold
    if out.ndim == 0:
        return int(out)
    return out.astype(np.int64)


def discretize(state, d: Discretizer):
    s = np.asarray(state, dtype=float)
    if d.n_bins == 2:
        bins = (s >= d.threshold).astype(np.int64)
    else:
        bins = np.minimum(np.floor(s * d.n_bins), d.n_bins - 1).astype(np.int64)
        bins = np.maximum(bins, 0)
    if bins.ndim == 0:
        return int(bins)
    return bins


def budget_from_fraction(n_arms: int, fraction: float) -> int:
    if not (0.0 < fraction <= 1.0):
        raise ValueError(f"budget fraction must lie in (0, 1], got {fraction}")
    # epsilon absorbs binary representation error, e.g. 0.3 * 10 = 2.9999999999999996
    return max(1, int(math.floor(fraction * n_arms + 1e-9)))


# --- CSV interchange -------------------------------------------------------


def format_state(x: float) -> str:
    return repr(float(x))


def write_trajectories_csv(path, trajectories: Iterable[Trajectory]) -> None:
    trajectories = sorted(trajectories, key=lambda tr: tr.arm_id)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRAJECTORY_HEADER)
        for tr in trajectories:
            for week, (s, a) in enumerate(zip(tr.states, tr.actions), start=1):
                w.writerow([tr.arm_id, week, format_state(s), int(a)])


def write_features_csv(path, trajectories: Iterable[Trajectory]) -> None:
    rows = [tr for tr in trajectories if tr.features is not None]
    if not rows:
        raise ValueError("no trajectory carries features")
    dim = rows[0].features.size
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["arm_id"] + [f"f{i}" for i in range(dim)])
        for tr in sorted(rows, key=lambda tr: tr.arm_id):
            if tr.features.size != dim:
                raise ValueError(f"arm {tr.arm_id}: feature length {tr.features.size} != {dim}")
            w.writerow([tr.arm_id] + [format_state(f) for f in tr.features])


def read_features_csv(path) -> dict[int, np.ndarray]:
    out: dict[int, np.ndarray] = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[0] != "arm_id":
            raise ValueError(f"{path}: expected header starting with 'arm_id'")
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise ValueError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            out[int(row[0])] = np.array([float(x) for x in row[1:]])
    return out


def read_trajectories_csv(path, features_path=None) -> list[Trajectory]:
    """Parse the ``arm_id,week,state,action`` format.

    Rows must be sorted by (arm_id, week) with gapless weeks starting at 1.
    """
    path = Path(path)
    features = read_features_csv(features_path) if features_path is not None else {}
    per_arm: dict[int, tuple[list[float], list[int]]] = {}
    order: list[int] = []
    last_key = None
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != TRAJECTORY_HEADER:
            raise ValueError(f"{path}:1: expected header {','.join(TRAJECTORY_HEADER)}, got {header}")
        for lineno, row in enumerate(reader, start=2):
            if len(row) != 4:
                raise ValueError(f"{path}:{lineno}: expected 4 fields, got {len(row)}")
            try:
                arm, week, state, action = int(row[0]), int(row[1]), float(row[2]), int(row[3])
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
            if last_key is not None and (arm, week) <= last_key:
                raise ValueError(f"{path}:{lineno}: rows must be sorted by (arm_id, week)")
            if arm not in per_arm:
                if week != 1:
                    raise ValueError(f"{path}:{lineno}: arm {arm} starts at week {week}, expected 1")
                per_arm[arm] = ([], [])
                order.append(arm)
            elif week != len(per_arm[arm][0]) + 1:
                raise ValueError(f"{path}:{lineno}: arm {arm} has a gap before week {week}")
            try:
                engagement_state(state)
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
            if action not in (0, 1):
                raise ValueError(f"{path}:{lineno}: action must be 0 or 1, got {action}")
            per_arm[arm][0].append(state)
            per_arm[arm][1].append(action)
            last_key = (arm, week)
    return [
        Trajectory(arm, np.array(per_arm[arm][0]), np.array(per_arm[arm][1]), features.get(arm))
        for arm in order
    ]


def stack_trajectories(trajectories: Sequence[Trajectory]) -> tuple[np.ndarray, np.ndarray]:
    """(N, T) state and action arrays for equal-length trajectories."""
    lengths = {len(tr) for tr in trajectories}
    if len(lengths) != 1:
        raise ValueError(f"trajectories have differing lengths: {sorted(lengths)}")
    return (
        np.stack([tr.states for tr in trajectories]),
        np.stack([tr.actions for tr in trajectories]),
    )


def arm_rng(seed: int, *keys: int) -> np.random.Generator:
    """Independent random stream for (seed, keys...), e.g. (seed, arm_id) or (seed, tag, t).

    Streams depend only on their key, never on the order in which they are
    requested, so parallel execution cannot change results.
    """
    return np.random.default_rng(np.random.SeedSequence([int(seed), *[int(k) for k in keys]]))
