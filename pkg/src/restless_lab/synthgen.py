"""Synthetic beneficiary populations.

Three agent kinds: habit formers (passive drift down, multiplicative boost
when acted on, locked at 1.0 for a while once they reach it), motivation-based
agents (passive drift down, reset to their baseline when acted on) and random
agents whose state ignores the action entirely.

Parameter noise ``a ± U(x)`` is read by default as ``a + sign * U(0, x)`` with
a fair-coin sign. ``noise="symmetric"`` draws from U(-x, x) instead.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Literal

import numpy as np

from .core import Trajectory, arm_rng

Mode = Literal["train", "test"]
NoiseStyle = Literal["signed", "symmetric"]

MIN_DROP_RATE = 0.01
HABIT_DURATION_RANGE = (8, 12)
ACT_COUNT_RANGE = (6, 24)
ACT_EVERY_RANGE = (1, 14)
FEATURE_NOISE_SD = 0.1


class AgentKind(enum.IntEnum):
    HABIT_FORMER = 0
    MOTIVATION_BASED = 1
    RANDOM = 2


@dataclass(frozen=True)
class AgentSpec:
    kind: AgentKind
    drop_rate: float
    increase_rate: float
    baseline: float
    habit_duration: int
    start_state: float
    feature: float
    rng_seed: int

    @property
    def deterministic(self) -> bool:
        return self.kind != AgentKind.RANDOM


@dataclass(frozen=True)
class AgentState:
    current: float
    habit_timer: int = 0

    def __post_init__(self):
        if self.habit_timer < 0:
            raise ValueError("habit_timer must be nonnegative")
        if self.habit_timer > 0 and self.current != 1.0:
            raise ValueError("a running habit timer requires state 1.0")


def _perturb(rng: np.random.Generator, center: float, width: float, noise: NoiseStyle) -> float:
    if noise == "symmetric":
        return center + rng.uniform(-width, width)
    sign = 1.0 if rng.random() < 0.5 else -1.0
    return center + sign * rng.uniform(0.0, width)


def sample_agent(
    kind: AgentKind,
    mode: Mode,
    rng: np.random.Generator,
    *,
    rng_seed: int = 0,
    noise: NoiseStyle = "signed",
) -> AgentSpec:
    """Draw one agent's parameters. They stay fixed for the agent's lifetime."""
    if mode not in ("train", "test"):
        raise ValueError(f"mode must be 'train' or 'test', got {mode!r}")
    kind = AgentKind(kind)
    drop = increase = 0.0
    habit = 0
    if kind == AgentKind.HABIT_FORMER:
        start = _perturb(rng, 0.75, 0.2, noise)
        if mode == "train":
            drop = _perturb(rng, 0.03, 0.03, noise)
            increase = 0.2 + rng.uniform(0.0, 0.2)
        else:
            drop = _perturb(rng, 0.1, 0.05, noise)
            increase = 0.2 + rng.uniform(0.0, 0.1)
        habit = int(rng.integers(HABIT_DURATION_RANGE[0], HABIT_DURATION_RANGE[1] + 1))
    elif kind == AgentKind.MOTIVATION_BASED:
        start = 1.0 - rng.uniform(0.0, 0.2)
        if mode == "train":
            drop = _perturb(rng, 0.05, 0.05, noise)
        else:
            drop = _perturb(rng, 0.1, 0.05, noise)
    else:
        start = rng.uniform(0.0, 1.0)
    feature = float(kind) + rng.normal(0.0, FEATURE_NOISE_SD)
    return AgentSpec(
        kind=kind,
        drop_rate=max(MIN_DROP_RATE, drop) if kind != AgentKind.RANDOM else 0.0,
        increase_rate=increase,
        baseline=start,
        habit_duration=habit,
        start_state=float(np.clip(start, 0.0, 1.0)),
        feature=feature,
        rng_seed=rng_seed,
    )


def initial_state(spec: AgentSpec) -> AgentState:
    return AgentState(spec.start_state, 0)


def step_agent(spec: AgentSpec, st: AgentState, action: int, rng: np.random.Generator | None = None) -> AgentState:
    """Advance one agent by one timestep under ``action``."""
    if spec.kind == AgentKind.RANDOM:
        if rng is None:
            raise ValueError("random agents need an rng to step")
        return AgentState(float(rng.uniform(0.0, 1.0)), 0)

    s = st.current
    if spec.kind == AgentKind.HABIT_FORMER:
        if st.habit_timer > 0:
            return AgentState(1.0, st.habit_timer - 1)
        nxt = (1.0 + spec.increase_rate) * s if action else s - spec.drop_rate
        if nxt >= 1.0:
            return AgentState(1.0, spec.habit_duration)
        return AgentState(max(0.0, nxt), 0)

    nxt = spec.baseline if action else s - spec.drop_rate
    return AgentState(float(min(1.0, max(0.0, nxt))), 0)


def make_population(
    n_per_kind: int,
    mode: Mode,
    seed: int,
    *,
    kinds=tuple(AgentKind),
    noise: NoiseStyle = "signed",
) -> list[AgentSpec]:
    """Equal numbers of each kind, arm ids assigned kind by kind."""
    agents = []
    arm = 0
    for kind in kinds:
        for _ in range(n_per_kind):
            rng = arm_rng(seed, arm, 0)
            agents.append(sample_agent(kind, mode, rng, rng_seed=arm, noise=noise))
            arm += 1
    return agents


def dynamics_rng(seed: int, arm_id: int) -> np.random.Generator:
    """Stream that drives an agent's stochastic transitions."""
    return arm_rng(seed, arm_id, 1)


def historical_action_plan(length: int, n_acts: int, every: int) -> np.ndarray:
    """Act at weeks every, 2*every, ..., n_acts*every (1-indexed), dropping weeks past ``length``."""
    actions = np.zeros(length, dtype=np.int64)
    weeks = every * np.arange(1, n_acts + 1)
    weeks = weeks[weeks <= length]
    actions[weeks - 1] = 1
    return actions


def rollout_agent(
    spec: AgentSpec,
    actions,
    rng: np.random.Generator | None = None,
    state: AgentState | None = None,
) -> tuple[np.ndarray, list[AgentState]]:
    """States s_1..s_L when acting per ``actions`` (a_t applied after observing s_t)."""
    st = initial_state(spec) if state is None else state
    states = np.empty(len(actions))
    trace = []
    for t, a in enumerate(actions):
        states[t] = st.current
        trace.append(st)
        if t + 1 < len(actions):
            st = step_agent(spec, st, int(a), rng)
    return states, trace


def simulate_history(agents: list[AgentSpec], length: int, seed: int) -> list[Trajectory]:
    """Roll each agent under a randomized periodic intervention schedule.

    Agent ``arm`` is acted on ``i`` times (uniform in 6..24), every ``j``
    weeks (uniform in 1..14). The single feature is the noisy kind indicator.
    """
    if length < 1:
        raise ValueError("length must be >= 1")
    out = []
    for arm, spec in enumerate(agents):
        plan_rng = arm_rng(seed, arm, 2)
        n_acts = int(plan_rng.integers(ACT_COUNT_RANGE[0], ACT_COUNT_RANGE[1] + 1))
        every = int(plan_rng.integers(ACT_EVERY_RANGE[0], ACT_EVERY_RANGE[1] + 1))
        actions = historical_action_plan(length, n_acts, every)
        states, _ = rollout_agent(spec, actions, dynamics_rng(seed, arm))
        out.append(Trajectory(arm, states, actions, np.array([spec.feature])))
    return out


def generate_historical_dataset(
    n_per_kind: int,
    length: int,
    mode: Mode,
    seed: int,
    *,
    noise: NoiseStyle = "signed",
) -> list[Trajectory]:
    agents = make_population(n_per_kind, mode, seed, noise=noise)
    return simulate_history(agents, length, seed)
