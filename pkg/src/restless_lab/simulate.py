"""Episode engine, offline counterfactual replay and engagement metrics."""

from __future__ import annotations

import csv
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Literal, Sequence

import numpy as np

from .core import (
    DEFAULT_THRESHOLD,
    MESSAGE_SECONDS,
    ProblemInstance,
    Trajectory,
    arm_rng,
    budget_from_fraction,
    format_state,
    stack_trajectories,
)
from .forecast import ForecastModel
from .policies.base import Observation, Policy, check_decision
from .synthgen import AgentSpec, dynamics_rng, initial_state, step_agent

log = logging.getLogger(__name__)

DECISION_STREAM = 0x5EED
CRITICAL_WINDOW = 6


@dataclass
class EpisodeLog:
    """Per-week, per-arm states and actions of one run.

    ``states[i, t]`` is NaN once arm i has left the pool (replay method 2).
    ``budgets[t]`` is the number of arms that must be acted on at week t, or
    -1 where the policy is not budget-constrained.
    """

    states: np.ndarray
    actions: np.ndarray
    policy: str
    seed: int
    instance: ProblemInstance | None = None
    budgets: np.ndarray | None = None
    arm_ids: np.ndarray | None = None
    counterfactual_calls: int = 0

    def __post_init__(self):
        if self.arm_ids is None:
            self.arm_ids = np.arange(self.states.shape[0])

    @property
    def horizon(self) -> int:
        return self.states.shape[1]

    def to_trajectories(self) -> list[Trajectory]:
        return [
            Trajectory(int(a), s, act)
            for a, s, act in zip(self.arm_ids, self.states, self.actions)
        ]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["arm_id", "week", "state", "action", "policy", "seed"])
            for i, arm in enumerate(self.arm_ids):
                for t in range(self.horizon):
                    s = self.states[i, t]
                    w.writerow([int(arm), t + 1, "nan" if np.isnan(s) else format_state(s),
                                int(self.actions[i, t]), self.policy, self.seed])


def validate_budget(log_: EpisodeLog) -> None:
    """Raise if any budget-constrained week acted on the wrong number of arms."""
    if log_.budgets is None:
        return
    used = log_.actions.sum(axis=0)
    bad = np.flatnonzero((log_.budgets >= 0) & (used != log_.budgets))
    if bad.size:
        t = int(bad[0])
        raise AssertionError(f"{log_.policy}: week {t + 1} acted on {used[t]} arms, budget {log_.budgets[t]}")


def _decide(policy: Policy, obs: Observation, k: int, rng, n_arms: int) -> np.ndarray:
    try:
        chosen = np.asarray(policy.select(obs, k, rng), dtype=np.int64)
        if policy.budgeted:
            check_decision(chosen, n_arms, k)
    except Exception as exc:
        raise RuntimeError(f"policy {policy.name!r} failed at week {obs.t}: {exc}") from exc
    return chosen


def run_synthetic_episode(
    instance: ProblemInstance,
    agents: Sequence[AgentSpec],
    policy: Policy,
    seed: int,
    *,
    workers: int = 1,
) -> EpisodeLog:
    """Simulate ``instance.horizon`` weeks with full observability.

    Week t: observe every state, let the policy pick arms, act, step all
    agents. Arms draw randomness from their own streams and the policy from a
    per-week stream, so results do not depend on ``workers``.
    """
    N, H, k = instance.n_arms, instance.horizon, instance.budget
    if len(agents) != N:
        raise ValueError(f"instance has {N} arms but {len(agents)} agents were given")
    features = np.array([[a.feature] for a in agents])
    states = np.empty((N, H))
    actions = np.zeros((N, H), dtype=np.int64)
    agent_states = [initial_state(a) for a in agents]
    rngs = [dynamics_rng(seed, i) for i in range(N)]
    policy.reset()

    def advance(i, a):
        agent_states[i] = step_agent(agents[i], agent_states[i], a, rngs[i])

    pool = ThreadPoolExecutor(workers) if workers > 1 else None
    try:
        for t in range(H):
            states[:, t] = [st.current for st in agent_states]
            obs = Observation(t + 1, states[:, : t + 1], actions[:, :t], features, np.arange(N))
            chosen = _decide(policy, obs, k, arm_rng(seed, DECISION_STREAM, t), N)
            actions[chosen, t] = 1
            if t + 1 < H:
                if pool is None:
                    for i in range(N):
                        advance(i, int(actions[i, t]))
                else:
                    list(pool.map(advance, range(N), actions[:, t].tolist()))
    finally:
        if pool is not None:
            pool.shutdown()
    budgets = np.full(H, k if policy.budgeted else 0)
    return EpisodeLog(states, actions, policy.name, seed, instance, budgets)


# --- offline replay ----------------------------------------------------------


class CountingModel(ForecastModel):
    """Wraps a forecaster and counts prediction calls."""

    def __init__(self, inner: ForecastModel):
        self.inner = inner
        self.h = inner.h
        self.aux_dim = inner.aux_dim
        self.calls = 0

    def predict_windows(self, states, actions, aux=None):
        self.calls += np.atleast_2d(states).shape[0]
        return self.inner.predict_windows(states, actions, aux)

    def begin_rollout(self):
        self.inner.begin_rollout()


@dataclass
class ReplayConfig:
    counterfactual_model: ForecastModel
    method: Literal["full_counterfactual", "remove_on_deviation"] = "full_counterfactual"

    def __post_init__(self):
        if self.method not in ("full_counterfactual", "remove_on_deviation"):
            raise ValueError(f"unknown replay method {self.method!r}")


def _window(states, actions, i, t, h):
    """Window of h steps ending at week t (0-indexed) for arm i, padded at the start."""
    lo = t - h + 1
    idx = np.clip(np.arange(lo, t + 1), 0, None)
    return states[i, idx], actions[i, idx]


def replay_offline(
    dataset: Sequence[Trajectory],
    policy: Policy,
    cfg: ReplayConfig,
    budget_fraction: float,
    seed: int,
    *,
    warmup: int = 0,
) -> EpisodeLog:
    """Evaluate ``policy`` on recorded trajectories.

    An arm follows its recorded states until the first week the policy's
    action differs from the recorded one. From then on it is deviated:
    ``full_counterfactual`` forecasts its states recursively with the
    counterfactual model; ``remove_on_deviation`` forecasts only the next
    state and then drops the arm, shrinking the budget with the pool. During
    the first ``warmup`` weeks recorded actions are replayed unchanged.
    """
    dataset = list(dataset)
    hist_s, hist_a = stack_trajectories(dataset)
    N, T = hist_s.shape
    arm_ids = np.array([tr.arm_id for tr in dataset])
    feats = None
    if all(tr.features is not None for tr in dataset):
        feats = np.stack([tr.features for tr in dataset])
    model = CountingModel(cfg.counterfactual_model)
    h = model.h
    remove = cfg.method == "remove_on_deviation"

    states = hist_s.copy()
    actions = np.zeros((N, T), dtype=np.int64)
    deviated = np.zeros(N, dtype=bool)
    present = np.ones(N, dtype=bool)
    budgets = np.full(T, -1)
    policy.reset()

    for t in range(T):
        pool = np.flatnonzero(present)
        if t < warmup:
            act = hist_a[:, t].copy()
        elif pool.size == 0:
            # everyone has been removed; nothing left to decide
            act = np.zeros(N, dtype=np.int64)
            if policy.budgeted:
                budgets[t] = 0
        else:
            k = budget_from_fraction(pool.size, budget_fraction)
            obs = Observation(
                t + 1,
                states[pool, : t + 1],
                actions[pool, :t],
                None if feats is None else feats[pool],
                arm_ids[pool],
            )
            chosen = _decide(policy, obs, min(k, pool.size), arm_rng(seed, DECISION_STREAM, t), pool.size)
            act = np.zeros(N, dtype=np.int64)
            act[pool[chosen]] = 1
            if policy.budgeted:
                budgets[t] = min(k, pool.size)
        act[~present] = 0
        actions[:, t] = act

        newly = present & ~deviated & (act != hist_a[:, t])
        deviated |= newly
        if t + 1 >= T:
            break
        forecast_rows = np.flatnonzero(present & deviated)
        if forecast_rows.size:
            win = [_window(states, actions, i, t, h) for i in forecast_rows]
            ws = np.array([w[0] for w in win])
            wa = np.array([w[1] for w in win])
            aux = feats[forecast_rows] if (model.aux_dim and feats is not None) else None
            model.begin_rollout()
            states[forecast_rows, t + 1] = model.predict_windows(ws, wa, aux)
        if remove:
            gone = present & deviated
            present &= ~gone
            states[gone, t + 2:] = np.nan
    return EpisodeLog(states, actions, policy.name, seed, None, budgets, arm_ids, model.calls)


# --- metrics -----------------------------------------------------------------


def engaged_counts(log_: EpisodeLog, threshold: float = DEFAULT_THRESHOLD, exclude=None) -> np.ndarray:
    s = log_.states
    mask = ~np.isnan(s)
    if exclude is not None:
        mask &= ~np.asarray(exclude, dtype=bool)[:, None]
    with np.errstate(invalid="ignore"):
        return ((s >= threshold) & mask).sum(axis=0)


def engaged_fraction(log_: EpisodeLog, threshold: float = DEFAULT_THRESHOLD, exclude=None) -> np.ndarray:
    """Fraction of (non-excluded, present) arms engaging at each week."""
    mask = ~np.isnan(log_.states)
    if exclude is not None:
        mask &= ~np.asarray(exclude, dtype=bool)[:, None]
    n = mask.sum(axis=0)
    return np.divide(engaged_counts(log_, threshold, exclude), n, out=np.zeros(log_.horizon), where=n > 0)


def _check_matched(a: EpisodeLog, b: EpisodeLog):
    if a.states.shape != b.states.shape:
        raise ValueError(f"logs cover different arms/weeks: {a.states.shape} vs {b.states.shape}")


def drops_prevented(log_policy: EpisodeLog, log_control: EpisodeLog, threshold: float = DEFAULT_THRESHOLD):
    """Cumulative net engagement drops prevented relative to control.

    Per week: arms engaging under the policy but not under control, minus
    arms engaging under control but not under the policy. Returns the
    cumulative series and the weeks where the net count was negative.
    """
    _check_matched(log_policy, log_control)
    with np.errstate(invalid="ignore"):
        p = log_policy.states >= threshold
        c = log_control.states >= threshold
    per_week = (p & ~c).sum(axis=0) - (c & ~p).sum(axis=0)
    worse = np.flatnonzero(per_week < 0)
    if worse.size:
        log.info("drops_prevented: policy worse than control at weeks %s", (worse + 1).tolist())
    return np.cumsum(per_week), worse + 1


def critical_beneficiaries(dataset: Sequence[Trajectory], threshold: float = DEFAULT_THRESHOLD,
                           window: int = CRITICAL_WINDOW) -> set[int]:
    """Arms engaging early, never called, and disengaged for the final ``window`` weeks."""
    out = set()
    for tr in dataset:
        if len(tr) < 2 * window:
            raise ValueError(f"arm {tr.arm_id}: critical labelling needs >= {2 * window} weeks, got {len(tr)}")
        early = np.any(tr.states[:window] >= threshold)
        never_called = not tr.actions.any()
        dropped = np.all(tr.states[-window:] < threshold)
        if early and never_called and dropped:
            out.add(tr.arm_id)
    return out


def critical_reached(log_: EpisodeLog, critical: set[int]) -> np.ndarray:
    """Cumulative percentage of critical arms acted on at least once by each week."""
    if not critical:
        return np.zeros(log_.horizon)
    rows = np.isin(log_.arm_ids, list(critical))
    reached = np.cumsum(log_.actions[rows], axis=1) > 0
    return 100.0 * reached.sum(axis=0) / rows.sum()


@dataclass
class AppendixJMetrics:
    mean_weekly_engagement_improvement: float
    mean_relative_engagement_improvement: float
    cumulative_additional_engagement: float
    cumulative_additional_duration: float
    relative_increase_cumulative_engagement: float
    relative_increase_defined: bool = True


def appendix_j_metrics(log_policy: EpisodeLog, log_baseline: EpisodeLog,
                       threshold: float = DEFAULT_THRESHOLD, exclude=None) -> AppendixJMetrics:
    """Impact of a policy relative to a baseline, in engaged-arm counts and listening seconds."""
    _check_matched(log_policy, log_baseline)
    cp = engaged_counts(log_policy, threshold, exclude).astype(float)
    cb = engaged_counts(log_baseline, threshold, exclude).astype(float)
    diff = cp - cb
    ok = cb > 0
    rel = float(np.mean(100.0 * (cp[ok] / cb[ok] - 1.0))) if ok.any() else math.nan
    sp, sb = log_policy.states, log_baseline.states
    rows = np.ones(sp.shape[0], dtype=bool) if exclude is None else ~np.asarray(exclude, dtype=bool)
    both = ~np.isnan(sp) & ~np.isnan(sb) & rows[:, None]
    duration = float(MESSAGE_SECONDS * np.sum(np.where(both, sp - sb, 0.0)))
    total_b = cb.sum()
    defined = total_b > 0
    return AppendixJMetrics(
        mean_weekly_engagement_improvement=float(diff.mean()),
        mean_relative_engagement_improvement=rel,
        cumulative_additional_engagement=float(diff.sum()),
        cumulative_additional_duration=duration,
        relative_increase_cumulative_engagement=float(100.0 * (cp.sum() / total_b - 1.0)) if defined else math.nan,
        relative_increase_defined=bool(defined),
    )


@dataclass
class MetricReport:
    policy: str
    seed: int
    engaged_fraction: list[float]
    mean_engaged_fraction: float
    cumulative_drops_prevented_vs_control: list[float] | None = None
    critical_reached_pct: list[float] | None = None
    appendix_j: dict[str, dict] = field(default_factory=dict)

    def to_json(self) -> str:
        def clean(x):
            if isinstance(x, float) and not math.isfinite(x):
                return None
            if isinstance(x, dict):
                return {k: clean(v) for k, v in x.items()}
            if isinstance(x, list):
                return [clean(v) for v in x]
            return x

        return json.dumps(clean(asdict(self)), indent=2, sort_keys=True)


def build_report(log_: EpisodeLog, threshold: float, *, control: EpisodeLog | None = None,
                 baselines: dict[str, EpisodeLog] | None = None, critical: set[int] | None = None,
                 exclude=None) -> MetricReport:
    frac = engaged_fraction(log_, threshold, exclude)
    report = MetricReport(log_.policy, log_.seed, frac.tolist(), float(frac.mean()))
    if control is not None:
        report.cumulative_drops_prevented_vs_control = drops_prevented(log_, control, threshold)[0].astype(float).tolist()
    if critical is not None:
        report.critical_reached_pct = critical_reached(log_, critical).tolist()
    for name, other in (baselines or {}).items():
        if other is log_:
            continue
        report.appendix_j[name] = asdict(appendix_j_metrics(log_, other, threshold, exclude))
    return report
