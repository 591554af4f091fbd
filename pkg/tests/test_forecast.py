import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from restless_lab.core import Step, Trajectory
from restless_lab.forecast import (
    ForecastModel,
    LinearARModel,
    OracleModel,
    WindowDataset,
    build_windows,
    fit_linear_ar,
    load_linear_ar,
    predict_next,
    rollout_ims,
    save_linear_ar,
    split_arms,
    split_dataset,
    walk_forward_mae,
)
from restless_lab.synthgen import (
    AgentKind,
    AgentSpec,
    AgentState,
    historical_action_plan,
    make_population,
    rollout_agent,
)


def traj(arm, L, rng=None, features=None):
    rng = rng or np.random.default_rng(arm)
    return Trajectory(arm, rng.random(L), rng.integers(0, 2, L), features)


class Constant(ForecastModel):
    def __init__(self, value, h=1):
        self.value, self.h, self.aux_dim = value, h, 0

    def predict_windows(self, states, actions, aux=None):
        return np.full(np.atleast_2d(states).shape[0], self.value)


def motivation(drop=0.1, baseline=1.0):
    return AgentSpec(AgentKind.MOTIVATION_BASED, drop, 0.0, baseline, 0, baseline, 1.0, 0)


# --- windows ------------------------------------------------------------------


def test_window_counts():
    assert len(build_windows([traj(0, 31)], 8)) == 23
    assert len(build_windows([traj(0, 9)], 8)) == 1


def test_short_trajectories_are_skipped(caplog):
    with caplog.at_level(logging.WARNING):
        ds = build_windows([traj(0, 20), traj(1, 9)], 10)
    assert len(ds) == 10 and ds.skipped == 1
    assert "skipped 1" in caplog.text
    assert len(build_windows([traj(0, 5)], 10)) == 0


def test_window_contents_slide_by_one():
    tr = traj(0, 6)
    ds = build_windows([tr], 3)
    for i in range(3):
        assert np.array_equal(ds.states[i], tr.states[i:i + 3])
        assert np.array_equal(ds.actions[i], tr.actions[i:i + 3])
        assert ds.targets[i] == tr.states[i + 3]
    sample = ds[1]
    assert sample.history == [Step(float(s), int(a)) for s, a in zip(tr.states[1:4], tr.actions[1:4])]
    assert len(list(ds)) == 3


@settings(max_examples=50, deadline=None)
@given(lengths=st.lists(st.integers(1, 30), min_size=1, max_size=6), h=st.integers(1, 12))
def test_window_count_property(lengths, h):
    trajs = [traj(i, L) for i, L in enumerate(lengths)]
    assert len(build_windows(trajs, h)) == sum(max(0, L - h) for L in lengths)


# --- splitting ----------------------------------------------------------------


def test_split_proportions():
    tr, va, te = split_arms(np.arange(100), rng=0)
    assert (tr.size, va.size, te.size) == (64, 16, 20)
    tr, va, te = split_arms(np.arange(3), rng=0)
    assert (tr.size, va.size, te.size) == (1, 1, 1)
    with pytest.raises(ValueError):
        split_arms(np.arange(2), rng=0)
    with pytest.raises(ValueError):
        split_arms(np.arange(10), (0.5, 0.5, 0.5))


def test_split_by_arm_and_deterministic():
    ds = build_windows([traj(i, 12) for i in range(30)], 3)
    a = split_dataset(ds, rng=5)
    b = split_dataset(ds, rng=5)
    sets = [set(p.arm_ids.tolist()) for p in a]
    assert not (sets[0] & sets[1]) and not (sets[0] & sets[2]) and not (sets[1] & sets[2])
    assert sum(len(p) for p in a) == len(ds)
    for x, y in zip(a, b):
        assert np.array_equal(x.arm_ids, y.arm_ids)


# --- linear model -----------------------------------------------------------------


def _dataset(rng, n=400, h=2, rule=None):
    S = rng.random((n, h))
    A = rng.integers(0, 2, (n, h))
    y = rule(S, A) if rule else np.full(n, 0.5)
    return WindowDataset(S, A, None, y, np.arange(n))


def test_constant_targets_ridge_zero():
    m = fit_linear_ar(_dataset(np.random.default_rng(0)), ridge=0.0)
    X = np.random.default_rng(1)
    assert np.allclose(m.predict_windows(X.random((20, 2)), X.integers(0, 2, (20, 2))), 0.5, atol=1e-9)
    assert m.weights.size == 2 * 2 + 0 + 1


def test_recovers_linear_rule():
    def rule(S, A):
        return 0.1 + 0.3 * S[:, 0] + 0.2 * S[:, 1] + 0.1 * A[:, 0] + 0.05 * A[:, 1]

    m = fit_linear_ar(_dataset(np.random.default_rng(2), rule=rule), ridge=1e-8)
    coef, intercept = m.raw_coefficients()
    assert np.allclose(coef, [0.3, 0.2, 0.1, 0.05], atol=1e-6)
    assert abs(intercept - 0.1) < 1e-6
    assert m.train_mae < 1e-6


def test_huge_ridge_predicts_mean():
    rng = np.random.default_rng(3)
    ds = _dataset(rng, rule=lambda S, A: 0.2 + 0.5 * S[:, 0])
    m = fit_linear_ar(ds, ridge=1e12)
    assert np.max(np.abs(m.weights[:-1])) < 1e-6
    assert m.predict_windows(ds.states[:5], ds.actions[:5]) == pytest.approx(np.full(5, ds.targets.mean()), abs=1e-6)


def test_singular_ridge_zero_suggests_ridge():
    S = np.tile([[0.2, 0.2]], (10, 1))
    ds = WindowDataset(S, np.zeros((10, 2), dtype=int), None, np.linspace(0, 1, 10), np.arange(10))
    with pytest.raises(np.linalg.LinAlgError, match="ridge"):
        fit_linear_ar(ds, ridge=0.0)
    fit_linear_ar(ds, ridge=1e-4)


def test_fit_rejects_bad_input():
    with pytest.raises(ValueError):
        fit_linear_ar(build_windows([traj(0, 3)], 5))
    with pytest.raises(ValueError):
        fit_linear_ar(_dataset(np.random.default_rng(0)), ridge=-1.0)


def test_fit_deterministic_and_scaler_from_train_only():
    trajs = [traj(i, 20, features=np.array([float(i % 3)])) for i in range(12)]
    ds = build_windows(trajs, 4)
    train, val, _ = split_dataset(ds, rng=0)
    m1, m2 = fit_linear_ar(train), fit_linear_ar(train)
    assert np.array_equal(m1.weights, m2.weights)
    lo = m1.scale_min.copy()
    m1.predict_windows(val.states * 3, val.actions, val.aux)
    assert np.array_equal(m1.scale_min, lo)
    X = np.hstack([train.states, train.actions, train.aux])
    assert np.array_equal(m1.scale_min, X.min(axis=0))
    assert m1.aux_dim == 1 and m1.weights.size == 2 * 4 + 1 + 1


def test_predictions_clamped():
    m = LinearARModel(1, 0, 0.0, np.zeros(2), np.ones(2), np.array([5.0, 0.0, -1.0]))
    out = m.predict_windows(np.array([[0.0], [1.0]]), np.zeros((2, 1)))
    assert out.tolist() == [0.0, 1.0]


def test_save_load_round_trip(tmp_path):
    ds = build_windows([traj(i, 15, features=np.array([0.1 * i])) for i in range(5)], 3)
    m = fit_linear_ar(ds, 1e-3)
    p = tmp_path / "m.txt"
    save_linear_ar(m, p)
    back = load_linear_ar(p)
    assert (back.h, back.aux_dim, back.ridge) == (m.h, m.aux_dim, m.ridge)
    for f in ("scale_min", "scale_max", "weights"):
        assert np.array_equal(getattr(back, f), getattr(m, f))
    lines = p.read_text().splitlines()
    assert lines[0].startswith("restless_lab.linear_ar") and lines[1] == "3"
    p.write_text("nope\n")
    with pytest.raises(ValueError):
        load_linear_ar(p)


# --- prediction and rollouts ---------------------------------------------------------


def test_oracle_predict_next():
    spec = motivation()
    hist = [Step(0.5, 0)] * 3
    m = OracleModel(spec, AgentState(0.5), hist, 3)
    assert predict_next(m, hist, None, 0.5, 0) == pytest.approx(0.4)
    assert predict_next(m, hist, None, 0.5, 1) == 1.0
    with pytest.raises(ValueError):
        predict_next(m, hist[:2], None, 0.5, 0)


def test_oracle_rollout_passive():
    spec = motivation()
    hist = [Step(1.0, 0)] * 2
    out = rollout_ims(OracleModel(spec, AgentState(1.0), hist, 2), hist, None, 1.0, [0] * 5)
    assert out == pytest.approx([0.9, 0.8, 0.7, 0.6, 0.5])


def test_rollout_length_one_is_predict_next():
    ds = build_windows([traj(i, 20) for i in range(6)], 3)
    m = fit_linear_ar(ds)
    hist = [Step(0.3, 1), Step(0.4, 0), Step(0.6, 0)]
    assert rollout_ims(m, hist, None, 0.5, [1])[0] == predict_next(m, hist, None, 0.5, 1)
    assert rollout_ims(m, hist, None, 0.5, [1, 0, 0, 1]).shape == (4,)
    with pytest.raises(ValueError):
        rollout_ims(m, hist, None, 0.5, [])


@pytest.mark.parametrize("seed", range(5))
def test_oracle_rollout_matches_dynamics(seed):
    agents = make_population(3, "test", seed, kinds=(AgentKind.HABIT_FORMER, AgentKind.MOTIVATION_BASED))
    plan = historical_action_plan(40, 10, 3)
    h = 4
    for spec in agents:
        states, trace = rollout_agent(spec, plan)
        t0 = 6
        hist = [Step(states[j], int(plan[j])) for j in range(t0 - h, t0)]
        m = OracleModel(spec, trace[t0], hist, h)
        pred = rollout_ims(m, hist, None, states[t0], plan[t0:-1])
        assert np.array_equal(pred, states[t0 + 1:])


def test_walk_forward_mae():
    agents = make_population(2, "train", 0, kinds=(AgentKind.MOTIVATION_BASED,))
    spec = agents[0]
    states, _ = rollout_agent(spec, np.zeros(12, dtype=int))
    tr = Trajectory(0, states, np.zeros(12, dtype=int))
    hist = [Step(states[0], 0)] * 3
    # passive motivation agents never need the habit timer, so a fresh oracle is exact anywhere
    assert walk_forward_mae(OracleModel(spec, AgentState(states[0]), hist, 3), [tr], steps_ahead=3) == pytest.approx(0.0)
    ones = Trajectory(0, np.ones(10), np.zeros(10, dtype=int))
    assert walk_forward_mae(Constant(0.0, 2), [ones], steps_ahead=2) == 1.0
    with pytest.raises(ValueError):
        walk_forward_mae(Constant(0.0, 2), [ones], steps_ahead=0)
    with pytest.raises(ValueError):
        walk_forward_mae(Constant(0.0, 2), [Trajectory(0, [0.5, 0.5], [0, 0])], steps_ahead=2)
