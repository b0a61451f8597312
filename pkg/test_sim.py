"""
Tests for trajectory sampling and batch comparison
"""
import numpy as np
import pytest

from model import State, stage_cost, state_grid
from qos import build_qos_table
from sim import (BatchStats, band_frame, compare_policies, default_initial_state, run_batch,
                 sample_trajectory)
from solver import backward_induction, continuation
from utils import DomainError


class FixedCapacity:
    """Always moves to the same on-count vector"""

    def __init__(self, capacity, label="fixed"):
        self.capacity = np.asarray(capacity, dtype=int)
        self.label = label

    def act(self, x, theta, t, lam=None):
        return self.capacity


class StayPut:
    label = "stay"

    def act(self, x, theta, t, lam=None):
        return np.asarray(x, dtype=int)


@pytest.fixture
def coin_flip(make_cfg, make_model):
    """One server that costs 1 when a unit-rate burst arrives and nothing otherwise"""
    cfg = make_cfg([1], [2.0], energy=0.0, switch_on=0.0, switch_off=0.0)
    model = make_model([[0.0], [1.0]], [[0.5, 0.5]], [[1.0]])
    return cfg, model


def test_trajectory_chains_states(single_block):
    cfg, model = single_block
    table = build_qos_table(state_grid(cfg), model.support, cfg, horizon=6)
    policy, _ = backward_induction(model, cfg, 6, 0.9, table)
    s0 = State([1], [1.5], 1)
    traj = sample_trajectory(model, cfg, policy, s0, 6, rng=5, qos_table=table)
    assert traj.horizon == 6
    assert traj.x[0].tolist() == [1] and traj.theta[0] == 1
    for t in range(5):
        assert traj.x[t + 1].tolist() == traj.action[t].tolist()
        assert traj.theta[t + 1] == traj.next_theta[t]
        assert traj.lam[t + 1].tolist() == model.support[traj.next_lambda_index[t]].tolist()
        assert traj.action[t].tolist() == policy.act(traj.x[t], traj.theta[t], t + 1).tolist()
    np.testing.assert_allclose(traj.cumulative, np.cumsum(traj.cost))


def test_same_seed_same_trajectory(single_block):
    cfg, model = single_block
    s0 = default_initial_state(model, cfg)
    first = sample_trajectory(model, cfg, StayPut(), s0, 8, rng=42)
    second = sample_trajectory(model, cfg, StayPut(), s0, 8, rng=42)
    np.testing.assert_array_equal(first.cost, second.cost)
    np.testing.assert_array_equal(first.next_theta, second.next_theta)
    assert first.seed == 42 and first.label == "stay"


def test_single_slot_cost_is_stage_cost(single_block):
    cfg, model = single_block
    table = build_qos_table(state_grid(cfg), model.support, cfg)
    s0 = State([2], [0.5], 0)
    traj = sample_trajectory(model, cfg, FixedCapacity([3]), s0, 1, rng=0, qos_table=table)
    assert traj.cost[0] == stage_cost(1, s0, [3], table.evaluator(cfg), cfg)


def test_deterministic_chain_alternates(make_cfg, make_model):
    cfg = make_cfg([2], [2.0])
    model = make_model([[0.5], [1.5]], [[1.0, 0.0], [0.0, 1.0]], [[0.0, 1.0], [1.0, 0.0]])
    traj = sample_trajectory(model, cfg, StayPut(), State([2], [0.5], 0), 6, rng=1)
    assert traj.theta.tolist() == [0, 1, 0, 1, 0, 1]
    assert traj.lam[:, 0].tolist() == [0.5, 1.5, 0.5, 1.5, 0.5, 1.5]


def test_zero_cost_instance(make_cfg, make_model):
    cfg = make_cfg([2], [1.0], energy=0.0, switch_on=0.0, switch_off=0.0)
    model = make_model([[0.0]], [[1.0]], [[1.0]])
    stats = run_batch(model, cfg, FixedCapacity([1]), 5, 4, seed=3)
    assert isinstance(stats, BatchStats) and stats.n_runs == 5
    assert stats.mean.tolist() == [0.0] * 4
    assert stats.std.tolist() == [0.0] * 4


def test_run_batch_needs_two_runs(single_block):
    cfg, model = single_block
    with pytest.raises(DomainError):
        run_batch(model, cfg, StayPut(), 1, 3)
    with pytest.raises(DomainError):
        sample_trajectory(model, cfg, StayPut(), default_initial_state(model, cfg), 0)


def test_iid_costs_match_binomial_spread(coin_flip):
    cfg, model = coin_flip
    h = 10
    s0 = State([1], [0.0], 0)
    stats = run_batch(model, cfg, FixedCapacity([1]), 2000, h, seed=11, s0=s0)
    steps = np.arange(h)
    # slot 1 is free, every later slot costs 1 with probability one half
    np.testing.assert_allclose(stats.mean[2:], steps[2:] / 2, rtol=0.1)
    np.testing.assert_allclose(stats.std[2:], np.sqrt(steps[2:] / 4), rtol=0.2)
    assert stats.mean[0] == 0.0 and stats.std[0] == 0.0
    assert np.all(np.diff(stats.mean) >= 0)


def test_jobs_do_not_change_results(coin_flip):
    cfg, model = coin_flip
    serial = run_batch(model, cfg, FixedCapacity([1]), 6, 5, seed=2, jobs=1)
    pooled = run_batch(model, cfg, FixedCapacity([1]), 6, 5, seed=2, jobs=2)
    np.testing.assert_array_equal(serial.cumulative, pooled.cumulative)


def test_compare_identical_policies(coin_flip):
    cfg, model = coin_flip
    bands, summary = compare_policies(model, cfg, [("a", FixedCapacity([1])), ("b", FixedCapacity([1]))],
                                      20, 5, seed=4)
    assert len(bands) == 10
    assert list(bands.columns) == ["policy", "t", "mean", "std", "lo1", "hi1", "lo2", "hi2"]
    assert summary["diff_mean"].tolist() == [0.0, 0.0]
    assert summary["diff_stderr"].tolist() == [0.0, 0.0]
    assert summary["final_mean"].iloc[0] == summary["final_mean"].iloc[1]


def test_compare_policies_arguments(coin_flip):
    cfg, model = coin_flip
    with pytest.raises(DomainError, match="at least two"):
        compare_policies(model, cfg, {"a": StayPut()}, 5, 3)
    with pytest.raises(DomainError, match="unique"):
        compare_policies(model, cfg, [("a", StayPut()), ("a", StayPut())], 5, 3)


def test_adversarial_draws_follow_worst_case_rows(single_block):
    cfg, model = single_block
    table = build_qos_table(state_grid(cfg), model.support, cfg, horizon=4)
    policy, values = backward_induction(model, cfg, 4, 0.9, table)
    with pytest.raises(DomainError, match="value table"):
        sample_trajectory(model, cfg, policy, State([2], [0.5], 0), 4, adversarial=True)
    traj = sample_trajectory(model, cfg, policy, State([2], [0.5], 0), 4, rng=9, qos_table=table,
                             adversarial=True, values=values)
    _, rows = continuation(1, values.at(2), model, return_rows=True)
    row = rows[int(traj.action[0][0]), 0]
    assert model.chain_at(1)[0].contains(row)
    assert np.all(np.isfinite(traj.cost))


def test_default_initial_state(single_block):
    cfg, model = single_block
    s0 = default_initial_state(model, cfg)
    assert s0.x.tolist() == [3]
    assert s0.theta == 1
    assert s0.lam.tolist() == [1.5]


def test_frames(single_block):
    cfg, model = single_block
    traj = sample_trajectory(model, cfg, StayPut(), default_initial_state(model, cfg), 3, rng=0)
    frame = traj.to_frame(cfg)
    assert list(frame.columns) == ["t", "theta", "x_b1", "lam_c1", "a_b1", "cost", "cumulative"]
    assert frame["t"].tolist() == [1, 2, 3]
    stats = BatchStats(np.array([1.0, 3.0]), np.array([0.5, 1.0]), np.zeros((2, 2)))
    band = band_frame("x", stats)
    assert band["lo2"].tolist() == [0.0, 1.0] and band["hi1"].tolist() == [1.5, 4.0]
