"""
Tests for the QoS cost and the load balancing optimizer
"""
import numpy as np
import pytest

import qos_cache
from model import state_grid, state_index
from qos import (QosTable, big_m, block_qos_tables, block_rates, block_response_time, build_qos_table,
                 check_load_balancing, full_capacity_infeasible, optimize_load_balancing, probe_axis_convexity,
                 project_simplex, qos_cost_given_Q, qos_row)
from utils import DomainError


def _grid_cost(x, lam, rate, qs):
    """Brute-force cost over a grid of (column 1, column 2) splits between two blocks"""
    q1 = qs[:, None]
    q2 = qs[None, :] if lam.size > 1 else np.zeros((1, 1))
    lamS1 = q1 * lam[0] + (q2 * lam[1] if lam.size > 1 else 0.0)
    lamS2 = (1 - q1) * lam[0] + ((1 - q2) * lam[1] if lam.size > 1 else 0.0)
    total = np.zeros(np.broadcast(lamS1, lamS2).shape)
    for b, lamS in enumerate((lamS1, lamS2)):
        D = rate[b] * x[b] - lamS
        used = lamS > 0
        ok = ~used | (D > 0)
        total = np.where(ok, total + np.where(used, lamS * x[b] / np.where(D > 0, D, 1.0), 0.0), np.inf)
    return float(total.min())


def test_symmetric_two_blocks_split_evenly(make_cfg):
    cfg = make_cfg([1, 1], [2.0, 2.0], mask=[[True], [True]], types=[0, 0])
    result = optimize_load_balancing([1, 1], [2.0], cfg)
    assert result.feasible
    assert result.cost == pytest.approx(2.0, abs=1e-4)
    assert result.Q_star[:, 0] == pytest.approx([0.5, 0.5], abs=1e-4)


def test_block_rates_route_class_rates():
    Q = np.array([[1.0, 0.5], [0.0, 0.5]])
    assert block_rates(Q, [2.0, 4.0]).tolist() == [4.0, 2.0]


@pytest.mark.parametrize("J", [1, 2])
def test_optimizer_matches_grid_search(make_cfg, J):
    rng = np.random.default_rng(7 + J)
    qs = np.linspace(0.0, 1.0, 101)
    checked = 0
    while checked < 50:
        rate = rng.uniform(0.5, 3.0, size=2)
        x = rng.integers(1, 4, size=2)
        lam = rng.uniform(0.1, 1.0, size=J) * float(np.dot(rate, x)) / J * 0.8
        cfg = make_cfg(x, rate, mask=np.ones((2, J), dtype=bool))
        oracle = _grid_cost(x, lam, rate, qs)
        if not np.isfinite(oracle):
            continue
        result = optimize_load_balancing(x, lam, cfg)
        assert result.feasible
        assert result.cost <= oracle * (1 + 1e-3)
        assert qos_cost_given_Q(x, lam, result.Q_star, cfg) == pytest.approx(result.cost, rel=1e-9)
        checked += 1


def test_zero_arrivals_cost_nothing(two_blocks):
    cfg, _ = two_blocks
    result = optimize_load_balancing([0, 0], [0.0, 0.0], cfg)
    assert result.feasible and result.cost == 0.0


def test_insufficient_capacity_is_infeasible(two_blocks):
    cfg, _ = two_blocks
    result = optimize_load_balancing([0, 2], [0.5, 0.5], cfg)
    assert not result.feasible
    assert result.Q_star is None and result.cost == np.inf
    assert not optimize_load_balancing([1, 0], [2.0, 0.0], cfg).feasible


def test_block_response_time():
    assert block_response_time(2, 1.0, 1.0) == pytest.approx(2.0)
    assert block_response_time(1, 1.0, 1.0) is None


def test_qos_cost_given_Q_unstable_is_none(make_cfg):
    cfg = make_cfg([1, 1], [1.0, 1.0], mask=[[True], [True]], types=[0, 0])
    assert qos_cost_given_Q([1, 1], [1.5], [[1.0], [0.0]], cfg) is None
    assert qos_cost_given_Q([1, 1], [1.5], [[0.5], [0.5]], cfg) == pytest.approx(2 * 0.75 * 4.0)


def test_check_load_balancing(two_blocks):
    cfg, _ = two_blocks
    check_load_balancing([[1.0, 0.5], [0.0, 0.5]], cfg)
    with pytest.raises(DomainError):
        check_load_balancing([[0.5, 0.5], [0.5, 0.5]], cfg)
    with pytest.raises(DomainError):
        check_load_balancing([[1.0, 0.7], [0.0, 0.5]], cfg)


def test_project_simplex():
    assert project_simplex(np.array([0.5, 0.5])) == pytest.approx([0.5, 0.5])
    assert project_simplex(np.array([2.0, 0.0])) == pytest.approx([1.0, 0.0])
    y = project_simplex(np.array([0.3, -1.0, 0.9, 0.2]))
    assert y.sum() == pytest.approx(1.0) and np.all(y >= 0)


def test_forced_row_matches_optimizer(make_cfg):
    cfg = make_cfg([2, 3], [1.0, 0.5])
    grid = state_grid(cfg)
    lam = np.array([1.2, 0.7])
    costs, feasible = qos_row(lam, grid, cfg, penalty=1e6)
    for i, x in enumerate(grid):
        result = optimize_load_balancing(x, lam, cfg)
        assert feasible[i] == result.feasible
        if result.feasible:
            assert costs[i] == pytest.approx(result.cost, rel=1e-12)
        else:
            assert costs[i] == 1e6


def test_qos_nondecreasing_in_lambda(two_blocks):
    cfg, _ = two_blocks
    grid = state_grid(cfg)
    low, _ = qos_row([0.2, 0.3], grid, cfg, penalty=1e9)
    high, _ = qos_row([0.4, 0.6], grid, cfg, penalty=1e9)
    assert np.all(high >= low - 1e-6 * np.abs(low))


def test_big_m_dominates_feasible_cells(single_block):
    cfg, model = single_block
    table = build_qos_table(state_grid(cfg), model.support, cfg, horizon=3)
    assert table.penalty == big_m(cfg, model.support, 3)
    assert np.all(table.costs[table.feasible] * 3 < table.penalty)
    assert table.num_infeasible == model.num_lambda


def test_table_lookup_and_off_support_evaluator(single_block):
    cfg, model = single_block
    table = build_qos_table(state_grid(cfg), model.support, cfg)
    assert table.lookup([2], [1.5], cfg) == pytest.approx(1.5 * 2 / (4 - 1.5))
    qos = table.evaluator(cfg)
    assert qos([2], [1.0]) == pytest.approx(1.0 * 2 / (4 - 1.0))
    assert qos([0], [1.0]) == table.penalty
    with pytest.raises(DomainError):
        table.lookup([2], [1.0], cfg)


def test_full_capacity_infeasible(make_cfg):
    cfg = make_cfg([2], [1.0])
    grid = state_grid(cfg)
    assert not full_capacity_infeasible(build_qos_table(grid, [[1.5]], cfg), cfg)
    assert full_capacity_infeasible(build_qos_table(grid, [[1.5], [2.5]], cfg), cfg)


def test_convexity_probe():
    convex = np.array([[4.0], [1.0], [0.5], [0.4]])
    assert probe_axis_convexity(convex, np.ones_like(convex, dtype=bool), (4,)) == 0
    bumpy = np.array([[1.0], [3.0], [0.5], [0.4]])
    assert probe_axis_convexity(bumpy, np.ones_like(bumpy, dtype=bool), (4,)) == 1
    mask = np.array([[False], [True], [True], [True]])
    assert probe_axis_convexity(bumpy, mask, (4,)) == 0


def test_single_block_table_is_axis_convex(single_block):
    cfg, model = single_block
    table = build_qos_table(state_grid(cfg), model.support, cfg)
    assert probe_axis_convexity(table.costs, table.feasible, cfg.dims) == 0


def test_table_cache_round_trip(tmp_path, two_blocks):
    cfg, model = two_blocks
    db = str(tmp_path / "cache.db")
    grid = state_grid(cfg)
    first = build_qos_table(grid, model.support, cfg, digest="abc", db_path=db)
    conn = qos_cache.get_db_connection(db)
    rows, infeasible = conn.execute("SELECT COUNT(*), MAX(infeasible) FROM qos_tables").fetchone()
    conn.close()
    assert rows == 1
    assert infeasible == first.num_infeasible > 0
    second = build_qos_table(grid, model.support, cfg, digest="abc", db_path=db)
    np.testing.assert_array_equal(first.costs, second.costs)
    np.testing.assert_array_equal(first.feasible, second.feasible)
    assert qos_cache.clear_cache(db) == 1


def test_qos_table_is_frozen_dataclass(single_block):
    cfg, model = single_block
    table = build_qos_table(state_grid(cfg), model.support, cfg)
    assert isinstance(table, QosTable)
    assert table.costs.shape == (4, 2)
    assert table.costs[state_index([0], cfg), 0] == table.penalty


def _assert_nonincreasing_in_capacity(cfg, support, pairs=200, seed=11):
    table = build_qos_table(state_grid(cfg), support, cfg)
    rng = np.random.default_rng(seed)
    for _ in range(pairs):
        small = rng.integers(0, cfg.servers + 1)
        large = small + rng.integers(0, cfg.servers - small + 1)
        lo = table.costs[state_index(small, cfg)]
        hi = table.costs[state_index(large, cfg)]
        # big-M cells included
        assert np.all(hi <= lo + 1e-4 * np.abs(lo))
        assert np.all(table.feasible[state_index(large, cfg)] >= table.feasible[state_index(small, cfg)])


def test_two_blocks_qos_nonincreasing_in_capacity(two_blocks):
    cfg, model = two_blocks
    _assert_nonincreasing_in_capacity(cfg, model.support)


@pytest.mark.parametrize("shared", [False, True])
def test_qos_nonincreasing_in_capacity(make_cfg, shared):
    mask = np.ones((3, 2), dtype=bool) if shared else [[True, False], [False, True], [True, False]]
    cfg = make_cfg([3, 2, 4], [1.0, 2.0, 0.5], mask=mask)
    _assert_nonincreasing_in_capacity(cfg, [[0.5, 0.8], [1.5, 1.2], [3.0, 2.5]])


def test_block_tables_sum_to_joint_table(make_cfg):
    cfg = make_cfg([3, 2, 2], [1.0, 2.0, 0.5], mask=[[True, False], [False, False], [False, True]],
                   weights=[2.0, 0.5])
    support = np.array([[0.5, 0.3], [1.5, 0.8], [2.5, 0.2]])
    joint = build_qos_table(state_grid(cfg), support, cfg, horizon=2)
    tables = block_qos_tables(cfg, support, horizon=2)
    assert [sub.servers.tolist() for sub, _ in tables] == [[3], [2], [2]]
    assert all(t.penalty == joint.penalty for _, t in tables)
    grid = state_grid(cfg)
    feasible = np.ones_like(joint.feasible)
    total = np.zeros_like(joint.costs)
    for b, (_, table) in enumerate(tables):
        feasible &= table.feasible[grid[:, b]]
        total += table.costs[grid[:, b]]
    np.testing.assert_array_equal(feasible, joint.feasible)
    np.testing.assert_allclose(total[feasible], joint.costs[feasible], rtol=1e-12)
    # the idle middle block never costs anything
    assert np.all(tables[1][1].costs == 0.0)


def test_block_tables_need_pinned_classes(two_blocks):
    cfg, model = two_blocks
    assert block_qos_tables(cfg, model.support) is None
