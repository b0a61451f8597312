"""
Benchmark-size runs on the four-block data center: the threshold policy against
the MPC baseline on a fitted mode model, and solve time against server count
"""
import os
import time

import numpy as np
import pytest

from ingest import DEFAULT_MODES, cluster_modes, estimate_mode_model, gen_synthetic_trace, load_mode_model
from model import DataCenterConfig, read_config_file, state_grid
from mpc import MpcController
from qos import block_qos_tables, build_qos_table, full_capacity_infeasible
from sim import compare_policies
from solver import DEFAULT_GAMMA, DEFAULT_HORIZON, backward_induction, separable_backward_induction

pytestmark = pytest.mark.slow

TRACE_SLOTS = 8760
RUNS = 1000
TIME_LIMIT = 600.0
SCALES = (0.25, 0.5, 1.0, 2.0, 8.0)


def _fitted_model(modes, synthetic_model_path, seed=0):
    truth = load_mode_model(synthetic_model_path)
    series = gen_synthetic_trace(truth, TRACE_SLOTS, seed=seed)
    assignments, _ = cluster_modes(series, DEFAULT_MODES, seed=seed)
    model = estimate_mode_model(series, assignments, DEFAULT_MODES)
    return model.with_robustness(modes.get("robust", "interval"))


def test_threshold_policy_beats_mpc(benchmark_config_path, synthetic_model_path):
    cfg, modes = read_config_file(benchmark_config_path)
    model = _fitted_model(modes, synthetic_model_path)
    assert model.num_modes == DEFAULT_MODES
    jobs = min(4, os.cpu_count() or 1)
    table = build_qos_table(state_grid(cfg), model.support, cfg, DEFAULT_HORIZON, jobs)
    assert not full_capacity_infeasible(table, cfg)

    started = time.perf_counter()
    policy, _ = backward_induction(model, cfg, DEFAULT_HORIZON, DEFAULT_GAMMA, table)
    assert time.perf_counter() - started < TIME_LIMIT
    policies = [("mdp", policy), ("mpc", MpcController(model, cfg, table.penalty))]
    bands, summary = compare_policies(model, cfg, policies, RUNS, DEFAULT_HORIZON, seed=0, qos_table=table,
                                      jobs=jobs)

    final = dict(zip(summary["policy"], summary["final_mean"]))
    assert final["mdp"] <= final["mpc"]
    assert len(bands) == 2 * DEFAULT_HORIZON


def _scaled(cfg, scale):
    servers = np.maximum(np.round(cfg.servers * scale).astype(int), 1)
    return DataCenterConfig(servers, cfg.block_type, cfg.rate, cfg.serve_mask, cfg.qos_weight, cfg.price,
                            cfg.block_names, cfg.class_names)


def _solve_seconds(model, cfg, repeats=3):
    best = float("inf")
    for _ in range(repeats):
        started = time.perf_counter()
        tables = block_qos_tables(cfg, model.support, DEFAULT_HORIZON)
        separable_backward_induction(model, cfg, DEFAULT_HORIZON, DEFAULT_GAMMA, tables)
        best = min(best, time.perf_counter() - started)
    return best


def test_separable_solve_time_grows_linearly(benchmark_config_path, synthetic_model_path):
    cfg, modes = read_config_file(benchmark_config_path)
    model = load_mode_model(synthetic_model_path).with_robustness(modes.get("robust", "interval"))
    configs = [_scaled(cfg, s) for s in SCALES]
    totals = np.array([c.servers.sum() for c in configs], dtype=float)
    assert totals[2] == cfg.servers.sum()
    seconds = np.array([_solve_seconds(model, c) for c in configs])
    assert np.all(seconds < TIME_LIMIT)
    # growth from the smallest instance stays within 1.5x of linear
    assert np.all(seconds / seconds[0] <= 1.5 * totals / totals[0])
