"""
Invariant checks on a reduced copy of an instance
"""
import logging

import numpy as np
import pandas as pd

from model import DataCenterConfig, PriceSchedule, state_grid
from qos import build_qos_table, full_capacity_infeasible, probe_axis_convexity
from solver import ModeModel, backward_induction, flat_backward_induction, minimax_lower_bound

logger = logging.getLogger(__name__)

MAX_SERVERS = 3
MAX_LAMBDA = 3
MAX_HORIZON = 3
WIDTHS = (0.0, 0.05, 0.1, 0.2)
ATOL = 1e-9


def reduce_instance(cfg, model, max_servers=MAX_SERVERS, max_lambda=MAX_LAMBDA):
    """
    Clip every block to max_servers and keep the first max_lambda support points

    Rates are scaled with the server counts so the reduced data center keeps
    its relative capacity. Emission rows are renormalized over the kept
    points; a mode that loses all its mass gets a uniform row.

    Returns:
        tuple: (DataCenterConfig, ModeModel)
    """
    servers = np.minimum(cfg.servers, max_servers)
    scale = cfg.servers / servers
    curves = None
    if cfg.price.energy_curves is not None:
        curves = [curve[:, :servers[b] + 1] for b, curve in enumerate(cfg.price.energy_curves)]
    price = PriceSchedule(cfg.price.energy, cfg.price.switch_on, cfg.price.switch_off, curves)
    # blocks of one type keep a common rate
    rate = cfg.rate * np.array([scale[cfg.block_type == cfg.block_type[b]].max() for b in range(cfg.num_blocks)])
    reduced = DataCenterConfig(servers, cfg.block_type, rate, cfg.serve_mask, cfg.qos_weight, price,
                               cfg.block_names, cfg.class_names)

    keep = min(max_lambda, model.num_lambda)
    emission = np.array(model.emission[:, :, :keep])
    mass = emission.sum(axis=2, keepdims=True)
    emission = np.where(mass > 0, emission / np.where(mass > 0, mass, 1.0), 1.0 / keep)
    small = ModeModel(model.support[:keep], emission, model.chain, dict(model.meta))
    return reduced, small


def _excess(a, b):
    """Largest relative amount by which a exceeds b"""
    return float(np.max((a - b) / (1 + np.abs(b))))


def _axis_violations(values, feasible, dims):
    count = 0
    for t in range(values.shape[0] - 1):
        for theta in range(values.shape[3]):
            count += probe_axis_convexity(values[t, :, :, theta], feasible, dims)
    return count


def invariant_report(cfg, model, horizon=MAX_HORIZON, gamma=0.95, rule="orthant"):
    """
    Run the structural checks and collect them in a frame

    Args:
        cfg (DataCenterConfig): Reduced configuration
        model (ModeModel): Reduced mode model
        horizon (int): Slots solved
        gamma (float): Discount
        rule (str): Decision rule of the threshold solve

    Returns:
        pd.DataFrame: Columns check, value, passed
    """
    grid = state_grid(cfg)
    table = build_qos_table(grid, model.support, cfg, horizon=horizon)
    rows = []

    def record(name, value, passed):
        rows.append({"check": name, "value": float(value), "passed": bool(passed)})
        level = logging.INFO if passed else logging.WARNING
        logger.log(level, f"check {name}: {float(value):.6g} ({'ok' if passed else 'FAILED'})")

    qos_violations = probe_axis_convexity(table.costs, table.feasible, cfg.dims)
    record("qos_axis_convexity_violations", qos_violations, qos_violations == 0)
    record("full_capacity_infeasible", full_capacity_infeasible(table, cfg), not full_capacity_infeasible(table, cfg))

    policy, values = backward_induction(model, cfg, horizon, gamma, table, rule)
    flat = flat_backward_induction(model, cfg, horizon, gamma, table)
    value_violations = _axis_violations(values.values, table.feasible, cfg.dims)
    record("value_axis_convexity_violations", value_violations, value_violations == 0 or qos_violations > 0)

    # flat values never exceed the threshold values
    below = _excess(flat.values, values.values)
    record("flat_minus_threshold_max", below, below <= ATOL)
    equal = max(below, _excess(values.values, flat.values)) <= ATOL
    record("threshold_equals_flat", float(equal), True)

    bounds = [minimax_lower_bound(t, policy, table, cfg) for t in range(1, horizon + 1)]
    bound_excess = max(_excess(bound, values.at(t + 1)) for t, bound in enumerate(bounds))
    record("lower_bound_minus_threshold_max", bound_excess, bound_excess <= ATOL)
    final_excess = _excess(bounds[-1], flat.at(horizon))
    record("final_lower_bound_minus_flat_max", final_excess, final_excess <= ATOL)

    previous = None
    monotone = True
    for width in WIDTHS:
        widened = flat_backward_induction(model.widened(width), cfg, horizon, gamma, table)
        v1 = widened.at(1)
        if previous is not None and _excess(previous, v1) > ATOL:
            monotone = False
        previous = v1
    record("robust_monotone_in_width", float(monotone), monotone)
    return pd.DataFrame(rows, columns=["check", "value", "passed"])
