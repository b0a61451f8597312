"""
Aggregated models over server types
"""
import heapq
import logging
from dataclasses import dataclass

import numpy as np

from model import DataCenterConfig, PriceSchedule
from qos import QosTable, big_m, qos_row
from utils import DomainError

logger = logging.getLogger(__name__)

CASES = {
    "case1": "constant_prices",
    "constant_prices": "constant_prices",
    "case2": "zero_switch_cost",
    "zero_switch_cost": "zero_switch_cost",
}


@dataclass(frozen=True)
class TypeAggregation:
    N: np.ndarray
    type_blocks: tuple

    @property
    def num_types(self):
        return self.N.size


def type_aggregation(cfg):
    """Per-type server totals and member blocks (in block order)"""
    blocks = tuple(tuple(int(b) for b in np.flatnonzero(cfg.block_type == i)) for i in range(cfg.num_types))
    N = np.array([int(cfg.servers[list(members)].sum()) for members in blocks])
    return TypeAggregation(N, blocks)


def aggregate_by_type(x, agg):
    """y_i = sum of x_b over the blocks of type i"""
    x = np.asarray(x, dtype=int)
    return np.array([int(x[list(members)].sum()) for members in agg.type_blocks])


def optimal_disaggregation(t, y, agg, cfg):
    """
    Cheapest on-count vector aggregating to y

    With linear energy prices the blocks of a type are filled in ascending
    per-server price (ties by block index). With tabulated convex curves one
    server at a time goes to the block with the smallest marginal cost.

    Args:
        t (int): Slot index
        y (array): Per-type on-counts, 0 <= y <= N
        agg (TypeAggregation): Type structure
        cfg (DataCenterConfig): Configuration

    Returns:
        np.ndarray: x*(y)
    """
    y = np.asarray(y, dtype=int)
    if y.shape != agg.N.shape or np.any(y < 0) or np.any(y > agg.N):
        raise DomainError(f"y={y.tolist()} lies outside [0, {agg.N.tolist()}]")
    x = np.zeros(cfg.num_blocks, dtype=int)
    curves = cfg.price.energy_curves
    for i, members in enumerate(agg.type_blocks):
        remaining = int(y[i])
        if curves is None:
            prices = cfg.price.energy_prices(t)
            for b in sorted(members, key=lambda b: (prices[b], b)):
                take = min(remaining, int(cfg.servers[b]))
                x[b] = take
                remaining -= take
            continue
        rows = {b: PriceSchedule._row(curves[b], t) for b in members}
        heap = [(rows[b][1] - rows[b][0], b) for b in members if cfg.servers[b] > 0]
        heapq.heapify(heap)
        while remaining > 0:
            _, b = heapq.heappop(heap)
            x[b] += 1
            remaining -= 1
            if x[b] < cfg.servers[b]:
                heapq.heappush(heap, (rows[b][x[b] + 1] - rows[b][x[b]], b))
    return x


@dataclass(frozen=True)
class AggregatedModel:
    """Reduced configuration over Omega_y and its QoS table at x*(y)"""
    case: str
    cfg: DataCenterConfig
    agg: TypeAggregation
    qos_table: QosTable
    source: DataCenterConfig

    def disaggregate(self, t, y):
        return optimal_disaggregation(t, y, self.agg, self.source)


def _constant_in_time(table):
    return bool(np.all(table == table[0]))


def _uniform_within_types(prices, agg):
    return all(np.all(prices[:, list(m)] == prices[:, [m[0]]]) for m in agg.type_blocks)


def validate_case(case, cfg, agg):
    """Raise DomainError when cfg violates the assumptions of the aggregation case"""
    price = cfg.price
    if case == "constant_prices":
        energy_tables = [price.energy] if price.energy_curves is None else list(price.energy_curves)
        if not all(_constant_in_time(tab) for tab in energy_tables):
            raise DomainError("aggregation case 1 needs electricity prices constant over time")
        for name, tab in (("switch_on", price.switch_on), ("switch_off", price.switch_off)):
            if not _constant_in_time(tab):
                raise DomainError(f"aggregation case 1 needs constant {name} costs")
            if not _uniform_within_types(tab, agg):
                raise DomainError(f"aggregation case 1 needs equal {name} costs within each server type")
    else:
        if np.any(price.switch_on != 0) or np.any(price.switch_off != 0):
            raise DomainError("aggregation case 2 needs zero switching costs")


def build_aggregated_model(case, cfg, model, horizon=1, approximate=False):
    """
    Reduced MDP over per-type on-counts

    The reduced configuration has one block per server type with N_i servers,
    energy curves tabulated from the cheapest disaggregation, and switching
    prices per type (case 1) or zero (case 2). The QoS table is
    c^QoS(x*(y), lambda).

    Args:
        case (str): 'case1' / 'constant_prices' or 'case2' / 'zero_switch_cost'
        cfg (DataCenterConfig): Full configuration
        model (ModeModel): Mode dynamics (unchanged by aggregation)
        horizon (int): Horizon used to size the big-M penalty
        approximate (bool): Let a non-conforming configuration through with a warning

    Returns:
        AggregatedModel: Reduced configuration and QoS table
    """
    if case not in CASES:
        raise DomainError(f"unknown aggregation case {case!r}")
    case = CASES[case]
    agg = type_aggregation(cfg)
    try:
        validate_case(case, cfg, agg)
    except DomainError as e:
        if not approximate:
            raise
        logger.warning(f"Aggregating a non-conforming configuration: {e}")

    slots = cfg.price.horizon if case == "zero_switch_cost" else 1
    reduced_dims = tuple(int(n) + 1 for n in agg.N)
    y_grid = np.indices(reduced_dims).reshape(agg.num_types, -1).T
    curves = []
    for i, members in enumerate(agg.type_blocks):
        curve = np.zeros((slots, agg.N[i] + 1))
        for s in range(slots):
            t = s + 1
            y = np.zeros(agg.num_types, dtype=int)
            for n in range(agg.N[i] + 1):
                y[i] = n
                x = optimal_disaggregation(t, y, agg, cfg)
                curve[s, n] = _member_energy(cfg, t, x, members)
        curves.append(curve)

    first = [m[0] for m in agg.type_blocks]
    if case == "constant_prices":
        switch_on = cfg.price.switch_on[:1, first]
        switch_off = cfg.price.switch_off[:1, first]
    else:
        switch_on = np.zeros((1, agg.num_types))
        switch_off = np.zeros((1, agg.num_types))
    reduced = DataCenterConfig(
        servers=agg.N,
        block_type=np.arange(agg.num_types),
        rate=cfg.rate[first],
        serve_mask=cfg.serve_mask[first],
        qos_weight=cfg.qos_weight,
        price=PriceSchedule(np.zeros((1, agg.num_types)), switch_on, switch_off, energy_curves=curves),
        block_names=tuple(f"type{i}" for i in range(agg.num_types)),
        class_names=cfg.class_names,
    )

    xstar = np.array([optimal_disaggregation(1, y, agg, cfg) for y in y_grid])
    penalty = big_m(cfg, model.support, horizon)
    rows = [qos_row(lam, xstar, cfg, penalty) for lam in model.support]
    table = QosTable(np.stack([r[0] for r in rows], axis=1), np.stack([r[1] for r in rows], axis=1),
                     model.support, penalty)
    logger.info(f"Aggregated {cfg.num_blocks} blocks into {agg.num_types} types ({case}), "
                f"|Omega_y|={y_grid.shape[0]}")
    return AggregatedModel(case, reduced, agg, table, cfg)


def _member_energy(cfg, t, x, members):
    total = 0.0
    for b in members:
        if cfg.price.energy_curves is None:
            total = total + cfg.price.energy_prices(t)[b] * x[b]
        else:
            total = total + PriceSchedule._row(cfg.price.energy_curves[b], t)[x[b]]
    return total
