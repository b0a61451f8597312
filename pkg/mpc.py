"""
Two-stage MPC baseline: interval-forecast capacity planning, then load balancing on the observed rates
"""
import logging
from dataclasses import dataclass

import numpy as np

from model import check_in_box, state_grid, switching_costs
from qos import big_m, optimize_load_balancing, qos_row
from utils import DomainError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class MpcPlan:
    capacity: np.ndarray
    worst_cost: float
    infeasible: bool
    forecast_hi: np.ndarray


def forecast_intervals(theta, model, t=1):
    """
    Per-class rate interval covering every arrival vector reachable in one step

    A next mode is reachable when its chain entry can be positive under the
    uncertainty set of row theta.

    Returns:
        tuple: (lo (J,), hi (J,))
    """
    chain_set = model.chain_at(t)[theta]
    upper = getattr(chain_set, "hi", chain_set.nominal)
    reachable = np.flatnonzero(upper > 0)
    emission = model.emission_at(t)
    used = np.flatnonzero(emission[reachable].sum(axis=0) > 0)
    points = model.support[used]
    return points.min(axis=0), points.max(axis=0)


def _objective(t, x, grid, qos_costs, cfg):
    # the plan pays QoS and idle energy of the capacity it sets, plus switching from x
    return qos_costs + cfg.price.idle_energy(t, grid) + switching_costs(t, x[None, :], grid, cfg)


def mpc_plan(x, forecast, cfg, t=1, penalty=None, grid=None, qos_costs=None):
    """
    Capacity minimizing the worst-case cost over the forecast box

    QoS cost is nondecreasing in lambda, so the worst case sits at the box's
    upper corner.

    Args:
        x (array): Current on-counts
        forecast (tuple): (lo, hi) per-class rate bounds
        cfg (DataCenterConfig): Configuration
        t (int): Slot of the planned capacity
        penalty (float): big-M for infeasible capacities; sized from the corner if None
        grid (np.ndarray): Omega_x, computed if None
        qos_costs (np.ndarray): QoS costs of the corner over grid, computed if None

    Returns:
        MpcPlan: Planned capacity (full capacity with the flag set when nothing is feasible)
    """
    x = np.asarray(check_in_box(x, cfg), dtype=int)
    lo, hi = (np.asarray(v, dtype=float) for v in forecast)
    if lo.shape != (cfg.num_classes,) or hi.shape != lo.shape or np.any(lo > hi):
        raise DomainError("forecast must be a nonempty per-class interval box")
    grid = state_grid(cfg) if grid is None else grid
    if penalty is None:
        penalty = big_m(cfg, hi[None, :])
    if qos_costs is None:
        qos_costs, feasible = qos_row(hi, grid, cfg, penalty)
    else:
        feasible = qos_costs < penalty
    if not np.any(feasible):
        full = cfg.servers.copy()
        idx = grid.shape[0] - 1
        cost = float(_objective(t, x, grid[idx:], qos_costs[idx:], cfg)[0])
        logger.warning(f"Forecast corner {hi.tolist()} overloads the full data center")
        return MpcPlan(full, cost, True, hi)
    objective = _objective(t, x, grid, qos_costs, cfg)
    best = int(np.argmin(objective))
    return MpcPlan(grid[best].copy(), float(objective[best]), False, hi)


def mpc_step(state, plan, observed_lambda, cfg, t=1, penalty=None):
    """
    Second stage: balance the observed load on the planned capacity

    Args:
        state (State): State at planning time (its x is the capacity being left)
        plan (MpcPlan): First-stage plan
        observed_lambda (array): Realized arrival rates
        cfg (DataCenterConfig): Configuration
        t (int): Slot of the planned capacity
        penalty (float): Realized QoS cost when the capacity is overloaded

    Returns:
        tuple: (Q or None, realized cost)
    """
    lam = np.asarray(observed_lambda, dtype=float)
    if penalty is None:
        penalty = big_m(cfg, np.maximum(lam, plan.forecast_hi)[None, :])
    result = optimize_load_balancing(plan.capacity, lam, cfg)
    qos = result.cost if result.feasible else penalty
    grid = plan.capacity[None, :]
    realized = float(_objective(t, np.asarray(state.x, dtype=int), grid, np.array([qos]), cfg)[0])
    return result.Q_star, realized


class MpcController:
    """
    MPC baseline as a policy: forecast from the current mode, plan one slot ahead

    QoS rows of every forecast corner are cached, so repeated runs only pay
    for the plan's argmin.
    """

    def __init__(self, model, cfg, penalty=None, label="mpc"):
        self.model = model
        self.cfg = cfg
        self.label = label
        self.grid = state_grid(cfg)
        self.penalty = penalty if penalty is not None else big_m(cfg, model.support)
        self._rows = {}
        self.infeasible_plans = 0

    def _corner_costs(self, hi):
        key = tuple(hi.tolist())
        if key not in self._rows:
            self._rows[key], _ = qos_row(hi, self.grid, self.cfg, self.penalty)
            logger.debug(f"MPC cached QoS row for corner {key}")
        return self._rows[key]

    def plan(self, x, theta, t):
        forecast = forecast_intervals(theta, self.model, t)
        costs = self._corner_costs(forecast[1])
        plan = mpc_plan(x, forecast, self.cfg, t + 1, self.penalty, self.grid, costs)
        if plan.infeasible:
            self.infeasible_plans += 1
        return plan

    def act(self, x, theta, t, lam=None):
        return self.plan(x, theta, t).capacity
