"""
Robust backward induction with multidimensional threshold policies

The decision state is (x, lambda, theta); the action is the next on-count
vector a. Value tables are dense arrays indexed by (x index, lambda index,
mode) where the x index is the mixed-radix position of x in Omega_x.
"""
import math
import time
import logging
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from model import (check_in_box, check_orthant, energy_idle_cost, orthants, state_grid,
                   state_index, switching_costs)
from qos import block_qos_tables, build_qos_table
from uncertainty import IntervalSet, LikelihoodSet
from utils import DomainError

logger = logging.getLogger(__name__)

DEFAULT_GAMMA = 0.95
DEFAULT_HORIZON = 24
RULES = ("orthant", "partial")
ROBUST_MODES = ("interval", "kl", "off")
FLAT_STATE_LIMIT = 20000
CUTOFF_WEIGHT = 1e-4


def _sets_equal(a, b):
    if type(a) is not type(b):
        return False
    if isinstance(a, IntervalSet):
        return (np.array_equal(a.nominal, b.nominal) and np.array_equal(a.lo, b.lo)
                and np.array_equal(a.hi, b.hi))
    return np.array_equal(a.nominal, b.nominal) and a.radius == b.radius


@dataclass(frozen=True)
class ModeModel:
    """
    Hidden-mode dynamics: a chain over modes with one uncertainty set per row,
    and categorical emissions over a finite arrival-rate support.

    emission has shape (T_e, modes, |Lambda|); chain is a tuple over slots of
    tuples over modes of IntervalSet / LikelihoodSet. Slots past the last
    entry reuse it.
    """
    support: np.ndarray
    emission: np.ndarray
    chain: tuple
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        support = np.atleast_2d(np.array(self.support, dtype=float))
        if np.any(support < 0) or not np.all(np.isfinite(support)):
            raise DomainError("arrival-rate support must be finite and nonnegative")
        emission = np.array(self.emission, dtype=float)
        if emission.ndim == 2:
            emission = emission[None]
        if emission.ndim != 3 or emission.shape[2] != support.shape[0]:
            raise DomainError(f"emission must be (slots, modes, {support.shape[0]})")
        if np.any(emission < 0) or np.any(np.abs(emission.sum(axis=2) - 1) > 1e-12):
            raise DomainError("every emission row must be a probability distribution")
        chain = tuple(self.chain)
        if chain and not isinstance(chain[0], (tuple, list)):
            chain = (chain,)
        chain = tuple(tuple(slot) for slot in chain)
        K = emission.shape[1]
        if not chain:
            raise DomainError("the mode chain needs at least one slot")
        for slot in chain:
            if len(slot) != K:
                raise DomainError(f"every chain slot needs one set per mode ({K})")
            for s in slot:
                if s.size != K:
                    raise DomainError(f"chain rows must have {K} entries")
        support.setflags(write=False)
        emission.setflags(write=False)
        object.__setattr__(self, "support", support)
        object.__setattr__(self, "emission", emission)
        object.__setattr__(self, "chain", chain)

    @classmethod
    def from_matrices(cls, support, emission, nominal, lo=None, hi=None, meta=None):
        """Build from a nominal chain matrix (and optional interval bounds)"""
        nominal = np.asarray(nominal, dtype=float)
        if nominal.ndim == 2:
            nominal = nominal[None]
        lo = nominal if lo is None else np.asarray(lo, dtype=float).reshape(nominal.shape)
        hi = nominal if hi is None else np.asarray(hi, dtype=float).reshape(nominal.shape)
        chain = tuple(
            tuple(IntervalSet(nominal[t, m], lo[t, m], hi[t, m]) for m in range(nominal.shape[1]))
            for t in range(nominal.shape[0])
        )
        return cls(support, emission, chain, dict(meta or {}))

    @property
    def num_modes(self):
        return self.emission.shape[1]

    @property
    def num_lambda(self):
        return self.support.shape[0]

    @property
    def num_classes(self):
        return self.support.shape[1]

    @property
    def is_singleton(self):
        return all(s.is_singleton for slot in self.chain for s in slot)

    def emission_at(self, t):
        return self.emission[min(max(int(t), 1), self.emission.shape[0]) - 1]

    def chain_at(self, t):
        return self.chain[min(max(int(t), 1), len(self.chain)) - 1]

    def nominal_matrix(self, t=1):
        return np.array([s.nominal for s in self.chain_at(t)])

    def is_stationary(self):
        same_emission = all(np.array_equal(e, self.emission[0]) for e in self.emission)
        same_chain = all(_sets_equal(a, b) for slot in self.chain for a, b in zip(slot, self.chain[0]))
        return same_emission and same_chain

    def stationary_distribution(self, t=1):
        """Stationary distribution of the nominal chain at slot t"""
        P = self.nominal_matrix(t)
        K = P.shape[0]
        A = np.vstack([P.T - np.eye(K), np.ones(K)])
        b = np.zeros(K + 1)
        b[-1] = 1.0
        pi = np.linalg.lstsq(A, b, rcond=None)[0]
        pi = np.clip(pi, 0.0, None)
        return pi / pi.sum()

    def with_robustness(self, robust, kl_radius=0.0):
        """
        Swap the chain's uncertainty sets

        Args:
            robust (str): 'interval' keeps interval sets, 'kl' uses KL balls of
                kl_radius around the nominal rows, 'off' uses singleton sets
            kl_radius (float): Radius for 'kl'

        Returns:
            ModeModel: Model with the requested sets
        """
        if robust not in ROBUST_MODES:
            raise DomainError(f"robust must be one of {ROBUST_MODES}, got {robust!r}")
        if robust == "interval":
            if not all(isinstance(s, IntervalSet) for slot in self.chain for s in slot):
                raise DomainError("model carries no interval sets")
            return self
        if robust == "kl":
            make = lambda s: LikelihoodSet(s.nominal, kl_radius)  # noqa: E731
        else:
            make = lambda s: IntervalSet.singleton(s.nominal)  # noqa: E731
        chain = tuple(tuple(make(s) for s in slot) for slot in self.chain)
        return ModeModel(self.support, self.emission, chain, {**self.meta, "robust": robust})

    def widened(self, delta):
        chain = tuple(tuple(s.widened(delta) for s in slot) for slot in self.chain)
        return ModeModel(self.support, self.emission, chain, self.meta)


@dataclass(frozen=True)
class ThresholdPolicy:
    """
    Thresholds tau^k_t(theta) and optimal values h*^k_t(theta)

    thresholds has shape (slots, modes, 2^B, B), hstar (slots, modes, 2^B).
    A stationary policy has a single slot used at every t.
    """
    thresholds: np.ndarray
    hstar: np.ndarray
    rule: str = "orthant"
    stationary: bool = False
    label: str = "mdp"

    def __post_init__(self):
        if self.rule not in RULES:
            raise DomainError(f"rule must be one of {RULES}, got {self.rule!r}")
        thresholds = np.array(self.thresholds, dtype=int)
        hstar = np.array(self.hstar, dtype=float)
        if thresholds.ndim != 4 or thresholds.shape[2] != 2 ** thresholds.shape[3]:
            raise DomainError("thresholds must be (slots, modes, 2^B, B)")
        if hstar.shape != thresholds.shape[:3]:
            raise DomainError("hstar must be (slots, modes, 2^B)")
        thresholds.setflags(write=False)
        hstar.setflags(write=False)
        object.__setattr__(self, "thresholds", thresholds)
        object.__setattr__(self, "hstar", hstar)

    @property
    def num_slots(self):
        return self.thresholds.shape[0]

    @property
    def num_modes(self):
        return self.thresholds.shape[1]

    @property
    def orthants(self):
        return orthants(self.thresholds.shape[3])

    def slot_index(self, t):
        if self.stationary:
            return 0
        return min(max(int(t), 1), self.num_slots) - 1

    def thresholds_at(self, t, theta):
        return self.thresholds[self.slot_index(t), theta]

    def act(self, x, theta, t, lam=None):
        return apply_threshold_rule(x, theta, t, self)

    def actions(self, grid, theta, t):
        """Rule applied to every row of grid"""
        return decision_rule(grid, self.thresholds_at(t, theta), self.orthants, self.rule)


@dataclass
class ValueTable:
    """v_t over (x index, lambda index, mode) for t = 1..h+1; slot h+1 is zero"""
    values: np.ndarray

    @property
    def horizon(self):
        return self.values.shape[0] - 1

    def at(self, t):
        return self.values[t - 1]

    def value(self, t, x, lam_index, theta, cfg):
        return float(self.values[t - 1, state_index(x, cfg), lam_index, theta])


@dataclass
class SeparableValueTable:
    """
    Per-block values of a block-separable solve

    The value of (x, lambda, theta) is the sum over blocks of
    blocks[b].values[t - 1, x_b, lambda, theta].
    """
    blocks: tuple

    @property
    def horizon(self):
        return self.blocks[0].horizon

    @property
    def dims(self):
        return tuple(vt.values.shape[1] for vt in self.blocks)

    def at(self, t):
        """Joint (|Omega_x|, |Lambda|, modes) values of slot t; sized by the full grid"""
        grid = np.indices(self.dims).reshape(len(self.blocks), -1).T
        return sum(vt.values[t - 1][grid[:, b]] for b, vt in enumerate(self.blocks))

    def value(self, t, x, lam_index, theta, cfg):
        x = check_in_box(x, cfg)
        return float(sum(vt.values[t - 1, x[b], lam_index, theta] for b, vt in enumerate(self.blocks)))


@dataclass(frozen=True)
class PolicyEstimate:
    mean: float
    stderr: float
    nominal_mean: float
    nominal_stderr: float
    n: int


def orthant_label(k):
    return "".join("+" if kb > 0 else "-" for kb in k)


def orthant_prices(t, orth, cfg):
    """Per-orthant a-linear switch prices (1+k)/2 c+ - (1-k)/2 c-, shape (K, B)"""
    c_plus = cfg.price.switch_on_prices(t)
    c_minus = cfg.price.switch_off_prices(t)
    orth = np.atleast_2d(orth)
    return (1 + orth) / 2 * c_plus - (1 - orth) / 2 * c_minus


def decision_rule(X, thresholds, orth, rule="orthant"):
    """
    Apply the threshold rule to a batch of on-count vectors

    Args:
        X (np.ndarray): (n, B) current on-counts
        thresholds (np.ndarray): (K, B) thresholds of one slot and mode
        orth (np.ndarray): (K, B) orthant indices in lexicographic order
        rule (str): 'orthant' or 'partial'

    Returns:
        np.ndarray: (n, B) actions
    """
    X = np.atleast_2d(X)
    diff = thresholds[None, :, :] - X[:, None, :]
    ok = orth[None, :, :] * diff >= 0
    if rule == "orthant":
        full = ok.all(axis=2)
        matched = full.any(axis=1)
        first = full.argmax(axis=1)
        return np.where(matched[:, None], thresholds[first], X)
    count = ok.sum(axis=2)
    best = count.argmax(axis=1)
    chosen = ok[np.arange(X.shape[0]), best]
    return np.where(chosen, thresholds[best], X)


def apply_threshold_rule(x, theta, t, policy):
    """Next on-counts prescribed by the policy at (x, theta) in slot t"""
    x = np.asarray(x, dtype=int)
    return decision_rule(x[None, :], policy.thresholds_at(t, theta), policy.orthants, policy.rule)[0]


def continuation(t, v_next, model, return_rows=False):
    """
    Robust continuation R_t[a, theta]

    EV[a, theta'] = sum_lambda' P_t(lambda' | theta') v_{t+1}(a, lambda', theta'),
    then R_t[a, theta] is the worst case of EV[a, :] over the set of row theta.

    Args:
        t (int): Slot index
        v_next (np.ndarray): (|Omega_x|, |Lambda|, modes) values of slot t+1
        model (ModeModel): Mode dynamics
        return_rows (bool): Also return the maximizing rows (|Omega_x|, modes, modes)

    Returns:
        np.ndarray or tuple: R (|Omega_x|, modes) [, rows]
    """
    E = model.emission_at(t)
    n = v_next.shape[0]
    K = model.num_modes
    ev = np.empty((n, K))
    for m in range(K):
        ev[:, m] = v_next[:, :, m] @ E[m]
    R = np.empty((n, K))
    rows = np.empty((n, K, K)) if return_rows else None
    for theta, chain_set in enumerate(model.chain_at(t)):
        expectation, argmax_rows = chain_set.worst_case(ev)
        R[:, theta] = expectation
        if return_rows:
            rows[:, theta, :] = argmax_rows
    return (R, rows) if return_rows else R


def g_term(t, k, x, lam, qos_table, cfg):
    """x-dependent part of the orthant decomposition of the Bellman objective"""
    k = check_orthant(k, cfg)
    x = check_in_box(x, cfg)
    lin = orthant_prices(t, k, cfg)[0]
    return qos_table.lookup(x, lam, cfg) + energy_idle_cost(t, x, cfg) - float(np.dot(x, lin))


def h_term(t, k, a, theta, v_next, model, cfg, gamma=DEFAULT_GAMMA):
    """
    a-dependent part of the orthant decomposition

    Args:
        t (int): Slot index
        k (array): Orthant index
        a (array): Next on-counts
        theta (int): Current mode
        v_next (np.ndarray): Values of slot t+1, or None at the terminal slot
        model (ModeModel): Mode dynamics
        cfg (DataCenterConfig): Configuration
        gamma (float): Discount

    Returns:
        float: a . lin_k + gamma * R_t[a, theta]
    """
    k = check_orthant(k, cfg)
    a = check_in_box(a, cfg, "a")
    lin = orthant_prices(t, k, cfg)[0]
    future = 0.0
    if v_next is not None:
        future = continuation(t, v_next, model)[state_index(a, cfg), theta]
    return float(np.dot(a, lin)) + gamma * future


def _thresholds(grid, lin, cont):
    hk = grid @ lin.T + cont[:, None]
    idx = np.argmin(hk, axis=0)
    return grid[idx], hk[idx, np.arange(lin.shape[0])]


def compute_thresholds(t, theta, v_next, model, cfg, gamma=DEFAULT_GAMMA):
    """
    Threshold and optimal h-value of every orthant for one slot and mode

    The argmin over a is taken in mixed-radix order, so ties resolve to the
    lexicographically smallest a.

    Returns:
        tuple: (tau (2^B, B), hstar (2^B,))
    """
    grid = state_grid(cfg)
    R = np.zeros((grid.shape[0], model.num_modes)) if v_next is None else continuation(t, v_next, model)
    lin = orthant_prices(t, orthants(cfg.num_blocks), cfg)
    return _thresholds(grid, lin, gamma * R[:, theta])


def _check_qos_table(qos_table, grid, model):
    if qos_table.costs.shape != (grid.shape[0], model.num_lambda):
        raise DomainError(f"QoS table shape {qos_table.costs.shape} does not match "
                          f"({grid.shape[0]}, {model.num_lambda})")
    if not np.array_equal(qos_table.support, model.support):
        raise DomainError("QoS table was built for a different arrival-rate support")


def _check_gamma(gamma):
    if not 0 <= gamma < 1:
        raise DomainError(f"gamma must lie in [0, 1), got {gamma}")


def _slot_backup(t, v_next, model, cfg, qos_table, gamma, rule, grid, orth):
    """One rule-consistent backup: thresholds of slot t and the values they induce"""
    n = grid.shape[0]
    K = model.num_modes
    R = np.zeros((n, K)) if v_next is None else continuation(t, v_next, model)
    lin = orthant_prices(t, orth, cfg)
    energy = cfg.price.idle_energy(t, grid)
    base = qos_table.costs + energy[:, None]
    values = np.empty((n, model.num_lambda, K))
    taus = np.empty((K, orth.shape[0], cfg.num_blocks), dtype=int)
    hstars = np.empty((K, orth.shape[0]))
    for theta in range(K):
        tau, hs = _thresholds(grid, lin, gamma * R[:, theta])
        actions = decision_rule(grid, tau, orth, rule)
        aidx = state_index(actions, cfg)
        cont = switching_costs(t, grid, actions, cfg) + gamma * R[aidx, theta]
        values[:, :, theta] = base + cont[:, None]
        taus[theta] = tau
        hstars[theta] = hs
    return values, taus, hstars


def backward_induction(model, cfg, horizon=DEFAULT_HORIZON, gamma=DEFAULT_GAMMA, qos_table=None,
                       rule="orthant", jobs=1):
    """
    Threshold backward induction

    For every slot and mode the thresholds minimize the a-dependent term per
    orthant. The stored value of a cell is the cost of the action the
    threshold rule prescribes there plus its robust continuation.

    Args:
        model (ModeModel): Mode dynamics with uncertainty sets
        cfg (DataCenterConfig): Configuration
        horizon (int): Number of slots h
        gamma (float): Discount in [0, 1)
        qos_table (QosTable): Precomputed QoS table; built if None
        rule (str): 'orthant' or 'partial'
        jobs (int): Worker processes for the QoS table

    Returns:
        tuple: (ThresholdPolicy, ValueTable)
    """
    if horizon < 1:
        raise DomainError(f"horizon must be at least 1, got {horizon}")
    _check_gamma(gamma)
    if rule not in RULES:
        raise DomainError(f"rule must be one of {RULES}, got {rule!r}")
    grid = state_grid(cfg)
    orth = orthants(cfg.num_blocks)
    if qos_table is None:
        qos_table = build_qos_table(grid, model.support, cfg, horizon=horizon, jobs=jobs)
    _check_qos_table(qos_table, grid, model)

    n, L, K = grid.shape[0], model.num_lambda, model.num_modes
    logger.info(f"Backward induction: |Omega_x|={n}, |Lambda|={L}, modes={K}, "
                f"orthants={orth.shape[0]}, h={horizon}, gamma={gamma}, rule={rule}")
    values = np.zeros((horizon + 1, n, L, K))
    thresholds = np.empty((horizon, K, orth.shape[0], cfg.num_blocks), dtype=int)
    hstar = np.empty((horizon, K, orth.shape[0]))
    started = time.time()
    for t in range(horizon, 0, -1):
        v_next = None if t == horizon else values[t]
        values[t - 1], thresholds[t - 1], hstar[t - 1] = _slot_backup(
            t, v_next, model, cfg, qos_table, gamma, rule, grid, orth)
        logger.debug(f"slot {t}: mean value {values[t - 1].mean():.6g}")
    logger.info(f"Backward induction finished in {time.time() - started:.1f}s")
    return ThresholdPolicy(thresholds, hstar, rule), ValueTable(values)


def separable_backward_induction(model, cfg, horizon=DEFAULT_HORIZON, gamma=DEFAULT_GAMMA,
                                 block_tables=None):
    """
    Backward induction block by block for a block-separable data center

    With every class pinned to one block, stage costs split into per-block
    terms and the (lambda, theta) process does not depend on x, so each
    block is solved as a one-block problem over x_b = 0..M_b. Work and
    memory grow with sum(M_b + 1) instead of prod(M_b + 1).

    With singleton chain rows the summed values equal the joint solve
    wherever at most one block is overloaded (the joint cost charges big-M
    once per cell, the blockwise sum once per overloaded block). With wider
    sets every block faces its own worst-case row, so the sum bounds the
    joint robust value of the same policy from above.

    Args:
        model (ModeModel): Mode dynamics with uncertainty sets
        cfg (DataCenterConfig): Configuration whose serve mask pins every class to one block
        horizon (int): Number of slots h
        gamma (float): Discount in [0, 1)
        block_tables (list): Output of qos.block_qos_tables; built if None

    Returns:
        tuple: (ThresholdPolicy with rule 'partial', SeparableValueTable)
    """
    if horizon < 1:
        raise DomainError(f"horizon must be at least 1, got {horizon}")
    _check_gamma(gamma)
    if block_tables is None:
        block_tables = block_qos_tables(cfg, model.support, horizon)
    if block_tables is None:
        raise DomainError("separable solve needs every class to be served by exactly one block")
    if len(block_tables) != cfg.num_blocks:
        raise DomainError(f"expected {cfg.num_blocks} block tables, got {len(block_tables)}")

    K, L = model.num_modes, model.num_lambda
    single = orthants(1)
    logger.info(f"Separable backward induction: blocks={cfg.num_blocks}, "
                f"block states={[sub.dims[0] for sub, _ in block_tables]}, |Lambda|={L}, modes={K}, h={horizon}")
    started = time.time()
    block_values = []
    block_taus = np.empty((cfg.num_blocks, horizon, K, 2), dtype=int)
    block_hstar = np.empty((cfg.num_blocks, horizon, K, 2))
    for b, (sub, table) in enumerate(block_tables):
        grid = state_grid(sub)
        _check_qos_table(table, grid, model)
        values = np.zeros((horizon + 1, grid.shape[0], L, K))
        for t in range(horizon, 0, -1):
            v_next = None if t == horizon else values[t]
            values[t - 1], taus, hs = _slot_backup(t, v_next, model, sub, table, gamma, "orthant", grid, single)
            block_taus[b, t - 1] = taus[:, :, 0]
            block_hstar[b, t - 1] = hs
        block_values.append(ValueTable(values))

    # orthant k takes the '-' or '+' threshold of every block
    orth = orthants(cfg.num_blocks)
    side = (orth + 1) // 2
    blocks = np.arange(cfg.num_blocks)
    thresholds = block_taus[blocks, :, :, side].transpose(2, 3, 0, 1)
    hstar = block_hstar[blocks, :, :, side].sum(axis=1).transpose(1, 2, 0)
    logger.info(f"Separable backward induction finished in {time.time() - started:.1f}s")
    return ThresholdPolicy(thresholds, hstar, "partial"), SeparableValueTable(tuple(block_values))


def minimax_lower_bound(t, policy, qos_table, cfg):
    """
    max_k [g^k + h*^k] for every cell of slot t

    It equals the stored value wherever an orthant matches and is a lower
    bound elsewhere.

    Returns:
        np.ndarray: (|Omega_x|, |Lambda|, modes)
    """
    grid = state_grid(cfg)
    lin = orthant_prices(t, policy.orthants, cfg)
    base = qos_table.costs + cfg.price.idle_energy(t, grid)[:, None]
    x_lin = grid @ lin.T
    out = np.empty(base.shape + (policy.num_modes,))
    for theta in range(policy.num_modes):
        best = np.max(policy.hstar[policy.slot_index(t), theta][None, :] - x_lin, axis=1)
        out[:, :, theta] = base + best[:, None]
    return out


def _flat_backup(t, R, base, grid, cfg, gamma, chunk):
    n = grid.shape[0]
    K = R.shape[1]
    values = np.empty(base.shape + (K,))
    best = np.empty((n, K), dtype=int)
    for start in range(0, n, chunk):
        stop = min(start + chunk, n)
        sw = switching_costs(t, grid[start:stop, None, :], grid[None, :, :], cfg)
        for theta in range(K):
            total = sw + gamma * R[None, :, theta]
            idx = np.argmin(total, axis=1)
            best[start:stop, theta] = idx
            values[start:stop, :, theta] = base[start:stop] + total[np.arange(stop - start), idx][:, None]
    return values, best


def _flat_chunk(n):
    return max(1, min(n, 4_000_000 // max(n, 1)))


def flat_backward_induction(model, cfg, horizon=DEFAULT_HORIZON, gamma=DEFAULT_GAMMA, qos_table=None,
                            return_actions=False):
    """
    Robust backward induction over the full action space

    Args:
        model (ModeModel): Mode dynamics
        cfg (DataCenterConfig): Configuration
        horizon (int): Number of slots
        gamma (float): Discount in [0, 1)
        qos_table (QosTable): Precomputed QoS table; built if None
        return_actions (bool): Also return the optimal action indices (h, |Omega_x|, modes)

    Returns:
        ValueTable or tuple: Values [, actions]
    """
    if horizon < 1:
        raise DomainError(f"horizon must be at least 1, got {horizon}")
    _check_gamma(gamma)
    grid = state_grid(cfg)
    n = grid.shape[0]
    if n > FLAT_STATE_LIMIT:
        logger.warning(f"Flat backward induction over {n} states needs {n * n} action evaluations per slot")
    if qos_table is None:
        qos_table = build_qos_table(grid, model.support, cfg, horizon=horizon)
    _check_qos_table(qos_table, grid, model)
    K = model.num_modes
    values = np.zeros((horizon + 1, n, model.num_lambda, K))
    actions = np.empty((horizon, n, K), dtype=int)
    chunk = _flat_chunk(n)
    for t in range(horizon, 0, -1):
        R = np.zeros((n, K)) if t == horizon else continuation(t, values[t], model)
        base = qos_table.costs + cfg.price.idle_energy(t, grid)[:, None]
        values[t - 1], actions[t - 1] = _flat_backup(t, R, base, grid, cfg, gamma, chunk)
    table = ValueTable(values)
    return (table, actions) if return_actions else table


def _require_stationary(model, cfg, what):
    if not model.is_stationary():
        raise DomainError(f"{what} needs a stationary mode model")
    if not cfg.price.is_stationary():
        raise DomainError(f"{what} needs stationary prices")


def infinite_horizon_solve(model, cfg, gamma=DEFAULT_GAMMA, tol=1e-6, qos_table=None, rule="orthant",
                           max_iter=10000, history=None):
    """
    Iterate the threshold backup to a fixed point

    Args:
        model (ModeModel): Stationary mode dynamics
        cfg (DataCenterConfig): Configuration with stationary prices
        gamma (float): Discount in [0, 1)
        tol (float): Sup-norm change at which iteration stops
        qos_table (QosTable): Precomputed QoS table; built if None
        rule (str): 'orthant' or 'partial'
        max_iter (int): Iteration cap
        history (list): If given, receives the sup-norm change of every iteration

    Returns:
        tuple: (stationary ThresholdPolicy, values (|Omega_x|, |Lambda|, modes))
    """
    _require_stationary(model, cfg, "the infinite-horizon solver")
    _check_gamma(gamma)
    grid = state_grid(cfg)
    orth = orthants(cfg.num_blocks)
    if qos_table is None:
        qos_table = build_qos_table(grid, model.support, cfg)
    _check_qos_table(qos_table, grid, model)

    values = None
    for it in range(max_iter):
        new, taus, hstars = _slot_backup(1, values, model, cfg, qos_table, gamma, rule, grid, orth)
        change = float(np.max(np.abs(new))) if values is None else float(np.max(np.abs(new - values)))
        values = new
        if history is not None:
            history.append(change)
        logger.debug(f"value iteration {it + 1}: change {change:.3g}")
        if change <= tol:
            break
    else:
        logger.warning(f"Value iteration stopped after {max_iter} iterations with change {change:.3g}")
    logger.info(f"Infinite-horizon solve converged in {it + 1} iterations")
    policy = ThresholdPolicy(taus[None], hstars[None], rule, stationary=True)
    return policy, values


def flat_value_iteration(model, cfg, gamma=DEFAULT_GAMMA, tol=1e-6, qos_table=None, max_iter=10000):
    """Fixed point of the flat robust Bellman operator"""
    _require_stationary(model, cfg, "flat value iteration")
    _check_gamma(gamma)
    grid = state_grid(cfg)
    if qos_table is None:
        qos_table = build_qos_table(grid, model.support, cfg)
    _check_qos_table(qos_table, grid, model)
    n, K = grid.shape[0], model.num_modes
    base = qos_table.costs + cfg.price.idle_energy(1, grid)[:, None]
    chunk = _flat_chunk(n)
    values = np.zeros((n, model.num_lambda, K))
    for _ in range(max_iter):
        R = continuation(1, values, model)
        new, _ = _flat_backup(1, R, base, grid, cfg, gamma, chunk)
        change = float(np.max(np.abs(new - values)))
        values = new
        if change <= tol:
            break
    return values


def _policy_tables(policy, cfg, qos_table, model, t=1):
    """Action indices (modes, |Omega_x|) and one-step costs (|Omega_x|, |Lambda|, modes)"""
    grid = state_grid(cfg)
    base = qos_table.costs + cfg.price.idle_energy(t, grid)[:, None]
    K = model.num_modes
    action_idx = np.empty((K, grid.shape[0]), dtype=int)
    costs = np.empty(base.shape + (K,))
    for theta in range(K):
        actions = policy.actions(grid, theta, t)
        action_idx[theta] = state_index(actions, cfg)
        costs[:, :, theta] = base + switching_costs(t, grid, actions, cfg)[:, None]
    return action_idx, costs


def evaluate_policy(policy, model, cfg, gamma=DEFAULT_GAMMA, qos_table=None, tol=1e-9, max_iter=100000,
                    robust=True):
    """
    Exact value of a stationary threshold policy by iterative policy evaluation

    Args:
        policy (ThresholdPolicy): Policy (its first slot is used at every t)
        model (ModeModel): Stationary mode dynamics
        cfg (DataCenterConfig): Configuration with stationary prices
        gamma (float): Discount in [0, 1)
        qos_table (QosTable): Precomputed QoS table; built if None
        tol (float): Sup-norm stopping tolerance
        robust (bool): Adversarial rows from the uncertainty sets, else nominal rows

    Returns:
        np.ndarray: (|Omega_x|, |Lambda|, modes) policy values
    """
    _require_stationary(model, cfg, "policy evaluation")
    _check_gamma(gamma)
    grid = state_grid(cfg)
    if qos_table is None:
        qos_table = build_qos_table(grid, model.support, cfg)
    _check_qos_table(qos_table, grid, model)
    dynamics = model if robust else model.with_robustness("off")
    action_idx, costs = _policy_tables(policy, cfg, qos_table, model)
    values = np.zeros_like(costs)
    for it in range(max_iter):
        R = continuation(1, values, dynamics)
        new = np.empty_like(values)
        for theta in range(model.num_modes):
            new[:, :, theta] = costs[:, :, theta] + gamma * R[action_idx[theta], theta][:, None]
        change = float(np.max(np.abs(new - values)))
        values = new
        if change <= tol:
            break
    logger.debug(f"Policy evaluation converged in {it + 1} iterations")
    return values


def default_cutoff(gamma):
    """Rollout length after which the discount weight drops below 1e-4"""
    if gamma <= 0:
        return 1
    return max(1, math.ceil(math.log(CUTOFF_WEIGHT) / math.log(gamma)))


def _sample_index(cdf, u):
    idx = (cdf <= u[:, None]).sum(axis=1)
    return np.minimum(idx, cdf.shape[1] - 1)


def _rollout_costs(costs, action_idx, row_fn, emission_cdf, xi, li, th, gamma, uniforms):
    total = np.zeros(xi.shape[0])
    discount = 1.0
    for step in range(uniforms.shape[0]):
        total += discount * costs[xi, li, th]
        ai = action_idx[th, xi]
        rows = row_fn(ai, th)
        cdf = np.cumsum(rows, axis=1)
        cdf /= cdf[:, -1:]
        th = _sample_index(cdf, uniforms[step, :, 0])
        li = _sample_index(emission_cdf[th], uniforms[step, :, 1])
        xi = ai
        discount *= gamma
    return total


def estimate_policy_value(policy, model, cfg, gamma=DEFAULT_GAMMA, n=1000, horizon_cutoff=None, rng=None,
                          qos_table=None, values=None, start=None):
    """
    Monte-Carlo estimate of a stationary policy's discounted cost

    Rollouts start uniformly over S (or at start) and are truncated at
    horizon_cutoff. The adversarial estimate draws next modes from the
    uncertainty-set maximizers against values; the nominal estimate uses the
    nominal rows. Both share the same random numbers.

    Args:
        policy (ThresholdPolicy): Stationary policy
        model (ModeModel): Stationary mode dynamics
        cfg (DataCenterConfig): Configuration
        gamma (float): Discount
        n (int): Number of rollouts
        horizon_cutoff (int): Rollout length; default from gamma
        rng (np.random.Generator or int): Random source
        qos_table (QosTable): Precomputed QoS table; built if None
        values (np.ndarray): Value estimate resolving the adversarial rows; nominal rows if None
        start (State): Fixed start state instead of uniform sampling

    Returns:
        PolicyEstimate: Means and standard errors
    """
    if n < 1:
        raise DomainError("n must be at least 1")
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    steps = horizon_cutoff or default_cutoff(gamma)
    grid = state_grid(cfg)
    if qos_table is None:
        qos_table = build_qos_table(grid, model.support, cfg)
    action_idx, costs = _policy_tables(policy, cfg, qos_table, model)
    K, L = model.num_modes, model.num_lambda
    emission_cdf = np.cumsum(model.emission_at(1), axis=1)
    emission_cdf /= emission_cdf[:, -1:]

    if start is None:
        xi = rng.integers(0, grid.shape[0], size=n)
        li = rng.integers(0, L, size=n)
        th = rng.integers(0, K, size=n)
    else:
        xi = np.full(n, state_index(start.x, cfg))
        li = np.full(n, qos_table.lambda_index(start.lam))
        th = np.full(n, int(start.theta))
    uniforms = rng.random((steps, n, 2))

    nominal = model.nominal_matrix(1)
    nominal_fn = lambda ai, th: nominal[th]  # noqa: E731
    nominal_costs = _rollout_costs(costs, action_idx, nominal_fn, emission_cdf, xi, li, th, gamma, uniforms)
    if values is None or model.is_singleton:
        adversarial_costs = nominal_costs
    else:
        _, rows = continuation(1, values, model, return_rows=True)
        adversarial_fn = lambda ai, th: rows[ai, th]  # noqa: E731
        adversarial_costs = _rollout_costs(costs, action_idx, adversarial_fn, emission_cdf,
                                           xi, li, th, gamma, uniforms)

    def stderr(sample):
        return float(sample.std(ddof=1) / math.sqrt(n)) if n > 1 else 0.0

    return PolicyEstimate(float(adversarial_costs.mean()), stderr(adversarial_costs),
                          float(nominal_costs.mean()), stderr(nominal_costs), n)


def monte_carlo_search(model, cfg, gamma=DEFAULT_GAMMA, n=1000, eps=1e-3, rng_seed=0, qos_table=None,
                       horizon_cutoff=None, max_sweeps=20, rule="orthant", initial=None):
    """
    Coordinate descent over stationary thresholds using sampled policy values

    Each sweep visits every (mode, orthant) and replaces its threshold by the
    candidate in Omega_x with the lowest estimate, all other thresholds held
    fixed. Candidates within one sweep share common random numbers. The search
    stops when the estimate changes by at most eps over a sweep.

    Args:
        model (ModeModel): Stationary mode dynamics
        cfg (DataCenterConfig): Configuration with stationary prices
        gamma (float): Discount
        n (int): Rollouts per estimate
        eps (float): Stopping precision
        rng_seed (int): Master seed
        qos_table (QosTable): Precomputed QoS table; built if None
        horizon_cutoff (int): Rollout length; default from gamma
        max_sweeps (int): Sweep cap
        rule (str): Decision rule of the searched policy
        initial (ThresholdPolicy): Starting thresholds; the do-nothing thresholds if None

    Returns:
        ThresholdPolicy: Stationary policy (hstar is not estimated and left NaN)
    """
    if n < 1 or eps <= 0:
        raise DomainError("monte_carlo_search needs n >= 1 and eps > 0")
    _require_stationary(model, cfg, "the Monte-Carlo search")
    _check_gamma(gamma)
    grid = state_grid(cfg)
    orth = orthants(cfg.num_blocks)
    if qos_table is None:
        qos_table = build_qos_table(grid, model.support, cfg)
    K = model.num_modes

    if initial is not None:
        tau = np.array(initial.thresholds[0], dtype=int)
    else:
        lin = orthant_prices(1, orth, cfg)
        terminal, _ = _thresholds(grid, lin, np.zeros(grid.shape[0]))
        tau = np.repeat(terminal[None], K, axis=0)
    nan_hstar = np.full((1, K, orth.shape[0]), np.nan)
    robust = not model.is_singleton

    def make(thresholds):
        return ThresholdPolicy(thresholds[None], nan_hstar, rule, stationary=True, label="mc")

    def score(thresholds, seed, values):
        est = estimate_policy_value(make(thresholds), model, cfg, gamma, n, horizon_cutoff,
                                    np.random.default_rng(seed), qos_table, values)
        return est.mean

    for sweep in range(max_sweeps):
        seed = [int(rng_seed), sweep]
        values = evaluate_policy(make(tau), model, cfg, gamma, qos_table) if robust else None
        before = score(tau, seed, values)
        for theta in range(K):
            for k in range(orth.shape[0]):
                best, best_score = tau[theta, k].copy(), score(tau, seed, values)
                for candidate in grid:
                    trial = tau.copy()
                    trial[theta, k] = candidate
                    s = score(trial, seed, values)
                    if s < best_score:
                        best, best_score = candidate.copy(), s
                tau[theta, k] = best
        after = score(tau, seed, values)
        logger.info(f"Monte-Carlo sweep {sweep + 1}: estimate {before:.6g} -> {after:.6g}")
        if abs(before - after) <= eps:
            break
    return make(tau)


def robustness_sweep(model, cfg, widths, horizon=DEFAULT_HORIZON, gamma=DEFAULT_GAMMA, qos_table=None,
                     rule="orthant"):
    """
    Optimal slot-1 values as the uncertainty sets grow

    Args:
        model (ModeModel): Mode dynamics
        cfg (DataCenterConfig): Configuration
        widths (list): Widening amounts (interval half-width or KL radius increment)
        horizon (int): Number of slots
        gamma (float): Discount
        qos_table (QosTable): Precomputed QoS table; built if None
        rule (str): Decision rule

    Returns:
        pd.DataFrame: One row per width with mean, min and max of v_1
    """
    grid = state_grid(cfg)
    if qos_table is None:
        qos_table = build_qos_table(grid, model.support, cfg, horizon=horizon)
    rows = []
    for width in widths:
        _, values = backward_induction(model.widened(width), cfg, horizon, gamma, qos_table, rule)
        v1 = values.at(1)
        rows.append({"width": float(width), "mean_v1": float(v1.mean()),
                     "min_v1": float(v1.min()), "max_v1": float(v1.max())})
        logger.info(f"width {width}: mean v1 {rows[-1]['mean_v1']:.6g}")
    return pd.DataFrame(rows, columns=["width", "mean_v1", "min_v1", "max_v1"])


def policy_frame(policy, cfg, column_names=None):
    """One row per (t, theta, k) with the threshold vector and h*"""
    names = column_names or cfg.block_names
    records = []
    for s in range(policy.num_slots):
        t = 0 if policy.stationary else s + 1
        for theta in range(policy.num_modes):
            for kk, k in enumerate(policy.orthants):
                record = {"t": t, "theta": theta, "k": orthant_label(k)}
                for b, name in enumerate(names):
                    record[f"tau_{name}"] = int(policy.thresholds[s, theta, kk, b])
                record["hstar"] = float(policy.hstar[s, theta, kk])
                records.append(record)
    return pd.DataFrame(records)


def policy_from_frame(df, cfg, rule="orthant", label="mdp", column_names=None):
    """Inverse of policy_frame"""
    names = column_names or cfg.block_names
    cols = [f"tau_{name}" for name in names]
    missing = [c for c in ["t", "theta", "k", "hstar"] + cols if c not in df.columns]
    if missing:
        raise DomainError(f"policy file is missing columns {missing}")
    orth_labels = [orthant_label(k) for k in orthants(len(names))]
    slots = sorted(df["t"].unique())
    modes = int(df["theta"].max()) + 1
    thresholds = np.zeros((len(slots), modes, len(orth_labels), len(names)), dtype=int)
    hstar = np.zeros((len(slots), modes, len(orth_labels)))
    slot_of = {t: i for i, t in enumerate(slots)}
    k_of = {lab: i for i, lab in enumerate(orth_labels)}
    for rec in df.to_dict("records"):
        if rec["k"] not in k_of:
            raise DomainError(f"unknown orthant label {rec['k']!r}")
        s, theta, kk = slot_of[rec["t"]], int(rec["theta"]), k_of[rec["k"]]
        thresholds[s, theta, kk] = [int(rec[c]) for c in cols]
        hstar[s, theta, kk] = float(rec["hstar"])
    stationary = slots == [0]
    return ThresholdPolicy(thresholds, hstar, rule, stationary=stationary, label=label)


def values_frame(values, cfg, column_names=None):
    """One row per (t, x, lambda index, theta); values is a ValueTable or a single-slot array"""
    names = column_names or cfg.block_names
    grid = state_grid(cfg)
    arr = values.values[:-1] if isinstance(values, ValueTable) else np.asarray(values)[None]
    h, n, L, K = arr.shape
    t_col = np.repeat(np.arange(1, h + 1), n * L * K)
    x_idx = np.tile(np.repeat(np.arange(n), L * K), h)
    frame = {"t": t_col}
    for b, name in enumerate(names):
        frame[f"x_{name}"] = grid[x_idx, b]
    frame["lambda_index"] = np.tile(np.repeat(np.arange(L), K), h * n)
    frame["theta"] = np.tile(np.arange(K), h * n * L)
    frame["value"] = arr.reshape(-1)
    return pd.DataFrame(frame)


def separable_values_frame(values, cfg):
    """One row per (t, block, x_b, lambda index, theta) of a SeparableValueTable"""
    frames = []
    for b, vt in enumerate(values.blocks):
        arr = vt.values[:-1]
        h, n, L, K = arr.shape
        frames.append(pd.DataFrame({
            "t": np.repeat(np.arange(1, h + 1), n * L * K),
            "block": cfg.block_names[b],
            "x": np.tile(np.repeat(np.arange(n), L * K), h),
            "lambda_index": np.tile(np.repeat(np.arange(L), K), h * n),
            "theta": np.tile(np.arange(K), h * n * L),
            "value": arr.reshape(-1),
        }))
    return pd.concat(frames, ignore_index=True)
