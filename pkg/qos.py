"""
QoS cost of a capacity vector: block response times and the load balancing optimization
"""
import itertools
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linprog

import qos_cache
from model import block_config, check_in_box, state_index
from utils import DomainError, array_digest

logger = logging.getLogger(__name__)

TOL_Q = 1e-6
MAX_ITER = 10000
RESTARTS = 5
EPS_STAB_SCALE = 1e-9
BIG_M_SCALE = 1e6
MAX_VERTEX_STARTS = 32


@dataclass(frozen=True)
class QosResult:
    cost: float
    Q_star: np.ndarray
    feasible: bool


def stability_margin(cfg):
    """eps_stab: minimum slack r_b x_b - lambda^S_b for a block receiving traffic"""
    return EPS_STAB_SCALE * float(np.max(cfg.rate * cfg.servers))


def big_m(cfg, support, horizon=1):
    """Penalty standing in for the cost of a capacity-infeasible cell"""
    support = np.atleast_2d(np.asarray(support, dtype=float))
    mass = float(support.sum(axis=1).max()) if support.size else 0.0
    weight = float(cfg.qos_weight.max())
    return BIG_M_SCALE * weight * max(mass, 1.0) * max(int(horizon), 1)


def block_rates(Q, lam):
    """
    Arrival rate routed to every block

    Args:
        Q (np.ndarray): B x J load balancing matrix
        lam (np.ndarray): Per-class arrival rates

    Returns:
        np.ndarray: lambda^S = Q lambda
    """
    return np.asarray(Q, dtype=float) @ np.asarray(lam, dtype=float)


def block_response_time(x_b, r_b, lamS_b):
    """Mean response time x_b / (r_b x_b - lamS_b), or None when the block is unstable"""
    capacity = r_b * x_b
    if capacity <= lamS_b:
        return None
    return x_b / (capacity - lamS_b)


def check_load_balancing(Q, cfg, atol=1e-9):
    """Raise DomainError unless Q is column-stochastic and respects the serve mask"""
    Q = np.asarray(Q, dtype=float)
    if Q.shape != cfg.serve_mask.shape:
        raise DomainError(f"Q must be {cfg.serve_mask.shape}, got {Q.shape}")
    if np.any(Q < -atol):
        raise DomainError("Q has negative entries")
    if not np.allclose(Q.sum(axis=0), 1.0, atol=atol, rtol=0):
        raise DomainError(f"Q columns must sum to 1, got {Q.sum(axis=0).tolist()}")
    if np.any((Q > atol) & ~cfg.serve_mask):
        raise DomainError("Q routes traffic to a block that may not serve the class")
    return Q


def qos_cost_given_Q(x, lam, Q, cfg):
    """
    QoS cost of a fixed load balancing matrix

    Args:
        x (array): On-count vector
        lam (array): Per-class arrival rates
        Q (np.ndarray): Load balancing matrix in Omega_Q
        cfg (DataCenterConfig): Configuration

    Returns:
        float: sum_j C_j lambda_j (Q^T d^S)_j, or None if a block receiving traffic is unstable
    """
    x = check_in_box(x, cfg)
    Q = check_load_balancing(Q, cfg)
    lam = np.asarray(lam, dtype=float)
    lamS = block_rates(Q, lam)
    weight = Q @ (cfg.qos_weight * lam)
    total = 0.0
    for b in range(cfg.num_blocks):
        # blocks without traffic carry zero weight
        if lamS[b] <= 0:
            continue
        d = block_response_time(x[b], cfg.rate[b], lamS[b])
        if d is None:
            return None
        total += weight[b] * d
    return float(total)


def _costs(X, lamS, weight, rate, eps):
    """Vectorized sum_b w_b d_b over leading axes; inf where a loaded block is unstable"""
    D = rate * X - lamS
    used = lamS > 0
    stable = D > eps
    unstable = np.any(used & ~stable, axis=-1)
    safe = np.where(used & stable, D, 1.0)
    per_block = np.where(used, weight * X / safe, 0.0)
    return np.where(unstable, np.inf, per_block.sum(axis=-1))


def project_simplex(v, z=1.0):
    """Euclidean projection of v onto {y >= 0, sum(y) = z}"""
    u = np.sort(v)[::-1]
    cssv = np.cumsum(u) - z
    ind = np.arange(1, v.size + 1)
    cond = u - cssv / ind > 0
    rho = np.count_nonzero(cond)
    theta = cssv[rho - 1] / rho
    return np.maximum(v - theta, 0.0)


def forced_assignment(cfg):
    """The only admissible Q when every class may use exactly one block, else None"""
    mask = cfg.serve_mask
    if np.all(mask.sum(axis=0) == 1):
        return mask.astype(float)
    return None


def _default_columns(x, cfg):
    # classes without traffic still need a valid column
    Q = np.zeros(cfg.serve_mask.shape)
    on = x > 0
    for j in range(cfg.num_classes):
        rows = np.flatnonzero(cfg.serve_mask[:, j] & on)
        if rows.size == 0:
            rows = np.flatnonzero(cfg.serve_mask[:, j])
        Q[rows[0], j] = 1.0
    return Q


def _project_columns(Q, allowed, active):
    out = Q.copy()
    for j in active:
        rows = allowed[:, j]
        out[:, j] = 0.0
        out[rows, j] = project_simplex(Q[rows, j])
    return out


def _max_slack_start(x, lam, cfg, allowed, active, Q):
    """LP point maximizing the smallest relative block slack"""
    cap = cfg.rate * x
    pairs = [(b, j) for j in active for b in np.flatnonzero(allowed[:, j])]
    blocks = np.flatnonzero(x > 0)
    n = len(pairs)
    c = np.zeros(n + 1)
    c[-1] = -1.0
    A_eq = np.zeros((len(active), n + 1))
    A_ub = np.zeros((blocks.size, n + 1))
    row_of = {j: i for i, j in enumerate(active)}
    block_row = {b: i for i, b in enumerate(blocks)}
    for v, (b, j) in enumerate(pairs):
        A_eq[row_of[j], v] = 1.0
        A_ub[block_row[b], v] = lam[j] / cap[b]
    A_ub[:, -1] = 1.0
    bounds = [(0.0, 1.0)] * n + [(None, 1.0)]
    res = linprog(c, A_ub=A_ub, b_ub=np.ones(blocks.size), A_eq=A_eq,
                  b_eq=np.ones(len(active)), bounds=bounds, method="highs")
    if res.status != 0:
        logger.debug(f"max-slack LP failed at x={x.tolist()}: {res.message}")
        return None, -np.inf
    start = Q.copy()
    for v, (b, j) in enumerate(pairs):
        start[b, j] = max(res.x[v], 0.0)
    for j in active:
        start[:, j] /= start[:, j].sum()
    return start, float(res.x[-1])


def _descend(Q, x, lam, cfg, allowed, active, eps, tol, max_iter):
    """Projected gradient descent with backtracking on the product of class simplices"""
    rate = cfg.rate
    C = cfg.qos_weight
    lam_c = C * lam
    on = x > 0

    def value(P):
        return float(_costs(x, P @ lam, P @ lam_c, rate, eps))

    def gradient(P):
        lamS = P @ lam
        weight = P @ lam_c
        D = np.where(on, rate * x - lamS, 1.0)
        ratio = np.where(on, x / D, 0.0)
        g = ratio[:, None] * lam[None, :] * (C[None, :] + (weight / D)[:, None])
        return np.where(allowed, g, 0.0)

    f = value(Q)
    g = gradient(Q)
    step = 1.0 / max(float(np.abs(g).max()), 1e-300)
    for it in range(max_iter):
        g = gradient(Q)
        accepted = False
        for _ in range(80):
            Qn = _project_columns(Q - step * g, allowed, active)
            fn = value(Qn)
            delta = Qn - Q
            bound = f + float(np.sum(g * delta)) + float(np.sum(delta * delta)) / (2 * step)
            if np.isfinite(fn) and fn <= bound + 1e-15 * abs(f):
                accepted = True
                break
            step *= 0.5
        if not accepted:
            break
        moved = float(np.abs(delta).max())
        improvement = f - fn
        Q, f = Qn, fn
        step *= 2.0
        if improvement <= tol * max(abs(f), 1e-300) and moved <= 1e-6:
            logger.debug(f"PGD converged after {it + 1} iterations, cost {f:.6g}")
            break
    return Q, f


def optimize_load_balancing(x, lam, cfg, tol=TOL_Q, max_iter=MAX_ITER, restarts=RESTARTS, seed=0):
    """
    Minimize the QoS cost over load balancing matrices

    Args:
        x (array): On-count vector
        lam (array): Per-class arrival rates
        cfg (DataCenterConfig): Configuration
        tol (float): Relative objective change at which descent stops
        max_iter (int): Descent iterations per start
        restarts (int): Random feasible starts in addition to the LP start
        seed (int): Seed for the random starts

    Returns:
        QosResult: Minimizing cost and matrix, or feasible=False with infinite cost
    """
    x = np.asarray(check_in_box(x, cfg), dtype=float)
    lam = np.asarray(lam, dtype=float)
    if lam.shape != (cfg.num_classes,) or np.any(lam < 0):
        raise DomainError(f"lambda must be {cfg.num_classes} nonnegative rates")
    eps = stability_margin(cfg)
    Q = _default_columns(x, cfg)
    active = [j for j in range(cfg.num_classes) if lam[j] > 0]
    if not active:
        return QosResult(0.0, Q, True)

    allowed = cfg.serve_mask & (x > 0)[:, None]
    counts = allowed.sum(axis=0)
    if np.any(counts[active] == 0):
        return QosResult(float("inf"), None, False)

    if np.all(counts[active] == 1):
        for j in active:
            Q[:, j] = allowed[:, j].astype(float)
        cost = float(_costs(x, Q @ lam, Q @ (cfg.qos_weight * lam), cfg.rate, eps))
        if not np.isfinite(cost):
            return QosResult(float("inf"), None, False)
        return QosResult(cost, Q, True)

    start, slack = _max_slack_start(x, lam, cfg, allowed, active, Q)
    lam_c = cfg.qos_weight * lam
    if start is None or slack <= 0 or not np.isfinite(_costs(x, start @ lam, start @ lam_c, cfg.rate, eps)):
        return QosResult(float("inf"), None, False)

    starts = [start]
    choices = [np.flatnonzero(allowed[:, j]) for j in active]
    if np.prod([c.size for c in choices]) <= MAX_VERTEX_STARTS:
        for combo in itertools.product(*choices):
            vertex = Q.copy()
            for j, b in zip(active, combo):
                vertex[:, j] = 0.0
                vertex[b, j] = 1.0
            if np.isfinite(_costs(x, vertex @ lam, vertex @ lam_c, cfg.rate, eps)):
                starts.append(vertex)
    rng = np.random.default_rng(seed)
    for _ in range(restarts):
        rand = Q.copy()
        for j in active:
            rows = np.flatnonzero(allowed[:, j])
            rand[:, j] = 0.0
            rand[rows, j] = rng.dirichlet(np.ones(rows.size))
        alpha = 1.0
        for _ in range(30):
            mixed = (1 - alpha) * start + alpha * rand
            if np.isfinite(_costs(x, mixed @ lam, mixed @ lam_c, cfg.rate, eps)):
                starts.append(mixed)
                break
            alpha *= 0.5

    best_Q, best_f = None, float("inf")
    for s in starts:
        Qs, fs = _descend(s, x, lam, cfg, allowed, active, eps, tol, max_iter)
        if fs < best_f:
            best_Q, best_f = Qs, fs
    return QosResult(best_f, best_Q, True)


def qos_row(lam, grid, cfg, penalty, **solver_kwargs):
    """
    QoS costs of one arrival vector over many on-count vectors

    Args:
        lam (array): Per-class arrival rates (need not lie in the support)
        grid (np.ndarray): (n, B) on-count vectors
        cfg (DataCenterConfig): Configuration
        penalty (float): Cost written to infeasible cells

    Returns:
        tuple: (costs (n,), feasible (n,) bool)
    """
    lam = np.asarray(lam, dtype=float)
    forced = forced_assignment(cfg)
    if forced is not None:
        costs = _costs(grid.astype(float), forced @ lam, forced @ (cfg.qos_weight * lam),
                       cfg.rate, stability_margin(cfg))
    else:
        costs = np.array([optimize_load_balancing(x, lam, cfg, **solver_kwargs).cost for x in grid])
    feasible = np.isfinite(costs)
    return np.where(feasible, costs, penalty), feasible


def _row_job(args):
    lam, grid, cfg, penalty = args
    return qos_row(lam, grid, cfg, penalty)


@dataclass(frozen=True)
class QosTable:
    """c^QoS over Omega_x x Lambda, big-M on infeasible cells"""
    costs: np.ndarray
    feasible: np.ndarray
    support: np.ndarray
    penalty: float

    def lambda_index(self, lam):
        hits = np.flatnonzero(np.all(self.support == np.asarray(lam, dtype=float), axis=1))
        if hits.size == 0:
            raise DomainError(f"lambda={np.asarray(lam).tolist()} is not in the support")
        return int(hits[0])

    def lookup(self, x, lam, cfg):
        return float(self.costs[state_index(check_in_box(x, cfg), cfg), self.lambda_index(lam)])

    def evaluator(self, cfg):
        """Callable (x, lam) -> cost for stage_cost; falls back to a fresh solve off the support"""
        def qos(x, lam):
            try:
                return self.lookup(x, lam, cfg)
            except DomainError:
                result = optimize_load_balancing(x, lam, cfg)
                return result.cost if result.feasible else self.penalty
        return qos

    @property
    def num_infeasible(self):
        return int(np.count_nonzero(~self.feasible))


def build_qos_table(grid, support, cfg, horizon=1, jobs=1, digest=None, db_path=None):
    """
    Tabulate c^QoS on every (x, lambda) cell

    Args:
        grid (np.ndarray): Omega_x from model.state_grid
        support (np.ndarray): (|Lambda|, J) arrival-rate support
        cfg (DataCenterConfig): Configuration
        horizon (int): Horizon used to size the big-M penalty
        jobs (int): Worker processes for the general (non-forced) path
        digest (str): Configuration digest; enables the sqlite cache when set
        db_path (str): Optional cache location

    Returns:
        QosTable: Tabulated costs
    """
    support = np.atleast_2d(np.asarray(support, dtype=float))
    penalty = big_m(cfg, support, horizon)
    lam_digest = array_digest(support, np.array([penalty]))

    if digest is not None:
        cached = qos_cache.load_qos_table(digest, lam_digest, db_path)
        if cached is not None and cached.shape == (grid.shape[0], support.shape[0]):
            return QosTable(cached, cached < penalty, support, penalty)

    started = time.time()
    args = [(lam, grid, cfg, penalty) for lam in support]
    if jobs > 1 and forced_assignment(cfg) is None:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(_row_job, args))
    else:
        rows = [_row_job(a) for a in args]
    costs = np.stack([r[0] for r in rows], axis=1)
    feasible = np.stack([r[1] for r in rows], axis=1)
    table = QosTable(costs, feasible, support, penalty)
    logger.info(f"QoS table {costs.shape[0]}x{costs.shape[1]} built in {time.time() - started:.1f}s, "
                f"{table.num_infeasible} infeasible cells")

    if digest is not None:
        qos_cache.save_qos_table(digest, lam_digest, costs, penalty, db_path)
    return table


def probe_axis_convexity(costs, feasible, dims, tol=1e-9):
    """
    Count discrete midpoint-convexity violations along every x axis

    Only triples whose three cells are feasible are checked.

    Args:
        costs (np.ndarray): (|Omega_x|, L) table
        feasible (np.ndarray): Matching feasibility mask
        dims (tuple): Per-block grid sizes M_b + 1
        tol (float): Absolute slack scaled by the midpoint magnitude

    Returns:
        int: Number of violating triples
    """
    L = costs.shape[1]
    arr = costs.reshape(tuple(dims) + (L,))
    ok = feasible.reshape(tuple(dims) + (L,))
    violations = 0
    for axis in range(len(dims)):
        if dims[axis] < 3:
            continue
        n = dims[axis]
        lo = np.take(arr, range(0, n - 2), axis=axis)
        mid = np.take(arr, range(1, n - 1), axis=axis)
        hi = np.take(arr, range(2, n), axis=axis)
        valid = (np.take(ok, range(0, n - 2), axis=axis) & np.take(ok, range(1, n - 1), axis=axis)
                 & np.take(ok, range(2, n), axis=axis))
        bad = valid & (lo + hi < 2 * mid - tol * (1 + np.abs(mid)))
        violations += int(np.count_nonzero(bad))
    return violations


def full_capacity_infeasible(table, cfg):
    """True when some arrival vector of the support overloads even the all-on data center"""
    full = state_index(cfg.servers, cfg)
    return bool(np.any(~table.feasible[full]))


def block_qos_tables(cfg, support, horizon=1):
    """
    Per-block QoS tables of a block-separable data center

    When every class may use exactly one block, the QoS cost of x is the sum
    over blocks of a cost that depends on x_b alone. Each table covers
    x_b = 0..M_b against the full support and uses the big-M of the whole
    data center, so a cell of x is feasible exactly when every block cell is.

    Args:
        cfg (DataCenterConfig): Configuration
        support (np.ndarray): (|Lambda|, J) arrival-rate support
        horizon (int): Horizon used to size the big-M penalty

    Returns:
        list: (block configuration, QosTable) per block, or None when some
            class may use more than one block
    """
    forced = forced_assignment(cfg)
    if forced is None:
        return None
    support = np.atleast_2d(np.asarray(support, dtype=float))
    penalty = big_m(cfg, support, horizon)
    eps = stability_margin(cfg)
    lamS = support @ forced.T
    weight = support @ (forced * cfg.qos_weight).T
    tables = []
    for b in range(cfg.num_blocks):
        X = np.arange(cfg.servers[b] + 1, dtype=float)[:, None, None]
        costs = _costs(X, lamS[None, :, [b]], weight[None, :, [b]], cfg.rate[[b]], eps)
        feasible = np.isfinite(costs)
        tables.append((block_config(cfg, b), QosTable(np.where(feasible, costs, penalty), feasible,
                                                       support, penalty)))
    logger.info(f"Per-block QoS tables for {cfg.num_blocks} blocks, "
                f"{sum(t.num_infeasible for _, t in tables)} infeasible block cells")
    return tables
