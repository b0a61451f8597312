"""
Uncertainty sets over mode transition rows and their worst-case expectations
"""
import logging
from dataclasses import dataclass

import numpy as np

from utils import DomainError

logger = logging.getLogger(__name__)

SIMPLEX_ATOL = 1e-12
KL_MAX_ITER = 100
KL_TOL = 1e-10


def _row(arr, name):
    out = np.array(arr, dtype=float)
    if out.ndim != 1 or out.size == 0:
        raise DomainError(f"{name} must be a nonempty vector")
    out.setflags(write=False)
    return out


def _check_values(values, size):
    values = np.asarray(values, dtype=float)
    if values.shape[-1] != size:
        raise DomainError(f"values must have {size} entries per row, got shape {values.shape}")
    if not np.all(np.isfinite(values)):
        raise DomainError("values must be finite")
    return values


@dataclass(frozen=True)
class IntervalSet:
    """Rows P with lo <= P <= hi entrywise on the probability simplex"""
    nominal: np.ndarray
    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        nominal = _row(self.nominal, "nominal")
        lo = _row(self.lo, "lo")
        hi = _row(self.hi, "hi")
        if not (nominal.shape == lo.shape == hi.shape):
            raise DomainError("nominal, lo and hi must have the same length")
        if np.any(lo < 0) or np.any(hi > 1) or np.any(lo > hi):
            raise DomainError("interval bounds must satisfy 0 <= lo <= hi <= 1")
        if lo.sum() > 1 + SIMPLEX_ATOL or hi.sum() < 1 - SIMPLEX_ATOL:
            raise DomainError(f"empty interval set: sum(lo)={lo.sum():.6g}, sum(hi)={hi.sum():.6g}")
        object.__setattr__(self, "nominal", nominal)
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @classmethod
    def singleton(cls, nominal):
        return cls(nominal, nominal, nominal)

    @property
    def size(self):
        return self.nominal.size

    @property
    def is_singleton(self):
        return bool(np.all(self.lo == self.hi))

    def widened(self, delta):
        """Grow every interval by delta on both sides, clipped to [0, 1]"""
        return IntervalSet(self.nominal, np.clip(self.lo - delta, 0, 1), np.clip(self.hi + delta, 0, 1))

    def contains(self, row, atol=SIMPLEX_ATOL):
        row = np.asarray(row, dtype=float)
        return bool(np.all(row >= self.lo - atol) and np.all(row <= self.hi + atol)
                    and abs(row.sum() - 1) <= atol * row.size)

    def worst_case(self, values):
        """
        Greedy maximizer for one or many value rows

        Values are visited in descending order (ties: lower index first); each
        entry receives its upper bound until the unit mass is spent.

        Args:
            values (np.ndarray): (..., n) values over next modes

        Returns:
            tuple: (expectations (...,), maximizing rows (..., n))
        """
        values = _check_values(values, self.size)
        order = np.argsort(-values, axis=-1, kind="stable")
        extra = (self.hi - self.lo)[order]
        budget = 1.0 - self.lo.sum()
        spent_before = np.cumsum(extra, axis=-1) - extra
        give = np.clip(budget - spent_before, 0.0, extra)
        rows = np.empty_like(values)
        np.put_along_axis(rows, order, self.lo[order] + give, axis=-1)
        return np.sum(rows * values, axis=-1), rows


def _kl_tilt(values, q, beta, vmax):
    """Exponentially tilted rows P_beta ∝ q exp(v / beta) and their KL divergence to q"""
    z = (values - vmax[:, None]) / beta[:, None]
    w = np.where(q > 0, q * np.exp(z), 0.0)
    total = w.sum(axis=1)
    rows = w / total[:, None]
    kl = np.sum(np.where(rows > 0, rows * z, 0.0), axis=1) - np.log(total)
    return rows, np.maximum(kl, 0.0)


@dataclass(frozen=True)
class LikelihoodSet:
    """Rows P with KL(P || nominal) <= radius"""
    nominal: np.ndarray
    radius: float

    def __post_init__(self):
        nominal = _row(self.nominal, "nominal")
        if np.any(nominal < 0) or abs(nominal.sum() - 1) > 1e-9:
            raise DomainError("nominal row must lie on the probability simplex")
        if np.isnan(self.radius) or self.radius < 0:
            raise DomainError(f"KL radius must be nonnegative, got {self.radius}")
        object.__setattr__(self, "nominal", nominal)
        object.__setattr__(self, "radius", float(self.radius))

    @property
    def size(self):
        return self.nominal.size

    @property
    def is_singleton(self):
        return self.radius == 0

    def widened(self, delta):
        return LikelihoodSet(self.nominal, self.radius + delta)

    def contains(self, row, atol=1e-9):
        row = np.asarray(row, dtype=float)
        if np.any(row[self.nominal == 0] > atol):
            return False
        mask = row > 0
        kl = float(np.sum(row[mask] * np.log(row[mask] / self.nominal[mask])))
        return kl <= self.radius + atol and abs(row.sum() - 1) <= atol

    def worst_case(self, values, tol=KL_TOL):
        """
        Maximize the expectation over the KL ball by bisection on the dual multiplier

        The feasible end of the final bracket is returned, so the expectation
        never exceeds the true maximum.

        Args:
            values (np.ndarray): (..., n) values over next modes
            tol (float): Stop once the bracket's expectations differ by less than tol

        Returns:
            tuple: (expectations (...,), maximizing rows (..., n))
        """
        values = _check_values(values, self.size)
        shape = values.shape
        flat = values.reshape(-1, self.size)
        q = self.nominal
        support = q > 0
        rows = np.tile(q, (flat.shape[0], 1))
        if self.radius == 0:
            return np.sum(rows * flat, axis=1).reshape(shape[:-1]), rows.reshape(shape)

        masked = np.where(support, flat, -np.inf)
        vmax = masked.max(axis=1)
        vmin = np.where(support, flat, np.inf).min(axis=1)
        spread = vmax - vmin
        top = support & (flat == vmax[:, None])
        top_mass = np.sum(np.where(top, q, 0.0), axis=1)
        # concentrating all mass on the maximal entries is affordable
        saturated = (spread == 0) | (self.radius >= -np.log(top_mass))
        if np.any(saturated):
            rows[saturated] = np.where(top[saturated], q, 0.0) / top_mass[saturated, None]

        todo = np.flatnonzero(~saturated)
        if todo.size:
            v = flat[todo]
            vm = vmax[todo]
            lo = np.full(todo.size, 1e-12)
            hi = spread[todo] + 1.0
            for _ in range(200):
                _, kl_hi = _kl_tilt(v, q, hi, vm)
                grow = kl_hi > self.radius
                if not np.any(grow):
                    break
                hi = np.where(grow, 2 * hi, hi)
            for it in range(KL_MAX_ITER):
                mid = 0.5 * (lo + hi)
                _, kl_mid = _kl_tilt(v, q, mid, vm)
                infeasible = kl_mid > self.radius
                lo = np.where(infeasible, mid, lo)
                hi = np.where(infeasible, hi, mid)
                p_lo, _ = _kl_tilt(v, q, lo, vm)
                p_hi, _ = _kl_tilt(v, q, hi, vm)
                gap = np.sum((p_lo - p_hi) * v, axis=1)
                if np.all(gap <= tol):
                    logger.debug(f"KL bisection converged after {it + 1} iterations")
                    break
            rows[todo], _ = _kl_tilt(v, q, hi, vm)
        return np.sum(rows * flat, axis=1).reshape(shape[:-1]), rows.reshape(shape)


def worst_case_expectation_interval(values, interval_set):
    """
    Worst-case expectation of values over an interval set

    Args:
        values (array): Values over next modes
        interval_set (IntervalSet): Admissible rows

    Returns:
        tuple: (expectation, maximizing row)
    """
    expectation, row = interval_set.worst_case(np.atleast_2d(values))
    return float(expectation[0]), row[0]


def worst_case_expectation_kl(values, likelihood_set, tol=KL_TOL):
    """Worst-case expectation over a KL ball, within tol of the maximum"""
    if tol <= 0:
        raise DomainError("tol must be positive")
    expectation, _ = likelihood_set.worst_case(np.atleast_2d(values), tol=tol)
    return float(expectation[0])


def worst_case_expectations(values, chain_set):
    """Vectorized worst case for many value rows against one set of either kind"""
    return chain_set.worst_case(values)


def kl_divergence(p, q):
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    mask = p > 0
    return float(np.sum(p[mask] * np.log(p[mask] / q[mask])))
