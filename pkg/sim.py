"""
Trajectory sampling and batch statistics for policy comparison
"""
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np
import pandas as pd

from model import State, check_in_box, stage_cost, state_index
from qos import big_m, optimize_load_balancing
from solver import ValueTable, continuation
from utils import DomainError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Trajectory:
    """
    Per-slot record of one simulated run

    Row t holds the state entering slot t+1 (1-based slots), the action taken,
    the stage cost paid and the sampled next mode and arrival-rate index.
    """
    x: np.ndarray
    lam: np.ndarray
    theta: np.ndarray
    action: np.ndarray
    cost: np.ndarray
    next_theta: np.ndarray
    next_lambda_index: np.ndarray
    seed: object = None
    label: str = ""

    @property
    def horizon(self):
        return self.cost.size

    @property
    def cumulative(self):
        return np.cumsum(self.cost)

    def to_frame(self, cfg):
        """Trajectory CSV columns: t, theta, x_<block>..., lam_<class>..., a_<block>..., cost, cumulative"""
        frame = {"t": np.arange(1, self.horizon + 1), "theta": self.theta}
        for b, name in enumerate(cfg.block_names):
            frame[f"x_{name}"] = self.x[:, b]
        for j, name in enumerate(cfg.class_names):
            frame[f"lam_{name}"] = self.lam[:, j]
        for b, name in enumerate(cfg.block_names):
            frame[f"a_{name}"] = self.action[:, b]
        frame["cost"] = self.cost
        frame["cumulative"] = self.cumulative
        return pd.DataFrame(frame)


@dataclass(frozen=True)
class BatchStats:
    mean: np.ndarray
    std: np.ndarray
    cumulative: np.ndarray

    @property
    def n_runs(self):
        return self.cumulative.shape[0]


def _draw(probs, u):
    """Inverse-CDF draw of one index from a probability row"""
    cdf = np.cumsum(probs)
    idx = int(np.count_nonzero(cdf <= u * cdf[-1]))
    return min(idx, probs.size - 1)


def default_initial_state(model, cfg, t=1):
    """All servers on, the most probable stationary mode and its most likely arrival vector"""
    theta = int(np.argmax(model.stationary_distribution(t)))
    lam = model.support[int(np.argmax(model.emission_at(t)[theta]))]
    return State(cfg.servers.copy(), lam, theta)


def _qos_evaluator(model, cfg, qos_table, h):
    if qos_table is not None:
        return qos_table.evaluator(cfg)
    penalty = big_m(cfg, model.support, h)

    def qos(x, lam):
        result = optimize_load_balancing(x, lam, cfg)
        return result.cost if result.feasible else penalty
    return qos


def _lambda_index(model, lam):
    hits = np.flatnonzero(np.all(model.support == np.asarray(lam, dtype=float), axis=1))
    return int(hits[0]) if hits.size else -1


class _AdversarialRows:
    """Maximizing chain rows against a value table, computed once per slot"""

    def __init__(self, model, values):
        self.model = model
        self.values = values
        self._rows = {}

    def row(self, t, a_idx, theta):
        if t not in self._rows:
            if isinstance(self.values, ValueTable):
                v_next = self.values.at(min(t + 1, self.values.horizon + 1))
            else:
                v_next = np.asarray(self.values)
            _, self._rows[t] = continuation(t, v_next, self.model, return_rows=True)
        return self._rows[t][a_idx, theta]


def sample_trajectory(model, cfg, policy, s0, h, rng=None, qos_table=None, adversarial=False, values=None,
                      evaluator=None, adversary=None):
    """
    Simulate one run of a policy

    Next modes come from the nominal chain rows, or from the worst-case rows
    against values when adversarial is set; next arrival rates come from the
    emission of the sampled mode. All random numbers are drawn up front so two
    policies simulated with the same seed see the same mode and rate path.

    Args:
        model (ModeModel): Mode dynamics
        cfg (DataCenterConfig): Configuration
        policy: Object with act(x, theta, t, lam) -> next on-counts
        s0 (State): Initial state
        h (int): Number of slots
        rng (np.random.Generator or int): Random source
        qos_table (QosTable): Tabulated QoS costs; solved on demand if None
        adversarial (bool): Sample next modes from the worst-case rows
        values (ValueTable or np.ndarray): Solved values resolving the worst-case rows

    Returns:
        Trajectory: Simulated run
    """
    if h < 1:
        raise DomainError(f"h must be at least 1, got {h}")
    if adversarial and values is None:
        raise DomainError("adversarial simulation needs a solved value table")
    seed = rng if not isinstance(rng, np.random.Generator) else None
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    uniforms = rng.random((h, 2))
    qos = evaluator or _qos_evaluator(model, cfg, qos_table, h)
    if adversarial:
        adversary = adversary or _AdversarialRows(model, values)

    B, J = cfg.num_blocks, cfg.num_classes
    xs = np.empty((h, B), dtype=int)
    lams = np.empty((h, J))
    thetas = np.empty(h, dtype=int)
    actions = np.empty((h, B), dtype=int)
    costs = np.empty(h)
    next_thetas = np.empty(h, dtype=int)
    next_lams = np.empty(h, dtype=int)

    state = s0
    for step in range(h):
        t = step + 1
        a = np.asarray(check_in_box(policy.act(state.x, state.theta, t, state.lam), cfg, "a"), dtype=int)
        xs[step], lams[step], thetas[step], actions[step] = state.x, state.lam, state.theta, a
        costs[step] = stage_cost(t, state, a, qos, cfg)
        if adversarial:
            row = adversary.row(t, int(state_index(a, cfg)), state.theta)
        else:
            row = model.chain_at(t)[state.theta].nominal
        theta_next = _draw(row, uniforms[step, 0])
        li = _draw(model.emission_at(t)[theta_next], uniforms[step, 1])
        next_thetas[step], next_lams[step] = theta_next, li
        state = State(a, model.support[li], theta_next)
    return Trajectory(xs, lams, thetas, actions, costs, next_thetas, next_lams, seed,
                      getattr(policy, "label", ""))


def _run_chunk(args):
    model, cfg, policy, s0, h, seeds, qos_table, adversarial, values = args
    evaluator = _qos_evaluator(model, cfg, qos_table, h)
    adversary = _AdversarialRows(model, values) if adversarial else None
    out = np.empty((len(seeds), h))
    for i, child in enumerate(seeds):
        traj = sample_trajectory(model, cfg, policy, s0, h, np.random.default_rng(child), qos_table,
                                 adversarial, values, evaluator, adversary)
        out[i] = traj.cumulative
    return out


def run_batch(model, cfg, policy, n_runs, h, seed=0, s0=None, qos_table=None, adversarial=False, values=None,
              jobs=1):
    """
    Per-slot mean and standard deviation of cumulative cost over independent runs

    Run i uses the i-th child of SeedSequence(seed), so results do not depend
    on jobs and runs are paired across policies.

    Args:
        model (ModeModel): Mode dynamics
        cfg (DataCenterConfig): Configuration
        policy: Object with act(x, theta, t, lam)
        n_runs (int): Number of runs, at least 2
        h (int): Slots per run
        seed (int): Master seed
        s0 (State): Initial state; default_initial_state if None
        qos_table (QosTable): Tabulated QoS costs
        adversarial (bool): Worst-case mode draws
        values (ValueTable): Solved values for adversarial draws
        jobs (int): Worker processes

    Returns:
        BatchStats: mean (h,), std (h,) with ddof=1, cumulative (n_runs, h)
    """
    if n_runs < 2:
        raise DomainError(f"n_runs must be at least 2, got {n_runs}")
    s0 = s0 or default_initial_state(model, cfg)
    children = np.random.SeedSequence(seed).spawn(n_runs)
    if jobs > 1:
        size = math.ceil(n_runs / jobs)
        chunks = [children[i:i + size] for i in range(0, n_runs, size)]
        args = [(model, cfg, policy, s0, h, c, qos_table, adversarial, values) for c in chunks]
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            cumulative = np.vstack(list(pool.map(_run_chunk, args)))
    else:
        cumulative = _run_chunk((model, cfg, policy, s0, h, children, qos_table, adversarial, values))
    label = getattr(policy, "label", "policy")
    logger.info(f"{label}: {n_runs} runs of {h} slots, final mean {cumulative[:, -1].mean():.6g}")
    return BatchStats(cumulative.mean(axis=0), cumulative.std(axis=0, ddof=1), cumulative)


def band_frame(label, stats):
    """Band rows (policy, t, mean, std, lo1, hi1, lo2, hi2) of one policy"""
    mean, std = stats.mean, stats.std
    return pd.DataFrame({
        "policy": label,
        "t": np.arange(1, mean.size + 1),
        "mean": mean,
        "std": std,
        "lo1": mean - std,
        "hi1": mean + std,
        "lo2": mean - 2 * std,
        "hi2": mean + 2 * std,
    })


def compare_policies(model, cfg, policies, n_runs, h, seed=0, s0=None, qos_table=None, jobs=1):
    """
    Simulate several policies on common random numbers

    Args:
        model (ModeModel): Mode dynamics
        cfg (DataCenterConfig): Configuration
        policies (list): (label, policy) pairs, at least two
        n_runs (int): Runs per policy
        h (int): Slots per run
        seed (int): Master seed shared by every policy
        s0 (State): Initial state
        qos_table (QosTable): Tabulated QoS costs
        jobs (int): Worker processes

    Returns:
        tuple: (bands DataFrame with h rows per policy, summary DataFrame with
            final cumulative cost and the paired difference to the first policy)
    """
    policies = list(policies.items()) if isinstance(policies, dict) else list(policies)
    if len(policies) < 2:
        raise DomainError("compare_policies needs at least two policies")
    labels = [label for label, _ in policies]
    if len(set(labels)) != len(labels):
        raise DomainError(f"policy labels must be unique, got {labels}")
    s0 = s0 or default_initial_state(model, cfg)
    stats = {label: run_batch(model, cfg, policy, n_runs, h, seed, s0, qos_table, jobs=jobs)
             for label, policy in policies}

    bands = pd.concat([band_frame(label, stats[label]) for label in labels], ignore_index=True)
    reference = stats[labels[0]].cumulative[:, -1]
    summary = []
    for label in labels:
        final = stats[label].cumulative[:, -1]
        diff = final - reference
        summary.append({
            "policy": label,
            "final_mean": float(final.mean()),
            "final_std": float(final.std(ddof=1)),
            "diff_mean": float(diff.mean()),
            "diff_stderr": float(diff.std(ddof=1) / math.sqrt(n_runs)),
        })
    return bands, pd.DataFrame(summary)
