"""
Command-line entry point: ingest, gen-trace, solve, simulate, compare and check
"""
import os
import sys
import time
import logging
import argparse

import numpy as np
import pandas as pd

import checks
from aggregate import build_aggregated_model
from charts import cost_bands_figure, robustness_figure, write_figure
from ingest import (DEFAULT_CONFIDENCE, DEFAULT_LAMBDA_LEVELS, DEFAULT_MODES, cluster_modes,
                    estimate_mode_model, gen_synthetic_trace, load_mode_model, parse_trace,
                    save_mode_model, write_trace)
from model import read_config_file, state_grid
from mpc import MpcController
from qos import block_qos_tables, build_qos_table, full_capacity_infeasible
from sim import compare_policies, default_initial_state, run_batch, sample_trajectory
from solver import (DEFAULT_GAMMA, DEFAULT_HORIZON, ROBUST_MODES, RULES, backward_induction,
                    infinite_horizon_solve, monte_carlo_search, policy_frame, policy_from_frame,
                    robustness_sweep, separable_backward_induction, separable_values_frame,
                    values_frame)
from utils import (TOOL_NAME, TOOL_VERSION, DomainError, file_digest, metadata_line, read_csv,
                   read_metadata, write_csv)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_INVALID = 2
EXIT_INFEASIBLE = 3


class UsageParser(argparse.ArgumentParser):
    """ArgumentParser that exits with the usage code on bad arguments"""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _add_instance_args(parser):
    parser.add_argument("--config", required=True, help="Data center configuration TOML")
    parser.add_argument("--model", help="Mode model TOML (default: [modes] model_file of the config)")
    parser.add_argument("--robust", choices=ROBUST_MODES, help="Uncertainty sets used by the solver")
    parser.add_argument("--kl-radius", type=float, help="KL ball radius for --robust kl")
    parser.add_argument("--widen", type=float, help="Widen every interval set by this amount")
    parser.add_argument("--cache", help="sqlite file caching QoS tables")


def build_parser():
    parser = UsageParser(prog=TOOL_NAME, description="Robust data-center capacity control")
    parser.add_argument("--version", action="version", version=f"{TOOL_NAME} {TOOL_VERSION}")
    parser.add_argument("--verbose", action="store_true", help="Debug logging")
    parser.add_argument("--quiet", action="store_true", help="Warnings and errors only")
    parser.add_argument("--jobs", type=int, default=os.cpu_count() or 1, help="Worker processes")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=UsageParser)

    p = sub.add_parser("ingest", help="Estimate a mode model from an arrival trace")
    p.add_argument("--trace", required=True)
    p.add_argument("--classes", required=True, help="Comma-separated class columns")
    p.add_argument("--modes", type=int, default=DEFAULT_MODES)
    p.add_argument("--levels", type=int, default=DEFAULT_LAMBDA_LEVELS)
    p.add_argument("--confidence", type=float, default=DEFAULT_CONFIDENCE)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("gen-trace", help="Sample a synthetic trace from a mode model")
    p.add_argument("--model", required=True)
    p.add_argument("--slots", type=int, default=8760)
    p.add_argument("--classes", help="Comma-separated class columns")
    p.add_argument("--poisson", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("solve", help="Compute a threshold policy")
    _add_instance_args(p)
    p.add_argument("--horizon", type=int, default=DEFAULT_HORIZON)
    p.add_argument("--gamma", type=float, default=DEFAULT_GAMMA)
    p.add_argument("--rule", choices=RULES, default="orthant")
    p.add_argument("--aggregate", choices=("none", "case1", "case2"), default="none")
    p.add_argument("--approximate", action="store_true", help="Aggregate a non-conforming configuration")
    p.add_argument("--separable", action="store_true", help="Per-block solve when each class has one block")
    p.add_argument("--infinite", action="store_true", help="Stationary infinite-horizon solve")
    p.add_argument("--tol", type=float, default=1e-6)
    p.add_argument("--mc", action="store_true", help="Monte-Carlo threshold search")
    p.add_argument("--n", type=int, default=1000, help="Rollouts per Monte-Carlo estimate")
    p.add_argument("--eps", type=float, default=1e-3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--sweep", help="Comma-separated widening amounts for a robustness sweep")
    p.add_argument("--chart", help="HTML chart of the robustness sweep")
    p.add_argument("--out", required=True, help="Policy CSV")
    p.add_argument("--values", help="Values CSV")

    p = sub.add_parser("simulate", help="Simulate a policy")
    _add_instance_args(p)
    p.add_argument("--policy", required=True, help="Policy CSV from solve")
    p.add_argument("--horizon", type=int, default=DEFAULT_HORIZON)
    p.add_argument("--runs", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--trajectory", help="CSV of the first run's trajectory")
    p.add_argument("--out", required=True, help="Per-slot statistics CSV")

    p = sub.add_parser("compare", help="Threshold policy against the MPC baseline")
    _add_instance_args(p)
    p.add_argument("--policy", help="Policy CSV (solved on the fly if omitted)")
    p.add_argument("--custom", action="append", default=[], help="Extra policy as label=path.csv")
    p.add_argument("--horizon", type=int, default=DEFAULT_HORIZON)
    p.add_argument("--gamma", type=float, default=DEFAULT_GAMMA)
    p.add_argument("--rule", choices=RULES, default="orthant")
    p.add_argument("--runs", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--summary", help="Summary CSV of final cumulative costs")
    p.add_argument("--chart", help="HTML chart of the cost bands")
    p.add_argument("--out", required=True, help="Band CSV")

    p = sub.add_parser("check", help="Invariant checks on a reduced copy of the instance")
    _add_instance_args(p)
    p.add_argument("--horizon", type=int, default=checks.MAX_HORIZON)
    p.add_argument("--gamma", type=float, default=DEFAULT_GAMMA)
    p.add_argument("--rule", choices=RULES, default="orthant")
    p.add_argument("--out", required=True, help="Report CSV")
    return parser


def load_instance(args):
    """Configuration, mode model with the requested uncertainty sets, and the input digest"""
    cfg, modes = read_config_file(args.config)
    model_path = args.model or modes.get("model_file")
    if model_path is None:
        raise DomainError("no mode model: pass --model or set [modes] model_file")
    model = load_mode_model(model_path)
    robust = args.robust or modes.get("robust", "interval")
    kl_radius = args.kl_radius if args.kl_radius is not None else float(modes.get("kl_radius", 0.0))
    widen = args.widen if args.widen is not None else float(modes.get("widen", 0.0))
    model = model.with_robustness(robust, kl_radius)
    if widen:
        model = model.widened(widen)
    digest = file_digest(args.config, model_path)
    return cfg, model, digest, robust


def _qos_table(args, cfg, model, digest, horizon):
    grid = state_grid(cfg)
    if args.cache:
        return build_qos_table(grid, model.support, cfg, horizon, args.jobs, digest, args.cache)
    return build_qos_table(grid, model.support, cfg, horizon, args.jobs)


def cmd_ingest(args):
    classes = [c.strip() for c in args.classes.split(",") if c.strip()]
    series = parse_trace(args.trace, classes)
    assignments, centers = cluster_modes(series, args.modes, args.seed)
    model = estimate_mode_model(series, assignments, args.modes, args.levels, args.confidence)
    meta = metadata_line(file_digest(args.trace), args.seed, modes=args.modes, levels=args.levels,
                         confidence=args.confidence)
    save_mode_model(model, args.out, meta)
    return EXIT_OK


def cmd_gen_trace(args):
    model = load_mode_model(args.model)
    classes = [c.strip() for c in args.classes.split(",")] if args.classes else None
    series = gen_synthetic_trace(model, args.slots, args.seed, poisson=args.poisson, class_names=classes)
    write_trace(series, args.out, metadata_line(file_digest(args.model), args.seed, slots=args.slots))
    return EXIT_OK


def _solve_separable(args, cfg, model, digest, robust):
    if args.aggregate != "none" or args.mc or args.infinite or args.sweep:
        raise DomainError("--separable cannot be combined with --aggregate, --mc, --infinite or --sweep")
    started = time.time()
    tables = block_qos_tables(cfg, model.support, args.horizon)
    if tables is None:
        raise DomainError("--separable needs every class to be served by exactly one block")
    exit_code = EXIT_OK
    if any(not table.feasible[-1].all() for _, table in tables):
        logger.warning("Some arrival vector overloads the data center even with every server on")
        exit_code = EXIT_INFEASIBLE
    policy, values = separable_backward_induction(model, cfg, args.horizon, args.gamma, tables)
    logger.info(f"Solved in {time.time() - started:.1f}s")

    meta = metadata_line(digest, None, rule=policy.rule, robust=robust, gamma=args.gamma,
                         horizon=args.horizon, aggregate="none", mode="separable")
    write_csv(policy_frame(policy, cfg), args.out, meta)
    if args.values:
        write_csv(separable_values_frame(values, cfg), args.values, meta)
    return exit_code


def cmd_solve(args):
    cfg, model, digest, robust = load_instance(args)
    if args.separable:
        return _solve_separable(args, cfg, model, digest, robust)
    started = time.time()
    exit_code = EXIT_OK
    solve_cfg = cfg
    if args.aggregate != "none":
        aggregated = build_aggregated_model(args.aggregate, cfg, model, args.horizon, args.approximate)
        solve_cfg, table = aggregated.cfg, aggregated.qos_table
    else:
        table = _qos_table(args, cfg, model, digest, args.horizon)
    if full_capacity_infeasible(table, solve_cfg):
        logger.warning("Some arrival vector overloads the data center even with every server on")
        exit_code = EXIT_INFEASIBLE

    if args.mc:
        policy = monte_carlo_search(model, solve_cfg, args.gamma, args.n, args.eps, args.seed, table,
                                    rule=args.rule)
        values = None
    elif args.infinite:
        policy, values = infinite_horizon_solve(model, solve_cfg, args.gamma, args.tol, table, args.rule)
    else:
        policy, values = backward_induction(model, solve_cfg, args.horizon, args.gamma, table, args.rule)
    logger.info(f"Solved in {time.time() - started:.1f}s")

    meta = metadata_line(digest, args.seed if args.mc else None, rule=args.rule, robust=robust,
                         gamma=args.gamma, horizon=args.horizon, aggregate=args.aggregate,
                         mode="mc" if args.mc else "infinite" if args.infinite else "finite")
    write_csv(policy_frame(policy, solve_cfg), args.out, meta)
    if args.values and values is not None:
        write_csv(values_frame(values, solve_cfg), args.values, meta)

    if args.sweep:
        widths = [float(w) for w in args.sweep.split(",")]
        sweep = robustness_sweep(model, solve_cfg, widths, args.horizon, args.gamma, table, args.rule)
        root, _ = os.path.splitext(args.out)
        write_csv(sweep, f"{root}_sweep.csv", meta)
        if args.chart:
            write_figure(robustness_figure(sweep), args.chart)
    return exit_code


def _load_policy(path, cfg, label):
    meta = read_metadata(path)
    if meta.get("aggregate", "none") != "none":
        raise DomainError(f"{path} holds type-level thresholds; simulate the full-block solve instead")
    return policy_from_frame(read_csv(path), cfg, meta.get("rule", "orthant"), label)


def cmd_simulate(args):
    cfg, model, digest, robust = load_instance(args)
    if args.runs < 2:
        raise DomainError("--runs must be at least 2")
    policy = _load_policy(args.policy, cfg, "mdp")
    table = _qos_table(args, cfg, model, digest, args.horizon)
    s0 = default_initial_state(model, cfg)
    stats = run_batch(model, cfg, policy, args.runs, args.horizon, args.seed, s0, table, jobs=args.jobs)
    meta = metadata_line(digest, args.seed, runs=args.runs, horizon=args.horizon,
                         s0_theta=s0.theta, s0="all_on")
    frame = stats_frame(stats)
    write_csv(frame, args.out, meta)
    if args.trajectory:
        child = np.random.SeedSequence(args.seed).spawn(1)[0]
        traj = sample_trajectory(model, cfg, policy, s0, args.horizon, np.random.default_rng(child), table)
        write_csv(traj.to_frame(cfg), args.trajectory, meta)
    return EXIT_INFEASIBLE if full_capacity_infeasible(table, cfg) else EXIT_OK


def stats_frame(stats):
    return pd.DataFrame({"t": np.arange(1, stats.mean.size + 1), "mean": stats.mean, "std": stats.std})


def cmd_compare(args):
    cfg, model, digest, robust = load_instance(args)
    table = _qos_table(args, cfg, model, digest, args.horizon)
    if args.policy:
        policy = _load_policy(args.policy, cfg, "mdp")
    else:
        policy, _ = backward_induction(model, cfg, args.horizon, args.gamma, table, args.rule)
    policies = [("mdp", policy), ("mpc", MpcController(model, cfg, table.penalty))]
    for entry in args.custom:
        label, sep, path = entry.partition("=")
        if not sep or not label or not path:
            raise DomainError(f"--custom expects label=path, got {entry!r}")
        policies.append((label, _load_policy(path, cfg, label)))

    bands, summary = compare_policies(model, cfg, policies, args.runs, args.horizon, args.seed,
                                      qos_table=table, jobs=args.jobs)
    meta = metadata_line(digest, args.seed, runs=args.runs, horizon=args.horizon, robust=robust,
                         mpc_forecast="reachable_support_cover", s0="all_on")
    write_csv(bands, args.out, meta)
    if args.summary:
        write_csv(summary, args.summary, meta)
    if args.chart:
        write_figure(cost_bands_figure(bands), args.chart)
    for rec in summary.to_dict("records"):
        logger.info(f"{rec['policy']}: final mean {rec['final_mean']:.6g} (std {rec['final_std']:.6g})")
    return EXIT_INFEASIBLE if full_capacity_infeasible(table, cfg) else EXIT_OK


def cmd_check(args):
    cfg, model, digest, robust = load_instance(args)
    small_cfg, small_model = checks.reduce_instance(cfg, model)
    horizon = min(args.horizon, checks.MAX_HORIZON)
    report = checks.invariant_report(small_cfg, small_model, horizon, args.gamma, args.rule)
    write_csv(report, args.out, metadata_line(digest, None, horizon=horizon, rule=args.rule, robust=robust))
    failed = report.loc[~report["passed"], "check"].tolist()
    if failed:
        logger.warning(f"Failed checks: {failed}")
    return EXIT_OK


COMMANDS = {
    "ingest": cmd_ingest,
    "gen-trace": cmd_gen_trace,
    "solve": cmd_solve,
    "simulate": cmd_simulate,
    "compare": cmd_compare,
    "check": cmd_check,
}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else EXIT_USAGE
    level = logging.DEBUG if args.verbose else logging.WARNING if args.quiet else logging.INFO
    logging.basicConfig(level=level, format='%(asctime)s - %(levelname)s - %(message)s')
    if args.jobs < 1:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    try:
        return COMMANDS[args.command](args)
    except DomainError as e:
        logger.error(str(e))
        return EXIT_INVALID
    except OSError as e:
        logger.error(f"I/O error: {e}")
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
