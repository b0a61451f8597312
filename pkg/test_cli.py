"""
End-to-end tests of the command-line entry point on a two-block instance
"""
import pandas as pd
import pytest

from cli import EXIT_INFEASIBLE, EXIT_INVALID, EXIT_OK, EXIT_USAGE, main
from ingest import load_mode_model
from utils import read_csv, read_metadata

CONFIG = """
[blocks]
servers = [2, 2]
rates = [2.0, 2.0]
serve = [[true, false], [false, true]]

[classes]
names = ["web", "batch"]

[prices]
horizon = 3
energy = 1.0
switch_on = 1.0
switch_off = 0.5

[modes]
model_file = "modes.toml"
"""

MODES = """
[chain]
nominal = [[0.7, 0.3], [0.3, 0.7]]

[intervals]
kind = "interval"
lo = [[0.6, 0.2], [0.2, 0.6]]
hi = [[0.8, 0.4], [0.4, 0.8]]

[lambda_support]
points = [[0.5, 0.5], [1.5, 1.5]]

[emission]
probs = [[0.8, 0.2], [0.2, 0.8]]

[meta]
class_names = ["web", "batch"]
"""

OVERLOADED = """
[chain]
nominal = [[1.0]]

[lambda_support]
points = [[5.0, 5.0]]

[emission]
probs = [[1.0]]
"""


def run(*args):
    return main(["--quiet", "--jobs", "1", *args])


@pytest.fixture
def instance(tmp_path):
    (tmp_path / "modes.toml").write_text(MODES)
    config = tmp_path / "dc.toml"
    config.write_text(CONFIG)
    return tmp_path, str(config)


def test_usage_errors():
    assert run() == EXIT_USAGE
    assert run("solve", "--bogus") == EXIT_USAGE
    assert main(["--jobs", "0", "check", "--config", "x", "--out", "y"]) == EXIT_USAGE
    assert main(["--version"]) == EXIT_OK


def test_solve_writes_policy_and_values(instance):
    tmp, config = instance
    out, values = tmp / "policy.csv", tmp / "values.csv"
    assert run("solve", "--config", config, "--horizon", "3", "--out", str(out), "--values", str(values)) == EXIT_OK
    policy = read_csv(str(out))
    # 3 slots x 2 modes x 4 orthants
    assert len(policy) == 24
    assert list(policy.columns) == ["t", "theta", "k", "tau_b1", "tau_b2", "hstar"]
    meta = read_metadata(str(out))
    assert meta["tool"] == "dccontrol" and meta["rule"] == "orthant" and meta["mode"] == "finite"
    assert len(read_csv(str(values))) > 0

    first = out.read_bytes()
    assert run("solve", "--config", config, "--horizon", "3", "--out", str(out)) == EXIT_OK
    assert out.read_bytes() == first


def test_solve_through_cache_matches(instance):
    tmp, config = instance
    plain, cached = tmp / "plain.csv", tmp / "cached.csv"
    assert run("solve", "--config", config, "--horizon", "3", "--out", str(plain)) == EXIT_OK
    for _ in range(2):
        assert run("solve", "--config", config, "--horizon", "3", "--cache", str(tmp / "qos.db"),
                   "--out", str(cached)) == EXIT_OK
        assert cached.read_bytes() == plain.read_bytes()


def test_solve_variants(instance):
    tmp, config = instance
    assert run("solve", "--config", config, "--infinite", "--out", str(tmp / "inf.csv")) == EXIT_OK
    stationary = read_csv(str(tmp / "inf.csv"))
    assert stationary["t"].unique().tolist() == [0]

    assert run("solve", "--config", config, "--horizon", "3", "--sweep", "0,0.05,0.1",
               "--chart", str(tmp / "sweep.html"), "--out", str(tmp / "p.csv")) == EXIT_OK
    sweep = read_csv(str(tmp / "p_sweep.csv"))
    assert sweep["width"].tolist() == [0.0, 0.05, 0.1]
    assert (tmp / "sweep.html").exists()

    assert run("solve", "--config", config, "--horizon", "3", "--robust", "kl", "--kl-radius", "0.05",
               "--rule", "partial", "--out", str(tmp / "kl.csv")) == EXIT_OK
    meta = read_metadata(str(tmp / "kl.csv"))
    assert meta["robust"] == "kl" and meta["rule"] == "partial"


def test_simulate(instance):
    tmp, config = instance
    policy = str(tmp / "policy.csv")
    assert run("solve", "--config", config, "--horizon", "3", "--out", policy) == EXIT_OK
    stats, traj = tmp / "stats.csv", tmp / "traj.csv"
    assert run("simulate", "--config", config, "--policy", policy, "--horizon", "3", "--runs", "10",
               "--seed", "5", "--trajectory", str(traj), "--out", str(stats)) == EXIT_OK
    frame = read_csv(str(stats))
    assert list(frame.columns) == ["t", "mean", "std"]
    assert frame["t"].tolist() == [1, 2, 3]
    assert (frame["mean"].diff().dropna() >= 0).all()
    assert read_metadata(str(stats))["seed"] == "5"
    trajectory = read_csv(str(traj))
    assert len(trajectory) == 3 and "cumulative" in trajectory.columns

    assert run("simulate", "--config", config, "--policy", policy, "--runs", "1", "--out", str(stats)) == EXIT_INVALID


def test_compare(instance):
    tmp, config = instance
    policy = str(tmp / "policy.csv")
    assert run("solve", "--config", config, "--horizon", "3", "--out", policy) == EXIT_OK
    bands, summary, chart = tmp / "bands.csv", tmp / "summary.csv", tmp / "bands.html"
    assert run("compare", "--config", config, "--horizon", "3", "--runs", "8", "--summary", str(summary),
               "--chart", str(chart), "--custom", f"again={policy}", "--out", str(bands)) == EXIT_OK
    frame = read_csv(str(summary))
    assert frame["policy"].tolist() == ["mdp", "mpc", "again"]
    assert frame.loc[frame["policy"] == "mdp", "diff_mean"].iloc[0] == 0.0
    assert len(read_csv(str(bands))) == 9
    assert chart.exists()

    assert run("compare", "--config", config, "--policy", policy, "--horizon", "3", "--runs", "4",
               "--custom", "nolabel", "--out", str(bands)) == EXIT_INVALID


def test_check_report(instance):
    tmp, config = instance
    out = tmp / "report.csv"
    assert run("check", "--config", config, "--horizon", "2", "--out", str(out)) == EXIT_OK
    report = read_csv(str(out))
    assert list(report.columns) == ["check", "value", "passed"]
    passed = dict(zip(report["check"], report["passed"]))
    for name in ("qos_axis_convexity_violations", "full_capacity_infeasible", "flat_minus_threshold_max",
                 "lower_bound_minus_threshold_max", "final_lower_bound_minus_flat_max", "robust_monotone_in_width"):
        assert passed[name], name


def test_gen_trace_then_ingest(instance):
    tmp, _ = instance
    trace, model = tmp / "trace.csv", tmp / "estimated.toml"
    assert run("gen-trace", "--model", str(tmp / "modes.toml"), "--slots", "300", "--seed", "2",
               "--out", str(trace)) == EXIT_OK
    frame = pd.read_csv(trace, comment="#")
    assert list(frame.columns) == ["timestamp", "web", "batch"] and len(frame) == 300
    assert run("ingest", "--trace", str(trace), "--classes", "web,batch", "--modes", "2", "--levels", "2",
               "--out", str(model)) == EXIT_OK
    estimated = load_mode_model(str(model))
    assert estimated.num_modes == 2
    assert estimated.num_classes == 2
    assert read_metadata(str(model))["modes"] == "2"


def test_invalid_inputs(instance):
    tmp, config = instance
    out = str(tmp / "p.csv")
    assert run("solve", "--config", str(tmp / "missing.toml"), "--out", out) == EXIT_INVALID
    assert run("solve", "--config", config, "--gamma", "1.5", "--out", out) == EXIT_INVALID
    assert run("solve", "--config", config, "--horizon", "3", "--model", str(tmp / "none.toml"),
               "--out", out) == EXIT_INVALID
    assert run("ingest", "--trace", str(tmp / "none.csv"), "--classes", "web", "--out", out) == EXIT_INVALID


def test_overloaded_instance_still_writes(instance):
    tmp, config = instance
    (tmp / "heavy.toml").write_text(OVERLOADED)
    out = tmp / "p.csv"
    assert run("solve", "--config", config, "--model", str(tmp / "heavy.toml"), "--horizon", "2",
               "--out", str(out)) == EXIT_INFEASIBLE
    assert len(read_csv(str(out))) == 2 * 1 * 4


def test_aggregated_policy_cannot_be_simulated(instance):
    tmp, config = instance
    policy = str(tmp / "agg.csv")
    assert run("solve", "--config", config, "--horizon", "3", "--aggregate", "case1", "--out", policy) == EXIT_OK
    assert read_metadata(policy)["aggregate"] == "case1"
    assert run("simulate", "--config", config, "--policy", policy, "--horizon", "3", "--runs", "4",
               "--out", str(tmp / "s.csv")) == EXIT_INVALID


def test_separable_solve_and_simulate(instance):
    tmp, config = instance
    policy, values = str(tmp / "sep.csv"), str(tmp / "sep_values.csv")
    assert run("solve", "--config", config, "--horizon", "3", "--separable", "--out", policy,
               "--values", values) == EXIT_OK
    meta = read_metadata(policy)
    assert meta["mode"] == "separable" and meta["rule"] == "partial"
    assert len(read_csv(policy)) == 24
    frame = read_csv(values)
    assert list(frame.columns) == ["t", "block", "x", "lambda_index", "theta", "value"]
    # 3 slots x (3 + 3) block states x 2 arrival vectors x 2 modes
    assert len(frame) == 72
    assert run("simulate", "--config", config, "--policy", policy, "--horizon", "3", "--runs", "4",
               "--out", str(tmp / "s.csv")) == EXIT_OK
    assert run("solve", "--config", config, "--separable", "--infinite", "--out", policy) == EXIT_INVALID
