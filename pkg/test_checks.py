"""
Tests for the invariant report and instance reduction
"""
import numpy as np

from checks import MAX_LAMBDA, invariant_report, reduce_instance
from ingest import load_mode_model
from model import read_config_file


def test_reduce_benchmark_instance(benchmark_config_path):
    cfg, modes = read_config_file(benchmark_config_path)
    model = load_mode_model(modes["model_file"])
    small_cfg, small_model = reduce_instance(cfg, model)
    assert small_cfg.servers.tolist() == [3, 3, 3, 3]
    np.testing.assert_allclose(small_cfg.rate * small_cfg.servers, cfg.rate * cfg.servers)
    assert small_model.num_lambda == MAX_LAMBDA
    np.testing.assert_allclose(small_model.emission.sum(axis=2), 1.0)
    # the low mode keeps its points, the others lose all of theirs
    np.testing.assert_allclose(small_model.emission[0, 0], model.emission[0, 0, :MAX_LAMBDA])
    np.testing.assert_allclose(small_model.emission[0, 1], [1 / 3] * 3)


def test_single_block_report_passes(single_block):
    cfg, model = single_block
    report = invariant_report(cfg, model, horizon=2, gamma=0.9)
    assert report["passed"].all()
    values = dict(zip(report["check"], report["value"]))
    assert values["threshold_equals_flat"] == 1.0
    assert values["qos_axis_convexity_violations"] == 0.0
