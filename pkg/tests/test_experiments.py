import io
import json

import numpy as np
import pytest

from conftest import CONFIGS
from iwverify.experiments import (
    REDUCTION_MATRIX_SEED,
    ResidualRow,
    StudyReport,
    fit_slope,
    random_jump_free_scenario,
    read_csv_report,
    reduction_rows,
    residual_path_stats,
    run_feps_study,
    run_mollifier_suite,
    run_reduction_suite,
    run_residual_study,
    scenario_fingerprint,
)
from iwverify.feps import FepsParams
from iwverify.noise import make_rng
from iwverify.scenario import load_scenario, validate_scenario


def test_slope_of_a_power_law():
    xs = [1.0, 0.5, 0.25, 0.125]
    fit = fit_slope(xs, [3 * x**1.5 for x in xs])
    assert fit.slope == pytest.approx(1.5)
    assert fit.stderr == pytest.approx(0.0, abs=1e-12)
    assert fit.lower() == pytest.approx(1.5)


def test_slope_is_undefined_for_zeros():
    assert fit_slope([1.0, 0.5], [1.0, 0.0]) is None
    assert fit_slope([1.0], [1.0]) is None


def _report() -> StudyReport:
    rows = [
        ResidualRow(0, 8, 0.125, 4, 0.25, 0.5, 0.0, 0.01),
        ResidualRow(1, 16, 0.0625, 4, np.float64(0.125), 0.3, 0.0, 0.02),
    ]
    summary = {"seed": 42, "slope": 1.0, "exact": np.bool_(False), "note": None}
    return StudyReport("residual", "abc123", rows, summary, True)


def test_csv_report():
    fh = io.StringIO()
    _report().write(fh, "csv")
    text = fh.getvalue()
    assert text.startswith("# kind: residual\n")
    fh.seek(0)
    metadata, rows = read_csv_report(fh)
    assert metadata["fingerprint"] == "abc123"
    assert metadata["passed"] == "true"
    assert metadata["exact"] == "false"
    assert metadata["note"] == ""
    assert metadata["version"]
    assert list(rows[0]) == list(ResidualRow._fields)
    assert float(rows[1]["rms_residual"]) == 0.125
    assert rows[0]["steps"] == "8"


def test_csv_metadata_keeps_empty_values():
    summary = {"slope": None, "criterion": "ratio: 1.5", "seed": 1}
    report = StudyReport("feps", "f00d", _report().rows, summary, False)
    fh = io.StringIO()
    report.write(fh, "csv")
    fh.seek(0)
    metadata, _ = read_csv_report(fh)
    assert metadata["slope"] == ""
    assert "slope:" not in metadata
    assert metadata["criterion"] == "ratio: 1.5"
    assert metadata["passed"] == "false"


def test_json_report():
    fh = io.StringIO()
    _report().write(fh, "json")
    document = json.loads(fh.getvalue())
    assert document["kind"] == "residual"
    assert document["passed"] is True
    assert document["exact"] is False
    assert document["columns"] == list(ResidualRow._fields)
    assert document["rows"][1]["rms_residual"] == 0.125
    with pytest.raises(ValueError):
        _report().write(io.StringIO(), "xml")


def test_fingerprint_tracks_the_seed(small_cfg):
    again = validate_scenario(small_cfg.with_overrides())
    assert scenario_fingerprint(again) == scenario_fingerprint(small_cfg)
    reseeded = small_cfg.with_overrides(master_seed=43)
    assert scenario_fingerprint(reseeded) != scenario_fingerprint(small_cfg)


def test_common_noise_across_levels(small_cfg):
    stats = residual_path_stats(small_cfg, 0)
    assert stats.shape == (3, 3)
    assert np.all(stats[:, 1] >= np.abs(stats[:, 0]))
    assert np.all(stats[:, 2] <= 1e-12)


@pytest.mark.parametrize("name", ["zero", "jump_only"])
def test_residual_study_is_exact_without_continuous_noise(name):
    cfg = load_scenario(CONFIGS / f"{name}.yaml")
    report = run_residual_study(cfg)
    assert report.passed
    assert report.summary["exact"]
    assert report.summary["slope"] is None
    assert len(report.rows) == 3
    assert [row.steps for row in report.rows] == [cfg.base_steps * k for k in (1, 2, 4)]
    assert all(row.jump_residual_max <= 1e-12 for row in report.rows)


def test_parallel_reports_are_identical(small_cfg):
    serial, parallel = io.StringIO(), io.StringIO()
    run_residual_study(small_cfg, workers=1).write(serial)
    run_residual_study(small_cfg, workers=2).write(parallel)
    assert serial.getvalue() == parallel.getvalue()


def test_random_scenarios_are_jump_free_and_valid(small_cfg):
    rng = make_rng([REDUCTION_MATRIX_SEED, 0])
    for _ in range(10):
        cfg = random_jump_free_scenario(small_cfg, rng)
        assert validate_scenario(cfg) is cfg
        assert cfg.jump_law.intensity == 0
        assert 1 <= cfg.field_spec.size <= 3


def test_reduction_rows_pass(small_cfg):
    for index in range(5):
        rows = reduction_rows(small_cfg, index)
        names = [row.reduction for row in rows]
        assert "classical-iw" in names
        assert set(names) <= {"classical-iw", "chain-rule", "generalized-ito"}
        assert all(row.passed for row in rows), rows


def test_reduction_rows_are_reproducible(small_cfg):
    assert reduction_rows(small_cfg, 7) == reduction_rows(small_cfg, 7)


def test_small_reduction_suite(small_cfg):
    report = run_reduction_suite(small_cfg, n_scenarios=5, ito_paths=20)
    rows = {row.reduction: row for row in report.rows if row.scenario < 0}
    assert rows["chain-rule-order"].passed
    assert rows["chain-rule-order"].measured == pytest.approx(1.0, abs=0.2)
    assert report.summary["classical-iw_matches"] == 5
    assert report.summary["seed"] == REDUCTION_MATRIX_SEED


def test_mollifier_suite():
    report = run_mollifier_suite()
    assert report.passed, [row for row in report.rows if not row.passed]
    (row,) = [
        row
        for row in report.rows
        if row.check == "holder-bound"
        and row.function == "abs"
        and row.epsilon == 0.1
    ]
    assert row.measured == pytest.approx(0.079788, abs=1e-6)
    assert row.bound == pytest.approx(0.159577, abs=1e-6)
    checks = {row.check for row in report.rows}
    assert checks == {
        "normalization",
        "moment",
        "holder-bound",
        "closed-form",
        "holder-order",
        "quadrature-budget",
        "transfer-grad",
        "transfer-hess",
    }
    assert report.fingerprint == run_mollifier_suite((0.02, 0.1, 0.5)).fingerprint


def test_constant_holder_rows_pass():
    rows = [
        row
        for row in run_mollifier_suite().rows
        if row.check == "holder-bound" and row.function == "constant"
    ]
    assert len(rows) == 3
    assert all(row.bound == 0.0 and row.measured < 1e-12 for row in rows)
    assert all(row.passed for row in rows)


def test_feps_study_on_smooth_field(smooth_cfg):
    report = run_feps_study(smooth_cfg, FepsParams(n_paths=50))
    assert report.passed
    assert report.summary["slope"] > 1.5
    assert report.summary["bound_violations"] == 0
    assert report.summary["quadrature_shift"] < report.summary["quadrature_budget"]
    assert [row.epsilon for row in report.rows] == [0.4, 0.2, 0.1, 0.05]


@pytest.mark.slow
def test_reference_residual_study():
    report = run_residual_study(load_scenario(CONFIGS / "reference.yaml"), workers=4)
    assert report.passed
    assert report.summary["monotone"]
    assert report.summary["slope"] - 2 * report.summary["slope_stderr"] >= 0.4


@pytest.mark.slow
def test_full_reduction_suite():
    report = run_reduction_suite(load_scenario(CONFIGS / "reference.yaml"), workers=4)
    assert report.passed
    assert report.summary["classical-iw_matches"] == 100
