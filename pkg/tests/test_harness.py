"""Tests for verification runs, the counterexample table and refinement studies."""

import json
import math
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from itoledger.config import ConfigurationError, default_config
from itoledger.harness import (
    convergence_study,
    example1_experiment,
    format_summary,
    load_report,
    run_verification,
    simulate_scenario,
    summarize_study,
)


def small(scenario: str, **changes):
    return replace(default_config(scenario), **changes)


def test_example1_integrals_match_closed_forms():
    deltas = [10.0**-k for k in range(1, 7)]

    table = example1_experiment(deltas, 1.0)

    for delta, value in zip(deltas, table.integrals["c3"]):
        assert value == pytest.approx(math.log(1.0 / delta), abs=1e-6)
    assert table.limits["c1"] == pytest.approx(2.0, abs=1e-6)
    assert table.limits["c2"] == pytest.approx(4.0, abs=1e-6)
    assert table.limits["c3"] is None
    assert table.log_growth == pytest.approx([math.log(10.0)] * 5, abs=1e-8)


def test_example1_requires_decreasing_positive_deltas():
    with pytest.raises(ConfigurationError, match="strictly decreasing"):
        example1_experiment([0.1, 0.2, 0.01])
    with pytest.raises(ConfigurationError, match="positive"):
        example1_experiment([0.1, 0.0])


def test_pure_jump_verification_passes_and_writes_artifacts(tmp_path: Path):
    report = run_verification(small("pure-jump-exact", replicas=3), tmp_path)

    assert report.passed
    assert [rule.rule for rule in report.rules] == ["pathwise-exactness"]
    assert max(report.residual_maxima) <= 1e-10
    assert "line-path.csv" in report.artifacts
    for name in report.artifacts:
        assert (tmp_path / name).exists()
    data = json.loads((tmp_path / "report.json").read_text(encoding="utf-8"))
    assert data["passed"] is True
    assert data["config_digest"] == report.config_digest
    assert not list(tmp_path.glob(".*"))


def test_verification_is_reproducible_for_a_fixed_seed():
    config = small("pure-jump-exact", replicas=2, seed=11)

    first = run_verification(config)
    second = run_verification(config.with_overrides(threads=1))

    assert first.residual_maxima == second.residual_maxima


def test_ledger_equivalence_verification_passes():
    report = run_verification(small("ledger-equivalence", replicas=2))

    assert report.passed, format_summary(report.to_dict())
    assert report.conditions


def test_counterexample_verification_passes(tmp_path: Path):
    report = run_verification(default_config("example1"), tmp_path)

    assert report.passed, format_summary(report.to_dict())
    assert any("condition2: suspected divergent" in line for line in report.conditions)
    assert (tmp_path / "example1.csv").exists()
    totals = report.orders["truncated_standard_totals"]
    assert set(totals) == {"1", "2", "4", "8"}
    assert all(value is not None for value in totals.values())


def test_compensated_poisson_second_moment():
    report = run_verification(small("compensated-poisson-p2", replicas=1000))

    assert report.passed, format_summary(report.to_dict())
    assert report.orders["moment"]["count"] == 1000


def test_compensated_poisson_only_targets_p2():
    config = small("compensated-poisson-p2", replicas=2, params={"p": 4.0})

    with pytest.raises(ConfigurationError, match="p = 2"):
        run_verification(config)


def test_lp_jump_verification_passes(tmp_path: Path):
    report = run_verification(small("lp-jump-p2", replicas=2), tmp_path)

    assert report.passed, format_summary(report.to_dict())
    assert report.orders["integrability"]["condition_L"] is True
    assert (tmp_path / "lp-jump-final.bin").stat().st_size == 64 * 8


def test_mollifier_suite_passes():
    report = run_verification(small("mollifier-suite", replicas=10))

    assert report.passed, format_summary(report.to_dict())
    assert len(report.residual_maxima) == 10


def test_operator_properties_pass_on_a_reduced_sample():
    report = run_verification(small("operator-properties", replicas=3000))

    assert report.passed, format_summary(report.to_dict())


def test_time_step_study_has_strong_order_one_half():
    config = small(
        "diffusion-order",
        replicas=200,
        refinement={"dt": (1 / 16, 1 / 32, 1 / 64, 1 / 128)},
    )

    result = convergence_study(config, "dt")

    assert result.status == "ok"
    assert result.parameters == (1 / 16, 1 / 32, 1 / 64, 1 / 128)
    assert 0.35 <= result.order <= 1.2


def test_wiener_truncation_study_decreases_with_R():
    config = small("diffusion-order", replicas=50, refinement={"R": (1.0, 2.0, 4.0, 8.0)})

    result = convergence_study(config, "R")

    assert result.status == "ok"
    assert result.order < 0


def test_layer_study_reaches_the_floor_at_the_full_measure():
    config = small("pure-jump-exact", replicas=20, refinement={"layers": (1.0, 2.0, 3.0, 4.0)})

    result = convergence_study(config, "layers")

    assert result.status == "floor"
    assert result.floor_at == 4.0
    assert result.order is None
    assert result.residuals[-1] == 0.0


def test_space_study_keeps_scalar_and_vector_forms_in_agreement():
    config = small(
        "lp-full-p4",
        replicas=2,
        refinement={"dx": (0.25, 0.125, 0.0625)},
        params={**default_config("lp-full-p4").params, "dt_per_dx4": 16.0},
    )

    result = convergence_study(config, "dx")

    assert len(result.residuals) == 3
    assert result.extras["scalar_discrepancy"] <= 1e-12


def test_study_rejects_unknown_axes():
    with pytest.raises(ConfigurationError, match="unknown study axis"):
        convergence_study(default_config("diffusion-order"), "dz")


def test_non_monotone_residuals_are_indeterminate():
    result = summarize_study("dt", [0.1, 0.05, 0.025], np.array([[1.0, 2.0, 0.5]]))

    assert result.status == "indeterminate"
    assert result.order is None
    assert result.cauchy == (1.0, 1.5)


def test_simulate_scenario_writes_one_path_per_replica(tmp_path: Path):
    written = simulate_scenario(small("compensated-poisson-p2", replicas=3), tmp_path)

    assert sorted(written) == sorted(
        f"compensated-poisson-replica-{i}-{kind}.csv" for i in range(3) for kind in ("path", "stream")
    )


def test_simulate_scenario_refuses_scenarios_without_paths(tmp_path: Path):
    with pytest.raises(ConfigurationError, match="does not simulate"):
        simulate_scenario(default_config("operator-properties"), tmp_path)


def test_load_report_round_trips_the_summary(tmp_path: Path):
    run_verification(small("pure-jump-exact", replicas=1), tmp_path)

    data = load_report(tmp_path / "report.json")

    assert format_summary(data).startswith("itoledger: pure-jump-exact: PASS, 1/1 rules passed")
    (tmp_path / "broken.json").write_text("{", encoding="utf-8")
    with pytest.raises(ConfigurationError, match="invalid report"):
        load_report(tmp_path / "broken.json")
