"""Tests for the increment operators and the three finite-dimensional ledgers."""

from pathlib import Path

import numpy as np
import pytest

from itoledger.calculus import (
    DivergentTermError,
    DomainError,
    OrthogonalityError,
    check_operator_properties,
    cosine,
    increment_I,
    increment_J,
    ledger_natural,
    ledger_power,
    ledger_standard,
    linear,
    power_norm,
    product,
    product_identity_I,
    product_identity_J,
    resolve_time_rule,
    unit_directions,
    validate_derivatives,
    write_ledger_csv,
)
from itoledger.drivers import ConfigurationError, TimeGrid, dirac, sample_drivers
from itoledger.process import Coefficients, JumpCoefficients, simulate
from itoledger.scenarios import (
    compensated_poisson_problem,
    equivalence_problem,
    example1_problem,
    get_scenario,
    pure_jump_problems,
)


def run(problem, n_steps: int = 16, seed: int = 0, replica: int = 0):
    grid = TimeGrid.uniform(1.0, n_steps)
    drivers = sample_drivers(grid, problem.n_wiener, problem.coeffs.measures, seed, replica=replica)
    path = simulate(problem.x0, problem.coeffs, drivers.wiener, drivers.jumps, problem.scheme)
    return drivers, path


def test_unit_directions_use_zero_over_zero_convention():
    norm, direction = unit_directions(np.array([[0.0, 0.0], [3.0, 4.0]]))

    assert norm.tolist() == [0.0, 5.0]
    assert direction.tolist() == [[0.0, 0.0], [0.6, 0.8]]


def test_power_norm_rejects_exponents_below_two():
    with pytest.raises(DomainError, match="p >= 2"):
        power_norm(2, 1.5)


@pytest.mark.parametrize("phi", [power_norm(3, 2), power_norm(3, 3.5), cosine(3)])
def test_closed_form_derivatives_match_finite_differences(phi):
    points = np.random.default_rng(1).normal(size=(20, 3))

    report = validate_derivatives(phi, points, 1e-5)

    assert report.passed, report


def test_power_norm_hessian_is_finite_at_the_origin():
    hessian = power_norm(2, 2).hessian(np.zeros(2))

    assert hessian == pytest.approx(2 * np.eye(2))


def test_increments_of_a_linear_function():
    phi = linear([1.0, -2.0])
    v, a = np.array([0.5, 0.5]), np.array([1.0, 1.0])

    assert increment_I(phi, v, a) == pytest.approx(-1.0)
    assert increment_J(phi, v, a) == pytest.approx(0.0)


def test_taylor_remainder_of_a_convex_power_is_nonnegative():
    rng = np.random.default_rng(2)
    phi = power_norm(3, 4)
    v, a = rng.normal(size=(500, 3)), rng.normal(size=(500, 3))

    assert np.all(increment_J(phi, v, a) >= -1e-12)


def test_product_identities_hold_to_roundoff():
    rng = np.random.default_rng(3)
    phi, psi = power_norm(2, 3), cosine(2)
    v, a = rng.normal(size=(100, 2)), rng.normal(size=(100, 2))

    for identity in (product_identity_I, product_identity_J):
        lhs, rhs = identity(phi, psi, v, a)
        assert lhs == pytest.approx(rhs, rel=1e-10, abs=1e-10)


def test_product_function_combines_smoothness():
    assert product(cosine(1), cosine(1)).smoothness == "C2b"
    assert product(cosine(1), power_norm(1, 2)).smoothness == "C2"


def test_operator_property_check_on_a_small_sample():
    report = check_operator_properties(n_samples=2000, seed=4, dim=2, chunk=500)

    assert report.samples == 2000
    assert report.passed, report


def test_natural_ledger_is_exact_for_pure_jump_paths():
    line, plane = pure_jump_problems(get_scenario("pure-jump-exact").params)

    for problem in (line, plane):
        drivers, path = run(problem, seed=7)
        for phi in problem.tests:
            ledger = ledger_natural(path, problem.coeffs, drivers, phi)
            assert ledger.time_rule == "gauss"
            assert ledger.max_abs_residual <= 1e-10 * ledger.scale


def test_standard_and_natural_totals_agree_for_bounded_jumps():
    problem = equivalence_problem(get_scenario("ledger-equivalence").params)
    drivers, path = run(problem, n_steps=32, seed=5)

    for phi in problem.tests:
        standard = ledger_standard(path, problem.coeffs, drivers, phi)
        natural = ledger_natural(path, problem.coeffs, drivers, phi)
        assert standard.rhs_total == pytest.approx(natural.rhs_total, abs=1e-9)
        assert set(standard.terms) == {
            "drift",
            "ito_correction",
            "dw",
            "hbar_jumps",
            "h_compensated",
            "h_taylor_compensator",
        }


def test_standard_ledger_refuses_the_counterexample():
    problem = example1_problem(get_scenario("example1").params)
    drivers, path = run(problem, n_steps=64)

    with pytest.raises(DivergentTermError, match="refused") as excinfo:
        ledger_standard(path, problem.coeffs, drivers, problem.tests[0])
    assert "condition2" in excinfo.value.terms

    natural = ledger_natural(path, problem.coeffs, drivers, problem.tests[0])
    assert abs(natural.final_residual) <= natural.quadrature_budget + 1e-12 * natural.scale


def test_forced_standard_ledger_logs_a_warning(caplog):
    problem = example1_problem(get_scenario("example1").params)
    drivers, path = run(problem, n_steps=64)

    ledger = ledger_standard(path, problem.coeffs, drivers, problem.tests[0], force=True)

    assert ledger.formula == "standard"
    assert "despite flagged divergence" in caplog.text


def test_standard_ledger_rejects_overlapping_jump_integrands():
    coeffs = Coefficients(
        dim=1,
        jumps=(
            JumpCoefficients(
                measure=dirac(1.0),
                h_bar=lambda t, z, x: np.array([z]),
                h=lambda t, z, x: np.array([z]),
            ),
        ),
    )
    grid = TimeGrid.uniform(1.0, 4)
    drivers = sample_drivers(grid, 1, coeffs.measures, seed=0)
    path = simulate(0.0, coeffs, drivers.wiener, drivers.jumps)

    with pytest.raises(OrthogonalityError, match="overlap"):
        ledger_standard(path, coeffs, drivers, power_norm(1, 2))


def test_power_ledger_has_zero_quadratic_variation_without_diffusion():
    problem = compensated_poisson_problem({"p": 2.0})
    drivers, path = run(problem, n_steps=8, seed=2)

    ledger = ledger_power(path, problem.coeffs, drivers, 2.0)

    assert not np.any(ledger.terms["quadratic_variation"])
    assert ledger.lhs[-1] == pytest.approx(path.values[-1, 0] ** 2)
    assert abs(ledger.final_residual) <= ledger.quadrature_budget + 1e-12 * ledger.scale


def test_power_ledger_trace_term_for_additive_noise():
    coeffs = Coefficients(dim=1, n_wiener=1, diffusion=lambda t, x: [[0.5]])
    grid = TimeGrid.uniform(1.0, 10)
    drivers = sample_drivers(grid, 1, (), seed=0)
    path = simulate(1.0, coeffs, drivers.wiener, drivers.jumps)

    ledger = ledger_power(path, coeffs, drivers, 2.0)

    assert ledger.terms["trace"][-1] == pytest.approx(0.25)
    assert not np.any(ledger.terms["quadratic_variation"])


def test_power_ledger_rejects_small_exponents():
    problem = compensated_poisson_problem({"p": 2.0})
    drivers, path = run(problem)

    with pytest.raises(DomainError):
        ledger_power(path, problem.coeffs, drivers, 1.0)


def test_unknown_time_rule_is_rejected():
    problem = compensated_poisson_problem({"p": 2.0})
    _, path = run(problem)

    with pytest.raises(ConfigurationError, match="time rule"):
        resolve_time_rule(path, "simpson")


def test_write_ledger_csv_lists_terms_lhs_and_residual(tmp_path: Path):
    problem = compensated_poisson_problem({"p": 2.0})
    drivers, path = run(problem)
    ledger = ledger_natural(path, problem.coeffs, drivers, problem.tests[0])

    target = write_ledger_csv(ledger, tmp_path / "ledger.csv")

    lines = target.read_text(encoding="utf-8").splitlines()
    assert lines[0].startswith("t,drift,")
    assert lines[0].endswith(",lhs,residual")
    assert len(lines) == path.times.size + 1
