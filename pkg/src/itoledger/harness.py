"""Verification runs, the counterexample table and refinement studies."""

from __future__ import annotations

import csv
import json
import logging
import math
import os
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Mapping, Sequence, TypeVar

import numpy as np
from scipy.integrate import quad

from itoledger.calculus import (
    DivergentTermError,
    TermLedger,
    check_operator_properties,
    ledger_natural,
    ledger_power,
    ledger_standard,
    write_ledger_csv,
)
from itoledger.config import ExperimentConfig, config_digest, default_config, validate_config
from itoledger.drivers import (
    ConfigurationError,
    Drivers,
    JumpStream,
    TimeGrid,
    sample_drivers,
    sample_jumps,
    sample_wiener,
    substream,
    write_stream_csv,
)
from itoledger.lpfield import (
    Field,
    FieldPath,
    Grid,
    LpLedger,
    bump,
    discrete_gradient,
    integrability_diagnostics,
    ledger_lp,
    lp_norm,
    make_mollifier,
    mollify,
    simulate_lp,
    weak_form_defect,
    weak_pair,
    write_field_binary,
    write_field_csv,
    write_lp_ledger_csv,
)
from itoledger.process import PathRecord, check_conditions, simulate, write_path_csv
from itoledger.scenarios import (
    LP_SCENARIOS,
    FieldProblem,
    PathProblem,
    compensated_poisson_problem,
    diffusion_problem,
    equivalence_problem,
    example1_problem,
    get_scenario,
    layered_jump_problem,
    lp_full_problem,
    lp_jump_problem,
    lp_steps,
    pure_jump_problems,
    wiener_truncation_problem,
)


logger = logging.getLogger(__name__)

RULES = (
    "pathwise-exactness",
    "ledger-equivalence",
    "counterexample",
    "power-moments",
    "diffusion-convergence",
    "lp-formula",
    "mollifier-suite",
    "operator-properties",
)
STUDY_AXES = ("dt", "dx", "eps", "R", "layers")
AXIS_SCENARIOS = {
    "dt": "diffusion-order",
    "dx": "lp-full-p4",
    "eps": "mollifier-suite",
    "R": "diffusion-order",
    "layers": "pure-jump-exact",
}
AXIS_DEFAULT_LEVELS = {"R": (1.0, 2.0, 4.0, 8.0, 16.0), "layers": (1.0, 2.0, 3.0, 4.0)}
FINER_IS_LARGER = ("R", "layers")
STUDY_STEPS = 64
REFERENCE_COMPONENTS = 4
RESIDUAL_FLOOR = 1e-12
ROUNDOFF = 1e-12
FIELD_PAIR_STREAM = 7
KERNELS = {"c1": 2, "c2": 3, "c3": 4}
REPORT_NAME = "report.json"

T = TypeVar("T")


@dataclass(frozen=True)
class RuleOutcome:
    rule: str
    passed: bool
    message: str
    numbers: Mapping[str, Any] = field(default_factory=dict)


@dataclass(frozen=True)
class VerificationReport:
    scenario: str
    config_digest: str
    seed: int
    replicas: int
    residual_maxima: tuple[float, ...]
    ensemble: Mapping[str, float]
    orders: Mapping[str, Any]
    conditions: tuple[str, ...]
    rules: tuple[RuleOutcome, ...]
    artifacts: tuple[str, ...] = ()

    @property
    def passed(self) -> bool:
        return all(rule.passed for rule in self.rules)

    def to_dict(self) -> dict[str, Any]:
        data = asdict(self)
        data["passed"] = self.passed
        return data


@dataclass
class Findings:
    """Report fields collected by one scenario runner."""

    residual_maxima: list[float] = field(default_factory=list)
    orders: dict[str, Any] = field(default_factory=dict)
    conditions: list[str] = field(default_factory=list)
    rules: list[RuleOutcome] = field(default_factory=list)
    artifacts: list[str] = field(default_factory=list)


@dataclass(frozen=True)
class StudyResult:
    axis: str
    parameters: tuple[float, ...]
    residuals: tuple[float, ...]
    standard_errors: tuple[float, ...]
    order: float | None
    status: str
    cauchy: tuple[float, ...]
    floor_at: float | None = None
    extras: Mapping[str, float] = field(default_factory=dict)

    @property
    def decreasing(self) -> bool:
        return all(later < earlier for earlier, later in zip(self.residuals, self.residuals[1:]))

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


@dataclass(frozen=True)
class Example1Table:
    t: float
    deltas: tuple[float, ...]
    integrals: Mapping[str, tuple[float, ...]]
    analytic: Mapping[str, tuple[float, ...]]
    limits: Mapping[str, float | None]
    log_growth: tuple[float, ...]
    errors: Mapping[str, float]


# --- replica plumbing -------------------------------------------------------


def map_replicas(config: ExperimentConfig, task: Callable[[int], T]) -> list[T]:
    def logged(index: int) -> T:
        result = task(index)
        logger.debug("replica %d done", index)
        return result

    with ThreadPoolExecutor(max_workers=config.threads) as pool:
        return list(pool.map(logged, range(config.replicas)))


def ensemble_stats(values: Sequence[float]) -> dict[str, float]:
    data = np.asarray(values, dtype=float)
    if data.size == 0:
        return {"count": 0, "mean": 0.0, "se": 0.0}
    se = float(data.std(ddof=1) / math.sqrt(data.size)) if data.size > 1 else 0.0
    return {"count": int(data.size), "mean": float(data.mean()), "se": se}


def simulate_problem(
    problem: PathProblem,
    grid: TimeGrid,
    seed: int,
    replica: int,
) -> tuple[Drivers, PathRecord]:
    drivers = sample_drivers(
        grid, problem.n_wiener, problem.coeffs.measures, seed, replica=replica
    )
    path = simulate(problem.x0, problem.coeffs, drivers.wiener, drivers.jumps, problem.scheme)
    return drivers, path


def simulate_field(
    problem: FieldProblem, grid: TimeGrid, seed: int, replica: int
) -> tuple[Drivers, FieldPath]:
    drivers = sample_drivers(
        grid, max(problem.coeffs.n_wiener, 1), problem.coeffs.measures, seed, replica=replica
    )
    return drivers, simulate_lp(problem.psi, problem.coeffs, drivers, problem.scheme, p=problem.p)


# --- artifacts --------------------------------------------------------------


def make_temp_path(directory: Path, prefix: str, suffix: str) -> Path:
    with tempfile.NamedTemporaryFile(
        "w", encoding="utf-8", dir=directory, prefix=prefix, suffix=suffix, delete=False
    ) as temp_file:
        return Path(temp_file.name)


def atomic_write(target: Path, write: Callable[[Path], Any]) -> Path:
    target.parent.mkdir(parents=True, exist_ok=True)
    temp_path = make_temp_path(target.parent, f".{target.stem}.", target.suffix)
    try:
        write(temp_path)
        os.replace(temp_path, target)
    finally:
        temp_path.unlink(missing_ok=True)
    return target


def write_path_artifacts(
    output: Path,
    tag: str,
    drivers: Drivers,
    path: PathRecord,
    ledgers: Sequence[TermLedger],
) -> list[str]:
    names = [f"{tag}-path.csv", f"{tag}-stream.csv"]
    atomic_write(output / names[0], lambda temp: write_path_csv(path, temp))
    atomic_write(output / names[1], lambda temp: write_stream_csv(drivers.jumps, temp))
    for index, ledger in enumerate(ledgers):
        name = f"{tag}-ledger-{index}.csv"
        atomic_write(output / name, lambda temp, ledger=ledger: write_ledger_csv(ledger, temp))
        names.append(name)
    return names


def write_field_artifacts(
    output: Path, tag: str, drivers: Drivers, path: FieldPath, ledger: LpLedger
) -> list[str]:
    final = path.snapshot(-1)
    names = [f"{tag}-ledger.csv", f"{tag}-stream.csv", f"{tag}-final.csv", f"{tag}-final.bin"]
    atomic_write(output / names[0], lambda temp: write_lp_ledger_csv(ledger, temp))
    atomic_write(output / names[1], lambda temp: write_stream_csv(drivers.jumps, temp))
    atomic_write(output / names[2], lambda temp: write_field_csv(final, temp))
    atomic_write(output / names[3], lambda temp: write_field_binary(final, temp))
    return names


def write_report(report: VerificationReport, output: Path) -> Path:
    text = json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n"
    return atomic_write(
        output / REPORT_NAME, lambda temp: temp.write_text(text, encoding="utf-8")
    )


def load_report(path: Path) -> dict[str, Any]:
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigurationError(f"{path}: report does not exist") from None
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{path}: invalid report: {exc}") from exc
    if not isinstance(data, dict) or "rules" not in data:
        raise ConfigurationError(f"{path}: not a verification report")
    return data


def format_summary(data: Mapping[str, Any]) -> str:
    rules = data.get("rules", [])
    passed = sum(bool(rule["passed"]) for rule in rules)
    verdict = "PASS" if passed == len(rules) else "FAIL"
    lines = [
        f"itoledger: {data['scenario']}: {verdict}, {passed}/{len(rules)} rules passed, "
        f"{data['replicas']} replicas, config {data['config_digest'][:12]}"
    ]
    for rule in rules:
        mark = "ok" if rule["passed"] else "FAILED"
        lines.append(f"  {rule['rule']}: {mark}: {rule['message']}")
    for condition in data.get("conditions", []):
        lines.append(f"  condition: {condition}")
    return "\n".join(lines)


def write_study_csv(result: StudyResult, target: Path) -> Path:
    with target.open("w", encoding="utf-8", newline="") as output:
        writer = csv.writer(output)
        writer.writerow([result.axis, "residual", "standard_error"])
        for parameter, residual, error in zip(
            result.parameters, result.residuals, result.standard_errors
        ):
            writer.writerow([repr(float(parameter)), repr(float(residual)), repr(float(error))])
    return target


def write_example1_csv(table: Example1Table, target: Path) -> Path:
    with target.open("w", encoding="utf-8", newline="") as output:
        writer = csv.writer(output)
        header = ["delta"]
        for name in KERNELS:
            header += [name, f"{name}_analytic"]
        writer.writerow(header)
        for row, delta in enumerate(table.deltas):
            values = [repr(float(delta))]
            for name in KERNELS:
                values += [
                    repr(float(table.integrals[name][row])),
                    repr(float(table.analytic[name][row])),
                ]
            writer.writerow(values)
    return target


# --- verification -------------------------------------------------------------


def run_verification(
    config: ExperimentConfig, output: Path | None = None
) -> VerificationReport:
    validate_config(config)
    runner = RUNNERS.get(config.scenario)
    if runner is None:
        raise ConfigurationError(f"scenario {config.scenario!r} has no verification runner")
    logger.info("verifying %s with %d replicas", config.scenario, config.replicas)
    findings = runner(config, output)
    report = VerificationReport(
        scenario=config.scenario,
        config_digest=config_digest(config),
        seed=config.seed,
        replicas=config.replicas,
        residual_maxima=tuple(findings.residual_maxima),
        ensemble=ensemble_stats(findings.residual_maxima),
        orders=findings.orders,
        conditions=tuple(findings.conditions),
        rules=tuple(findings.rules),
        artifacts=tuple(findings.artifacts),
    )
    for rule in report.rules:
        if not rule.passed:
            logger.warning("rule %s failed: %s", rule.rule, rule.message)
    if output is not None:
        write_report(report, output)
    return report


def run_pure_jump_exact(config: ExperimentConfig, output: Path | None) -> Findings:
    problems = pure_jump_problems(config.params)
    grid = TimeGrid.uniform(config.horizon, config.n_steps)
    tolerance = config.tolerance("residual")

    def replica(index: int) -> float:
        worst = 0.0
        for problem in problems:
            drivers, path = simulate_problem(problem, grid, config.seed, index)
            for phi in problem.tests:
                ledger = ledger_natural(path, problem.coeffs, drivers, phi)
                worst = max(worst, ledger.max_abs_residual / ledger.scale)
        return worst

    ratios = map_replicas(config, replica)
    findings = Findings(residual_maxima=ratios)
    offenders = [index for index, ratio in enumerate(ratios) if not ratio <= tolerance]
    findings.rules.append(
        RuleOutcome(
            rule="pathwise-exactness",
            passed=not offenders,
            message=(
                f"max residual/scale {max(ratios):.3e} over {len(ratios)} replicas "
                f"(tolerance {tolerance:g})"
            ),
            numbers={
                "max_ratio": max(ratios),
                "tolerance": tolerance,
                "failing_replicas": offenders[:20],
            },
        )
    )
    if output is not None:
        for problem in problems:
            drivers, path = simulate_problem(problem, grid, config.seed, 0)
            ledgers = [ledger_natural(path, problem.coeffs, drivers, phi) for phi in problem.tests]
            findings.artifacts += write_path_artifacts(output, problem.name, drivers, path, ledgers)
    return findings


def run_ledger_equivalence(config: ExperimentConfig, output: Path | None) -> Findings:
    problem = equivalence_problem(config.params)
    grid = TimeGrid.uniform(config.horizon, config.n_steps)
    absolute = config.tolerance("absolute")

    def replica(index: int) -> tuple[float, float, float, list[str]]:
        drivers, path = simulate_problem(problem, grid, config.seed, index)
        worst_gap = worst_excess = residual = 0.0
        summaries: list[str] = []
        for phi in problem.tests:
            conditions = check_conditions(
                problem.coeffs, path, drivers.jumps, phi, seed=config.seed
            )
            standard = ledger_standard(
                path, problem.coeffs, drivers, phi, conditions=conditions
            )
            natural = ledger_natural(path, problem.coeffs, drivers, phi)
            gap = abs(standard.rhs_total - natural.rhs_total)
            allowance = absolute + standard.quadrature_stderr + natural.quadrature_stderr
            worst_gap = max(worst_gap, gap)
            worst_excess = max(worst_excess, gap - allowance)
            residual = max(residual, natural.max_abs_residual / natural.scale)
            summaries += [
                estimate.summary()
                for estimate in (conditions.condition1, conditions.condition2)
                if estimate is not None
            ]
        return worst_gap, worst_excess, residual, summaries

    results = map_replicas(config, replica)
    gaps = [gap for gap, _, _, _ in results]
    offenders = [index for index, (_, excess, _, _) in enumerate(results) if excess > 0]
    findings = Findings(
        residual_maxima=[residual for _, _, residual, _ in results],
        conditions=results[0][3],
    )
    findings.rules.append(
        RuleOutcome(
            rule="ledger-equivalence",
            passed=not offenders,
            message=f"max |RHS_standard - RHS_natural| {max(gaps):.3e} (allowance {absolute:g} + quadrature)",
            numbers={"max_gap": max(gaps), "absolute": absolute, "failing_replicas": offenders[:20]},
        )
    )
    if output is not None:
        drivers, path = simulate_problem(problem, grid, config.seed, 0)
        ledgers = [ledger_natural(path, problem.coeffs, drivers, phi) for phi in problem.tests]
        findings.artifacts += write_path_artifacts(output, problem.name, drivers, path, ledgers)
    return findings


def example1_deltas(t: float, ratio: float, levels: int) -> list[float]:
    return [t * ratio ** -(j + 1) for j in range(levels)]


def run_example1(config: ExperimentConfig, output: Path | None) -> Findings:
    params = config.params
    ratio = float(params["delta_ratio"])
    deltas = example1_deltas(config.horizon, ratio, int(params["delta_levels"]))
    table = example1_experiment(deltas, config.horizon, exponent=float(params["exponent"]))

    problem = example1_problem(params)
    grid = TimeGrid.uniform(config.horizon, config.n_steps)
    drivers, path = simulate_problem(problem, grid, config.seed, 0)
    phi = problem.tests[0]
    conditions = check_conditions(
        problem.coeffs,
        path,
        drivers.jumps,
        phi,
        truncation_levels=max(len(deltas), 4),
        delta_ratio=ratio,
        seed=config.seed,
    )
    flagged = conditions.condition2 is not None and conditions.condition2.divergent
    try:
        ledger_standard(path, problem.coeffs, drivers, phi, conditions=conditions)
        refused = False
    except DivergentTermError as exc:
        logger.info("standard formula refused: %s", exc)
        refused = True
    natural = ledger_natural(path, problem.coeffs, drivers, phi)
    within_budget = abs(natural.final_residual) <= natural.quadrature_budget + ROUNDOFF * natural.scale

    truncated_totals: dict[str, float | None] = {}
    for level in params.get("truncation_levels", ()):
        coeffs = problem.coeffs.truncated(float(level))
        clipped_path = simulate(problem.x0, coeffs, drivers.wiener, drivers.jumps, problem.scheme)
        try:
            ledger = ledger_standard(clipped_path, coeffs, drivers, phi)
            truncated_totals[f"{float(level):g}"] = ledger.rhs_total
        except DivergentTermError:
            truncated_totals[f"{float(level):g}"] = None

    tolerances = {
        "log_integral": config.tolerance("log_integral"),
        "limit": config.tolerance("limit"),
        "log_growth": config.tolerance("log_growth"),
    }
    table_ok = (
        table.errors["c3"] <= tolerances["log_integral"]
        and table.errors.get("c1_limit", math.inf) <= tolerances["limit"]
        and table.errors.get("c3_growth", math.inf) <= tolerances["log_growth"]
    )
    passed = flagged and refused and within_budget and table_ok
    findings = Findings(
        residual_maxima=[natural.max_abs_residual / natural.scale],
        conditions=[
            estimate.summary()
            for estimate in (conditions.condition1, conditions.condition2)
            if estimate is not None
        ],
        orders={"truncated_standard_totals": truncated_totals, "natural_total": natural.rhs_total},
    )
    findings.rules.append(
        RuleOutcome(
            rule="counterexample",
            passed=passed,
            message=(
                f"condition2 {'flagged' if flagged else 'NOT flagged'}, standard formula "
                f"{'refused' if refused else 'NOT refused'}, natural residual "
                f"{abs(natural.final_residual):.3e} vs budget {natural.quadrature_budget:.3e}, "
                f"c3 error {table.errors['c3']:.1e}, c1 limit error {table.errors.get('c1_limit', math.inf):.1e}"
            ),
            numbers={
                "condition2_values": list(conditions.condition2.values) if conditions.condition2 else [],
                "natural_residual": natural.final_residual,
                "quadrature_budget": natural.quadrature_budget,
                "table_errors": dict(table.errors),
                "limits": dict(table.limits),
            },
        )
    )
    if output is not None:
        atomic_write(output / "example1.csv", lambda temp: write_example1_csv(table, temp))
        findings.artifacts.append("example1.csv")
        findings.artifacts += write_path_artifacts(output, problem.name, drivers, path, [natural])
    return findings


def run_compensated_poisson(config: ExperimentConfig, output: Path | None) -> Findings:
    problem = compensated_poisson_problem(config.params)
    p = float(config.params["p"])
    if p != 2.0:
        raise ConfigurationError(f"{config.scenario}: params: p: the moment target needs p = 2")
    grid = TimeGrid.uniform(config.horizon, config.n_steps)
    k = config.tolerance("standard_errors")

    def replica(index: int) -> tuple[float, bool, bool, float]:
        drivers, path = simulate_problem(problem, grid, config.seed, index)
        ledger = ledger_power(path, problem.coeffs, drivers, p)
        zero = not np.any(ledger.terms["quadratic_variation"])
        bounded = abs(ledger.final_residual) <= ledger.quadrature_budget + ROUNDOFF * ledger.scale
        return float(ledger.lhs[-1]), zero, bounded, ledger.max_abs_residual / ledger.scale

    results = map_replicas(config, replica)
    stats = ensemble_stats([value for value, _, _, _ in results])
    target = config.horizon
    moment_ok = abs(stats["mean"] - target) <= k * stats["se"]
    zero_ok = all(zero for _, zero, _, _ in results)
    bounded_ok = all(bounded for _, _, bounded, _ in results)
    findings = Findings(
        residual_maxima=[ratio for _, _, _, ratio in results],
        orders={"moment": stats},
    )
    findings.rules.append(
        RuleOutcome(
            rule="power-moments",
            passed=moment_ok and zero_ok and bounded_ok,
            message=(
                f"mean |X_T|^2 = {stats['mean']:.4f} +/- {stats['se']:.4f} (target {target:g}), "
                f"(p-2) terms {'zero' if zero_ok else 'NONZERO'}, residuals "
                f"{'within' if bounded_ok else 'OUTSIDE'} budget"
            ),
            numbers={"moment": stats, "target": target, "standard_errors": k},
        )
    )
    if output is not None:
        drivers, path = simulate_problem(problem, grid, config.seed, 0)
        ledger = ledger_power(path, problem.coeffs, drivers, p)
        findings.artifacts += write_path_artifacts(output, problem.name, drivers, path, [ledger])
    return findings


def order_outcome(
    rule: str, result: StudyResult, low: float, high: float, extra_ok: bool = True, note: str = ""
) -> RuleOutcome:
    order_ok = result.order is not None and low <= result.order <= high
    order_text = "indeterminate" if result.order is None else f"{result.order:.3f}"
    return RuleOutcome(
        rule=rule,
        passed=result.status == "ok" and result.decreasing and order_ok and extra_ok,
        message=f"{result.axis}-order {order_text} (window [{low:g}, {high:g}]), status {result.status}{note}",
        numbers=result.to_dict(),
    )


def run_diffusion_order(config: ExperimentConfig, output: Path | None) -> Findings:
    result = convergence_study(config, "dt")
    findings = Findings(residual_maxima=list(result.residuals), orders={"dt": result.to_dict()})
    findings.rules.append(
        order_outcome(
            "diffusion-convergence",
            result,
            config.tolerance("order_min"),
            config.tolerance("order_max"),
        )
    )
    if output is not None:
        atomic_write(output / "study.csv", lambda temp: write_study_csv(result, temp))
        findings.artifacts.append("study.csv")
    return findings


def run_lp_jump(config: ExperimentConfig, output: Path | None) -> Findings:
    problem = lp_jump_problem(config.params)
    grid = TimeGrid.uniform(config.horizon, config.n_steps)
    tolerance = config.tolerance("residual")
    weak_tolerance = config.tolerance("weak_form")

    def replica(index: int) -> tuple[float, float]:
        drivers, path = simulate_field(problem, grid, config.seed, index)
        ledger = ledger_lp(path, problem.coeffs, drivers, problem.p, fk_form=problem.fk_form)
        defects = weak_form_defect(path, problem.coeffs, drivers, problem.tests)
        return ledger.max_abs_residual / ledger.scale, float(defects.max(initial=0.0))

    results = map_replicas(config, replica)
    ratios = [ratio for ratio, _ in results]
    defects = [defect for _, defect in results]
    offenders = [
        index
        for index, (ratio, defect) in enumerate(results)
        if not (ratio <= tolerance and defect <= weak_tolerance)
    ]
    drivers, path = simulate_field(problem, grid, config.seed, 0)
    diagnostics = integrability_diagnostics(path, problem.coeffs, problem.p)
    findings = Findings(
        residual_maxima=ratios,
        orders={"integrability": asdict(diagnostics)},
    )
    findings.rules.append(
        RuleOutcome(
            rule="lp-formula",
            passed=not offenders and diagnostics.finite,
            message=(
                f"max L_p residual/scale {max(ratios):.3e} (tolerance {tolerance:g}), "
                f"max weak-form defect {max(defects):.3e}"
            ),
            numbers={
                "max_ratio": max(ratios),
                "max_weak_defect": max(defects),
                "failing_replicas": offenders[:20],
            },
        )
    )
    if output is not None:
        ledger = ledger_lp(path, problem.coeffs, drivers, problem.p, fk_form=problem.fk_form)
        findings.artifacts += write_field_artifacts(output, problem.name, drivers, path, ledger)
    return findings


def run_lp_full(config: ExperimentConfig, output: Path | None) -> Findings:
    result = convergence_study(config, "dx")
    scalar = result.extras.get("scalar_discrepancy", math.inf)
    scalar_tolerance = config.tolerance("scalar_agreement")
    findings = Findings(residual_maxima=list(result.residuals), orders={"dx": result.to_dict()})
    findings.rules.append(
        order_outcome(
            "lp-formula",
            result,
            config.tolerance("order_min"),
            config.tolerance("order_max"),
            extra_ok=scalar <= scalar_tolerance,
            note=f", scalar-form discrepancy {scalar:.1e}",
        )
    )
    if output is not None:
        atomic_write(output / "study.csv", lambda temp: write_study_csv(result, temp))
        findings.artifacts.append("study.csv")
    return findings


def summation_by_parts_gap(config: ExperimentConfig, index: int) -> float:
    rng = substream(config.seed, FIELD_PAIR_STREAM, index)
    d = 1 + index % 2
    grid = Grid(d=d, half_width=1.0, n_cells=64 if d == 1 else 16)
    inner = tuple(slice(1, -1) for _ in range(d))
    fields = []
    for role in ("v", "phi"):
        values = np.zeros(grid.shape)
        values[inner] = rng.standard_normal(tuple(n - 2 for n in grid.shape))
        fields.append(Field(grid, values, role))
    v, phi = fields
    worst = 0.0
    for k in range(d):
        forward = weak_pair(discrete_gradient(v, k), phi)
        adjoint = weak_pair(v, discrete_gradient(phi, k))
        magnitude = float(
            np.sum(np.abs(discrete_gradient(v, k).values * phi.values)) * grid.cell_volume
        )
        worst = max(worst, abs(forward + adjoint) / (1.0 + magnitude))
    return worst


def run_mollifier_suite(config: ExperimentConfig, output: Path | None) -> Findings:
    params = config.params
    line = Grid(d=1, half_width=float(params["half_width"]), n_cells=int(params["n_cells"]))
    plane = Grid(d=2, half_width=1.0, n_cells=32)
    mass_errors = [abs(make_mollifier(line, eps).mass - 1.0) for eps in config.levels("eps")]
    mass_errors += [abs(make_mollifier(plane, eps).mass - 1.0) for eps in (0.25, 0.125)]
    result = convergence_study(config, "eps")
    gaps = map_replicas(config, lambda index: summation_by_parts_gap(config, index))

    mass_tolerance = config.tolerance("mass")
    sbp_tolerance = config.tolerance("summation_by_parts")
    findings = Findings(residual_maxima=gaps, orders={"eps": result.to_dict()})
    findings.rules.append(
        order_outcome(
            "mollifier-suite",
            result,
            config.tolerance("order_min"),
            config.tolerance("order_max"),
            extra_ok=max(mass_errors) <= mass_tolerance and max(gaps) <= sbp_tolerance,
            note=(
                f", mass error {max(mass_errors):.1e}, summation-by-parts gap {max(gaps):.1e} "
                f"over {len(gaps)} pairs"
            ),
        )
    )
    if output is not None:
        atomic_write(output / "study.csv", lambda temp: write_study_csv(result, temp))
        findings.artifacts.append("study.csv")
    return findings


def run_operator_properties(config: ExperimentConfig, output: Path | None) -> Findings:
    report = check_operator_properties(
        n_samples=config.replicas, seed=config.seed, dim=int(config.params["dim"])
    )
    report = replace(report, tolerance=config.tolerance("product"))
    findings = Findings(residual_maxima=[report.product_I_error, report.product_J_error])
    findings.rules.append(
        RuleOutcome(
            rule="operator-properties",
            passed=report.passed,
            message=(
                f"{report.convexity_violations} convexity violations, Taylor ratios "
                f"{report.taylor_I_ratio:.3f}/{report.taylor_J_ratio:.3f}, product identity errors "
                f"{report.product_I_error:.1e}/{report.product_J_error:.1e}"
            ),
            numbers=asdict(report),
        )
    )
    return findings


RUNNERS: dict[str, Callable[[ExperimentConfig, Path | None], Findings]] = {
    "pure-jump-exact": run_pure_jump_exact,
    "ledger-equivalence": run_ledger_equivalence,
    "example1": run_example1,
    "compensated-poisson-p2": run_compensated_poisson,
    "diffusion-order": run_diffusion_order,
    "lp-jump-p2": run_lp_jump,
    "lp-full-p4": run_lp_full,
    "mollifier-suite": run_mollifier_suite,
    "operator-properties": run_operator_properties,
}


# --- counterexample -----------------------------------------------------------


def power_integral(power: float, delta: float, t: float) -> float:
    """Integral of s^power over [delta, t], computed in u = ln s."""
    value, _ = quad(
        lambda u: math.exp((power + 1.0) * u),
        math.log(delta),
        math.log(t),
        epsabs=1e-14,
        epsrel=1e-13,
    )
    return value


def power_antiderivative(power: float, delta: float, t: float) -> float:
    if power == -1.0:
        return math.log(t / delta)
    return (t ** (power + 1.0) - delta ** (power + 1.0)) / (power + 1.0)


def example1_experiment(
    delta_levels: Sequence[float], t: float = 1.0, *, exponent: float = -0.25
) -> Example1Table:
    """Integrate |h|^2, |h|^3 and |h|^4 for h_s = s^exponent over [delta, t]."""
    deltas = tuple(float(delta) for delta in delta_levels)
    if not deltas or any(not delta > 0 for delta in deltas):
        raise ConfigurationError("delta levels must be positive")
    if any(later >= earlier for earlier, later in zip(deltas, deltas[1:])):
        raise ConfigurationError("delta levels must be strictly decreasing")
    if deltas[0] >= t:
        raise ConfigurationError(f"delta levels must lie below t={t}")

    integrals: dict[str, tuple[float, ...]] = {}
    analytic: dict[str, tuple[float, ...]] = {}
    limits: dict[str, float | None] = {}
    errors: dict[str, float] = {}
    for name, degree in KERNELS.items():
        power = degree * exponent
        integrals[name] = tuple(power_integral(power, delta, t) for delta in deltas)
        analytic[name] = tuple(power_antiderivative(power, delta, t) for delta in deltas)
        errors[name] = max(abs(a - b) for a, b in zip(integrals[name], analytic[name]))
        limits[name] = extrapolated_limit(deltas, integrals[name], power + 1.0)
        if limits[name] is not None:
            errors[f"{name}_limit"] = abs(limits[name] - t ** (power + 1.0) / (power + 1.0))

    growth = tuple(
        later - earlier for earlier, later in zip(integrals["c3"], integrals["c3"][1:])
    )
    if 4 * exponent == -1.0:
        expected = [math.log(earlier / later) for earlier, later in zip(deltas, deltas[1:])]
        errors["c3_growth"] = max(
            (abs(a - b) for a, b in zip(growth, expected)), default=0.0
        )
    return Example1Table(
        t=t,
        deltas=deltas,
        integrals=integrals,
        analytic=analytic,
        limits=limits,
        log_growth=growth,
        errors=errors,
    )


def extrapolated_limit(
    deltas: Sequence[float], values: Sequence[float], rate: float
) -> float | None:
    """Eliminate the delta^rate term from the last two levels; None when the integral diverges."""
    if rate <= 0 or len(deltas) < 2:
        return None
    d1, d2 = deltas[-2] ** rate, deltas[-1] ** rate
    return (values[-1] * d1 - values[-2] * d2) / (d1 - d2)


def format_example1(table: Example1Table) -> str:
    lines = [f"{'delta':>12} {'c1':>14} {'c2':>14} {'c3':>14}"]
    for row, delta in enumerate(table.deltas):
        lines.append(
            f"{delta:12.4e} "
            + " ".join(f"{table.integrals[name][row]:14.10f}" for name in KERNELS)
        )
    limits = ", ".join(
        f"{name} -> {value:.10f}" for name, value in table.limits.items() if value is not None
    )
    lines.append(f"limits: {limits}; c3 grows by {', '.join(f'{g:.10f}' for g in table.log_growth)}")
    return "\n".join(lines)


# --- refinement studies -------------------------------------------------------


def study_params(config: ExperimentConfig, axis: str) -> dict[str, Any]:
    return {**default_config(AXIS_SCENARIOS[axis]).params, **config.params}


def study_levels(config: ExperimentConfig, axis: str) -> tuple[float, ...]:
    owner = get_scenario(AXIS_SCENARIOS[axis])
    default = tuple(owner.refinement.get(axis, AXIS_DEFAULT_LEVELS.get(axis, ())))
    levels = config.levels(axis, default)
    if len(levels) < 3:
        raise ConfigurationError(f"{axis} study needs at least 3 refinement levels")
    return tuple(sorted(levels, reverse=axis not in FINER_IS_LARGER))


def fit_order(parameters: Sequence[float], residuals: Sequence[float]) -> float:
    slope, _ = np.polyfit(np.log(parameters), np.log(residuals), 1)
    return float(slope)


def summarize_study(
    axis: str,
    parameters: Sequence[float],
    samples: np.ndarray,
    extras: Mapping[str, float] | None = None,
) -> StudyResult:
    """samples has one row per replica and one column per level."""
    samples = np.atleast_2d(np.asarray(samples, dtype=float))
    residuals = samples.mean(axis=0)
    if samples.shape[0] > 1:
        errors = samples.std(axis=0, ddof=1) / math.sqrt(samples.shape[0])
    else:
        errors = np.zeros_like(residuals)
    cauchy = tuple(float(abs(b - a)) for a, b in zip(residuals, residuals[1:]))
    for parameter, residual, error in zip(parameters, residuals, errors):
        logger.debug("%s=%g: residual %.3e +- %.1e", axis, parameter, residual, error)

    floor = np.flatnonzero(residuals <= RESIDUAL_FLOOR)
    decreasing = all(later < earlier for earlier, later in zip(residuals, residuals[1:]))
    order: float | None = None
    floor_at = None
    if floor.size:
        status = "floor"
        floor_at = float(parameters[int(floor[0])])
    elif not decreasing:
        status = "indeterminate"
        logger.info("%s residuals are not monotone: %s", axis, residuals)
    else:
        status = "ok"
        order = fit_order(parameters, residuals)
    return StudyResult(
        axis=axis,
        parameters=tuple(float(value) for value in parameters),
        residuals=tuple(float(value) for value in residuals),
        standard_errors=tuple(float(value) for value in errors),
        order=order,
        status=status,
        cauchy=cauchy,
        floor_at=floor_at,
        extras=dict(extras or {}),
    )


def convergence_study(config: ExperimentConfig, axis: str) -> StudyResult:
    if axis not in STUDY_AXES:
        raise ConfigurationError(f"unknown study axis {axis!r}; expected one of {', '.join(STUDY_AXES)}")
    levels = study_levels(config, axis)
    params = study_params(config, axis)
    logger.info("%s study over levels %s", axis, levels)
    study = STUDIES[axis]
    return study(config, params, levels)


def step_study(config: ExperimentConfig, params: Mapping[str, Any], levels: Sequence[float]) -> StudyResult:
    problem = diffusion_problem(params)
    finest = levels[-1]
    fine_steps = int(round(config.horizon / finest))
    factors = [int(round(level / finest)) for level in levels]
    grid = TimeGrid.uniform(config.horizon, fine_steps)
    empty = JumpStream(events=(), horizon=config.horizon)

    def replica(index: int) -> list[float]:
        wiener = sample_wiener(grid, problem.n_wiener, config.seed, replica=index)
        residuals = []
        for factor in factors:
            coarse = wiener.coarsened(factor)
            path = simulate(problem.x0, problem.coeffs, coarse, empty, problem.scheme)
            ledger = ledger_natural(path, problem.coeffs, Drivers(coarse, empty), problem.tests[0])
            residuals.append(abs(ledger.final_residual))
        return residuals

    return summarize_study("dt", levels, np.array(map_replicas(config, replica)))


def space_study(config: ExperimentConfig, params: Mapping[str, Any], levels: Sequence[float]) -> StudyResult:
    problems = [lp_full_problem(params, dx) for dx in levels]
    steps = [lp_steps(params, config.horizon, dx) for dx in levels]
    fine_steps = steps[-1]
    if any(fine_steps % count for count in steps):
        raise ConfigurationError(f"step counts {steps} do not nest; choose dx levels that halve")
    grid = TimeGrid.uniform(config.horizon, fine_steps)

    def replica(index: int) -> tuple[list[float], float, float]:
        wiener = sample_wiener(grid, 1, config.seed, replica=index)
        jumps = sample_jumps(
            problems[0].coeffs.measures, config.horizon, None, config.seed, replica=index
        )
        residuals = []
        scalar = defect = 0.0
        for problem, count in zip(problems, steps):
            drivers = Drivers(wiener.coarsened(fine_steps // count), jumps)
            path = simulate_lp(problem.psi, problem.coeffs, drivers, problem.scheme, p=problem.p)
            ledger = ledger_lp(path, problem.coeffs, drivers, problem.p, fk_form=problem.fk_form)
            residuals.append(abs(ledger.final_residual))
            if ledger.scalar_discrepancy is not None:
                scalar = max(scalar, ledger.scalar_discrepancy)
            defect = max(defect, abs(ledger.chain_rule_defect))
        return residuals, scalar, defect

    results = map_replicas(config, replica)
    extras = {
        "scalar_discrepancy": max(scalar for _, scalar, _ in results),
        "chain_rule_defect": max(defect for _, _, defect in results),
    }
    samples = np.array([residuals for residuals, _, _ in results])
    return summarize_study("dx", levels, samples, extras)


def mollifier_study(config: ExperimentConfig, params: Mapping[str, Any], levels: Sequence[float]) -> StudyResult:
    grid = Grid(d=1, half_width=float(params["half_width"]), n_cells=int(params["n_cells"]))
    v = Field.from_function(grid, lambda x: bump(x, 0.0, 1.0), role="v")
    p = float(params.get("p", 2.0))
    errors = []
    for eps in levels:
        smoothed = mollify(v, make_mollifier(grid, eps))
        errors.append(lp_norm(Field(grid, smoothed.values - v.values, "v"), p))
    return summarize_study("eps", levels, np.array([errors]))


def wiener_study(config: ExperimentConfig, params: Mapping[str, Any], levels: Sequence[float]) -> StudyResult:
    counts = [int(level) for level in levels]
    reference = wiener_truncation_problem(params, REFERENCE_COMPONENTS * max(counts))
    problems = [wiener_truncation_problem(params, count) for count in counts]
    grid = TimeGrid.uniform(config.horizon, STUDY_STEPS)
    empty = JumpStream(events=(), horizon=config.horizon)

    def replica(index: int) -> list[float]:
        wiener = sample_wiener(grid, reference.n_wiener, config.seed, replica=index)
        target = simulate(reference.x0, reference.coeffs, wiener, empty).values[-1]
        residuals = []
        for problem in problems:
            truncated = sample_wiener(grid, problem.n_wiener, config.seed, replica=index)
            value = simulate(problem.x0, problem.coeffs, truncated, empty).values[-1]
            residuals.append(float(np.linalg.norm(value - target)))
        return residuals

    return summarize_study("R", [float(count) for count in counts], np.array(map_replicas(config, replica)))


def layer_study(config: ExperimentConfig, params: Mapping[str, Any], levels: Sequence[float]) -> StudyResult:
    counts = [int(level) for level in levels]
    problem = layered_jump_problem({**params, "layers": max(counts)})
    grid = TimeGrid.uniform(config.horizon, STUDY_STEPS)

    def replica(index: int) -> list[float]:
        drivers = sample_drivers(grid, 1, problem.coeffs.measures, config.seed, replica=index)
        target = simulate(problem.x0, problem.coeffs, drivers.wiener, drivers.jumps).values[-1]
        residuals = []
        for count in counts:
            partial = drivers.jumps.restricted(count)
            value = simulate(problem.x0, problem.coeffs, drivers.wiener, partial).values[-1]
            residuals.append(float(np.linalg.norm(value - target)))
        return residuals

    return summarize_study(
        "layers", [float(count) for count in counts], np.array(map_replicas(config, replica))
    )


STUDIES: dict[str, Callable[[ExperimentConfig, Mapping[str, Any], Sequence[float]], StudyResult]] = {
    "dt": step_study,
    "dx": space_study,
    "eps": mollifier_study,
    "R": wiener_study,
    "layers": layer_study,
}


# --- simulation only ----------------------------------------------------------


def simulate_scenario(config: ExperimentConfig, output: Path) -> list[str]:
    """Write path (or final field) and stream CSVs for every replica."""
    validate_config(config)
    scenario = get_scenario(config.scenario)
    if scenario.simulates is None:
        raise ConfigurationError(f"scenario {config.scenario!r} does not simulate paths")
    written: list[str] = []
    if config.scenario in LP_SCENARIOS:
        if config.scenario == "lp-jump-p2":
            problem = lp_jump_problem(config.params)
            grid = TimeGrid.uniform(config.horizon, config.n_steps)
        else:
            dx = min(config.levels("dx"))
            problem = lp_full_problem(config.params, dx)
            grid = TimeGrid.uniform(config.horizon, lp_steps(config.params, config.horizon, dx))
        runs = map_replicas(config, lambda index: simulate_field(problem, grid, config.seed, index))
        for index, (drivers, path) in enumerate(runs):
            final = path.snapshot(-1)
            names = [f"replica-{index}-final.csv", f"replica-{index}-stream.csv"]
            atomic_write(output / names[0], lambda temp, final=final: write_field_csv(final, temp))
            atomic_write(
                output / names[1], lambda temp, jumps=drivers.jumps: write_stream_csv(jumps, temp)
            )
            written += names
        return written

    grid = TimeGrid.uniform(config.horizon, config.n_steps)
    for problem in path_problems(config):

        def run(index: int, problem: PathProblem = problem) -> tuple[Drivers, PathRecord]:
            return simulate_problem(problem, grid, config.seed, index)

        for index, (drivers, path) in enumerate(map_replicas(config, run)):
            written += write_path_artifacts(output, f"{problem.name}-replica-{index}", drivers, path, [])
    return written


def path_problems(config: ExperimentConfig) -> tuple[PathProblem, ...]:
    builders: dict[str, Callable[[Mapping[str, Any]], Any]] = {
        "pure-jump-exact": pure_jump_problems,
        "ledger-equivalence": equivalence_problem,
        "example1": example1_problem,
        "compensated-poisson-p2": compensated_poisson_problem,
        "diffusion-order": diffusion_problem,
    }
    built = builders[config.scenario](config.params)
    return built if isinstance(built, tuple) else (built,)
