"""Increment operators, test functions and term-by-term Ito formula ledgers."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Mapping

import numpy as np

from itoledger.drivers import ConfigurationError, Drivers, mark_integral, substream
from itoledger.process import (
    ConditionReport,
    Coefficients,
    PathRecord,
    check_conditions,
)


logger = logging.getLogger(__name__)

FORMULAS = ("standard", "natural", "power")
TIME_RULES = ("left", "gauss")
GAUSS_ORDER = 8
EMBEDDED_GAUSS_ORDER = 4
TAYLOR_INFLATION = 1.05
OPERATOR_STREAM = 6

STANDARD_TERMS = (
    "drift",
    "ito_correction",
    "dw",
    "hbar_jumps",
    "h_compensated",
    "h_taylor_compensator",
)
NATURAL_TERMS = (
    "drift",
    "ito_correction",
    "dw",
    "hbar_jumps",
    "h_linear_compensated",
    "h_taylor_jumps",
)
POWER_TERMS = (
    "drift",
    "quadratic_variation",
    "trace",
    "dw",
    "hbar_jumps",
    "h_linear_compensated",
    "h_taylor_jumps",
)


class LedgerError(Exception):
    """Raised when a ledger cannot be assembled."""


class DivergentTermError(LedgerError):
    """Raised when the standard formula is requested for terms flagged divergent."""

    def __init__(self, report: ConditionReport) -> None:
        self.terms = tuple(estimate.name for estimate in report.divergent)
        details = "; ".join(estimate.summary() for estimate in report.divergent)
        super().__init__(
            f"standard formula refused, its terms need not exist: {details} "
            "(pass force=True to evaluate anyway)"
        )


class OrthogonalityError(ConfigurationError):
    """Raised when hbar and h are both nonzero at an evaluated point."""


class DomainError(ConfigurationError):
    """Raised when a test function or exponent is outside the formula's domain."""


@dataclass(frozen=True)
class TestFunction:
    """A C2 function on R^M with closed-form derivatives.

    All three callables broadcast over leading axes: ``value`` maps (..., M) to (...),
    ``gradient`` to (..., M) and ``hessian`` to (..., M, M).
    """

    __test__ = False

    dim: int
    value: Callable[[np.ndarray], Any]
    gradient: Callable[[np.ndarray], Any]
    hessian: Callable[[np.ndarray], Any]
    smoothness: str = "C2"
    name: str = ""


def unit_directions(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Return |x| and x/|x| with the convention 0/0 := 0."""
    norm = np.linalg.norm(x, axis=-1)
    direction = np.divide(
        x, norm[..., None], out=np.zeros_like(x, dtype=float), where=norm[..., None] > 0
    )
    return norm, direction


def power_norm(dim: int, p: float) -> TestFunction:
    if p < 2:
        raise DomainError(f"|x|^p is C2 only for p >= 2, got p={p}")

    def value(x: np.ndarray) -> np.ndarray:
        return np.linalg.norm(np.asarray(x, dtype=float), axis=-1) ** p

    def gradient(x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        norm, direction = unit_directions(x)
        return p * norm[..., None] ** (p - 1) * direction

    def hessian(x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        norm, direction = unit_directions(x)
        weight = norm[..., None, None] ** (p - 2)
        outer = direction[..., :, None] * direction[..., None, :]
        return p * (p - 2) * weight * outer + p * weight * np.eye(dim)

    return TestFunction(dim, value, gradient, hessian, smoothness="C2", name=f"|x|^{p:g}")


def linear(weights: np.ndarray | list[float]) -> TestFunction:
    w = np.asarray(weights, dtype=float)
    dim = w.size

    return TestFunction(
        dim,
        value=lambda x: np.asarray(x, dtype=float) @ w,
        gradient=lambda x: np.broadcast_to(w, np.shape(x)).copy(),
        hessian=lambda x: np.zeros(np.shape(x)[:-1] + (dim, dim)),
        smoothness="C2b",
        name="linear",
    )


def cosine(dim: int) -> TestFunction:
    return TestFunction(
        dim,
        value=lambda x: np.sum(np.cos(x), axis=-1),
        gradient=lambda x: -np.sin(np.asarray(x, dtype=float)),
        hessian=lambda x: -np.cos(np.asarray(x, dtype=float))[..., None] * np.eye(dim),
        smoothness="C2b",
        name="sum cos",
    )


def product(phi: TestFunction, psi: TestFunction) -> TestFunction:
    def value(x: np.ndarray) -> np.ndarray:
        return phi.value(x) * psi.value(x)

    def gradient(x: np.ndarray) -> np.ndarray:
        return (
            np.asarray(psi.value(x))[..., None] * phi.gradient(x)
            + np.asarray(phi.value(x))[..., None] * psi.gradient(x)
        )

    def hessian(x: np.ndarray) -> np.ndarray:
        dphi, dpsi = phi.gradient(x), psi.gradient(x)
        cross = dphi[..., :, None] * dpsi[..., None, :]
        return (
            np.asarray(psi.value(x))[..., None, None] * phi.hessian(x)
            + np.asarray(phi.value(x))[..., None, None] * psi.hessian(x)
            + cross
            + np.swapaxes(cross, -1, -2)
        )

    return TestFunction(
        phi.dim,
        value,
        gradient,
        hessian,
        smoothness="C2b" if phi.smoothness == psi.smoothness == "C2b" else "C2",
        name=f"({phi.name})({psi.name})",
    )


def increment_I(phi: TestFunction, v: Any, a: Any) -> Any:
    v = np.asarray(v, dtype=float)
    a = np.asarray(a, dtype=float)
    return phi.value(v + a) - phi.value(v)


def increment_J(phi: TestFunction, v: Any, a: Any) -> Any:
    v = np.asarray(v, dtype=float)
    a = np.asarray(a, dtype=float)
    return increment_I(phi, v, a) - np.sum(a * phi.gradient(v), axis=-1)


def product_identity_I(phi: TestFunction, psi: TestFunction, v: Any, a: Any) -> tuple[Any, Any]:
    v, a = np.asarray(v, dtype=float), np.asarray(a, dtype=float)
    lhs = increment_I(product(phi, psi), v, a)
    rhs = psi.value(v) * increment_I(phi, v, a) + phi.value(v + a) * increment_I(psi, v, a)
    return lhs, rhs


def product_identity_J(phi: TestFunction, psi: TestFunction, v: Any, a: Any) -> tuple[Any, Any]:
    v, a = np.asarray(v, dtype=float), np.asarray(a, dtype=float)
    lhs = increment_J(product(phi, psi), v, a)
    rhs = (
        psi.value(v) * increment_J(phi, v, a)
        + phi.value(v) * increment_J(psi, v, a)
        + increment_I(phi, v, a) * increment_I(psi, v, a)
    )
    return lhs, rhs


@dataclass(frozen=True)
class DerivativeReport:
    gradient_error: float
    hessian_error: float
    symmetry_error: float
    tolerance: float
    skipped: tuple[str, ...] = ()

    @property
    def passed(self) -> bool:
        return (
            self.gradient_error <= self.tolerance
            and self.hessian_error <= self.tolerance
            and self.symmetry_error <= 1e-10
        )


def validate_derivatives(
    phi: TestFunction,
    sample_points: Any,
    fd_step: float,
    *,
    tolerance: float = 1e-4,
    floor: float = 1e-8,
) -> DerivativeReport:
    if not fd_step > 0:
        raise ConfigurationError(f"finite-difference step must be positive, got {fd_step}")
    points = np.atleast_2d(np.asarray(sample_points, dtype=float))
    basis = np.eye(phi.dim) * fd_step
    gradient_error = hessian_error = symmetry_error = 0.0
    skipped = []

    for index, x in enumerate(points):
        value = phi.value(x)
        if not np.isfinite(value):
            skipped.append(f"point {index}: non-finite value {float(value)!r}")
            continue
        gradient = np.asarray(phi.gradient(x), dtype=float)
        hessian = np.asarray(phi.hessian(x), dtype=float)
        fd_gradient = np.array(
            [(phi.value(x + e) - phi.value(x - e)) / (2 * fd_step) for e in basis]
        )
        fd_hessian = np.array(
            [(phi.gradient(x + e) - phi.gradient(x - e)) / (2 * fd_step) for e in basis]
        )
        gradient_scale = max(float(np.max(np.abs(gradient))), floor)
        hessian_scale = max(float(np.max(np.abs(hessian))), floor)
        gradient_error = max(
            gradient_error, float(np.max(np.abs(fd_gradient - gradient))) / gradient_scale
        )
        hessian_error = max(
            hessian_error, float(np.max(np.abs(fd_hessian - hessian))) / hessian_scale
        )
        symmetry_error = max(
            symmetry_error, float(np.max(np.abs(hessian - hessian.T))) / hessian_scale
        )

    return DerivativeReport(
        gradient_error=gradient_error,
        hessian_error=hessian_error,
        symmetry_error=symmetry_error,
        tolerance=tolerance,
        skipped=tuple(skipped),
    )


@dataclass(frozen=True)
class TermLedger:
    """Cumulative right-hand-side terms of one Ito formula along a path."""

    formula: str
    time_rule: str
    times: np.ndarray
    lhs: np.ndarray
    terms: Mapping[str, np.ndarray]
    residual: np.ndarray
    quadrature_budget: float
    quadrature_stderr: float
    scale: float
    first_nonfinite: tuple[str, float] | None = None

    @property
    def rhs_total(self) -> float:
        return float(self.lhs[0] + sum(values[-1] for values in self.terms.values()))

    @property
    def final_residual(self) -> float:
        return float(self.residual[-1])

    @property
    def max_abs_residual(self) -> float:
        return float(np.max(np.abs(self.residual)))


DsIntegrand = Callable[[float, np.ndarray], tuple[dict[str, float], float]]
JumpIntegrand = Callable[[int, float, Any, np.ndarray], dict[str, float]]


def time_nodes(
    path: PathRecord, i: int, rule: str, order: int = GAUSS_ORDER
) -> list[tuple[float, np.ndarray, float]]:
    """Quadrature nodes (s, X_s, weight) for the ds-integrals over step i.

    The gauss rule interpolates the continuous part of the path linearly between
    X_{t_i} and X_{t_{i+1}-}; this is exact when the coefficients are constant on
    the step and the path carries no diffusion.
    """
    t, t_next = path.times[i], path.times[i + 1]
    step = t_next - t
    x = path.values[i]
    if rule == "left":
        return [(t, x, step)]
    x_end = path.left[i + 1]
    nodes, weights = np.polynomial.legendre.leggauss(order)
    theta = (nodes + 1.0) / 2.0
    return [
        (t + fraction * step, x + fraction * (x_end - x), weight * step / 2.0)
        for fraction, weight in zip(theta, weights)
    ]


def resolve_time_rule(path: PathRecord, time_rule: str | None) -> str:
    if time_rule is None:
        return "gauss" if path.scheme == "exact-between-jumps" else "left"
    if time_rule not in TIME_RULES:
        raise ConfigurationError(
            f"unknown time rule {time_rule!r}; expected one of {', '.join(TIME_RULES)}"
        )
    return time_rule


def assemble_ledger(
    formula: str,
    names: tuple[str, ...],
    path: PathRecord,
    coeffs: Coefficients,
    phi: TestFunction,
    ds_integrand: DsIntegrand,
    jump_integrand: JumpIntegrand,
    time_rule: str,
) -> TermLedger:
    n = path.times.size - 1
    increments = {name: np.zeros(n + 1) for name in names}
    budget = 0.0
    stderr = 0.0

    for i in range(n):
        step_totals: dict[str, float] = {}
        for s, x, weight in time_nodes(path, i, time_rule):
            values, error = ds_integrand(s, x)
            stderr += error * weight
            for name, value in values.items():
                step_totals[name] = step_totals.get(name, 0.0) + value * weight
        for name, value in step_totals.items():
            increments[name][i + 1] += value

        t, x = path.times[i], path.values[i]
        if coeffs.diffusion is not None:
            increments["dw"][i + 1] += float(
                phi.gradient(x) @ (coeffs.g(t, x) @ path.wiener_increments[i])
            )

        if time_rule == "left":
            deterministic = path.drift_increments[i] - path.compensator_increments[i]
            budget += abs(float(increment_J(phi, x, deterministic)))
        else:
            coarse = 0.0
            for s, y, weight in time_nodes(path, i, time_rule, EMBEDDED_GAUSS_ORDER):
                coarse += sum(ds_integrand(s, y)[0].values()) * weight
            budget += abs(sum(step_totals.values()) - coarse)

    for index, event in path.jump_slots:
        x_minus = path.left[index]
        for name, value in jump_integrand(event.measure, event.time, event.mark, x_minus).items():
            increments[name][index] += value

    lhs = np.asarray(phi.value(path.values), dtype=float)
    cumulative = {name: np.cumsum(values) for name, values in increments.items()}
    total = sum(cumulative.values()) if cumulative else np.zeros(n + 1)
    residual = lhs - lhs[0] - total
    variation = sum(float(np.sum(np.abs(values))) for values in increments.values())
    scale = 1.0 + float(np.max(np.abs(lhs))) + variation

    first_nonfinite = None
    for index, time in enumerate(path.times):
        bad = [name for name in names if not math.isfinite(increments[name][index])]
        if bad:
            first_nonfinite = (bad[0], float(time))
            logger.warning("ledger term %s is not finite at t=%r", bad[0], float(time))
            break

    return TermLedger(
        formula=formula,
        time_rule=time_rule,
        times=path.times,
        lhs=lhs,
        terms=cumulative,
        residual=residual,
        quadrature_budget=budget,
        quadrature_stderr=stderr,
        scale=scale,
        first_nonfinite=first_nonfinite,
    )


def diffusion_terms(coeffs: Coefficients, phi: TestFunction, s: float, x: np.ndarray) -> dict[str, float]:
    values = {"drift": float(coeffs.f(s, x) @ phi.gradient(x))}
    if coeffs.diffusion is not None:
        g = coeffs.g(s, x)
        values["ito_correction"] = 0.5 * float(np.sum((g @ g.T) * phi.hessian(x)))
    return values


def ledger_standard(
    path: PathRecord,
    coeffs: Coefficients,
    drivers: Drivers,
    phi: TestFunction,
    *,
    conditions: ConditionReport | None = None,
    force: bool = False,
    time_rule: str | None = None,
) -> TermLedger:
    rule = resolve_time_rule(path, time_rule)
    if conditions is None:
        conditions = check_conditions(coeffs, path, drivers.jumps, phi)
    if conditions.orthogonality_violated:
        raise OrthogonalityError(
            f"hbar and h overlap, max |hbar h| = {conditions.orthogonality_max:.3e}"
        )
    if conditions.divergent:
        if not force:
            raise DivergentTermError(conditions)
        logger.warning("evaluating the standard formula despite flagged divergence")

    def ds_integrand(s: float, x: np.ndarray) -> tuple[dict[str, float], float]:
        values = diffusion_terms(coeffs, phi, s, x)
        compensated = taylor = 0.0
        error = 0.0
        for k in range(len(coeffs.jumps)):
            if coeffs.jumps[k].h is None:
                continue
            first = coeffs_mark_integral(coeffs, k, lambda z: increment_I(phi, x, coeffs.h(k, s, z, x)))
            second = coeffs_mark_integral(coeffs, k, lambda z: increment_J(phi, x, coeffs.h(k, s, z, x)))
            compensated -= float(first.value)
            taylor += float(second.value)
            error += first.stderr + second.stderr
        values["h_compensated"] = compensated
        values["h_taylor_compensator"] = taylor
        return values, error

    def jump_integrand(k: int, t: float, z: Any, x: np.ndarray) -> dict[str, float]:
        return {
            "hbar_jumps": float(increment_I(phi, x, coeffs.h_bar(k, t, z, x))),
            "h_compensated": float(increment_I(phi, x, coeffs.h(k, t, z, x))),
        }

    return assemble_ledger(
        "standard", STANDARD_TERMS, path, coeffs, phi, ds_integrand, jump_integrand, rule
    )


def coeffs_mark_integral(coeffs: Coefficients, k: int, integrand: Callable[[Any], Any]) -> Any:
    return mark_integral(coeffs.jumps[k].measure, integrand, seed=coeffs.quadrature_seed)


def compensator_term(
    coeffs: Coefficients, s: float, x: np.ndarray, weight_vector: np.ndarray
) -> tuple[float, float]:
    total = 0.0
    error = 0.0
    for k in range(len(coeffs.jumps)):
        estimate = coeffs.compensator(k, s, x)
        total += float(weight_vector @ estimate.value)
        error += estimate.stderr * float(np.linalg.norm(weight_vector))
    return total, error


def ledger_natural(
    path: PathRecord,
    coeffs: Coefficients,
    drivers: Drivers,
    phi: TestFunction,
    *,
    time_rule: str | None = None,
) -> TermLedger:
    rule = resolve_time_rule(path, time_rule)

    def ds_integrand(s: float, x: np.ndarray) -> tuple[dict[str, float], float]:
        values = diffusion_terms(coeffs, phi, s, x)
        linear_part, error = compensator_term(coeffs, s, x, phi.gradient(x))
        values["h_linear_compensated"] = -linear_part
        return values, error

    def jump_integrand(k: int, t: float, z: Any, x: np.ndarray) -> dict[str, float]:
        h = coeffs.h(k, t, z, x)
        return {
            "hbar_jumps": float(increment_I(phi, x, coeffs.h_bar(k, t, z, x))),
            "h_linear_compensated": float(phi.gradient(x) @ h),
            "h_taylor_jumps": float(increment_J(phi, x, h)),
        }

    return assemble_ledger(
        "natural", NATURAL_TERMS, path, coeffs, phi, ds_integrand, jump_integrand, rule
    )


def ledger_power(
    path: PathRecord,
    coeffs: Coefficients,
    drivers: Drivers,
    p: float,
    *,
    time_rule: str | None = None,
) -> TermLedger:
    if p < 2:
        raise DomainError(f"the power formula needs p >= 2, got p={p}")
    rule = resolve_time_rule(path, time_rule)
    phi = power_norm(coeffs.dim, p)

    def ds_integrand(s: float, x: np.ndarray) -> tuple[dict[str, float], float]:
        norm, direction = unit_directions(x)
        weight = float(norm) ** (p - 2)
        radial = p * weight * float(norm) * direction
        values = {"drift": float(radial @ coeffs.f(s, x))}
        if coeffs.diffusion is not None:
            g = coeffs.g(s, x)
            values["quadratic_variation"] = (
                (p / 2) * (p - 2) * weight * float(np.sum((direction @ g) ** 2))
            )
            values["trace"] = (p / 2) * weight * float(np.sum(g**2))
        linear_part, error = compensator_term(coeffs, s, x, radial)
        values["h_linear_compensated"] = -linear_part
        return values, error

    def jump_integrand(k: int, t: float, z: Any, x: np.ndarray) -> dict[str, float]:
        h = coeffs.h(k, t, z, x)
        norm, direction = unit_directions(x)
        linear_part = p * float(norm) ** (p - 1) * float(direction @ h)
        return {
            "hbar_jumps": float(increment_I(phi, x, coeffs.h_bar(k, t, z, x))),
            "h_linear_compensated": linear_part,
            "h_taylor_jumps": float(phi.value(x + h) - phi.value(x)) - linear_part,
        }

    return assemble_ledger(
        "power", POWER_TERMS, path, coeffs, phi, ds_integrand, jump_integrand, rule
    )


@dataclass(frozen=True)
class OperatorPropertyReport:
    samples: int
    convexity_violations: int
    taylor_I_ratio: float
    taylor_J_ratio: float
    product_I_error: float
    product_J_error: float
    tolerance: float = 1e-10

    @property
    def passed(self) -> bool:
        return (
            self.convexity_violations == 0
            and self.taylor_I_ratio <= 1.0
            and self.taylor_J_ratio <= 1.0
            and self.product_I_error <= self.tolerance
            and self.product_J_error <= self.tolerance
        )


def ball_suprema(
    phi: TestFunction, radius: np.ndarray, rng: np.random.Generator, interior: int, sphere: int
) -> tuple[np.ndarray, np.ndarray]:
    """Sampled sup of |D phi| and Frobenius |D^2 phi| over balls of the given radii."""
    count = radius.size
    directions = rng.standard_normal((count, interior + sphere, phi.dim))
    directions /= np.linalg.norm(directions, axis=-1, keepdims=True)
    scale = np.ones((count, interior + sphere))
    scale[:, :interior] = rng.random((count, interior)) ** (1.0 / phi.dim)
    points = directions * (scale * radius[:, None])[..., None]
    gradient = np.linalg.norm(phi.gradient(points), axis=-1).max(axis=1)
    hessian = np.linalg.norm(phi.hessian(points), axis=(-2, -1)).max(axis=1)
    return gradient, hessian


def taylor_ratios(
    phi: TestFunction, v: np.ndarray, a: np.ndarray, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    radius = np.linalg.norm(a, axis=-1) + np.linalg.norm(v, axis=-1)
    sup_gradient, sup_hessian = ball_suprema(phi, radius, rng, interior=48, sphere=16)
    size = np.linalg.norm(a, axis=-1)
    first = np.abs(increment_I(phi, v, a))
    second = np.abs(increment_J(phi, v, a))
    roundoff = 1e-12 * (np.abs(phi.value(v)) + np.abs(phi.value(v + a)))
    bound_first = TAYLOR_INFLATION * sup_gradient * size + roundoff
    bound_second = TAYLOR_INFLATION * sup_hessian * size**2 + roundoff
    return (
        np.divide(first, bound_first, out=np.zeros_like(first), where=bound_first > 0),
        np.divide(second, bound_second, out=np.zeros_like(second), where=bound_second > 0),
    )


def relative_gap(lhs: np.ndarray, rhs: np.ndarray, magnitude: np.ndarray) -> float:
    scale = np.maximum(magnitude, np.finfo(float).tiny)
    return float(np.max(np.abs(lhs - rhs) / scale))


def check_operator_properties(
    n_samples: int = 100_000,
    seed: int = 0,
    *,
    dim: int = 3,
    chunk: int = 1000,
    p_range: tuple[float, float] = (2.0, 6.0),
) -> OperatorPropertyReport:
    violations = 0
    ratio_I = ratio_J = 0.0
    gap_I = gap_J = 0.0
    psi = cosine(dim)
    for start in range(0, n_samples, chunk):
        size = min(chunk, n_samples - start)
        rng = substream(seed, OPERATOR_STREAM, start // chunk)
        p = float(rng.uniform(*p_range))
        phi = power_norm(dim, p)
        scales = np.exp(rng.uniform(-2.0, 1.0, size=(size, 1)))
        v = rng.standard_normal((size, dim)) * scales
        a = rng.standard_normal((size, dim)) * scales

        remainder = increment_J(phi, v, a)
        slack = 1e-12 * (
            np.abs(phi.value(v))
            + np.abs(phi.value(v + a))
            + np.abs(np.sum(a * phi.gradient(v), axis=-1))
        )
        violations += int(np.sum(remainder < -slack))

        first, second = taylor_ratios(phi, v, a, rng)
        ratio_I = max(ratio_I, float(first.max()))
        ratio_J = max(ratio_J, float(second.max()))

        joint = product(phi, psi)
        magnitude = (
            np.abs(joint.value(v))
            + np.abs(joint.value(v + a))
            + np.abs(np.sum(a * joint.gradient(v), axis=-1))
        )
        lhs, rhs = product_identity_I(phi, psi, v, a)
        gap_I = max(gap_I, relative_gap(lhs, rhs, magnitude))
        lhs, rhs = product_identity_J(phi, psi, v, a)
        gap_J = max(gap_J, relative_gap(lhs, rhs, magnitude))

    return OperatorPropertyReport(
        samples=n_samples,
        convexity_violations=violations,
        taylor_I_ratio=ratio_I,
        taylor_J_ratio=ratio_J,
        product_I_error=gap_I,
        product_J_error=gap_J,
    )


def write_ledger_csv(ledger: TermLedger, target: Path) -> Path:
    names = list(ledger.terms)
    with target.open("w", encoding="utf-8", newline="") as output:
        writer = csv.writer(output)
        writer.writerow(["t", *names, "lhs", "residual"])
        for index, t in enumerate(ledger.times):
            writer.writerow(
                [repr(float(t))]
                + [repr(float(ledger.terms[name][index])) for name in names]
                + [repr(float(ledger.lhs[index])), repr(float(ledger.residual[index]))]
            )
    return target
