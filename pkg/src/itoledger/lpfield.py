"""Grid fields, mollification and the L_p-norm Ito formula for field-valued processes."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Any, Callable, Mapping, Sequence

import numpy as np
from scipy import ndimage
from scipy.integrate import quad_vec

from itoledger.drivers import (
    ConfigurationError,
    Drivers,
    JumpEvent,
    MarkMeasure,
    TimeGrid,
    frozen_array,
    mark_integral,
)
from itoledger.process import SCHEMES, BlowUpError


logger = logging.getLogger(__name__)

MIN_CELLS = 8
QUADRATURE_RULE = "cell-midpoint"
FK_FORMS = ("conservative", "pointwise")
LP_TERMS = (
    "dw",
    "f0",
    "fk_gradient",
    "fk_norm_gradient",
    "g_cross",
    "g_trace",
    "jump_linear",
    "jump_remainder",
)


class LpFieldError(Exception):
    """Raised when a field computation cannot proceed."""


class GridMismatchError(ConfigurationError):
    """Raised when fields on different grids are combined."""


class SupportViolationError(LpFieldError):
    """Raised when a field reaches into the zero boundary band."""


class IntegrabilityError(LpFieldError):
    """Raised when the coefficients are not p-integrable on the grid."""


@dataclass(frozen=True)
class Grid:
    """Uniform cell-centred grid on the box [-L, L]^d."""

    d: int
    half_width: float
    n_cells: int
    periodic: bool = False

    def __post_init__(self) -> None:
        if self.d < 1:
            raise ConfigurationError(f"spatial dimension must be at least 1, got {self.d}")
        if self.n_cells < MIN_CELLS:
            raise ConfigurationError(
                f"grid needs at least {MIN_CELLS} cells per axis, got {self.n_cells}"
            )
        if not self.half_width > 0:
            raise ConfigurationError(f"box half-width must be positive, got {self.half_width}")

    @property
    def spacing(self) -> float:
        return 2.0 * self.half_width / self.n_cells

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.n_cells,) * self.d

    @property
    def cell_volume(self) -> float:
        return self.spacing**self.d

    @property
    def axis(self) -> np.ndarray:
        return -self.half_width + (np.arange(self.n_cells) + 0.5) * self.spacing

    def coordinates(self) -> np.ndarray:
        """Node coordinates with shape (*shape, d)."""
        mesh = np.meshgrid(*([self.axis] * self.d), indexing="ij")
        return np.stack(mesh, axis=-1)


@dataclass(frozen=True)
class Field:
    grid: Grid
    values: np.ndarray
    role: str = "u"

    def __post_init__(self) -> None:
        values = np.asarray(self.values, dtype=float)
        if values.shape == self.grid.shape:
            values = values[..., None]
        if values.shape[:-1] != self.grid.shape:
            raise GridMismatchError(
                f"{self.role} field has shape {values.shape}, grid expects {self.grid.shape}"
            )
        if not np.all(np.isfinite(values)):
            raise LpFieldError(f"{self.role} field contains non-finite values")
        object.__setattr__(self, "values", frozen_array(values))

    @classmethod
    def from_function(
        cls, grid: Grid, function: Callable[[np.ndarray], Any], role: str = "u"
    ) -> Field:
        return cls(grid, function(grid.coordinates()), role)

    @classmethod
    def zeros(cls, grid: Grid, M: int = 1, role: str = "u") -> Field:
        return cls(grid, np.zeros(grid.shape + (M,)), role)

    @property
    def M(self) -> int:
        return self.values.shape[-1]

    def component(self, index: int) -> Field:
        return Field(self.grid, self.values[..., index : index + 1], self.role)


def bump(x: np.ndarray, center: float = 0.0, radius: float = 1.0) -> np.ndarray:
    """Smooth compactly supported bump exp(-1/(1-r^2)) on |x - center| < radius."""
    x = np.asarray(x, dtype=float)
    scaled = ((x - center) / radius) ** 2
    r2 = np.sum(scaled, axis=-1) if x.ndim > 1 else scaled
    inside = r2 < 1.0
    out = np.zeros_like(r2, dtype=float)
    out[inside] = np.exp(-1.0 / (1.0 - r2[inside]))
    return out


def require_same_grid(*fields: Field) -> Grid:
    grid = fields[0].grid
    for other in fields[1:]:
        if other.grid != grid:
            raise GridMismatchError(f"grid {other.grid} does not match {grid}")
    return grid


def band_is_clear(values: np.ndarray, width: int) -> bool:
    if width <= 0:
        return True
    for axis in range(values.ndim - 1):
        size = values.shape[axis]
        if width * 2 > size:
            return False
        head = np.take(values, range(width), axis=axis)
        tail = np.take(values, range(size - width, size), axis=axis)
        if np.any(head != 0.0) or np.any(tail != 0.0):
            return False
    return True


@dataclass(frozen=True)
class Mollifier:
    eps: float
    grid: Grid
    weights: np.ndarray
    radius_cells: int

    @property
    def mass(self) -> float:
        return float(np.sum(self.weights))


def make_mollifier(grid: Grid, eps: float) -> Mollifier:
    """Sample k_eps on the grid offsets and renormalize to unit discrete mass."""
    if not eps > 0:
        raise ConfigurationError(f"mollifier radius must be positive, got {eps}")
    radius = int(math.ceil(eps / grid.spacing)) - 1
    radius = max(radius, 0)
    offsets = np.arange(-radius, radius + 1) * grid.spacing
    mesh = np.stack(np.meshgrid(*([offsets] * grid.d), indexing="ij"), axis=-1)
    kernel = bump(mesh / eps)
    weights = kernel / np.sum(kernel)
    return Mollifier(eps=eps, grid=grid, weights=frozen_array(weights), radius_cells=radius)


def mollify(v: Field, m: Mollifier) -> Field:
    if v.grid != m.grid:
        raise GridMismatchError("mollifier and field live on different grids")
    mode = "wrap" if v.grid.periodic else "constant"
    if not v.grid.periodic and not band_is_clear(v.values, m.radius_cells + 1):
        raise SupportViolationError(
            f"{v.role} field is nonzero within {m.radius_cells + 1} cells of the boundary"
        )
    smoothed = np.stack(
        [
            ndimage.convolve(v.values[..., i], m.weights, mode=mode, cval=0.0)
            for i in range(v.M)
        ],
        axis=-1,
    )
    return Field(v.grid, smoothed, v.role)


def lp_power(values: np.ndarray, grid: Grid, p: float) -> float:
    return float(np.sum(np.linalg.norm(values, axis=-1) ** p) * grid.cell_volume)


def lp_norm(v: Field, p: float) -> float:
    if p < 1:
        raise ConfigurationError(f"L_p norms need p >= 1, got {p}")
    return lp_power(v.values, v.grid, p) ** (1.0 / p)


def weak_pair(v: Field, phi: Field) -> float:
    grid = require_same_grid(v, phi)
    try:
        product = v.values * phi.values
    except ValueError as exc:
        raise GridMismatchError(f"cannot pair {v.M} with {phi.M} components") from exc
    return float(np.sum(product) * grid.cell_volume)


def central_difference(values: np.ndarray, axis: int, grid: Grid) -> np.ndarray:
    """Second-order central difference; outside nodes are zero unless periodic."""
    if grid.periodic:
        forward = np.roll(values, -1, axis=axis)
        backward = np.roll(values, 1, axis=axis)
    else:
        pad = [(0, 0)] * values.ndim
        pad[axis] = (1, 1)
        padded = np.pad(values, pad)
        size = values.shape[axis]
        forward = np.take(padded, range(2, size + 2), axis=axis)
        backward = np.take(padded, range(0, size), axis=axis)
    return (forward - backward) / (2.0 * grid.spacing)


def discrete_gradient(v: Field, axis: int) -> Field:
    if not 0 <= axis < v.grid.d:
        raise ConfigurationError(f"axis {axis} is outside a {v.grid.d}-dimensional grid")
    if not v.grid.periodic and not band_is_clear(v.values, 1):
        raise SupportViolationError(f"{v.role} field has no zero boundary band")
    return Field(v.grid, central_difference(v.values, axis, v.grid), v.role)


FieldFn = Callable[[float], Field]
IndexedFieldFn = Callable[[float, int], Field]
MarkFieldFn = Callable[[float, Any], Field]


@dataclass(frozen=True)
class LpCoefficients:
    """Field-valued coefficients f^{i0}, f^{ik}, g^{ir} and h^i of the field equation."""

    grid: Grid
    M: int = 1
    n_wiener: int = 0
    f0: FieldFn | None = None
    fk: IndexedFieldFn | None = None
    g: IndexedFieldFn | None = None
    h: MarkFieldFn | None = None
    measure: MarkMeasure | None = None
    compensator: FieldFn | None = None
    finite_activity: bool = True
    quadrature_seed: int = 0

    def __post_init__(self) -> None:
        if self.g is not None and self.n_wiener < 1:
            raise ConfigurationError("a diffusion coefficient needs n_wiener >= 1")
        if self.h is not None and self.measure is None:
            raise ConfigurationError("a jump coefficient needs a mark measure")

    @property
    def measures(self) -> tuple[MarkMeasure, ...]:
        return (self.measure,) if self.measure is not None else ()

    def field(self, value: Field) -> np.ndarray:
        if value.grid != self.grid:
            raise GridMismatchError(f"{value.role} coefficient is on another grid")
        return np.broadcast_to(value.values, self.grid.shape + (self.M,))

    def zeros(self) -> np.ndarray:
        return np.zeros(self.grid.shape + (self.M,))

    def f0_values(self, t: float) -> np.ndarray:
        return self.zeros() if self.f0 is None else self.field(self.f0(t))

    def fk_values(self, t: float, k: int) -> np.ndarray:
        return self.zeros() if self.fk is None else self.field(self.fk(t, k))

    def g_values(self, t: float, r: int) -> np.ndarray:
        return self.zeros() if self.g is None else self.field(self.g(t, r))

    def h_values(self, t: float, z: Any) -> np.ndarray:
        return self.zeros() if self.h is None else self.field(self.h(t, z))

    def compensator_values(self, t: float) -> np.ndarray:
        if self.h is None:
            return self.zeros()
        if self.compensator is not None:
            return self.field(self.compensator(t))
        estimate = mark_integral(
            self.measure, lambda z: self.h_values(t, z), seed=self.quadrature_seed
        )
        return np.asarray(estimate.value, dtype=float)

    def drift_values(self, t: float) -> np.ndarray:
        total = np.array(self.f0_values(t))
        if self.fk is not None:
            for k in range(self.grid.d):
                total += central_difference(self.fk_values(t, k), k, self.grid)
        return total

    def noise_values(self, t: float, dw: np.ndarray) -> np.ndarray:
        total = self.zeros()
        if self.g is not None:
            for r in range(self.n_wiener):
                total = total + self.g_values(t, r) * dw[r]
        return total

    def mollified(self, m: Mollifier) -> LpCoefficients:
        def smooth(function: Callable[..., Field] | None) -> Callable[..., Field] | None:
            if function is None:
                return None
            return lambda *args: mollify(function(*args), m)

        return replace(
            self,
            f0=smooth(self.f0),
            fk=smooth(self.fk),
            g=smooth(self.g),
            h=smooth(self.h),
            compensator=smooth(self.compensator),
        )


@dataclass(frozen=True)
class FieldPath:
    grid: Grid
    time_grid: TimeGrid
    scheme: str
    values: np.ndarray
    left: np.ndarray
    jump_slots: tuple[tuple[int, JumpEvent], ...]
    wiener_increments: np.ndarray

    @property
    def times(self) -> np.ndarray:
        return self.time_grid.points

    def snapshot(self, index: int) -> Field:
        return Field(self.grid, self.values[index], "u")


def kappa_p(coeffs: LpCoefficients, times: np.ndarray, p: float) -> float:
    """Left-rule value of sum_i int int (sum_a |f^{ia}|^p + |g^i|^p + |h^i|^p_{L_p,2}) dx dt."""
    vol = coeffs.grid.cell_volume
    total = 0.0
    for t, step in zip(times, np.diff(times)):
        density = np.abs(coeffs.f0_values(t)) ** p
        for k in range(coeffs.grid.d):
            density = density + np.abs(coeffs.fk_values(t, k)) ** p
        if coeffs.g is not None:
            squares = sum(coeffs.g_values(t, r) ** 2 for r in range(coeffs.n_wiener))
            density = density + squares ** (p / 2)
        if coeffs.h is not None:
            high = mark_integral(
                coeffs.measure,
                lambda z: np.abs(coeffs.h_values(t, z)) ** p,
                seed=coeffs.quadrature_seed,
            ).value
            low = mark_integral(
                coeffs.measure,
                lambda z: coeffs.h_values(t, z) ** 2,
                seed=coeffs.quadrature_seed,
            ).value
            density = density + np.maximum(high, np.asarray(low) ** (p / 2))
        total += float(np.sum(density)) * vol * step
    return total


def simulate_lp(
    psi: Field,
    coeffs: LpCoefficients,
    drivers: Drivers,
    scheme: str = "euler",
    *,
    p: float = 2.0,
) -> FieldPath:
    if psi.grid != coeffs.grid:
        raise GridMismatchError("initial field and coefficients live on different grids")
    if psi.M != coeffs.M:
        raise GridMismatchError(f"initial field has {psi.M} components, expected {coeffs.M}")
    if scheme not in SCHEMES:
        raise ConfigurationError(f"unknown scheme {scheme!r}")
    if scheme == "exact-between-jumps" and not coeffs.finite_activity:
        raise ConfigurationError("exact-between-jumps requires finite activity")
    wiener, jumps = drivers.wiener, drivers.jumps
    if coeffs.g is not None and wiener.n_components != coeffs.n_wiener:
        raise ConfigurationError(
            f"coefficients use {coeffs.n_wiener} Wiener components, "
            f"drivers provide {wiener.n_components}"
        )
    kappa = kappa_p(coeffs, wiener.grid.points, p)
    if not math.isfinite(kappa):
        raise IntegrabilityError(f"K_p(T) is not finite on the grid (p={p})")

    time_grid = wiener.grid.merged(jumps.times)
    points = time_grid.points
    increments = wiener.refined(points)
    slots = tuple((time_grid.index_of(event.time), event) for event in jumps.events)
    events_at: dict[int, list[JumpEvent]] = {}
    for index, event in slots:
        events_at.setdefault(index, []).append(event)

    n = points.size - 1
    shape = psi.values.shape
    values = np.empty((n + 1,) + shape)
    left = np.empty((n + 1,) + shape)
    values[0] = left[0] = psi.values

    for i in range(n):
        t, t_next = points[i], points[i + 1]
        u = values[i]
        if scheme == "euler":
            deterministic = (coeffs.drift_values(t) - coeffs.compensator_values(t)) * (t_next - t)
        else:
            deterministic = quad_vec(
                lambda s: (coeffs.drift_values(s) - coeffs.compensator_values(s)).ravel(),
                t,
                t_next,
            )[0].reshape(shape)
        u_next = u + deterministic + coeffs.noise_values(t, increments[i])
        check_finite(u_next, t_next)
        left[i + 1] = u_next
        for event in events_at.get(i + 1, ()):
            u_next = u_next + coeffs.h_values(event.time, event.mark)
        check_finite(u_next, t_next)
        values[i + 1] = u_next

    return FieldPath(
        grid=coeffs.grid,
        time_grid=time_grid,
        scheme=scheme,
        values=frozen_array(values),
        left=frozen_array(left),
        jump_slots=slots,
        wiener_increments=frozen_array(increments),
    )


def check_finite(values: np.ndarray, time: float) -> None:
    bad = ~np.isfinite(values)
    if np.any(bad):
        node = tuple(int(i) for i in np.argwhere(bad)[0][:-1])
        raise BlowUpError(float(time), f"node {node}")


@dataclass(frozen=True)
class LpLedger:
    """Cumulative terms of the L_p-norm formula along a field path."""

    times: np.ndarray
    p: float
    lhs: np.ndarray
    terms: Mapping[str, np.ndarray]
    residual: np.ndarray
    time_rule: str
    fk_form: str
    scale: float
    quadrature_budget: float
    chain_rule_defect: float
    scalar_discrepancy: float | None = None
    quadrature_rule: str = QUADRATURE_RULE
    first_nonfinite: tuple[str, float] | None = None

    @property
    def final_residual(self) -> float:
        return float(self.residual[-1])

    @property
    def max_abs_residual(self) -> float:
        return float(np.max(np.abs(self.residual)))


class NormWeights:
    """|u|^{p-2} and u/|u| for a field, with 0/0 := 0."""

    def __init__(self, u: np.ndarray, p: float) -> None:
        self.norm = np.linalg.norm(u, axis=-1)
        self.weight = self.norm ** (p - 2)
        self.direction = np.divide(
            u, self.norm[..., None], out=np.zeros_like(u), where=self.norm[..., None] > 0
        )


def field_ds_terms(
    coeffs: LpCoefficients, s: float, u: np.ndarray, p: float
) -> dict[str, float]:
    """Ds-integrands of the L_p formula, in both f^k forms, plus the scalar-form totals."""
    grid = coeffs.grid
    vol = grid.cell_volume
    norms = NormWeights(u, p)
    w = norms.weight[..., None]
    gradients = [central_difference(u, k, grid) for k in range(grid.d)]

    f0 = coeffs.f0_values(s)
    terms = {"f0": p * float(np.sum(w * u * f0)) * vol}

    gradient_term = pointwise_norm = conservative_norm = 0.0
    scalar_fk = 0.0
    if coeffs.fk is not None:
        flux = p * w * u
        for k, du in enumerate(gradients):
            fk = coeffs.fk_values(s, k)
            gradient_term -= p * float(np.sum(w * du * fk)) * vol
            projected_f = np.sum(norms.direction * fk, axis=-1)
            projected_du = np.sum(norms.direction * du, axis=-1)
            pointwise_norm -= p * (p - 2) * float(np.sum(norms.weight * projected_f * projected_du)) * vol
            conservative_norm -= float(
                np.sum((central_difference(flux, k, grid) - p * w * du) * fk)
            ) * vol
            scalar_fk -= p * (p - 1) * float(np.sum(w * fk * du)) * vol
    terms["fk_gradient"] = gradient_term
    terms["fk_norm_gradient_pointwise"] = pointwise_norm
    terms["fk_norm_gradient_conservative"] = conservative_norm
    terms["scalar_fk"] = scalar_fk

    cross = trace = 0.0
    if coeffs.g is not None:
        for r in range(coeffs.n_wiener):
            g = coeffs.g_values(s, r)
            cross += float(np.sum(norms.weight * np.sum(norms.direction * g, axis=-1) ** 2))
            trace += float(np.sum(norms.weight * np.sum(g**2, axis=-1)))
    terms["g_cross"] = (p / 2) * (p - 2) * cross * vol
    terms["g_trace"] = (p / 2) * trace * vol
    terms["scalar_g"] = (p / 2) * (p - 1) * trace * vol

    compensator = coeffs.compensator_values(s)
    terms["jump_linear"] = -p * float(np.sum(w * u * compensator)) * vol
    return terms


def ledger_lp(
    u_path: FieldPath,
    coeffs: LpCoefficients,
    drivers: Drivers,
    p: float,
    *,
    fk_form: str = "conservative",
    time_rule: str | None = None,
) -> LpLedger:
    if p < 2:
        raise ConfigurationError(f"the L_p formula needs p >= 2, got p={p}")
    if fk_form not in FK_FORMS:
        raise ConfigurationError(f"unknown f^k form {fk_form!r}")
    rule = time_rule or ("gauss" if u_path.scheme == "exact-between-jumps" else "left")
    if rule not in ("left", "gauss"):
        raise ConfigurationError(f"unknown time rule {rule!r}")

    grid = coeffs.grid
    vol = grid.cell_volume
    times = u_path.times
    n = times.size - 1
    increments = {name: np.zeros(n + 1) for name in LP_TERMS}
    scalar = {name: 0.0 for name in ("f0", "fk", "g")}
    pointwise_total = conservative_total = 0.0
    budget = 0.0

    def step_integrals(i: int, order: int | None) -> dict[str, float]:
        t, t_next = times[i], times[i + 1]
        step = t_next - t
        if order is None:
            nodes = [(t, u_path.values[i], step)]
        else:
            xs, ws = np.polynomial.legendre.leggauss(order)
            theta = (xs + 1.0) / 2.0
            start, end = u_path.values[i], u_path.left[i + 1]
            nodes = [
                (t + th * step, start + th * (end - start), wt * step / 2.0)
                for th, wt in zip(theta, ws)
            ]
        totals: dict[str, float] = {}
        for s, u, weight in nodes:
            for name, value in field_ds_terms(coeffs, s, u, p).items():
                totals[name] = totals.get(name, 0.0) + value * weight
        return totals

    for i in range(n):
        totals = step_integrals(i, None if rule == "left" else 8)
        for name in ("f0", "fk_gradient", "g_cross", "g_trace", "jump_linear"):
            increments[name][i + 1] += totals[name]
        chosen = f"fk_norm_gradient_{fk_form}"
        increments["fk_norm_gradient"][i + 1] += totals[chosen]
        pointwise_total += totals["fk_norm_gradient_pointwise"]
        conservative_total += totals["fk_norm_gradient_conservative"]
        scalar["f0"] += totals["f0"]
        scalar["fk"] += totals["scalar_fk"]
        scalar["g"] += totals["scalar_g"]

        t, u = times[i], u_path.values[i]
        if coeffs.g is not None:
            norms = NormWeights(u, p)
            noise = coeffs.noise_values(t, u_path.wiener_increments[i])
            increments["dw"][i + 1] += p * float(np.sum(norms.weight[..., None] * u * noise)) * vol

        if rule == "left":
            deterministic = (coeffs.drift_values(t) - coeffs.compensator_values(t)) * (
                times[i + 1] - t
            )
            budget += abs(field_taylor_remainder(u, deterministic, p)) * vol
        else:
            coarse = step_integrals(i, 4)
            keys = ("f0", "fk_gradient", chosen, "g_cross", "g_trace", "jump_linear")
            budget += abs(sum(totals[key] - coarse[key] for key in keys))

    for index, h in grouped_jumps(u_path, coeffs).items():
        u_minus = u_path.left[index]
        norms = NormWeights(u_minus, p)
        linear = p * float(np.sum(norms.weight[..., None] * u_minus * h)) * vol
        increments["jump_linear"][index] += linear
        increments["jump_remainder"][index] += field_taylor_remainder(u_minus, h, p) * vol

    lhs = np.array([lp_power(u, grid, p) for u in u_path.values])
    cumulative = {name: np.cumsum(values) for name, values in increments.items()}
    residual = lhs - lhs[0] - sum(cumulative.values())
    variation = sum(float(np.sum(np.abs(values))) for values in increments.values())
    scale = 1.0 + float(np.max(np.abs(lhs))) + variation

    scalar_discrepancy = None
    if coeffs.M == 1:
        pointwise_fk = cumulative["fk_gradient"][-1] + pointwise_total
        gaps = (
            abs(cumulative["f0"][-1] - scalar["f0"]),
            abs(pointwise_fk - scalar["fk"]),
            abs(cumulative["g_cross"][-1] + cumulative["g_trace"][-1] - scalar["g"]),
        )
        scalar_discrepancy = max(gaps) / scale

    first_nonfinite = None
    for index, time in enumerate(times):
        bad = [name for name in LP_TERMS if not math.isfinite(increments[name][index])]
        if bad:
            first_nonfinite = (bad[0], float(time))
            logger.warning("L_p ledger term %s is not finite at t=%r", bad[0], float(time))
            break

    return LpLedger(
        times=times,
        p=p,
        lhs=lhs,
        terms=cumulative,
        residual=residual,
        time_rule=rule,
        fk_form=fk_form,
        scale=scale,
        quadrature_budget=budget,
        chain_rule_defect=conservative_total - pointwise_total,
        scalar_discrepancy=scalar_discrepancy,
        first_nonfinite=first_nonfinite,
    )


def grouped_jumps(u_path: FieldPath, coeffs: LpCoefficients) -> dict[int, np.ndarray]:
    """Total jump field per grid index; simultaneous events add at the same left value."""
    grouped: dict[int, np.ndarray] = {}
    for index, event in u_path.jump_slots:
        h = coeffs.h_values(event.time, event.mark)
        grouped[index] = grouped[index] + h if index in grouped else np.array(h)
    return grouped


def field_taylor_remainder(u: np.ndarray, a: np.ndarray, p: float) -> float:
    norms = NormWeights(u, p)
    shifted = np.linalg.norm(u + a, axis=-1) ** p
    linear = p * norms.weight * np.sum(u * a, axis=-1)
    return float(np.sum(shifted - norms.norm**p - linear))


def ledger_lp_scalar(
    u_path: FieldPath, coeffs: LpCoefficients, drivers: Drivers, p: float
) -> LpLedger:
    """The M=1 form of the L_p formula, whose f^k and g terms each collapse to one.

    Only the collapsed f^k and g terms are recomputed here. The dW, f0 and jump
    terms are those of the pointwise vector ledger, so comparing the two forms
    tests the f^k and g terms alone.
    """
    if coeffs.M != 1:
        raise ConfigurationError("the scalar L_p formula needs M = 1")
    full = ledger_lp(u_path, coeffs, drivers, p, fk_form="pointwise", time_rule="left")
    if u_path.scheme != "euler":
        logger.info("scalar L_p formula evaluated with the left rule on a %s path", u_path.scheme)
    grid = coeffs.grid
    vol = grid.cell_volume
    times = u_path.times
    n = times.size - 1
    fk = np.zeros(n + 1)
    g = np.zeros(n + 1)
    for i in range(n):
        step = times[i + 1] - times[i]
        terms = field_ds_terms(coeffs, times[i], u_path.values[i], p)
        fk[i + 1] = terms["scalar_fk"] * step
        g[i + 1] = terms["scalar_g"] * step
    terms = {
        "dw": full.terms["dw"],
        "f0": full.terms["f0"],
        "fk": np.cumsum(fk),
        "g": np.cumsum(g),
        "jump_linear": full.terms["jump_linear"],
        "jump_remainder": full.terms["jump_remainder"],
    }
    residual = full.lhs - full.lhs[0] - sum(terms.values())
    return replace(full, terms=terms, residual=residual, fk_form="scalar")


def weak_form_defect(
    u_path: FieldPath,
    coeffs: LpCoefficients,
    drivers: Drivers,
    tests: Sequence[Field],
) -> np.ndarray:
    """Largest |defect| over time of the weak equation for each test field and component.

    Each pairing (f^a, D*_a phi) uses D*_0 = 1 and D*_k = -D_k, integrated with the
    left rule that the Euler update uses.
    """
    grid = coeffs.grid
    vol = grid.cell_volume
    times = u_path.times
    defects = np.zeros((len(tests), coeffs.M))
    jumps = grouped_jumps(u_path, coeffs)
    axes = tuple(range(grid.d))
    for j, test in enumerate(tests):
        if test.grid != grid:
            raise GridMismatchError("test field is on another grid")
        phi = test.values[..., 0]
        adjoint = [-central_difference(phi, k, grid) for k in range(grid.d)]
        running = np.sum(u_path.values[0] * phi[..., None], axis=axes) * vol
        for i in range(times.size - 1):
            t, step = times[i], times[i + 1] - times[i]
            pairing = np.sum(
                (coeffs.f0_values(t) - coeffs.compensator_values(t)) * phi[..., None],
                axis=axes,
            )
            for k in range(grid.d):
                pairing = pairing + np.sum(
                    coeffs.fk_values(t, k) * adjoint[k][..., None], axis=axes
                )
            running = running + pairing * vol * step
            noise = coeffs.noise_values(t, u_path.wiener_increments[i])
            running = running + np.sum(noise * phi[..., None], axis=axes) * vol
            if i + 1 in jumps:
                running = running + np.sum(jumps[i + 1] * phi[..., None], axis=axes) * vol
            actual = np.sum(u_path.values[i + 1] * phi[..., None], axis=axes) * vol
            defects[j] = np.maximum(defects[j], np.abs(actual - running))
    return defects


@dataclass(frozen=True)
class LpDiagnostics:
    kappa: float
    w1p_integral: float
    lp_integral: float
    sup_norm_p: float
    condition_L: bool

    @property
    def finite(self) -> bool:
        return all(
            math.isfinite(value)
            for value in (self.kappa, self.w1p_integral, self.lp_integral, self.sup_norm_p)
        )


def integrability_diagnostics(
    u_path: FieldPath, coeffs: LpCoefficients, p: float
) -> LpDiagnostics:
    grid = coeffs.grid
    times = u_path.times
    steps = np.diff(times)
    norms_p = np.array([lp_power(u, grid, p) for u in u_path.values])
    w1p = 0.0
    for u, step in zip(u_path.values, steps):
        total = float(np.sum(np.abs(u) ** p))
        for k in range(grid.d):
            total += float(np.sum(np.abs(central_difference(u, k, grid)) ** p))
        w1p += total * grid.cell_volume * step
    return LpDiagnostics(
        kappa=kappa_p(coeffs, times, p),
        w1p_integral=w1p,
        lp_integral=float(np.sum(norms_p[:-1] * steps)),
        sup_norm_p=float(np.max(norms_p)),
        condition_L=coeffs.fk is None,
    )


def write_field_csv(field: Field, target: Path) -> Path:
    coordinates = field.grid.coordinates().reshape(-1, field.grid.d)
    values = field.values.reshape(-1, field.M)
    with target.open("w", encoding="utf-8", newline="") as output:
        writer = csv.writer(output)
        writer.writerow(
            [f"x{k + 1}" for k in range(field.grid.d)] + [f"u{i + 1}" for i in range(field.M)]
        )
        for point, value in zip(coordinates, values):
            writer.writerow([repr(float(c)) for c in point] + [repr(float(v)) for v in value])
    return target


def write_field_binary(field: Field, target: Path) -> Path:
    """Little-endian float64, nodes in row-major order, the M components interleaved."""
    np.ascontiguousarray(field.values, dtype="<f8").tofile(target)
    return target


def write_lp_ledger_csv(ledger: LpLedger, target: Path) -> Path:
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
