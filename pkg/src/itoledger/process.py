"""Pathwise simulation of jump-diffusion semimartingales and their standing conditions."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Mapping, Sequence

import numpy as np
from scipy.integrate import quad_vec

from itoledger.drivers import (
    CONDITION_STREAM,
    ConfigurationError,
    JumpEvent,
    JumpStream,
    MarkMeasure,
    QuadratureEstimate,
    TimeGrid,
    WienerBasis,
    frozen_array,
    mark_integral,
    substream,
)


logger = logging.getLogger(__name__)

SCHEMES = ("euler", "exact-between-jumps")
ORTHOGONALITY_TOLERANCE = 1e-12
CONDITION_NAMES = ("condition1", "condition2")

DriftFn = Callable[[float, np.ndarray], Any]
DiffusionFn = Callable[[float, np.ndarray], Any]
JumpFn = Callable[[float, Any, np.ndarray], Any]
CompensatorFn = Callable[[float, np.ndarray], Any]


class ProcessError(Exception):
    """Raised when a path cannot be constructed."""


class BlowUpError(ProcessError):
    """Raised when the simulated state stops being finite."""

    def __init__(self, time: float, detail: str = "") -> None:
        self.time = time
        message = f"state became non-finite at t={time!r}"
        super().__init__(f"{message}: {detail}" if detail else message)


class DimensionError(ConfigurationError):
    """Raised when coefficient values do not match the declared dimensions."""


@dataclass(frozen=True)
class JumpCoefficients:
    """Jump integrands for one Poisson random measure.

    ``h_bar`` is integrated against the raw measure, ``h`` against its compensated
    version. ``compensator`` may supply the closed form of the z-integral of ``h``.
    """

    measure: MarkMeasure
    h_bar: JumpFn | None = None
    h: JumpFn | None = None
    compensator: CompensatorFn | None = None


@dataclass(frozen=True)
class Coefficients:
    dim: int
    n_wiener: int = 0
    drift: DriftFn | None = None
    diffusion: DiffusionFn | None = None
    jumps: tuple[JumpCoefficients, ...] = ()
    finite_activity: bool = True
    state_independent: bool = False
    quadrature_seed: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "jumps", tuple(self.jumps))
        if self.dim < 1:
            raise DimensionError(f"state dimension must be at least 1, got {self.dim}")
        if self.diffusion is not None and self.n_wiener < 1:
            raise DimensionError("a diffusion coefficient needs n_wiener >= 1")

    @property
    def measures(self) -> tuple[MarkMeasure, ...]:
        return tuple(jump.measure for jump in self.jumps)

    def f(self, t: float, x: np.ndarray) -> np.ndarray:
        if self.drift is None:
            return np.zeros(self.dim)
        return self._vector(self.drift(t, x), "drift")

    def g(self, t: float, x: np.ndarray) -> np.ndarray:
        if self.diffusion is None:
            return np.zeros((self.dim, max(self.n_wiener, 1)))
        value = np.asarray(self.diffusion(t, x), dtype=float).reshape(
            self.dim, self.n_wiener
        )
        return value

    def h_bar(self, k: int, t: float, z: Any, x: np.ndarray) -> np.ndarray:
        integrand = self.jumps[k].h_bar
        if integrand is None:
            return np.zeros(self.dim)
        return self._vector(integrand(t, z, x), "h_bar")

    def h(self, k: int, t: float, z: Any, x: np.ndarray) -> np.ndarray:
        integrand = self.jumps[k].h
        if integrand is None:
            return np.zeros(self.dim)
        return self._vector(integrand(t, z, x), "h")

    def compensator(self, k: int, t: float, x: np.ndarray) -> QuadratureEstimate:
        jump = self.jumps[k]
        if jump.h is None:
            return QuadratureEstimate(np.zeros(self.dim), 0.0, "analytic")
        if jump.compensator is not None:
            return QuadratureEstimate(
                self._vector(jump.compensator(t, x), "compensator"), 0.0, "analytic"
            )
        return mark_integral(
            jump.measure, lambda z: self.h(k, t, z, x), seed=self.quadrature_seed
        )

    def total_compensator(self, t: float, x: np.ndarray) -> np.ndarray:
        total = np.zeros(self.dim)
        for k in range(len(self.jumps)):
            total = total + self.compensator(k, t, x).value
        return total

    def truncated(self, level: float) -> Coefficients:
        """Clip every compensated jump integrand componentwise to [-level, level]."""
        jumps = tuple(
            replace(jump, h=clipped(jump.h, level), compensator=None)
            if jump.h is not None
            else jump
            for jump in self.jumps
        )
        return replace(self, jumps=jumps)

    def _vector(self, value: Any, name: str) -> np.ndarray:
        array = np.asarray(value, dtype=float).reshape(-1)
        if array.size != self.dim:
            raise DimensionError(f"{name} returned {array.size} values, expected {self.dim}")
        return array


def clipped(integrand: JumpFn, level: float) -> JumpFn:
    def truncated_integrand(t: float, z: Any, x: np.ndarray) -> np.ndarray:
        return np.clip(np.asarray(integrand(t, z, x), dtype=float), -level, level)

    return truncated_integrand


@dataclass(frozen=True)
class PathRecord:
    scheme: str
    grid: TimeGrid
    values: np.ndarray
    left: np.ndarray
    jump_slots: tuple[tuple[int, JumpEvent], ...]
    wiener_increments: np.ndarray
    drift_increments: np.ndarray
    diffusion_increments: np.ndarray
    compensator_increments: np.ndarray

    @property
    def times(self) -> np.ndarray:
        return self.grid.points

    @property
    def x0(self) -> np.ndarray:
        return self.values[0]

    @property
    def is_jump(self) -> np.ndarray:
        flags = np.zeros(self.times.size, dtype=bool)
        for index, _ in self.jump_slots:
            flags[index] = True
        return flags

    def value_at(self, time: float) -> np.ndarray:
        index = int(np.searchsorted(self.times, time, side="right")) - 1
        return self.values[max(index, 0)]


def validate_scheme(coeffs: Coefficients, scheme: str) -> None:
    if scheme not in SCHEMES:
        raise ConfigurationError(
            f"unknown scheme {scheme!r}; expected one of {', '.join(SCHEMES)}"
        )
    if scheme == "exact-between-jumps":
        if not coeffs.finite_activity:
            raise ConfigurationError("exact-between-jumps requires finite activity")
        if not coeffs.state_independent:
            raise ConfigurationError(
                "exact-between-jumps requires coefficients constant in state between jumps"
            )


def simulate(
    x0: Sequence[float] | np.ndarray | float,
    coeffs: Coefficients,
    wiener: WienerBasis,
    jumps: JumpStream,
    scheme: str = "euler",
) -> PathRecord:
    validate_scheme(coeffs, scheme)
    start = np.asarray(x0, dtype=float).reshape(-1)
    if start.size != coeffs.dim:
        raise DimensionError(f"x0 has {start.size} components, expected {coeffs.dim}")
    if coeffs.diffusion is not None and wiener.n_components != coeffs.n_wiener:
        raise DimensionError(
            f"coefficients use {coeffs.n_wiener} Wiener components, "
            f"drivers provide {wiener.n_components}"
        )
    if jumps.events and max(event.measure for event in jumps.events) >= len(coeffs.jumps):
        raise DimensionError("jump stream references a measure without coefficients")

    grid = wiener.grid.merged(jumps.times)
    points = grid.points
    increments = wiener.refined(points)
    slots = tuple((grid.index_of(event.time), event) for event in jumps.events)
    events_at: dict[int, list[JumpEvent]] = {}
    for index, event in slots:
        events_at.setdefault(index, []).append(event)

    n = points.size - 1
    values = np.empty((n + 1, coeffs.dim))
    left = np.empty((n + 1, coeffs.dim))
    drift = np.zeros((n, coeffs.dim))
    diffusion = np.zeros((n, coeffs.dim))
    compensator = np.zeros((n, coeffs.dim))
    values[0] = left[0] = start

    for i in range(n):
        t, t_next = points[i], points[i + 1]
        x = values[i]
        if scheme == "euler":
            drift[i] = coeffs.f(t, x) * (t_next - t)
            compensator[i] = coeffs.total_compensator(t, x) * (t_next - t)
        else:
            if coeffs.drift is not None:
                drift[i] = quad_vec(lambda s: coeffs.f(s, x), t, t_next)[0]
            if coeffs.jumps:
                compensator[i] = quad_vec(
                    lambda s: coeffs.total_compensator(s, x), t, t_next
                )[0]
        if coeffs.diffusion is not None:
            diffusion[i] = coeffs.g(t, x) @ increments[i]

        x_next = x + drift[i] + diffusion[i] - compensator[i]
        if not np.all(np.isfinite(x_next)):
            raise BlowUpError(float(t_next), "continuous update")
        left[i + 1] = x_next
        for event in events_at.get(i + 1, ()):
            k = event.measure
            x_next = x_next + coeffs.h_bar(k, event.time, event.mark, left[i + 1])
            x_next = x_next + coeffs.h(k, event.time, event.mark, left[i + 1])
        if not np.all(np.isfinite(x_next)):
            raise BlowUpError(float(t_next), "jump update")
        values[i + 1] = x_next

    return PathRecord(
        scheme=scheme,
        grid=grid,
        values=frozen_array(values),
        left=frozen_array(left),
        jump_slots=slots,
        wiener_increments=frozen_array(increments),
        drift_increments=frozen_array(drift),
        diffusion_increments=frozen_array(diffusion),
        compensator_increments=frozen_array(compensator),
    )


@dataclass(frozen=True)
class ConditionEstimate:
    """Values of one integral over [delta_j, T] at increasing truncation levels."""

    name: str
    deltas: tuple[float, ...]
    layers: tuple[int, ...]
    values: tuple[float, ...]
    divergent: bool
    detected_at: int | None = None

    def summary(self) -> str:
        if not self.divergent:
            return f"{self.name}: finite, {self.values[-1]:.6g} at delta={self.deltas[-1]:g}"
        level = self.detected_at if self.detected_at is not None else len(self.values) - 1
        return (
            f"{self.name}: suspected divergent, growth detected from truncation level "
            f"{level} (delta={self.deltas[level]:g})"
        )


@dataclass(frozen=True)
class ConditionReport:
    orthogonality_max: float
    integrals: Mapping[str, float]
    esssup_hbar: float
    esssup_h: float
    h_square: ConditionEstimate
    condition1: ConditionEstimate | None = None
    condition2: ConditionEstimate | None = None
    warnings: tuple[str, ...] = field(default=())

    @property
    def orthogonality_violated(self) -> bool:
        return self.orthogonality_max > ORTHOGONALITY_TOLERANCE

    @property
    def divergent(self) -> tuple[ConditionEstimate, ...]:
        return tuple(
            estimate
            for estimate in (self.condition1, self.condition2)
            if estimate is not None and estimate.divergent
        )


def check_conditions(
    coeffs: Coefficients,
    path: PathRecord,
    jumps: JumpStream,
    phi: Any | None = None,
    *,
    truncation_levels: int = 6,
    delta_ratio: float = 10.0,
    cells_per_level: int = 32,
    min_slope: float = 0.05,
    decay_ratio: float = 0.8,
    mark_samples: int = 32,
    seed: int = 0,
) -> ConditionReport:
    if truncation_levels < 4:
        raise ConfigurationError("divergence detection needs at least 4 truncation levels")

    orthogonality = orthogonality_max(coeffs, path, jumps, mark_samples, seed)
    hbar_sizes, h_sizes = realized_jump_sizes(coeffs, path)
    integrals = {
        "hbar_pi": float(np.sum(hbar_sizes)),
        "h_square_pi": float(np.sum(h_sizes**2)),
        "h_square_mu": h_square_rectangle(coeffs, path),
        "drift_abs": float(
            sum(
                np.linalg.norm(coeffs.f(t, x)) * step
                for t, x, step in zip(path.times, path.values, path.grid.steps)
            )
        ),
        "diffusion_square": float(
            sum(
                np.sum(coeffs.g(t, x) ** 2) * step
                for t, x, step in zip(path.times, path.values, path.grid.steps)
            )
        ),
    }

    estimator = TruncatedEstimator(
        coeffs=coeffs,
        path=path,
        levels=truncation_levels,
        ratio=delta_ratio,
        cells_per_level=cells_per_level,
        min_slope=min_slope,
        decay_ratio=decay_ratio,
    )
    h_square = estimator.estimate("h_square", lambda x, a: float(a @ a))
    condition1 = condition2 = None
    if phi is not None:
        condition1 = estimator.estimate(
            "condition1", lambda x, a: float(phi.value(x + a) - phi.value(x)) ** 2
        )
        condition2 = estimator.estimate(
            "condition2",
            lambda x, a: abs(
                float(phi.value(x + a) - phi.value(x) - a @ phi.gradient(x))
            ),
        )

    for estimate in (condition1, condition2):
        if estimate is not None:
            logger.debug("%s over deltas %s: %s", estimate.name, estimate.deltas, estimate.values)

    warnings = []
    if orthogonality > ORTHOGONALITY_TOLERANCE:
        warnings.append(f"jump integrands are not orthogonal: max |hbar h| = {orthogonality:.3e}")
    for estimate in (condition1, condition2):
        if estimate is not None and estimate.divergent:
            warnings.append(estimate.summary())
    for warning in warnings:
        logger.warning(warning)

    return ConditionReport(
        orthogonality_max=orthogonality,
        integrals=integrals,
        esssup_hbar=float(hbar_sizes.max(initial=0.0)),
        esssup_h=float(h_sizes.max(initial=0.0)),
        h_square=h_square,
        condition1=condition1,
        condition2=condition2,
        warnings=tuple(warnings),
    )


def orthogonality_max(
    coeffs: Coefficients,
    path: PathRecord,
    jumps: JumpStream,
    mark_samples: int,
    seed: int,
) -> float:
    largest = 0.0
    indices = np.unique(np.linspace(0, path.times.size - 1, 64).astype(int))
    for k, jump in enumerate(coeffs.jumps):
        if jump.h_bar is None or jump.h is None:
            continue
        marks = [event.mark for event in jumps.events if event.measure == k]
        for n, layer in enumerate(jump.measure.layers):
            if layer.sampler is not None and layer.mass > 0:
                marks.extend(layer.sampler(substream(seed, CONDITION_STREAM, k, n), mark_samples))
        for index in indices:
            t, x = path.times[index], path.left[index]
            for mark in marks:
                product = np.outer(coeffs.h_bar(k, t, mark, x), coeffs.h(k, t, mark, x))
                largest = max(largest, float(np.max(np.abs(product))))
    return largest


def realized_jump_sizes(
    coeffs: Coefficients, path: PathRecord
) -> tuple[np.ndarray, np.ndarray]:
    hbar_sizes, h_sizes = [], []
    for index, event in path.jump_slots:
        x = path.left[index]
        hbar_sizes.append(np.linalg.norm(coeffs.h_bar(event.measure, event.time, event.mark, x)))
        h_sizes.append(np.linalg.norm(coeffs.h(event.measure, event.time, event.mark, x)))
    return np.array(hbar_sizes, dtype=float), np.array(h_sizes, dtype=float)


def h_square_rectangle(coeffs: Coefficients, path: PathRecord) -> float:
    total = 0.0
    for t, x, step in zip(path.times, path.values, path.grid.steps):
        for k, jump in enumerate(coeffs.jumps):
            if jump.h is None:
                continue
            estimate = mark_integral(
                jump.measure,
                lambda z: float(np.sum(coeffs.h(k, t, z, x) ** 2)),
                seed=coeffs.quadrature_seed,
            )
            total += float(estimate.value) * step
    return total


@dataclass(frozen=True)
class TruncatedEstimator:
    """Estimate integrals over marks and [delta, T] on a logarithmic time grid.

    Level j integrates over [T ratio^-(j+1), T] and over the first j+1 layers of every
    measure. Cells are uniform in log-time so that power singularities at t=0 are
    resolved at every level.
    """

    coeffs: Coefficients
    path: PathRecord
    levels: int
    ratio: float
    cells_per_level: int
    min_slope: float
    decay_ratio: float

    @property
    def deltas(self) -> tuple[float, ...]:
        horizon = self.path.grid.horizon
        return tuple(horizon * self.ratio ** -(j + 1) for j in range(self.levels))

    def estimate(self, name: str, kernel: Callable[[np.ndarray, np.ndarray], float]) -> ConditionEstimate:
        horizon = self.path.grid.horizon
        edges = (horizon,) + self.deltas
        max_layers = max((len(jump.measure.layers) for jump in self.coeffs.jumps), default=0)
        layer_counts = tuple(min(j + 1, max_layers) for j in range(self.levels))

        # contributions[j][n]: integral over the j-th log band, layer n only
        contributions = np.zeros((self.levels, max(max_layers, 1)))
        for j in range(self.levels):
            upper, lower = math.log(edges[j]), math.log(edges[j + 1])
            width = (upper - lower) / self.cells_per_level
            for cell in range(self.cells_per_level):
                s = math.exp(lower + (cell + 0.5) * width)
                x = self.path.value_at(s)
                for k, jump in enumerate(self.coeffs.jumps):
                    if jump.h is None:
                        continue
                    for n in range(len(jump.measure.layers)):
                        estimate = mark_integral(
                            jump.measure.layer_measure(n),
                            lambda z: kernel(x, self.coeffs.h(k, s, z, x)),
                            seed=self.coeffs.quadrature_seed,
                        )
                        contributions[j, n] += float(estimate.value) * s * width

        values = []
        for j in range(self.levels):
            values.append(float(np.sum(contributions[: j + 1, : max(layer_counts[j], 1)])))
        divergent, detected_at = detect_divergence(
            values, self.ratio, self.min_slope, self.decay_ratio
        )
        return ConditionEstimate(
            name=name,
            deltas=self.deltas,
            layers=layer_counts,
            values=tuple(values),
            divergent=divergent,
            detected_at=detected_at,
        )


def detect_divergence(
    values: Sequence[float], ratio: float, min_slope: float, decay_ratio: float
) -> tuple[bool, int | None]:
    """Flag sustained growth in log(1/delta) over the deepest truncation levels.

    This is a heuristic: growth counts as divergent when at least three consecutive
    slopes up to the deepest level exceed ``min_slope`` without decaying faster than
    ``decay_ratio`` per level.
    """
    for index, value in enumerate(values):
        if not math.isfinite(value):
            return True, index

    step = math.log(ratio)
    slopes = [(later - earlier) / step for earlier, later in zip(values, values[1:])]
    run = 0
    for j in range(len(slopes) - 1, -1, -1):
        growing = slopes[j] > min_slope
        sustained = j == len(slopes) - 1 or slopes[j + 1] >= decay_ratio * slopes[j]
        if not (growing and sustained):
            break
        run += 1
    if run >= 3:
        return True, len(slopes) - run
    return False, None


def write_path_csv(path: PathRecord, target: Path) -> Path:
    dim = path.values.shape[1]
    flags = path.is_jump
    with target.open("w", encoding="utf-8", newline="") as output:
        writer = csv.writer(output)
        writer.writerow(
            ["t", "is_jump"]
            + [f"x{i + 1}" for i in range(dim)]
            + [f"left{i + 1}" for i in range(dim)]
        )
        for t, jumped, value, left in zip(path.times, flags, path.values, path.left):
            limits = [repr(float(v)) for v in left] if jumped else [""] * dim
            writer.writerow(
                [repr(float(t)), int(jumped)] + [repr(float(v)) for v in value] + limits
            )
    return target
