"""Reproducible Wiener increments and layered Poisson random measures."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np


logger = logging.getLogger(__name__)

# Substream tags for np.random.SeedSequence spawn keys. Each consumer of randomness owns
# one tag so that adding a layer, a replica or a component never shifts another stream.
WIENER_STREAM = 1
BRIDGE_STREAM = 2
JUMP_STREAM = 3
QUADRATURE_STREAM = 4
CONDITION_STREAM = 5
DEFAULT_QUADRATURE_SAMPLES = 4096

Sampler = Callable[[np.random.Generator, int], np.ndarray]
Functional = Callable[[Callable[[Any], Any]], Any]


class ConfigurationError(ValueError):
    """Raised when drivers, coefficients or experiments are configured inconsistently."""


class GridError(ConfigurationError):
    """Raised for non-increasing time grids or zero-length steps."""


class UnsupportedMeasureError(ConfigurationError):
    """Raised when a mark integral has neither an analytic form nor a sampler."""


def substream(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=key))


def frozen_array(values: Any, dtype: Any = float) -> np.ndarray:
    array = np.array(values, dtype=dtype)
    array.setflags(write=False)
    return array


@dataclass(frozen=True)
class TimeGrid:
    horizon: float
    n_steps: int
    points: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(self, "points", frozen_array(self.points))
        validate_grid(self)

    @classmethod
    def uniform(cls, horizon: float, n_steps: int) -> TimeGrid:
        if n_steps < 1:
            raise GridError(f"time grid needs at least one step, got {n_steps}")
        if not horizon > 0:
            raise GridError(f"time horizon must be positive, got {horizon}")
        points = np.linspace(0.0, horizon, n_steps + 1)
        points[-1] = horizon
        return cls(horizon=horizon, n_steps=n_steps, points=points)

    @property
    def steps(self) -> np.ndarray:
        return np.diff(self.points)

    def merged(self, times: Sequence[float] | np.ndarray) -> TimeGrid:
        extra = np.asarray(times, dtype=float)
        if extra.size == 0:
            return self
        return TimeGrid(
            horizon=self.horizon,
            n_steps=self.n_steps,
            points=np.union1d(self.points, extra),
        )

    def index_of(self, time: float) -> int:
        index = int(np.searchsorted(self.points, time))
        if index >= len(self.points) or self.points[index] != time:
            raise GridError(f"time {time!r} is not a grid point")
        return index


def validate_grid(grid: TimeGrid) -> None:
    points = grid.points
    if points.ndim != 1 or points.size < 2:
        raise GridError("time grid must contain at least the points 0 and T")
    if points[0] != 0.0 or points[-1] != grid.horizon:
        raise GridError(
            f"time grid must start at 0 and end at T={grid.horizon}, "
            f"got [{points[0]}, {points[-1]}]"
        )
    if not np.all(np.isfinite(points)):
        raise GridError("time grid contains non-finite points")
    steps = np.diff(points)
    if np.any(steps <= 0):
        first = int(np.flatnonzero(steps <= 0)[0])
        raise GridError(f"zero-length or negative step at t={points[first]}")


@dataclass(frozen=True)
class WienerBasis:
    """Independent Brownian increments of R components on a time grid.

    Component r of replica i is drawn from its own substream, so truncating the sequence
    at a different R leaves the shared components untouched.
    """

    grid: TimeGrid
    n_components: int
    seed: int
    increments: np.ndarray
    replica: int = 0
    tail_bound: float | None = None

    def refined(self, points: np.ndarray) -> np.ndarray:
        """Return increments on a superset of the grid points via the Brownian bridge."""
        base = self.grid.points
        points = np.asarray(points, dtype=float)
        if not np.all(np.isin(base, points)):
            raise GridError("refinement points must contain every base grid point")
        if points.size == base.size:
            return np.array(self.increments)

        rows: list[np.ndarray] = []
        positions = np.searchsorted(points, base)
        for step in range(base.size - 1):
            start, stop = positions[step], positions[step + 1]
            interior = points[start + 1 : stop]
            if interior.size == 0:
                rows.append(self.increments[step])
                continue
            rows.extend(
                bridge_split(
                    self.increments[step],
                    base[step],
                    base[step + 1],
                    interior,
                    substream(self.seed, BRIDGE_STREAM, self.replica, step),
                )
            )
        return np.array(rows).reshape(points.size - 1, self.n_components)

    def coarsened(self, factor: int) -> WienerBasis:
        if factor < 1 or self.grid.n_steps % factor:
            raise GridError(
                f"cannot coarsen {self.grid.n_steps} steps by a factor of {factor}"
            )
        increments = self.increments.reshape(-1, factor, self.n_components).sum(axis=1)
        return WienerBasis(
            grid=TimeGrid.uniform(self.grid.horizon, self.grid.n_steps // factor),
            n_components=self.n_components,
            seed=self.seed,
            increments=frozen_array(increments),
            replica=self.replica,
            tail_bound=self.tail_bound,
        )


def bridge_split(
    increment: np.ndarray,
    start: float,
    stop: float,
    interior: np.ndarray,
    rng: np.random.Generator,
) -> list[np.ndarray]:
    remaining = np.array(increment, dtype=float)
    normals = rng.standard_normal((interior.size, remaining.size))
    current = start
    pieces = []
    for time, normal in zip(interior, normals):
        span = stop - current
        mean = (time - current) / span * remaining
        std = math.sqrt((time - current) * (stop - time) / span)
        piece = mean + std * normal
        pieces.append(piece)
        remaining = remaining - piece
        current = time
    pieces.append(remaining)
    return pieces


def sample_wiener(
    grid: TimeGrid,
    R: int,
    seed: int,
    *,
    replica: int = 0,
    tail_bound: float | None = None,
) -> WienerBasis:
    validate_grid(grid)
    if R < 1:
        raise ConfigurationError(f"Wiener truncation needs R >= 1, got {R}")
    scale = np.sqrt(grid.steps)
    columns = [
        substream(seed, WIENER_STREAM, replica, component).standard_normal(scale.size)
        for component in range(R)
    ]
    increments = np.column_stack(columns) * scale[:, None]
    return WienerBasis(
        grid=grid,
        n_components=R,
        seed=seed,
        increments=frozen_array(increments),
        replica=replica,
        tail_bound=tail_bound,
    )


@dataclass(frozen=True)
class MarkLayer:
    mass: float
    sampler: Sampler | None = None
    integral: Functional | None = None
    label: str = ""


@dataclass(frozen=True)
class MarkMeasure:
    """A sigma-finite mark measure given as disjoint layers of finite mass."""

    layers: tuple[MarkLayer, ...]
    integral: Functional | None = None
    name: str = ""

    def __post_init__(self) -> None:
        object.__setattr__(self, "layers", tuple(self.layers))

    @property
    def total_mass(self) -> float:
        return float(sum(layer.mass for layer in self.layers))

    def layer_measure(self, index: int) -> MarkMeasure:
        layer = self.layers[index]
        return MarkMeasure(layers=(layer,), integral=layer.integral, name=self.name)


def dirac(point: float | Sequence[float], mass: float = 1.0) -> MarkMeasure:
    atom = np.asarray(point, dtype=float)
    value = float(atom) if atom.ndim == 0 else atom

    def sample(rng: np.random.Generator, count: int) -> np.ndarray:
        return np.broadcast_to(atom, (count, *atom.shape)).copy()

    def integrate(integrand: Callable[[Any], Any]) -> Any:
        return mass * np.asarray(integrand(value), dtype=float)

    layer = MarkLayer(mass=mass, sampler=sample, integral=integrate, label=f"dirac({value})")
    return MarkMeasure(layers=(layer,), integral=integrate, name=layer.label)


def atoms(points: Sequence[float], weights: Sequence[float]) -> MarkMeasure:
    values = np.asarray(points, dtype=float)
    masses = np.asarray(weights, dtype=float)
    if values.shape[0] != masses.shape[0]:
        raise ConfigurationError("atoms needs one weight per point")
    mass = float(masses.sum())

    def sample(rng: np.random.Generator, count: int) -> np.ndarray:
        return values[rng.choice(values.shape[0], size=count, p=masses / mass)]

    def integrate(integrand: Callable[[Any], Any]) -> Any:
        return sum(
            weight * np.asarray(integrand(point), dtype=float)
            for point, weight in zip(values, masses)
        )

    layer = MarkLayer(mass=mass, sampler=sample, integral=integrate, label="atoms")
    return MarkMeasure(layers=(layer,), integral=integrate, name="atoms")


def uniform(low: float, high: float, mass: float = 1.0) -> MarkMeasure:
    if not high > low:
        raise ConfigurationError(f"uniform marks need low < high, got [{low}, {high}]")

    def sample(rng: np.random.Generator, count: int) -> np.ndarray:
        return rng.uniform(low, high, size=count)

    layer = MarkLayer(mass=mass, sampler=sample, label=f"uniform[{low}, {high}]")
    return MarkMeasure(layers=(layer,), name=layer.label)


def power_law(alpha: float, n_layers: int, scale: float = 1.0) -> MarkMeasure:
    """Layers of z^(-1-alpha) dz on dyadic shells [scale 2^-(n+1), scale 2^-n)."""
    if not alpha > 0:
        raise ConfigurationError(f"power-law index must be positive, got {alpha}")
    layers = []
    for n in range(n_layers):
        low, high = scale * 2.0 ** -(n + 1), scale * 2.0**-n
        top, bottom = low**-alpha, high**-alpha
        layers.append(
            MarkLayer(
                mass=(top - bottom) / alpha,
                sampler=inverse_power_sampler(alpha, top, bottom),
                label=f"shell {n}",
            )
        )
    return MarkMeasure(layers=tuple(layers), name=f"power-law({alpha})")


def inverse_power_sampler(alpha: float, top: float, bottom: float) -> Sampler:
    def sample(rng: np.random.Generator, count: int) -> np.ndarray:
        return (top - rng.random(count) * (top - bottom)) ** (-1.0 / alpha)

    return sample


@dataclass(frozen=True)
class QuadratureEstimate:
    value: Any
    stderr: float
    method: str


def mark_integral(
    measure: MarkMeasure,
    integrand: Callable[[Any], Any],
    *,
    n_layers: int | None = None,
    n_samples: int = DEFAULT_QUADRATURE_SAMPLES,
    seed: int = 0,
) -> QuadratureEstimate:
    count = len(measure.layers) if n_layers is None else n_layers
    if count > len(measure.layers):
        raise ConfigurationError(
            f"requested {count} layers but the measure has {len(measure.layers)}"
        )
    if measure.integral is not None and count == len(measure.layers):
        return QuadratureEstimate(measure.integral(integrand), 0.0, "analytic")

    value: Any = 0.0
    variance = 0.0
    method = "analytic"
    for index, layer in enumerate(measure.layers[:count]):
        if layer.mass == 0.0:
            continue
        if layer.integral is not None:
            value = value + np.asarray(layer.integral(integrand), dtype=float)
            continue
        if layer.sampler is None:
            raise UnsupportedMeasureError(
                f"layer {index} of {measure.name or 'measure'} has neither an "
                "analytic integral nor a sampler"
            )
        method = "monte-carlo"
        marks = layer.sampler(substream(seed, QUADRATURE_STREAM, index), n_samples)
        samples = np.array([np.asarray(integrand(mark), dtype=float) for mark in marks])
        value = value + layer.mass * samples.mean(axis=0)
        spread = np.max(np.atleast_1d(samples.var(axis=0)))
        variance += layer.mass**2 * float(spread) / n_samples
    return QuadratureEstimate(value, math.sqrt(variance), method)


@dataclass(frozen=True)
class JumpEvent:
    time: float
    mark: Any
    measure: int
    layer: int


@dataclass(frozen=True)
class JumpStream:
    events: tuple[JumpEvent, ...]
    horizon: float
    warnings: tuple[str, ...] = field(default=())

    @property
    def times(self) -> np.ndarray:
        return np.array([event.time for event in self.events], dtype=float)

    def restricted(self, n_layers: int) -> JumpStream:
        kept = tuple(event for event in self.events if event.layer < n_layers)
        return JumpStream(
            events=kept,
            horizon=self.horizon,
            warnings=tuple(simultaneous_jump_warnings(kept)),
        )


def sample_jumps(
    measure: MarkMeasure | Sequence[MarkMeasure],
    T: float,
    n_layers: int | None,
    seed: int,
    *,
    replica: int = 0,
) -> JumpStream:
    measures = (measure,) if isinstance(measure, MarkMeasure) else tuple(measure)
    if not T > 0:
        raise ConfigurationError(f"jump horizon must be positive, got {T}")

    events: list[JumpEvent] = []
    for k, current in enumerate(measures):
        count = len(current.layers) if n_layers is None else n_layers
        if count > len(current.layers):
            raise ConfigurationError(
                f"measure {k} offers {len(current.layers)} layers, {count} requested"
            )
        for n, layer in enumerate(current.layers[:count]):
            if not math.isfinite(layer.mass) or layer.mass < 0:
                raise ConfigurationError(
                    f"measure {k} layer {n} has invalid mass {layer.mass!r}"
                )
            if layer.mass == 0.0:
                continue
            if layer.sampler is None:
                raise UnsupportedMeasureError(f"measure {k} layer {n} has no sampler")
            rng = substream(seed, JUMP_STREAM, replica, k, n)
            size = int(rng.poisson(layer.mass * T))
            times = T * (1.0 - rng.random(size))
            marks = layer.sampler(rng, size)
            events.extend(
                JumpEvent(time=float(time), mark=mark, measure=k, layer=n)
                for time, mark in zip(times, marks)
            )

    events.sort(key=lambda event: (event.time, event.measure))
    warnings = tuple(simultaneous_jump_warnings(events))
    for warning in warnings:
        logger.warning(warning)
    return JumpStream(events=tuple(events), horizon=T, warnings=warnings)


def simultaneous_jump_warnings(events: Sequence[JumpEvent]) -> list[str]:
    return [
        f"simultaneous jumps at t={later.time!r} from measures "
        f"{earlier.measure} and {later.measure}"
        for earlier, later in zip(events, events[1:])
        if earlier.time == later.time
    ]


@dataclass(frozen=True)
class Drivers:
    wiener: WienerBasis
    jumps: JumpStream


def sample_drivers(
    grid: TimeGrid,
    R: int,
    measures: Sequence[MarkMeasure],
    seed: int,
    *,
    n_layers: int | None = None,
    replica: int = 0,
) -> Drivers:
    wiener = sample_wiener(grid, R, seed, replica=replica)
    if measures:
        jumps = sample_jumps(measures, grid.horizon, n_layers, seed, replica=replica)
    else:
        jumps = JumpStream(events=(), horizon=grid.horizon)
    return Drivers(wiener=wiener, jumps=jumps)


def format_mark(mark: Any) -> str:
    values = np.atleast_1d(np.asarray(mark, dtype=float))
    return " ".join(repr(float(value)) for value in values)


def write_stream_csv(stream: JumpStream, path: Path) -> Path:
    with path.open("w", encoding="utf-8", newline="") as output:
        writer = csv.writer(output)
        writer.writerow(["time", "mark", "measure_k", "layer_n"])
        for event in stream.events:
            writer.writerow(
                [repr(event.time), format_mark(event.mark), event.measure, event.layer]
            )
    return path
