"""Built-in verification scenarios and the problems they simulate."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable, Mapping

import numpy as np

from itoledger.calculus import TestFunction, cosine, power_norm
from itoledger.drivers import ConfigurationError, atoms, dirac, power_law
from itoledger.lpfield import Field, Grid, LpCoefficients, bump
from itoledger.process import Coefficients, JumpCoefficients


@dataclass(frozen=True)
class Scenario:
    name: str
    rule: str
    description: str
    horizon: float = 1.0
    n_steps: int = 16
    replicas: int = 1
    tolerances: Mapping[str, float] = field(default_factory=dict)
    refinement: Mapping[str, tuple[float, ...]] = field(default_factory=dict)
    params: Mapping[str, Any] = field(default_factory=dict)
    simulates: str | None = "path"


@dataclass(frozen=True)
class PathProblem:
    """A finite-dimensional process with the test functions its ledgers use."""

    name: str
    coeffs: Coefficients
    x0: np.ndarray
    tests: tuple[TestFunction, ...]
    scheme: str = "euler"
    n_wiener: int = 1


@dataclass(frozen=True)
class FieldProblem:
    name: str
    coeffs: LpCoefficients
    psi: Field
    p: float
    scheme: str = "euler"
    fk_form: str = "conservative"
    tests: tuple[Field, ...] = ()


SCENARIOS: dict[str, Scenario] = {
    scenario.name: scenario
    for scenario in (
        Scenario(
            name="pure-jump-exact",
            rule="pathwise-exactness",
            description="finite-activity jumps, Dirac marks, exact between jumps",
            n_steps=16,
            replicas=100,
            tolerances={"residual": 1e-10},
            params={
                "x0": 1.0,
                "h_before": 0.5,
                "h_after": -0.3,
                "switch": 0.5,
                "hbar": 0.25,
                "x0_plane": [2.0, 2.0],
                "h_plane": [0.5, 0.25],
                "hbar_plane": [-0.1, 0.1],
            },
        ),
        Scenario(
            name="ledger-equivalence",
            rule="ledger-equivalence",
            description="bounded state-dependent jumps where both finite-dimensional formulas apply",
            n_steps=32,
            replicas=100,
            tolerances={"absolute": 1e-9},
            params={"x0": 0.5, "drift_rate": -0.5, "sigma": 0.3, "amplitude": 0.5},
        ),
        Scenario(
            name="example1",
            rule="counterexample",
            description="h_t = t^(-1/4) with Dirac marks and phi = x^4",
            n_steps=64,
            replicas=1,
            tolerances={"log_integral": 1e-6, "limit": 1e-6, "log_growth": 1e-8},
            params={
                "exponent": -0.25,
                "delta_ratio": 10.0,
                "delta_levels": 6,
                "truncation_levels": [1.0, 2.0, 4.0, 8.0],
            },
        ),
        Scenario(
            name="compensated-poisson-p2",
            rule="power-moments",
            description="unit-rate compensated Poisson process under the p = 2 power formula",
            n_steps=8,
            replicas=10_000,
            tolerances={"standard_errors": 4.0},
            params={"p": 2.0},
        ),
        Scenario(
            name="diffusion-order",
            rule="diffusion-convergence",
            description="linear drift and diffusion, Euler residual order of the natural formula",
            n_steps=2048,
            replicas=200,
            tolerances={"order_min": 0.35, "order_max": 1.2},
            refinement={"dt": (2.0**-8, 2.0**-9, 2.0**-10, 2.0**-11)},
            params={"x0": 1.0, "mu": 0.05, "sigma": 0.8},
        ),
        Scenario(
            name="lp-jump-p2",
            rule="lp-formula",
            description="pure-jump field with a smooth compactly supported jump, p = 2",
            n_steps=32,
            replicas=20,
            tolerances={"residual": 1e-9, "weak_form": 1e-12},
            params={"half_width": 1.0, "n_cells": 64, "amplitude": 0.3, "p": 2.0},
            simulates="field",
        ),
        Scenario(
            name="lp-full-p4",
            rule="lp-formula",
            description="field with flux, diffusion and jumps under joint (dt, dx) refinement, p = 4",
            horizon=0.5,
            n_steps=2048,
            replicas=16,
            tolerances={"order_min": 1.5, "order_max": 2.6, "scalar_agreement": 1e-12},
            refinement={"dx": (0.0625, 0.03125, 0.015625)},
            params={
                "half_width": 1.0,
                "dt_per_dx4": 4096.0,
                "p": 4.0,
                "flux": 0.5,
                "sigma": 0.5,
                "amplitude": 0.3,
            },
            simulates="field",
        ),
        Scenario(
            name="mollifier-suite",
            rule="mollifier-suite",
            description="discrete mass, epsilon order and summation by parts",
            replicas=100,
            tolerances={
                "mass": 1e-14,
                "order_min": 1.7,
                "order_max": 2.3,
                "summation_by_parts": 1e-12,
            },
            refinement={"eps": (0.2, 0.1, 0.05)},
            params={"half_width": 2.0, "n_cells": 1024, "p": 2.0},
            simulates=None,
        ),
        Scenario(
            name="operator-properties",
            rule="operator-properties",
            description="convexity, Taylor bounds and product identities of I and J",
            replicas=100_000,
            tolerances={"product": 1e-10},
            params={"dim": 3},
            simulates=None,
        ),
    )
}

LP_SCENARIOS = ("lp-jump-p2", "lp-full-p4")


def get_scenario(name: str) -> Scenario:
    try:
        return SCENARIOS[name]
    except KeyError:
        raise ConfigurationError(
            f"unknown scenario {name!r}; expected one of {', '.join(SCENARIOS)}"
        ) from None


def switching(before: float, after: float, switch: float) -> Callable[[float], float]:
    def size(t: float) -> float:
        return before if t < switch else after

    return size


def pure_jump_problems(params: Mapping[str, Any]) -> tuple[PathProblem, PathProblem]:
    size = switching(params["h_before"], params["h_after"], params["switch"])
    hbar = float(params["hbar"])
    line = Coefficients(
        dim=1,
        jumps=(
            JumpCoefficients(
                measure=dirac(1.0),
                h=lambda t, z, x: np.array([size(t) * z]),
                compensator=lambda t, x: np.array([size(t)]),
            ),
            JumpCoefficients(measure=dirac(1.0), h_bar=lambda t, z, x: np.array([hbar * z])),
        ),
        state_independent=True,
    )
    h_plane = np.asarray(params["h_plane"], dtype=float)
    hbar_plane = np.asarray(params["hbar_plane"], dtype=float)
    plane = Coefficients(
        dim=2,
        jumps=(
            JumpCoefficients(
                measure=dirac(1.0),
                h=lambda t, z, x: h_plane * z,
                compensator=lambda t, x: h_plane,
            ),
            JumpCoefficients(measure=dirac(1.0), h_bar=lambda t, z, x: hbar_plane * z),
        ),
        state_independent=True,
    )
    return (
        PathProblem(
            name="line",
            coeffs=line,
            x0=np.array([float(params["x0"])]),
            tests=(power_norm(1, 2), power_norm(1, 4)),
            scheme="exact-between-jumps",
        ),
        PathProblem(
            name="plane",
            coeffs=plane,
            x0=np.asarray(params["x0_plane"], dtype=float),
            tests=(power_norm(2, 3),),
            scheme="exact-between-jumps",
        ),
    )


def equivalence_problem(params: Mapping[str, Any]) -> PathProblem:
    rate, sigma = float(params["drift_rate"]), float(params["sigma"])
    amplitude = float(params["amplitude"])
    coeffs = Coefficients(
        dim=1,
        n_wiener=1,
        drift=lambda t, x: rate * x,
        diffusion=lambda t, x: [[sigma]],
        jumps=(
            JumpCoefficients(
                measure=atoms([0.5, 1.0], [1.0, 0.5]),
                h=lambda t, z, x: amplitude * z * np.sin(x),
            ),
        ),
    )
    return PathProblem(
        name="bounded-jumps",
        coeffs=coeffs,
        x0=np.array([float(params["x0"])]),
        tests=(power_norm(1, 2), cosine(1)),
    )


def example1_problem(params: Mapping[str, Any]) -> PathProblem:
    exponent = float(params["exponent"])

    def size(t: float) -> float:
        return t**exponent if t > 0 else 0.0

    coeffs = Coefficients(
        dim=1,
        jumps=(
            JumpCoefficients(
                measure=dirac(1.0),
                h=lambda t, z, x: np.array([size(t) * z]),
                compensator=lambda t, x: np.array([size(t)]),
            ),
        ),
        state_independent=True,
    )
    return PathProblem(
        name="example1", coeffs=coeffs, x0=np.zeros(1), tests=(power_norm(1, 4),)
    )


def compensated_poisson_problem(params: Mapping[str, Any]) -> PathProblem:
    coeffs = Coefficients(
        dim=1,
        jumps=(
            JumpCoefficients(
                measure=dirac(1.0),
                h=lambda t, z, x: np.array([z]),
                compensator=lambda t, x: np.ones(1),
            ),
        ),
        state_independent=True,
    )
    return PathProblem(
        name="compensated-poisson",
        coeffs=coeffs,
        x0=np.zeros(1),
        tests=(power_norm(1, float(params["p"])),),
    )


def diffusion_problem(params: Mapping[str, Any]) -> PathProblem:
    mu, sigma = float(params["mu"]), float(params["sigma"])
    coeffs = Coefficients(
        dim=1,
        n_wiener=1,
        drift=lambda t, x: mu * x,
        diffusion=lambda t, x: sigma * x,
    )
    return PathProblem(
        name="linear-diffusion",
        coeffs=coeffs,
        x0=np.array([float(params["x0"])]),
        tests=(power_norm(1, 2),),
    )


def wiener_truncation_problem(params: Mapping[str, Any], R: int) -> PathProblem:
    """Additive noise sum_r sigma/r dW^r truncated at R components."""
    sigma = float(params.get("sigma", 0.8))
    weights = sigma / np.arange(1, R + 1)
    coeffs = Coefficients(
        dim=1,
        n_wiener=R,
        diffusion=lambda t, x: weights,
        state_independent=True,
    )
    return PathProblem(
        name=f"wiener-R{R}",
        coeffs=coeffs,
        x0=np.zeros(1),
        tests=(power_norm(1, 2),),
        n_wiener=R,
    )


def layered_jump_problem(params: Mapping[str, Any]) -> PathProblem:
    """Uncompensated small jumps from a power-law measure with finitely many layers."""
    measure = power_law(
        float(params.get("alpha", 0.5)),
        int(params.get("layers", 4)),
        float(params.get("scale", 1.0)),
    )
    coeffs = Coefficients(
        dim=1,
        jumps=(JumpCoefficients(measure=measure, h_bar=lambda t, z, x: np.array([z])),),
        state_independent=True,
    )
    return PathProblem(
        name="layered-jumps", coeffs=coeffs, x0=np.zeros(1), tests=(power_norm(1, 2),)
    )


def lp_jump_problem(params: Mapping[str, Any]) -> FieldProblem:
    grid = Grid(d=1, half_width=float(params["half_width"]), n_cells=int(params["n_cells"]))
    x = grid.coordinates()
    jump = float(params["amplitude"]) * bump(x, 0.2, 0.4)
    compensator = Field(grid, jump, "compensator")
    coeffs = LpCoefficients(
        grid=grid,
        h=lambda t, z: Field(grid, z * jump, "h"),
        measure=dirac(1.0),
        compensator=lambda t: compensator,
    )
    return FieldProblem(
        name="lp-jump",
        coeffs=coeffs,
        psi=Field(grid, bump(x, 0.0, 0.5), "psi"),
        p=float(params["p"]),
        scheme="exact-between-jumps",
        tests=(
            Field(grid, bump(x, 0.0, 0.6), "phi"),
            Field(grid, np.sin(3.0 * x[..., 0]) * bump(x, -0.1, 0.7), "phi"),
        ),
    )


def lp_full_problem(params: Mapping[str, Any], dx: float) -> FieldProblem:
    half_width = float(params["half_width"])
    n_cells = int(round(2.0 * half_width / dx))
    grid = Grid(d=1, half_width=half_width, n_cells=n_cells)
    x = grid.coordinates()
    flux = Field(grid, float(params["flux"]) * bump(x, -0.1, 0.5), "f1")
    noise = Field(grid, float(params["sigma"]) * bump(x, 0.1, 0.5), "g")
    jump = float(params["amplitude"]) * bump(x, 0.2, 0.4)
    compensator = Field(grid, jump, "compensator")
    coeffs = LpCoefficients(
        grid=grid,
        n_wiener=1,
        fk=lambda t, k: flux,
        g=lambda t, r: noise,
        h=lambda t, z: Field(grid, z * jump, "h"),
        measure=dirac(1.0),
        compensator=lambda t: compensator,
    )
    return FieldProblem(
        name=f"lp-full-{n_cells}",
        coeffs=coeffs,
        psi=Field(grid, bump(x, 0.0, 0.5), "psi"),
        p=float(params["p"]),
        fk_form="pointwise",
    )


def lp_steps(params: Mapping[str, Any], horizon: float, dx: float) -> int:
    """Step count with dt proportional to dx^4, so the time error tracks dx^2."""
    return max(1, int(round(horizon / (float(params["dt_per_dx4"]) * dx**4))))
