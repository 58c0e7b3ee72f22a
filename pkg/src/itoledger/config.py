"""Experiment configuration: built-in defaults overlaid with an optional YAML file."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Mapping

import yaml

from itoledger.drivers import ConfigurationError
from itoledger.scenarios import get_scenario

__all__ = [
    "ConfigurationError",
    "ExperimentConfig",
    "config_digest",
    "default_config",
    "load_config",
    "validate_config",
]

KNOWN_KEYS = (
    "scenario",
    "seed",
    "replicas",
    "threads",
    "horizon",
    "n_steps",
    "tolerances",
    "refinement",
    "params",
)
MIN_REFINEMENT_LEVELS = 3


@dataclass(frozen=True)
class ExperimentConfig:
    scenario: str
    seed: int = 0
    replicas: int = 1
    threads: int | None = None
    horizon: float = 1.0
    n_steps: int = 16
    tolerances: Mapping[str, float] = field(default_factory=dict)
    refinement: Mapping[str, tuple[float, ...]] = field(default_factory=dict)
    params: Mapping[str, Any] = field(default_factory=dict)

    def tolerance(self, name: str) -> float:
        try:
            return float(self.tolerances[name])
        except KeyError:
            raise ConfigurationError(
                f"{self.scenario}: tolerances: missing {name!r}"
            ) from None

    def levels(self, axis: str, default: tuple[float, ...] = ()) -> tuple[float, ...]:
        return tuple(self.refinement.get(axis, default))

    def with_overrides(self, **changes: Any) -> ExperimentConfig:
        cleaned = {key: value for key, value in changes.items() if value is not None}
        config = replace(self, **cleaned)
        validate_config(config)
        return config

    def to_dict(self) -> dict[str, Any]:
        data = asdict(self)
        data["refinement"] = {axis: list(levels) for axis, levels in self.refinement.items()}
        return data


def default_config(scenario: str) -> ExperimentConfig:
    defaults = get_scenario(scenario)
    return ExperimentConfig(
        scenario=defaults.name,
        replicas=defaults.replicas,
        horizon=defaults.horizon,
        n_steps=defaults.n_steps,
        tolerances=dict(defaults.tolerances),
        refinement={axis: tuple(levels) for axis, levels in defaults.refinement.items()},
        params=dict(defaults.params),
    )


def load_config(path: Path) -> ExperimentConfig:
    source = str(path)
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise ConfigurationError(f"{source}: config file does not exist") from None
    except OSError as exc:
        raise ConfigurationError(f"{source}: cannot read config: {exc}") from exc
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigurationError(f"{source}: invalid YAML: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigurationError(f"{source}: top level must be a mapping")

    unknown = sorted(set(raw) - set(KNOWN_KEYS))
    if unknown:
        raise ConfigurationError(f"{source}: {unknown[0]}: unknown key")
    if "scenario" not in raw:
        raise ConfigurationError(f"{source}: scenario: required key is missing")

    try:
        base = default_config(str(raw["scenario"]))
    except ConfigurationError as exc:
        raise ConfigurationError(f"{source}: scenario: {exc}") from None

    changes: dict[str, Any] = {}
    for key in ("seed", "replicas", "threads", "n_steps"):
        if key in raw:
            changes[key] = integer(raw[key], source, key)
    if "horizon" in raw:
        changes["horizon"] = number(raw["horizon"], source, "horizon")
    if "tolerances" in raw:
        section = mapping(raw["tolerances"], source, "tolerances")
        tolerances = {
            name: number(value, source, f"tolerances: {name}") for name, value in section.items()
        }
        changes["tolerances"] = {**base.tolerances, **tolerances}
    if "params" in raw:
        changes["params"] = {**base.params, **mapping(raw["params"], source, "params")}
    if "refinement" in raw:
        section = mapping(raw["refinement"], source, "refinement")
        levels = {}
        for axis, values in section.items():
            key = f"refinement: {axis}"
            items = sequence(values, source, key)
            levels[axis] = tuple(number(value, source, key) for value in items)
        changes["refinement"] = {**base.refinement, **levels}

    config = replace(base, **changes)
    validate_config(config, source)
    return config


def validate_config(config: ExperimentConfig, source: str = "<config>") -> None:
    get_scenario(config.scenario)
    if config.replicas < 1:
        raise ConfigurationError(f"{source}: replicas: must be at least 1")
    if config.threads is not None and config.threads < 1:
        raise ConfigurationError(f"{source}: threads: must be at least 1")
    if config.n_steps < 1:
        raise ConfigurationError(f"{source}: n_steps: must be at least 1")
    if not (math.isfinite(config.horizon) and config.horizon > 0):
        raise ConfigurationError(f"{source}: horizon: must be positive")
    for name, value in config.tolerances.items():
        if not float(value) > 0:
            raise ConfigurationError(f"{source}: tolerances: {name}: must be positive")
    for axis, levels in config.refinement.items():
        if len(levels) < MIN_REFINEMENT_LEVELS:
            raise ConfigurationError(
                f"{source}: refinement: {axis}: needs at least "
                f"{MIN_REFINEMENT_LEVELS} levels, got {len(levels)}"
            )
        if any(not level > 0 for level in levels):
            raise ConfigurationError(f"{source}: refinement: {axis}: levels must be positive")


def config_digest(config: ExperimentConfig) -> str:
    canonical = json.dumps(config.to_dict(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def integer(value: Any, source: str, key: str) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigurationError(f"{source}: {key}: expected an integer, got {value!r}")
    return value


def number(value: Any, source: str, key: str) -> float:
    # YAML 1.1 reads 1e-10 without a dot as a string
    if isinstance(value, str):
        try:
            return float(value)
        except ValueError:
            pass
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigurationError(f"{source}: {key}: expected a number, got {value!r}")
    return float(value)


def mapping(value: Any, source: str, key: str) -> dict[str, Any]:
    if not isinstance(value, dict):
        raise ConfigurationError(f"{source}: {key}: expected a mapping")
    return {str(name): item for name, item in value.items()}


def sequence(value: Any, source: str, key: str) -> list[Any]:
    if not isinstance(value, list):
        raise ConfigurationError(f"{source}: {key}: expected a list")
    return value
