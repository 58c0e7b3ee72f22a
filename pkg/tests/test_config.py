"""Tests for experiment configuration loading and the built-in scenarios."""

from pathlib import Path
from textwrap import dedent

import pytest

from itoledger.config import (
    ConfigurationError,
    config_digest,
    default_config,
    load_config,
)
from itoledger.scenarios import SCENARIOS, get_scenario, lp_steps


def write_config(path: Path, text: str) -> Path:
    path.write_text(dedent(text).strip() + "\n", encoding="utf-8")
    return path


def test_every_scenario_has_a_valid_default_config():
    for name in SCENARIOS:
        config = default_config(name)
        assert config.scenario == name
        assert config.tolerances


def test_load_config_overlays_defaults(tmp_path: Path):
    path = write_config(
        tmp_path / "run.yaml",
        """
        scenario: pure-jump-exact
        seed: 7
        replicas: 5
        tolerances:
          residual: 1e-11
        params:
          hbar: 0.5
        """,
    )

    config = load_config(path)

    assert config.seed == 7
    assert config.replicas == 5
    assert config.tolerance("residual") == 1e-11
    assert config.params["hbar"] == 0.5
    assert config.params["h_before"] == 0.5
    assert config.n_steps == 16


def test_load_config_reads_refinement_levels(tmp_path: Path):
    path = write_config(
        tmp_path / "run.yaml",
        """
        scenario: diffusion-order
        refinement:
          dt: [0.01, 0.005, 0.0025]
        """,
    )

    assert load_config(path).levels("dt") == (0.01, 0.005, 0.0025)


@pytest.mark.parametrize(
    "text, message",
    [
        ("seed: 1", "scenario: required key is missing"),
        ("scenario: nope", "unknown scenario 'nope'"),
        ("scenario: example1\ncolour: red", "colour: unknown key"),
        ("scenario: example1\nreplicas: 0", "replicas: must be at least 1"),
        ("scenario: example1\nreplicas: two", "replicas: expected an integer"),
        ("scenario: example1\ntolerances: [1]", "tolerances: expected a mapping"),
        ("scenario: example1\ntolerances:\n  limit: -1", "limit: must be positive"),
        ("scenario: diffusion-order\nrefinement:\n  dt: [0.1, 0.05]", "needs at least 3 levels"),
        ("- just\n- a list", "top level must be a mapping"),
        ("scenario: [unclosed", "invalid YAML"),
    ],
)
def test_load_config_reports_the_offending_key(tmp_path: Path, text: str, message: str):
    path = write_config(tmp_path / "bad.yaml", text)

    with pytest.raises(ConfigurationError, match=message):
        load_config(path)


def test_missing_config_file_is_a_configuration_error(tmp_path: Path):
    with pytest.raises(ConfigurationError, match="does not exist"):
        load_config(tmp_path / "missing.yaml")


def test_missing_tolerance_names_the_scenario():
    with pytest.raises(ConfigurationError, match="example1: tolerances: missing 'residual'"):
        default_config("example1").tolerance("residual")


def test_overrides_ignore_unset_values_and_revalidate():
    config = default_config("example1")

    assert config.with_overrides(seed=None, threads=None) == config
    assert config.with_overrides(seed=4).seed == 4
    with pytest.raises(ConfigurationError, match="threads"):
        config.with_overrides(threads=0)


def test_config_digest_is_stable_and_sensitive():
    config = default_config("lp-jump-p2")

    assert config_digest(config) == config_digest(default_config("lp-jump-p2"))
    assert config_digest(config) != config_digest(config.with_overrides(seed=1))
    assert len(config_digest(config)) == 64


def test_unknown_scenario_lists_known_names():
    with pytest.raises(ConfigurationError, match="pure-jump-exact"):
        get_scenario("missing")


def test_lp_steps_keep_dt_proportional_to_dx4():
    params = get_scenario("lp-full-p4").params

    steps = [lp_steps(params, 0.5, dx) for dx in (0.0625, 0.03125, 0.015625)]

    assert steps == [8, 128, 2048]
