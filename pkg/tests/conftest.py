"""Shared pytest fixtures for itoledger tests."""

from pathlib import Path
from textwrap import dedent

import pytest


# Path fixtures


@pytest.fixture
def project_root() -> Path:
    """Return the project root directory."""
    return Path(__file__).parent.parent


@pytest.fixture
def configs_dir(project_root: Path) -> Path:
    """Return the directory holding the shipped experiment files."""
    return project_root / "configs"


@pytest.fixture
def all_config_files(configs_dir: Path) -> list[Path]:
    """Return every shipped YAML experiment file."""
    return sorted(configs_dir.glob("*.yaml"))


# Config fixtures


@pytest.fixture
def write_config(tmp_path: Path):
    """Return a helper that writes a dedented YAML experiment file under tmp_path."""

    def write(text: str, name: str = "run.yaml") -> Path:
        path = tmp_path / name
        path.write_text(dedent(text).strip() + "\n", encoding="utf-8")
        return path

    return write


@pytest.fixture
def output_dir(tmp_path: Path) -> Path:
    """Return a not-yet-created artifact directory."""
    return tmp_path / "results"
