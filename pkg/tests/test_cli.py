"""Tests for the itoledger command line."""

import json
from pathlib import Path

import pytest

from itoledger.cli import OUTPUT_ENV, main, parse_args
from itoledger.config import load_config


def test_verify_writes_report_and_exits_zero(write_config, output_dir: Path, capsys):
    config = write_config(
        """
        scenario: pure-jump-exact
        replicas: 2
        """
    )

    code = main(["verify", "--config", str(config), "--output", str(output_dir)])

    out = capsys.readouterr().out
    assert code == 0
    assert out.startswith("itoledger: pure-jump-exact: PASS")
    report = json.loads((output_dir / "report.json").read_text(encoding="utf-8"))
    assert report["replicas"] == 2
    assert report["passed"] is True


def test_missing_config_exits_two_without_writing(tmp_path: Path, output_dir: Path, capsys):
    code = main(
        ["verify", "--config", str(tmp_path / "missing.yaml"), "--output", str(output_dir)]
    )

    err = capsys.readouterr().err
    assert code == 2
    assert err.startswith("itoledger: error:")
    assert "does not exist" in err
    assert not output_dir.exists()


def test_scenario_must_match_the_config_file(write_config, output_dir: Path, capsys):
    config = write_config("scenario: pure-jump-exact")

    code = main(
        [
            "verify",
            "--config",
            str(config),
            "--scenario",
            "example1",
            "--output",
            str(output_dir),
        ]
    )

    assert code == 2
    assert "conflicts with" in capsys.readouterr().err


def test_seed_override_reaches_the_report(write_config, output_dir: Path):
    config = write_config("scenario: pure-jump-exact\nreplicas: 1")

    main(["verify", "--config", str(config), "--seed", "42", "--output", str(output_dir)])

    report = json.loads((output_dir / "report.json").read_text(encoding="utf-8"))
    assert report["seed"] == 42


def test_output_defaults_to_the_environment(
    write_config, tmp_path: Path, monkeypatch: pytest.MonkeyPatch
):
    config = write_config("scenario: pure-jump-exact\nreplicas: 1")
    monkeypatch.setenv(OUTPUT_ENV, str(tmp_path / "from-env"))

    assert main(["verify", "--config", str(config)]) == 0

    assert (tmp_path / "from-env" / "report.json").exists()


def test_report_command_exit_code_follows_the_verdict(tmp_path: Path, capsys):
    passing = {
        "scenario": "pure-jump-exact",
        "config_digest": "a" * 64,
        "replicas": 1,
        "rules": [{"rule": "pathwise-exactness", "passed": True, "message": "ok"}],
        "passed": True,
    }
    failing = {
        **passing,
        "rules": [{"rule": "pathwise-exactness", "passed": False, "message": "too large"}],
        "passed": False,
    }
    (tmp_path / "pass.json").write_text(json.dumps(passing), encoding="utf-8")
    (tmp_path / "fail.json").write_text(json.dumps(failing), encoding="utf-8")

    assert main(["report", str(tmp_path / "pass.json")]) == 0
    assert main(["report", str(tmp_path / "fail.json")]) == 1

    out = capsys.readouterr().out
    assert "pathwise-exactness: FAILED: too large" in out


def test_report_command_rejects_other_json(tmp_path: Path, capsys):
    (tmp_path / "other.json").write_text("[1, 2]", encoding="utf-8")

    assert main(["report", str(tmp_path / "other.json")]) == 2
    assert "not a verification report" in capsys.readouterr().err


def test_example1_prints_the_table(output_dir: Path, capsys):
    code = main(["example1", "--delta-levels", "4", "--output", str(output_dir)])

    out = capsys.readouterr().out
    assert code == 0
    assert out.splitlines()[0].split() == ["delta", "c1", "c2", "c3"]
    assert len(out.splitlines()) == 6
    assert "c1 -> 2.00000" in out
    assert (output_dir / "example1.csv").exists()


def test_lp_verify_rejects_finite_dimensional_scenarios(output_dir: Path, capsys):
    code = main(["lp-verify", "--scenario", "pure-jump-exact", "--output", str(output_dir)])

    assert code == 2
    assert "lp-verify runs lp-jump-p2, lp-full-p4" in capsys.readouterr().err


def test_study_writes_one_row_per_level(write_config, output_dir: Path, capsys):
    config = write_config(
        """
        scenario: pure-jump-exact
        replicas: 5
        refinement:
          layers: [1, 2, 3, 4]
        """
    )

    code = main(
        ["study", "--axis", "layers", "--config", str(config), "--output", str(output_dir)]
    )

    assert code == 0
    assert "status floor" in capsys.readouterr().out
    rows = (output_dir / "study.csv").read_text(encoding="utf-8").splitlines()
    assert rows[0] == "layers,residual,standard_error"
    assert len(rows) == 5


def test_simulate_refuses_scenarios_without_paths(output_dir: Path, capsys):
    code = main(["simulate", "--scenario", "operator-properties", "--output", str(output_dir)])

    assert code == 2
    assert "does not simulate" in capsys.readouterr().err


def test_study_requires_an_axis():
    with pytest.raises(SystemExit):
        parse_args(["study"])


def test_shipped_configs_load(all_config_files: list[Path]):
    assert all_config_files
    for path in all_config_files:
        assert load_config(path).scenario in path.stem
