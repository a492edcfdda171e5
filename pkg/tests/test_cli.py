import json
from pathlib import Path

import pytest

from app.cli import EXIT_DIVERGED, EXIT_FAILED, EXIT_INVALID, EXIT_OK, build_parser, load_config, main
from app.controllers.experiment_controller import experiment_controller


def write_config(path, text):
    path.write_text(text, encoding="utf-8")
    return path


@pytest.fixture
def identity_config(tmp_output):
    return write_config(tmp_output / "identity.toml", 'kind = "identity-suite"\nseed = 1\nd = 2\nsamples = 4\n')


def test_load_config_applies_overrides(identity_config, tmp_output):
    config = load_config(identity_config, seed=9, out=str(tmp_output / "elsewhere"))
    assert config.seed == 9
    assert config.output_dir == str(tmp_output / "elsewhere")
    assert config.kind.value == "identity-suite"


def test_parser_requires_a_command():
    with pytest.raises(SystemExit):
        build_parser().parse_args([])


def test_run_writes_artifacts(identity_config, tmp_output, capsys):
    out = tmp_output / "run"
    assert main(["run", str(identity_config), "--out", str(out), "--seed", "7"]) == EXIT_OK
    assert '"status": "ok"' in capsys.readouterr().out
    written = json.loads((out / "manifest.json").read_text(encoding="utf-8"))
    assert written["seed"] == 7
    assert (out / "identity_suite.csv").read_text(encoding="utf-8").startswith("identity,passed,total")


def test_quiet_run_skips_the_summary(identity_config, tmp_output, capsys):
    assert main(["run", str(identity_config), "--out", str(tmp_output / "q"), "--quiet"]) == EXIT_OK
    assert '"status"' not in capsys.readouterr().out


def test_missing_file_is_invalid(tmp_output):
    assert main(["run", str(tmp_output / "absent.toml"), "--quiet"]) == EXIT_INVALID


def test_malformed_toml_is_invalid(tmp_output):
    path = write_config(tmp_output / "bad.toml", "kind = \n")
    assert main(["run", str(path), "--quiet"]) == EXIT_INVALID


@pytest.mark.parametrize("text", [
    'kind = "reconstruct"\nseed = 1\n',
    'kind = "walsh-check"\nseed = 1\nN = 12\nM = 4\n',
    'kind = "teleport"\nseed = 1\n',
    'kind = "identity-suite"\nseed = -1\n',
])
def test_validation_errors_are_invalid(tmp_output, capsys, text):
    path = write_config(tmp_output / "invalid.toml", text)
    assert main(["run", str(path), "--quiet"]) == EXIT_INVALID
    assert "Invalid config" in capsys.readouterr().err


def test_lab_errors_are_invalid(tmp_output, capsys):
    path = write_config(tmp_output / "wavelet.toml",
                        'kind = "walsh-check"\nseed = 1\nN = 16\nM = 4\n[wavelet]\nfamily = "coif9"\n')
    assert main(["run", str(path), "--out", str(tmp_output / "w"), "--quiet"]) == EXIT_INVALID
    assert "InvalidArgumentError" in capsys.readouterr().err


def test_divergence_exit_code(tmp_output):
    path = write_config(tmp_output / "spde.toml",
                        'kind = "spde-solve"\nseed = 1\nN = 16\nM = 4\n[spde]\nmax_iter = 1\n')
    out = tmp_output / "diverged"
    assert main(["run", str(path), "--out", str(out), "--quiet"]) == EXIT_DIVERGED
    assert json.loads((out / "manifest.json").read_text(encoding="utf-8"))["status"] == "diverged"


CONFIGS = sorted((Path(__file__).resolve().parents[1] / "configs").glob("*.toml"))


def test_every_experiment_kind_has_a_config():
    kinds = {load_config(path).kind.value for path in CONFIGS}
    assert kinds == set(experiment_controller.get_experiment_kinds())


@pytest.mark.parametrize("path", CONFIGS, ids=lambda p: p.stem)
def test_shipped_configs_validate(path, tmp_output):
    config = load_config(path, out=str(tmp_output / path.stem))
    assert config.seed >= 0
    assert config.output_dir == str(tmp_output / path.stem)


def test_young_check_config_runs(tmp_output, capsys):
    path = next(p for p in CONFIGS if p.stem == "young_check")
    out = tmp_output / "young"
    assert main(["run", str(path), "--out", str(out)]) == EXIT_OK
    assert '"status": "ok"' in capsys.readouterr().out
    assert (out / "young_check.csv").read_text(encoding="utf-8").startswith("N,value,error_vs_oracle")


def test_failed_check_exit_code(tmp_output):
    path = write_config(tmp_output / "young.toml",
                        'kind = "young-check"\nseed = 1\nN = 16\n[spde]\ndriver = "smooth_poly"\n')
    assert main(["run", str(path), "--out", str(tmp_output / "f"), "--quiet"]) == EXIT_FAILED
