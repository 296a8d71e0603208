import json
import subprocess
import sys

import pytest

from superlab import config as cf
from superlab import runner
from superlab.cli import main


def test_kernel_output(capsys):
    assert main(["kernel", "--alpha", "1", "--t", "1", "--x", "0"]) == 0
    assert "0.3183099" in capsys.readouterr().out


@pytest.mark.parametrize("alpha,beta,expect", [(2, 0.5, "continuous, eta_c=0.333333"),
                                               (1.2, 0.5, "locally unbounded")])
def test_classify_output(capsys, alpha, beta, expect):
    assert main(["classify", "--alpha", str(alpha), "--beta", str(beta)]) == 0
    assert expect in capsys.readouterr().out


def test_module_entry_point():
    r = subprocess.run([sys.executable, "-m", "superlab", "classify", "--alpha", "2"],
                       capture_output=True, text=True)
    assert r.returncode == 0 and "continuous" in r.stdout


def test_invalid_config_names_field(capsys):
    assert main(["simulate", "--replicas", "0"]) == runner.EXIT_CONFIG
    err = capsys.readouterr().err
    assert "replicas" in err and "minimum of 1" in err


def test_config_errors():
    with pytest.raises(cf.ConfigError) as e:
        cf.resolve("simulate", {"beta": 1.5})
    assert e.value.path == "beta"
    with pytest.raises(cf.ConfigError):
        cf.resolve("simulate", {"bogus": 1})
    with pytest.raises(cf.ConfigError):
        cf.resolve("simulate", {"command": "kernel"})
    assert cf.resolve("simulate", {"step_budget": 1e8})["step_budget"] == 10 ** 8


def test_unused_seed_flag_is_ignored(capsys):
    assert main(["classify", "--seed", "3"]) == 0


def test_budget_exit_code(tmp_path):
    out = tmp_path / "run"
    code = main(["simulate", "--eps", "1e-3", "--step-budget", "10", "--out", str(out)])
    assert code == runner.EXIT_BUDGET
    man = json.loads((out / "manifest.json").read_text())
    assert man["status"] == "budget_exceeded"


def test_manifest_rerun_byte_identical(tmp_path, capsys):
    a = tmp_path / "a"
    b = tmp_path / "b"
    args = ["density", "--eps", "1e-3", "--replicas", "3", "--seed", "4", "--h", "0.125"]
    assert main(args + ["--out", str(a)]) == 0
    assert main(["density", "--config", str(a / "manifest.json"), "--out", str(b)]) == 0
    ma = json.loads((a / "manifest.json").read_text())
    mb = json.loads((b / "manifest.json").read_text())
    assert ma["experiment_id"] == mb["experiment_id"]
    assert ma["outputs"] and ma["outputs"] == mb["outputs"]
    for name in ma["outputs"]:
        assert (a / name).read_bytes() == (b / name).read_bytes()


def test_rerun_replaces_directory_and_report(tmp_path, capsys):
    out = tmp_path / "k"
    assert main(["kernel", "--x", "0", "1", "--out", str(out)]) == 0
    assert main(["kernel", "--x", "0", "--out", str(out)]) == 0
    man = json.loads((out / "manifest.json").read_text())
    assert man["config"]["x"] == [0.0] and man["status"] == "complete"
    assert not list(tmp_path.glob(".k.*"))
    capsys.readouterr()
    assert main(["report", "--out", str(out)]) == 0
    assert "ok" in capsys.readouterr().out
    name = next(iter(man["outputs"]))
    (out / name).write_text("tampered")
    assert main(["report", "--out", str(out)]) == runner.EXIT_FAILED


def test_refuses_to_replace_foreign_directory(tmp_path):
    out = tmp_path / "data"
    out.mkdir()
    (out / "keep.txt").write_text("x")
    assert main(["kernel", "--out", str(out)]) == runner.EXIT_FAILED
    assert (out / "keep.txt").exists()


def test_fmt_round_trips():
    for v in (0.1, 1 / 3, 1e-300, 12345.678):
        assert float(runner.fmt(v)) == v
