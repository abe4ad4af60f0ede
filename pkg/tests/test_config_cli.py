import csv
import json
import subprocess
import sys

import pytest

from rmlosp import cli
from rmlosp.config import CONFIG_DIR, ConfigError, load, parse_config, parse_config_text, serialize
from rmlosp.experiments import PRESETS, preset


@pytest.mark.parametrize("name", PRESETS)
def test_shipped_file_equals_preset(name):
    assert parse_config(CONFIG_DIR / f"{name}.yaml") == preset(name)


@pytest.mark.parametrize("name", PRESETS)
def test_round_trip(name):
    text = serialize(preset(name))
    assert serialize(parse_config_text(text)) == text


def _edit(text, old, new):
    assert old in text
    return text.replace(old, new, 1)


def test_config_errors_name_the_key():
    text = serialize(preset("sim1a"))
    without_dt = "\n".join(ln for ln in text.splitlines() if not ln.startswith("dt:"))
    with pytest.raises(ConfigError, match="missing required key dt"):
        parse_config_text(without_dt)
    with pytest.raises(ConfigError, match=r"unknown key stepz at line \d+"):
        parse_config_text(_edit(text, "steps:", "stepz:"))
    bad = _edit(text, "seed: 1", "seed: one")
    line = bad.splitlines().index("seed: one") + 1
    with pytest.raises(ConfigError, match=f"seed: expected an integer.*line {line}"):
        parse_config_text(bad)
    with pytest.raises(ConfigError, match="learn_o: expected true/false"):
        parse_config_text(_edit(text, "learn_o: true", "learn_o: 3"))
    with pytest.raises(ConfigError, match="unknown preset"):
        load("sim9")
    with pytest.raises(ConfigError, match="does not exist"):
        load("nowhere.yaml")


def _run(tmp_path, *argv):
    return cli.main(list(argv))


def _manifest(d):
    return json.loads((d / "manifest.json").read_text())


def test_run_writes_logs_and_complete_manifest(tmp_path):
    out = tmp_path / "a"
    assert _run(tmp_path, "run", "sim1a", "--seed", "7", "--steps", "60", "--stride", "20", "--out", str(out),
                "--resolution", "8", "--emit-plots") == 0
    man = _manifest(out)
    assert man["status"] == "complete" and man["seed"] == 7 and "wall_clock_s" in man
    written = {p.name for p in out.iterdir()} - {"manifest.json"}
    assert {"log.csv", "summary.csv"} <= written
    assert written | {"manifest.json"} == set(man["files"])
    with open(out / "log.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0][:2] == ["step", "t"] and len(rows) == 1 + 60 // 20 + 1
    # never overwrite silently
    assert _run(tmp_path, "run", "sim1a", "--steps", "10", "--out", str(out)) == 1
    assert _run(tmp_path, "run", "sim1a", "--steps", "10", "--stride", "5", "--out", str(out), "--force") == 0


def test_exit_codes_for_usage_errors(tmp_path, capsys):
    assert _run(tmp_path, "run", "sim9", "--out", str(tmp_path / "x")) == 1
    assert "unknown preset" in capsys.readouterr().err
    assert _run(tmp_path, "frobnicate") == 1
    assert _run(tmp_path, "run", "sim1a", "--steps", "0", "--out", str(tmp_path / "y")) == 1


def test_numerical_failure_exit_code(tmp_path):
    cfg = tmp_path / "bad.yaml"
    # a vanishing noise variance makes the innovation covariance singular
    text = serialize(preset("sim2")).replace("tau2_1: 0.01", "tau2_1: 0.0")
    cfg.write_text(text)
    assert _run(tmp_path, "simulate", str(cfg), "--steps", "5", "--out", str(tmp_path / "z")) in (1, 2)


def test_validate_schedules_warns_for_constant_rates(tmp_path, capsys):
    assert _run(tmp_path, "validate-schedules", "sim3", "--out", str(tmp_path / "v")) == 0
    assert "tracking mode" in capsys.readouterr().out


def test_grad_check_sim1a_passes(tmp_path):
    out = tmp_path / "g"
    assert _run(tmp_path, "grad-check", "sim1a", "--out", str(out)) == 0
    with open(out / "grad_check.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert rows and all(r["passed"] == "1" for r in rows)


def test_console_script_entry(tmp_path):
    r = subprocess.run([sys.executable, "-m", "rmlosp.cli", "--version"], capture_output=True, text=True)
    assert r.returncode == 0 and "rmlosp" in r.stdout
