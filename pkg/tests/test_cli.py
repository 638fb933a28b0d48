import json

import numpy as np
import pytest

from evdispatch import cli
from evdispatch.cli import ConfigError, Experiment, load_config, main
from evdispatch.demo import write_demo


@pytest.fixture(scope="module")
def demo_dir(tmp_path_factory):
    directory = tmp_path_factory.mktemp("demo")
    write_demo(directory)
    return directory


def test_make_demo_writes_fixture(tmp_path):
    rc = main(["make-demo", str(tmp_path / "d")])
    assert rc == 0
    for name in ("network.json", "prices.csv", "sessions.csv", "config.json"):
        assert (tmp_path / "d" / name).exists()


def test_load_config_errors(tmp_path):
    with pytest.raises(ConfigError, match="cannot read"):
        load_config(tmp_path / "missing.json")
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(ConfigError, match="valid JSON"):
        load_config(bad)
    empty = tmp_path / "empty.json"
    empty.write_text("{}")
    with pytest.raises(ConfigError, match="network"):
        load_config(empty)


def test_missing_network_file_exits_2(tmp_path):
    cfg = tmp_path / "config.json"
    cfg.write_text(json.dumps({"network": "nope.json", "prices": "nope.csv"}))
    rc = main(["run", "--config", str(cfg), "--scenarios", "S0",
               "--out", str(tmp_path / "out")])
    assert rc == 2


def test_experiment_loads_demo(demo_dir):
    exp = Experiment(load_config(demo_dir / "config.json"))
    assert exp.net.n_bus == 13
    assert exp.net.transformer.rated_va == 400e3
    assert len(exp.points) == 8
    assert len(exp.sessions) == 16
    assert exp.prices.shape == (exp.net.horizon,)
    assert exp.tariff.envelopes.shape == (exp.net.horizon, 3)


def test_scenario_defaults_cover_modes():
    assert cli.SCENARIO_DEFAULTS["S0"]["mode"] == "uncontrolled"
    assert cli.SCENARIO_DEFAULTS["S1"]["tariff_mode"] == "day_ahead"
    assert "II" in cli.SCENARIO_DEFAULTS["S2"]["objective"]
    assert cli.SCENARIO_DEFAULTS["S3"]["v2g"] is False
    assert "III" in cli.SCENARIO_DEFAULTS["S4"]["objective"]
    assert cli.SCENARIO_DEFAULTS["S4"]["constraint_set"] == "transformer+pf"


def test_run_single_scenario_writes_reports(demo_dir, tmp_path):
    out = tmp_path / "out"
    rc = main(["run", "--config", str(demo_dir / "config.json"),
               "--scenarios", "S0", "--out", str(out)])
    assert rc == 0
    assert (out / "metrics.csv").exists()
    assert (out / "violations.csv").exists()
    assert (out / "trace_S0.csv").exists()
    trace = np.loadtxt(out / "trace_S0.csv", delimiter=",", skiprows=1)
    assert trace.shape == (192, 2)


def test_unknown_session_point_rejected(demo_dir, tmp_path):
    cfg = json.loads((demo_dir / "config.json").read_text())
    cfg["points"] = cfg["points"][:1]
    cfg["network"] = str(demo_dir / "network.json")
    cfg["prices"] = str(demo_dir / "prices.csv")
    cfg["sessions"] = str(demo_dir / "sessions.csv")
    path = tmp_path / "config.json"
    path.write_text(json.dumps(cfg))
    with pytest.raises(ConfigError, match="unknown charging point"):
        Experiment(load_config(path))
