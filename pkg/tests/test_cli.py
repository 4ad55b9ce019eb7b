import json

import numpy as np
import pytest

from etcdata import cli, experiment
from etcdata.synthesis import Controller
from etcdata.trigger import TriggerPolicy


def write(tmp_path, obj, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(obj) if not isinstance(obj, str) else obj)
    return str(p)


@pytest.fixture(scope="module")
def poly_out(tmp_path_factory):
    out = tmp_path_factory.mktemp("poly")
    args = ["--config", "poly_khalil", "--out", str(out)]
    assert cli.main(["collect", *args]) == 0
    assert cli.main(["synth", *args]) == 0
    assert cli.main(["trigger", *args, "--trigger", "state"]) == 0
    assert cli.main(["trigger", *args, "--trigger", "library"]) == 0
    return out


def test_collect_writes_ten_columns(poly_out):
    D = experiment.load_bundle(poly_out / "data")
    assert D.T == 10 and D.X0.shape == (2, 10) and D.Z0.shape == (6, 10)


def test_synth_outputs(poly_out):
    ctrl = Controller.load(poly_out / "controller.json")
    rep = json.loads((poly_out / "synthesis_report.json").read_text())
    assert ctrl.K.shape == (1, 6)
    assert rep["max_real_eig_X1G1"] < -1e-6


def test_trigger_outputs(poly_out):
    s = TriggerPolicy.load(poly_out / "policy_state.json")
    lib = TriggerPolicy.load(poly_out / "policy_library.json")
    assert s.sigma > 0 and lib.eta == 0.1
    assert lib.constants["omega"] <= s.constants["ell"]


def test_simulate_and_boa(poly_out, tmp_path):
    cfg = write(tmp_path, {"preset": "poly_khalil", "simulation": {"x0": [[0.1, -0.1], [0, 0]], "t_final": 1.0}})
    assert cli.main(["simulate", "--config", cfg, "--out", str(poly_out)]) == 0
    summ = json.loads((poly_out / "sim" / "summary_state.json").read_text())
    assert summ["miet_bound_holds"]
    assert summ["runs"][1]["event_count"] == 1 and summ["runs"][1]["min_inter_event"] is None
    flat = np.loadtxt(poly_out / "sim" / "trace_state_1.csv", delimiter=",", skiprows=1)
    assert np.all(flat[:, 1:4] == 0.0)
    assert cli.main(["boa", "--config", "poly_khalil", "--out", str(poly_out), "--trigger", "library"]) == 0
    r = json.loads((poly_out / "boa" / "boa_library.json").read_text())
    assert 0 < r["gamma"]["W"] <= r["gamma"]["V"]
    assert (poly_out / "boa" / "library_V_sublevel.csv").exists()


def test_pendulum_synth(tmp_path):
    out = str(tmp_path)
    assert cli.main(["collect", "--config", "inverted_pendulum", "--out", out]) == 0
    assert cli.main(["synth", "--config", "inverted_pendulum", "--out", out]) == 0
    ctrl = Controller.load(tmp_path / "controller.json")
    assert ctrl.K.shape == (1, 3)
    # linearization at the origin, using sin x1 ~ x1
    A_cl = np.array([[0.0, 1.0], [9.8, -0.01]]) + np.vstack([[0.0, 0.0], ctrl.K[:, :2]]) \
        + np.array([[0.0, 0.0], [ctrl.K[0, 2], 0.0]])
    assert np.linalg.eigvals(A_cl).real.max() < 0
    assert cli.main(["synth", "--config", "inverted_pendulum", "--out", out, "--method", "lin"]) == 0
    assert Controller.load(tmp_path / "controller.json").method == "linearization"


def test_seed_override(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert cli.main(["collect", "--config", "poly_khalil", "--out", str(a), "--seed", "2"]) == 0
    assert cli.main(["collect", "--config", "poly_khalil", "--out", str(b)]) == 0
    assert experiment.data_hash(experiment.load_bundle(a / "data")) != experiment.data_hash(
        experiment.load_bundle(b / "data"))


def test_bad_json_exits_64(tmp_path, capsys):
    cfg = write(tmp_path, '{"preset": "poly_khalil",\n  "experiment": }')
    assert cli.main(["collect", "--config", cfg, "--out", str(tmp_path)]) == cli.EXIT_CONFIG
    assert "line 2" in capsys.readouterr().err


def test_schema_violation_exits_64(tmp_path, capsys):
    cfg = write(tmp_path, {"preset": "poly_khalil", "experiment": {"duration": -1}})
    assert cli.main(["collect", "--config", cfg, "--out", str(tmp_path)]) == cli.EXIT_CONFIG
    assert "experiment/duration" in capsys.readouterr().err


def test_missing_stage_exits_64(tmp_path):
    assert cli.main(["synth", "--config", "poly_khalil", "--out", str(tmp_path)]) == cli.EXIT_CONFIG


def test_unknown_preset_exits_64(tmp_path):
    cfg = write(tmp_path, {"preset": "nope"})
    assert cli.main(["collect", "--config", cfg, "--out", str(tmp_path)]) == cli.EXIT_CONFIG


def test_experiment_blowup_exits_2(tmp_path):
    A = [[60, 0, 0, 1, 0, 0], [0, 0, 0, 0, 0, 0]]
    cfg = write(tmp_path, {"preset": "poly_khalil", "system": {"A": A}})
    assert cli.main(["collect", "--config", cfg, "--out", str(tmp_path)]) == cli.EXIT_EXPERIMENT


def test_infeasible_synthesis_exits_3(tmp_path):
    cfg = write(tmp_path, {"preset": "poly_khalil", "synthesis": {"Omega": [[10, 0], [0, 10]]}})
    assert cli.main(["collect", "--config", cfg, "--out", str(tmp_path)]) == 0
    assert cli.main(["synth", "--config", cfg, "--out", str(tmp_path)]) == cli.EXIT_SYNTHESIS


def test_repro_is_deterministic(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert cli.main(["repro", "poly_khalil", "--out", str(a)]) == 0
    assert cli.main(["repro", "poly_khalil", "--out", str(b)]) == 0
    assert (a / "report.md").read_bytes() == (b / "report.md").read_bytes()
    assert "## Basin of attraction" in (a / "report.md").read_text()
