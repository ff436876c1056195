import csv
import json
import math

import pytest

from ncscatter import cli

PROBLEM = {"alpha": 1.5, "H": 0.5, "centres": [[-1, 0, 0], [1, 0, 0]], "masses": [1, 1]}


def _write_config(tmp_path, **sections):
    cfg = {"problem": PROBLEM, "seed": 0, **sections}
    p = tmp_path / "config.json"
    p.write_text(json.dumps(cfg))
    return p


def _run(command, cfg, out, *extra):
    return cli.main([command, "--config", str(cfg), "--out", str(out), *extra])


def _manifest_ok(out):
    doc = json.loads((out / "manifest.json").read_text())
    for item in doc["artifacts"]:
        assert (out / item["file"]).is_file() and item["description"]
        if item["file"].endswith(".json"):
            json.loads((out / item["file"]).read_text())
    return doc


def test_malformed_config_exits_2(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    out = tmp_path / "out"
    assert _run("calibrate", bad, out) == 2
    err = json.loads(capsys.readouterr().err)
    assert err["category"] == "config"
    assert not out.exists()


def test_invalid_values_exit_2(tmp_path, capsys):
    cases = [
        ("calibrate", {"problem": {**PROBLEM, "masses": [1, -1]}}),
        ("bolza", {"problem": PROBLEM, "bolza": {"tolerances": {"gradient": -1}}}),
        ("integrate", {"problem": PROBLEM, "integration": {"random": 0}}),
        ("integrate", {"problem": PROBLEM, "seed": "zero", "integration": {"random": 1}}),
    ]
    for k, (command, doc) in enumerate(cases):
        cfg = tmp_path / f"c{k}.json"
        cfg.write_text(json.dumps(doc))
        assert _run(command, cfg, tmp_path / f"o{k}") == 2, command
        assert json.loads(capsys.readouterr().err)["category"] == "config"


def test_calibrate(tmp_path):
    cfg = _write_config(tmp_path)
    out = tmp_path / "out"
    assert _run("calibrate", cfg, out) == 0
    doc = _manifest_ok(out)
    assert doc["command"] == "calibrate"
    c = json.loads((out / "constants.json").read_text())["constants"]
    assert c["K_radius"] == pytest.approx(2.87775, abs=1e-4)


def test_calibration_failure_exit_code(tmp_path, capsys):
    cfg = _write_config(tmp_path, calibration={"K_cap": 1.5})
    assert _run("calibrate", cfg, tmp_path / "out") == 3
    assert json.loads(capsys.readouterr().err)["category"] == "calibration"


def test_verify_appendix_table(tmp_path):
    cfg = _write_config(tmp_path, verify_appendix={"d_values": [0, 1.0], "eps_values": [1e-3, 1e-4]})
    out = tmp_path / "out"
    assert _run("verify-appendix", cfg, out) == 0
    _manifest_ok(out)
    with open(out / "collision_angles.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [float(r["d"]) for r in rows] == [0.0, 1.0]
    for r in rows:
        assert float(r["predicted"]) == pytest.approx(2 * math.pi * math.sqrt(1 + float(r["d"])), rel=1e-15)
        assert abs(float(r["error"])) <= 1e-3
    app = json.loads((out / "appendix.json").read_text())
    assert app["reflection"]["parity"]["u"] <= 1e-8


@pytest.fixture(scope="module")
def integrate_cfg(tmp_path_factory):
    d = tmp_path_factory.mktemp("integ")
    return _write_config(d, integration={"random": 3, "tol": 1e-8, "t_span": [0, 40]})


def test_integrate_deterministic(integrate_cfg, tmp_path):
    outs = [tmp_path / "a", tmp_path / "b", tmp_path / "c"]
    assert _run("integrate", integrate_cfg, outs[0]) == 0
    assert _run("integrate", integrate_cfg, outs[1]) == 0
    assert _run("integrate", integrate_cfg, outs[2], "--workers", "2") == 0
    doc = _manifest_ok(outs[0])
    names = [a["file"] for a in doc["artifacts"]]
    assert sum(n.startswith("trajectory_") for n in names) == 3
    for name in names + ["manifest.json"]:
        ref = (outs[0] / name).read_bytes()
        assert (outs[1] / name).read_bytes() == ref
        assert (outs[2] / name).read_bytes() == ref
    mon = json.loads((outs[0] / "monitors.json").read_text())
    assert all(r["monitors"]["passed"] for r in mon["trajectories"])


def test_seed_changes_output(integrate_cfg, tmp_path):
    assert _run("integrate", integrate_cfg, tmp_path / "a") == 0
    assert _run("integrate", integrate_cfg, tmp_path / "b", "--seed", "1") == 0
    name = "trajectory_000.csv"
    assert (tmp_path / "a" / name).read_bytes() != (tmp_path / "b" / name).read_bytes()


def test_verify_estimates_on_integrated(integrate_cfg, tmp_path):
    out = tmp_path / "traj"
    assert _run("integrate", integrate_cfg, out) == 0
    cfg = _write_config(
        tmp_path, verify_estimates={"trajectories": [str(out / "trajectory_000.csv"), str(out / "trajectory_001.csv")]}
    )
    est = tmp_path / "est"
    assert _run("verify-estimates", cfg, est) == 0
    _manifest_ok(est)
    assert json.loads((est / "estimates.json").read_text())["passed"]


def test_figures_opt_in(tmp_path):
    cfg = _write_config(tmp_path, integration={"random": 1, "t_span": [0, 20]})
    plain, figs = tmp_path / "plain", tmp_path / "figs"
    assert _run("integrate", cfg, plain) == 0
    assert not list(plain.glob("*.png"))
    assert _run("integrate", cfg, figs, "--figures") == 0
    doc = _manifest_ok(figs)
    assert any(a["file"].endswith(".png") for a in doc["artifacts"])


def test_bolza_small(tmp_path):
    cfg = _write_config(tmp_path, bolza={"R_over_K": 2, "n": 128, "M": 16, "n_family": 32})
    out = tmp_path / "out"
    assert _run("bolza", cfg, out) == 0
    _manifest_ok(out)
    rep = json.loads((out / "bolza.json").read_text())
    assert rep["level_bounds"]["lower_ok"]
    assert rep["identity_defect"] <= 1e-6
