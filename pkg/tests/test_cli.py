import json

import numpy as np
import pytest

from screenlab import cli
from screenlab import oracle as O

UNIT = {"distribution": {"kind": "iid_uniform", "a": 0, "b": 1}, "resolution": 32,
        "oracle": {"enabled": True, "k_target": 36, "branches": "first"}}
SHIFTED = {"distribution": {"kind": "iid_uniform", "a": 5, "b": 6}, "resolution": 32}


def run(tmp_path, cmd, cfg, *extra, name="cfg.json"):
    p = tmp_path / name
    p.write_text(cfg if isinstance(cfg, str) else json.dumps(cfg))
    out = tmp_path / "out"
    return cli.main([cmd, "--config", str(p), "--out", str(out), *extra]), out


def test_certify_pass_writes_reports(tmp_path):
    code, out = run(tmp_path, "certify", UNIT)
    assert code == cli.EXIT_OK
    cert = json.loads((out / "certification.json").read_text())
    assert cert["overall"]["verdict"] == "pass"
    assert (out / "field.csv").exists() and (out / "solution.csv").exists()
    gap = json.loads((out / "oracle.json").read_text())
    assert gap["contradicts_certificate"] is False


def test_certify_fail_exit_1_with_witness(tmp_path):
    code, out = run(tmp_path, "certify", SHIFTED)
    assert code == cli.EXIT_FAILED
    cert = json.loads((out / "certification.json").read_text())
    assert cert["fosd_ratio"]["verdict"] == "fail" and cert["fosd_ratio"]["witness"]


def test_certify_additive_and_ironed(tmp_path):
    sx = {"distribution": {"kind": "truncated_uniform_simplex", "a": 0, "b": 1}, "resolution": 32, "mode": "additive"}
    code, out = run(tmp_path, "certify", sx)
    assert code == cli.EXIT_OK
    assert json.loads((out / "amortization.json").read_text())["shift_condition"]["verdict"] == "pass"
    x = np.linspace(0, 1, 101).tolist()
    pc = {"distribution": {"kind": "perfectly_correlated", "fmax": {"kind": "uniform", "lo": 0, "hi": 1},
                           "curve": {"x": x, "y": [v * v for v in x]}},
          "resolution": 32, "mode": "unit_demand_ironed"}
    code, out = run(tmp_path, "certify", pc)
    assert code == cli.EXIT_OK
    assert (out / "ironed.csv").read_text().startswith("q1,q2,t1,t2,phi1,phi1_bar,phi2,phi2_bar")


def test_oracle_contradiction_exit_2(tmp_path):
    cfg = dict(UNIT, oracle={"enabled": True, "k_target": 36, "branches": "first", "gap_tolerance": 1e-12})
    code, out = run(tmp_path, "certify", cfg)
    gap = json.loads((out / "oracle.json").read_text())
    assert (code == cli.EXIT_ORACLE) == (gap["relative_gap"] > 1e-12)


@pytest.mark.parametrize("cfg", ["{not json", "[1, 2]", json.dumps({"resolution": 32})])
def test_input_errors_exit_3(tmp_path, cfg):
    code, _ = run(tmp_path, "certify", cfg)
    assert code == cli.EXIT_INPUT


def test_oversized_oracle_exit_3(tmp_path):
    code, _ = run(tmp_path, "certify", UNIT, "--oracle-k", "5000")
    assert code == cli.EXIT_INPUT
    k = O.K_MAX + 1
    inst = {"types": np.random.default_rng(0).uniform(size=(k, 2)).tolist(), "probs": [1.0 / k] * k}
    code, _ = run(tmp_path, "oracle", inst, name="inst.json")
    assert code == cli.EXIT_INPUT


def test_missing_config_exit_3(tmp_path):
    assert cli.main(["certify", "--config", str(tmp_path / "nope.json")]) == cli.EXIT_INPUT


def test_bad_thread_env_exit_3(tmp_path, monkeypatch):
    monkeypatch.setenv("SCREENLAB_THREADS", "zero")
    code, _ = run(tmp_path, "certify", UNIT)
    assert code == cli.EXIT_INPUT


def test_counterexample_commands(tmp_path):
    ce = {"curve": {"x": [0, 0.4, 1.0], "y": [0, 0.32, 0.44]}, "point": 0.45}
    code, out = run(tmp_path, "counterexample", ce)
    assert code == cli.EXIT_OK
    rep = json.loads((out / "counterexample.json").read_text())
    assert rep["gain"] > 0 and len(json.loads((out / "menu.json").read_text())) == 2
    mono = {"curve": {"x": [0, 1.0], "y": [0, 0.5]}, "point": 0.4}
    assert run(tmp_path, "counterexample", mono)[0] == cli.EXIT_INPUT
    s = np.linspace(0, 2, 201)
    add = {"mode": "additive", "theta": {"x": s.tolist(), "y": (0.2 + 0.25 * s).tolist()}, "point": 0.6}
    assert run(tmp_path, "counterexample", add)[0] == cli.EXIT_OK


def test_oracle_command(tmp_path):
    inst = {"types": [[0.7, 0.3], [0.4, 0.1]], "probs": [0.5, 0.5], "setting": "multi_outcome"}
    code, out = run(tmp_path, "oracle", inst, name="inst.json")
    assert code == cli.EXIT_OK
    rep = json.loads((out / "oracle.json").read_text())
    assert rep["objective"] == pytest.approx(0.4) and rep["ic_residual"] < 1e-9
    assert (out / "solution.csv").read_text().startswith("t1,t2,x1,x2,p")


def test_outputs_are_byte_identical(tmp_path):
    blobs = []
    for rep in range(2):
        d = tmp_path / f"r{rep}"
        d.mkdir()
        code, out = run(d, "certify", UNIT, "--seed", "3")
        assert code == cli.EXIT_OK
        blobs.append({p.name: p.read_bytes() for p in sorted(out.iterdir())})
    assert blobs[0] == blobs[1]
