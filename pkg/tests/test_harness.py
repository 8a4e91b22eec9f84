import json

import numpy as np
import pytest

from dkf.cli import main as cli_main
from dkf.harness import (ConfigError, ExperimentConfig, emit_report,
                         load_config, qws_benchmark, report_from_dict,
                         report_to_dict, run_experiment, steady_state_tables)


def tiny_config(**overrides):
    doc = {
        "name": "tiny",
        "network": {"kind": "circle", "n": 6, "seed": 1},
        "plant": {"T": 0.1, "horizon_steps": 12,
                  "x0_mean": [150.0, 0.0, 150.0, 0.0], "P0_scale": 100.0},
        "node_types": "cycle",
        "algorithms": ["ckf", "cm", "mcm-direct"],
        "gammas": [2],
        "etas": [0.0],
        "trials": 4,
        "base_seed": 99,
        "steady_window": 0.25,
        "out_dir": "out",
    }
    doc.update(overrides)
    return ExperimentConfig.from_dict(doc)


def test_smoke_single_trial_short_horizon():
    cfg = tiny_config(algorithms=["ckf"], trials=1,
                      plant={"T": 0.1, "horizon_steps": 3,
                             "x0_mean": [150.0, 0.0, 150.0, 0.0],
                             "P0_scale": 100.0})
    report = run_experiment(cfg)
    (cell,) = report.cells
    assert not cell.failed
    assert cell.mse.shape == (3, 6)
    assert np.all(cell.mse >= 0.0)


def test_config_validation_errors():
    with pytest.raises(ConfigError):
        tiny_config(trials=0)
    with pytest.raises(ConfigError):
        tiny_config(gammas=[])
    with pytest.raises(ConfigError):
        tiny_config(etas=[1.0])
    with pytest.raises(ConfigError):
        tiny_config(algorithms=["kalman"])
    with pytest.raises(ConfigError):
        tiny_config(bogus_key=1)


def test_report_round_trip():
    cfg = tiny_config()
    report = run_experiment(cfg)
    doc = json.loads(json.dumps(report_to_dict(report)))
    back = report_from_dict(doc)
    assert back.config == report.config
    for a, b in zip(report.cells, back.cells):
        assert a.algorithm == b.algorithm
        assert np.array_equal(a.mse, b.mse)
        assert a.mmse == b.mmse
        if a.theory_post_trace is None:
            assert b.theory_post_trace is None
        else:
            assert np.array_equal(a.theory_post_trace, b.theory_post_trace)


def test_csv_determinism_and_schema(tmp_path):
    cfg = tiny_config(out_dir=str(tmp_path / "a"))
    r1 = run_experiment(cfg)
    p1 = emit_report(r1, tmp_path / "a", formats=("csv",))[0]
    cfg2 = tiny_config(out_dir=str(tmp_path / "b"))
    r2 = run_experiment(cfg2)
    p2 = emit_report(r2, tmp_path / "b", formats=("csv",))[0]
    b1, b2 = p1.read_bytes(), p2.read_bytes()
    assert b1 == b2
    header = b1.decode().splitlines()[0]
    assert header == "experiment,algorithm,gamma,eta,node,k,mse,theory"
    # one row per (cell, node, step) plus the header
    rows = b1.decode().strip().splitlines()
    assert len(rows) == 1 + 3 * 6 * 12


def test_empty_sweep_header_only(tmp_path):
    cfg = tiny_config(algorithms=[])
    report = run_experiment(cfg)
    path = emit_report(report, tmp_path, formats=("csv",))[0]
    assert path.read_text().strip() == "experiment,algorithm,gamma,eta,node,k,mse,theory"


def test_cm_theory_column_blank_mcm_filled(tmp_path):
    cfg = tiny_config()
    report = run_experiment(cfg)
    by_alg = {c.algorithm: c for c in report.cells}
    assert by_alg["cm"].theory_post_trace is None
    assert by_alg["mcm-direct"].theory_post_trace is not None
    assert by_alg["ckf"].theory_mmse is not None


def test_mmse_ordering_ckf_best():
    cfg = tiny_config(algorithms=["ckf", "cm", "ci"], trials=60,
                      plant={"T": 0.1, "horizon_steps": 60,
                             "x0_mean": [150.0, 0.0, 150.0, 0.0],
                             "P0_scale": 100.0})
    report = run_experiment(cfg)
    by_alg = {c.algorithm: c for c in report.cells}
    for alg in ("cm", "ci"):
        diff = by_alg[alg].mmse - by_alg["ckf"].mmse
        se = np.sqrt(by_alg[alg].mmse_se**2 + by_alg["ckf"].mmse_se**2)
        assert diff > -2 * se


def test_eta_cells_use_blended_weights():
    cfg = tiny_config(algorithms=["cm"], etas=[0.0, 0.5], trials=8)
    report = run_experiment(cfg)
    assert len(report.cells) == 2
    m0, m5 = report.cells[0].mmse, report.cells[1].mmse
    assert m0 != m5


def test_failed_cell_is_marked_not_fatal():
    # gamma=1 on a line graph leaves end nodes without y-position information,
    # so the modified-CM theory fails; the cell must fail gracefully
    cfg = tiny_config(network={"kind": "line", "n": 6, "seed": 0},
                      node_types=[1, 1, 1, 2, 1, 1],
                      algorithms=["mcm-direct", "ckf"], gammas=[1], trials=3)
    report = run_experiment(cfg)
    by_alg = {c.algorithm: c for c in report.cells}
    assert not by_alg["ckf"].failed
    mcm = by_alg["mcm-direct"]
    # the filter itself runs (pseudoinverse absorbs rank deficiency), only the
    # theory attachment is absent
    assert not mcm.failed
    assert mcm.theory_post_trace is None


def test_steady_state_tables_structure():
    cfg = tiny_config(gammas=[2, 4])
    tables = steady_state_tables(cfg)
    assert len(tables["entries"]) == 2
    entry = tables["entries"][0]
    assert {"gamma", "eta", "trace_P_ckf", "ckf_post_trace", "mcm", "mci"} \
        <= set(entry)
    assert len(entry["mcm"]["trace_P"]) == 6
    assert len(entry["mci"]["consistency_margin"]) == 6
    # the CKF gap shrinks with gamma
    g2 = max(tables["entries"][0]["mcm"]["gap_to_ckf_2norm"])
    g4 = max(tables["entries"][1]["mcm"]["gap_to_ckf_2norm"])
    assert g4 < g2


def test_qws_benchmark_flags():
    cfg = tiny_config(gammas=[2])
    rep = qws_benchmark(cfg, max_k=30, replicas=400)
    assert rep.direct_bound_ok
    assert rep.stoch_agrees
    assert rep.direct_err.shape[1] == 6
    assert rep.ks[0] == 2
    # both the estimate and its pseudoinverse converge with k
    assert rep.direct_err[-1].max() < rep.direct_err[0].max()
    assert rep.direct_err_pinv[-1].max() < rep.direct_err_pinv[0].max()


def test_posterior_theory_single_node_textbook():
    # one observable node: the modified-CM theory trace equals the textbook
    # steady posterior covariance trace of the local Kalman filter
    from dkf.harness import compute_steady_theory
    from dkf.network import ConsensusNetwork
    from dkf.riccati import solve_dare_info
    from dkf.system import SensorSuite, make_tracking_model
    import numpy as np
    from dkf.linalg import sym_inv

    plant = make_tracking_model(0.1)
    c = np.array([[1.0, 0.0, 0.0, 0.0], [0.0, 0.0, 1.0, 0.0]])
    r = 0.01 * np.eye(2)
    suite = SensorSuite(c=[c], r=[r])
    net = ConsensusNetwork(1, frozenset(), np.array([[1.0]]))
    th = compute_steady_theory(plant, suite, net, gamma=3)
    omega = c.T @ np.linalg.inv(r) @ c
    p_prior = solve_dare_info(plant.a, omega, plant.q)
    textbook = float(np.trace(sym_inv(sym_inv(p_prior) + omega)))
    assert th.mcm_post_trace[0] == pytest.approx(textbook, rel=1e-8)
    assert th.ckf_post_trace == pytest.approx(textbook, rel=1e-8)


# ---------------------------------------------------------------------------
# CLI
# ---------------------------------------------------------------------------

def write_config(tmp_path, **overrides):
    cfg = tiny_config(**overrides)
    path = tmp_path / "exp.json"
    path.write_text(json.dumps(cfg.to_dict()))
    return path


def test_cli_run(tmp_path, capsys):
    path = write_config(tmp_path, out_dir=str(tmp_path / "out"))
    rc = cli_main(["run", "--config", str(path)])
    captured = capsys.readouterr()
    assert rc == 0
    assert (tmp_path / "out" / "tiny.csv").exists()
    assert (tmp_path / "out" / "tiny.json").exists()
    assert "tiny.csv" in captured.out


def test_cli_trials_and_out_override(tmp_path):
    path = write_config(tmp_path)
    out = tmp_path / "elsewhere"
    rc = cli_main(["run", "--config", str(path), "--trials", "2",
                   "--out", str(out)])
    assert rc == 0
    doc = json.loads((out / "tiny.json").read_text())
    assert doc["config"]["trials"] == 2


def test_cli_sweep_gamma(tmp_path):
    path = write_config(tmp_path, algorithms=["cm"], out_dir=str(tmp_path / "o"))
    rc = cli_main(["sweep-gamma", "--config", str(path), "--gammas", "1,3"])
    assert rc == 0
    doc = json.loads((tmp_path / "o" / "tiny.json").read_text())
    assert sorted(c["gamma"] for c in doc["cells"]) == [1, 3]


def test_cli_sweep_eta(tmp_path):
    path = write_config(tmp_path, algorithms=["cm"], out_dir=str(tmp_path / "o"))
    rc = cli_main(["sweep-eta", "--config", str(path), "--etas", "0,0.5"])
    assert rc == 0
    doc = json.loads((tmp_path / "o" / "tiny.json").read_text())
    assert sorted(c["eta"] for c in doc["cells"]) == [0.0, 0.5]


def test_cli_steady_state(tmp_path, capsys):
    path = write_config(tmp_path)
    rc = cli_main(["steady-state", "--config", str(path),
                   "--out", str(tmp_path / "ss")])
    assert rc == 0
    out = capsys.readouterr().out.strip()
    doc = json.loads((tmp_path / "ss" / "tiny-steady-state.json").read_text())
    assert doc["entries"][0]["gamma"] == 2
    assert out.endswith("tiny-steady-state.json")


def test_cli_qws_bench(tmp_path):
    path = write_config(tmp_path)
    rc = cli_main(["qws-bench", "--config", str(path), "--out",
                   str(tmp_path / "qb"), "--max-k", "25", "--replicas", "200"])
    assert rc == 0
    csv_text = (tmp_path / "qb" / "tiny-qws.csv").read_text()
    assert csv_text.splitlines()[0] == \
        "step,node,err_fro,err_pinv_fro,bound_exact,bound_spectral"
    summary = json.loads((tmp_path / "qb" / "tiny-qws.json").read_text())
    assert summary["direct_bound_ok"] and summary["stoch_agrees"]


def test_cli_error_emits_json_on_stderr(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"algorithms": ["nope"]}))
    rc = cli_main(["run", "--config", str(bad)])
    captured = capsys.readouterr()
    assert rc == 1
    err = json.loads(captured.err.strip().splitlines()[-1])
    assert err["type"] == "ConfigError"


def test_load_config_round_trip(tmp_path):
    path = write_config(tmp_path, name="roundtrip")
    cfg = load_config(path)
    assert cfg.name == "roundtrip"
    assert cfg.gammas == [2]
