import csv
import json

import numpy as np
import pytest

from stfmm.cli import build_parser, efficiency, main

SMALL = ["--cube-subdiv", "2", "--timesteps", "32", "--t-end", "1.0", "--nmax", "40"]


def _json(out):
    return json.loads(out[out.index("{"):])


def test_verify_small(capsys, tmp_path):
    rep = tmp_path / "v.json"
    assert main(["verify", *SMALL, "--vectors", "2", "--report-out", str(rep)]) == 0
    r = json.loads(rep.read_text())
    assert r["max_rel_error"] <= 1e-4 and r["audit"]["ok"] and r["causality_ok"]


def test_verify_truncated_audit_fails(capsys):
    code = main(["verify", *SMALL, "--ntr", "0", "--vectors", "1"])
    r = _json(capsys.readouterr().out)
    assert code == 4 and r["audit"]["uncovered"] > 0


def test_verify_dense_cap(capsys):
    assert main(["verify", "--cube-subdiv", "8", "--timesteps", "64"]) == 2
    assert "dense cap" in capsys.readouterr().err


def test_solve_and_rank_invariance(capsys, tmp_path):
    sols, iters = [], []
    for ranks in ("1", "4"):
        sol = tmp_path / f"x{ranks}.txt"
        res = tmp_path / f"r{ranks}.csv"
        assert main(["solve", *SMALL, "--ranks", ranks, "--solution-out", str(sol), "--report-out", str(res)]) == 0
        r = _json(capsys.readouterr().out)
        assert r["converged"]
        iters.append(r["iterations"])
        x = np.loadtxt(sol)
        assert x.shape == (1536,)
        sols.append(x)
        rows = list(csv.reader(res.open()))
        assert rows[0] == ["iter", "relres"] and len(rows) == r["iterations"] + 2
    assert iters[0] == iters[1]
    assert np.linalg.norm(sols[1] - sols[0]) <= 1e-10 * np.linalg.norm(sols[0])


def test_solve_not_converged(capsys):
    assert main(["solve", *SMALL, "--max-iter", "1"]) == 3


def test_solve_with_rhs_file(capsys, tmp_path):
    p = tmp_path / "b.txt"
    np.savetxt(p, np.ones(1536))
    assert main(["solve", *SMALL, "--rhs", str(p)]) == 0
    np.savetxt(p, np.ones(5))
    assert main(["solve", *SMALL, "--rhs", str(p)]) == 2


def test_trace(capsys, tmp_path):
    out = tmp_path / "t.json"
    assert main(["trace", *SMALL, "--ranks", "2", "--workers", "1", "--trace-out", str(out)]) == 0
    s = _json(capsys.readouterr().out)
    assert {"S2M", "M2M", "M2L", "L2L", "L2T", "NF", "SEND", "RECV"} <= set(s["total_us"])
    assert json.loads(out.read_text())


def test_trace_threshold_inf(capsys):
    assert main(["trace", *SMALL, "--workers", "2", "--threshold", "inf"]) == 0
    s = _json(capsys.readouterr().out)
    assert not any(k.endswith(":0") for k in s["lane_idle_gap_us"])


def test_bench(capsys, tmp_path):
    out = tmp_path / "b.csv"
    assert main(["bench", *SMALL, "--bench-workers", "1,2", "--repeat", "1", "--report-out", str(out)]) == 0
    rows = list(csv.DictReader(out.open()))
    assert [r["phase"] for r in rows] == ["assembly", "iteration", "iteration"]
    assert float(rows[1]["efficiency"]) == 1.0


def test_efficiency_formula():
    assert efficiency(8.0, 2.0, 4) == 1.0
    assert efficiency(8.0, 4.0, 4) == 0.5


def test_usage_errors(capsys, tmp_path):
    assert main(["verify", "--ranks", "99", *SMALL]) == 2
    assert main(["solve", "--mesh", str(tmp_path / "missing.tri")]) == 2
    with pytest.raises(SystemExit):
        build_parser().parse_args(["solve", "--transport", "mpi"])


def test_config_file_and_flags_win(capsys, tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"m_t": 3, "ranks": 2}))
    assert main(["config", "--config", str(p), "--ranks", "3"]) == 0
    cfg = json.loads(capsys.readouterr().out)
    assert cfg["m_t"] == 3 and cfg["ranks"] == 3
    p.write_text(json.dumps({"bogus": 1}))
    assert main(["config", "--config", str(p)]) == 2


def test_transport_failure_exit(monkeypatch, capsys):
    from stfmm.parallel import TransportError
    import stfmm.cli as cli

    def boom(cfg, args):
        raise TransportError("peer vanished")

    monkeypatch.setitem(cli.COMMANDS, "trace", boom)
    assert main(["trace", *SMALL]) == 5
