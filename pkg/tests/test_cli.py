import json
import subprocess
import sys

import numpy as np
import pytest

from streamcg.cli import emit_trace_csv, main, read_trace_csv
from streamcg.matrix_io import load_csr, write_matrix_market
from streamcg.reference import random_spd


@pytest.fixture
def small_mtx(tmp_path):
    path = tmp_path / "small.mtx"
    write_matrix_market(random_spd(24, 3), path, symmetric=True)
    return path


def test_write_read_round_trip(tmp_path):
    a = random_spd(15, 1)
    for sym in (False, True):
        path = tmp_path / f"a{sym}.mtx"
        write_matrix_market(a, path, symmetric=sym)
        b = load_csr(path)
        assert np.array_equal(a.values, b.values) and np.array_equal(a.col_idx, b.col_idx)


def test_trace_csv_shape_and_round_trip(tmp_path):
    path = tmp_path / "t.csv"
    rr = [1.0 / 3.0, 2.0 ** -40 * 0.1, 5e-324]
    emit_trace_csv(list(enumerate(rr)), path)
    lines = path.read_text().splitlines()
    assert lines[0] == "iteration,rr" and len(lines) == 4
    assert [v for _, v in read_trace_csv(path)] == rr
    emit_trace_csv(rr[:2], path)
    assert len(path.read_text().splitlines()) == 3


def test_trace_csv_rejects_empty(tmp_path):
    with pytest.raises(ValueError):
        emit_trace_csv([], tmp_path / "t.csv")


def _solve(mtx, tmp_path, *extra):
    report = tmp_path / "report.json"
    trace = tmp_path / "trace.csv"
    code = main(["solve", "--matrix", str(mtx), "--report", str(report), "--trace", str(trace),
                 *extra])
    return code, json.loads(report.read_text()) if report.exists() else None, trace


def test_streamed_decentralized(small_mtx, tmp_path):
    code, rep, trace = _solve(small_mtx, tmp_path)
    assert code == 0
    assert rep["converged"] and rep["writes_per_iteration"] == 4
    assert rep["reads_per_iteration"] == 10
    assert len(trace.read_text().splitlines()) == rep["iterations"] + 2


def test_streamed_naive(small_mtx, tmp_path):
    code, rep, _ = _solve(small_mtx, tmp_path, "--schedule", "naive")
    assert code == 0
    assert (rep["reads_per_iteration"], rep["writes_per_iteration"]) == (14, 5)


def test_reference_mode_counters_null(small_mtx, tmp_path):
    code, rep, _ = _solve(small_mtx, tmp_path, "--mode", "reference")
    assert code == 0
    assert rep["vector_read_count"] is None and rep["reads_per_iteration"] is None
    assert rep["estimated_cycles"] is None


def test_compare_mode(small_mtx, tmp_path):
    code, rep, _ = _solve(small_mtx, tmp_path, "--mode", "compare")
    assert code == 0
    assert "iteration_delta" in rep["compare"] and "first_divergence" in rep["compare"]
    assert abs(rep["compare"]["iteration_delta"]) <= 2


def test_budget_exit_code(small_mtx, tmp_path):
    code, rep, _ = _solve(small_mtx, tmp_path, "--max-iters", "2")
    assert code == 2 and rep["termination"] == "budget"


def test_error_exit_codes(tmp_path, small_mtx, capsys):
    assert main(["solve", "--matrix", str(tmp_path / "missing.mtx")]) == 1
    assert main(["solve", "--matrix", str(small_mtx), "--tol", "-1"]) == 1
    assert main(["solve", "--matrix", str(small_mtx), "--fifo-depth", "oops"]) == 1
    assert main(["solve", "--matrix", str(small_mtx), "--fifo-depth", "nope=3"]) == 1
    assert "unknown FIFO" in capsys.readouterr().err


def test_vector_files(small_mtx, tmp_path):
    b = tmp_path / "b.txt"
    x0 = tmp_path / "x0.txt"
    xo = tmp_path / "x.txt"
    np.savetxt(b, np.arange(24.0), fmt="%.17g")
    np.savetxt(x0, np.full(24, 0.5), fmt="%.17g")
    code = main(["solve", "--matrix", str(small_mtx), "--b", str(b), "--x0", str(x0),
                 "--x-out", str(xo)])
    assert code == 0
    a = load_csr(small_mtx)
    x = np.loadtxt(xo)
    assert np.allclose(a.to_dense() @ x, np.arange(24.0), atol=1e-5)
    np.savetxt(b, np.ones(5))
    assert main(["solve", "--matrix", str(small_mtx), "--b", str(b)]) == 1


def test_trace_byte_identical_across_runs(small_mtx, tmp_path):
    outs = []
    for k in range(2):
        t = tmp_path / f"t{k}.csv"
        main(["solve", "--matrix", str(small_mtx), "--trace", str(t), "--fifo-depth", "M5->M6.r=40"])
        outs.append(t.read_bytes())
    assert outs[0] == outs[1]


def test_logs_and_transcript(small_mtx, tmp_path):
    ilog = tmp_path / "inst.json"
    tr = tmp_path / "tr.txt"
    code = main(["solve", "--matrix", str(small_mtx), "--inst-log", str(ilog), "--transcript",
                 str(tr), "--hw-faithful", "--scheduler", "conc", "--block", "8"])
    assert code == 0
    assert json.loads(ilog.read_text())[0]["target"] == "VC_p"
    assert tr.read_text().splitlines()[0].split()[1] == "0"


def test_module_entry_point(small_mtx):
    proc = subprocess.run([sys.executable, "-m", "streamcg", "solve", "--matrix", str(small_mtx),
                           "--scheme", "mixed-v3"], capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
