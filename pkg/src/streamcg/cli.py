"""Command-line entry point: ``streamcg solve --matrix A.mtx ...``.

Exit codes: 0 converged, 2 iteration budget exhausted, 1 error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys

import numpy as np

from .controller import SolverConfig, SolverError, run_jpcg
from .isa import dump_instruction_log
from .matrix_io import MatrixFormatError, load_csr
from .reference import BreakdownError, compare_traces, jpcg_reference
from .runtime import dump_transcripts
from .spmv import PrecisionScheme

log = logging.getLogger("streamcg")

EXIT_CONVERGED = 0
EXIT_ERROR = 1
EXIT_BUDGET = 2


def emit_trace_csv(trace, path) -> None:
    """Write ``iteration,rr`` rows; rr uses 17 significant digits so it round-trips."""
    rows = list(getattr(trace, "residual_trace", trace))
    if rows and not isinstance(rows[0], (tuple, list)):
        rows = list(enumerate(rows))
    if not rows:
        raise ValueError("empty residual trace")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iteration", "rr"])
        for it, rr in rows:
            w.writerow([int(it), f"{float(rr):.17g}"])


def read_trace_csv(path) -> list[tuple[int, float]]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [(int(r["iteration"]), float(r["rr"])) for r in rows]


def _jsonable(v):
    if isinstance(v, float) and not np.isfinite(v):
        return repr(v)
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    if isinstance(v, dict):
        return {str(k): _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    return v


def emit_report_json(report, path) -> None:
    data = report.to_dict() if hasattr(report, "to_dict") else dict(report)
    with open(path, "w") as fh:
        json.dump(_jsonable(data), fh, indent=2)
        fh.write("\n")


def reference_report(trace, scheme: PrecisionScheme, n: int, nnz: int, max_iters: int) -> dict:
    """Report for an oracle run; hardware counters are not modeled and stay null."""
    converged = trace.converged
    return {
        "converged": converged,
        "iterations": trace.iterations,
        "final_rr": trace.rr[-1],
        "termination": "converged" if converged else "budget",
        "residual_trace": list(enumerate(trace.rr)),
        "vector_read_count": None,
        "vector_write_count": None,
        "read_split": None,
        "reads_per_iteration": None,
        "writes_per_iteration": None,
        "instruction_log_length": None,
        "write_instructions": None,
        "mem_responses": None,
        "padding_count": None,
        "estimated_cycles": None,
        "parity_flips": None,
        "schedule_mode": None,
        "scheme": scheme.label,
        "n": n,
        "nnz": nnz,
    }


def exit_code(report: dict) -> int:
    if report.get("converged"):
        return EXIT_CONVERGED
    if report.get("termination") == "budget":
        return EXIT_BUDGET
    return EXIT_ERROR


def _fifo_depth(text):
    name, sep, value = text.rpartition("=")
    if not sep or not name:
        raise argparse.ArgumentTypeError(f"expected NAME=N, got {text!r}")
    try:
        depth = int(value)
    except ValueError:
        raise argparse.ArgumentTypeError(f"FIFO depth must be an integer: {text!r}") from None
    if depth < 1:
        raise argparse.ArgumentTypeError(f"FIFO depth must be >= 1: {text!r}")
    return name, depth


def _positive_float(text):
    v = float(text)
    if not v > 0:
        raise argparse.ArgumentTypeError("must be > 0")
    return v


def _positive_int(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="streamcg", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    s = sub.add_parser("solve", help="solve A x = b from a Matrix Market file")
    s.add_argument("--matrix", required=True)
    s.add_argument("--mode", choices=("streamed", "reference", "compare"), default="streamed")
    s.add_argument("--scheme", type=PrecisionScheme.parse, default=PrecisionScheme.DEFAULT_FP64,
                   help="fp64, mixed-v1, mixed-v2 or mixed-v3")
    s.add_argument("--schedule", choices=("naive", "decentralized"), default="decentralized")
    s.add_argument("--tol", type=_positive_float, default=1e-12)
    s.add_argument("--max-iters", type=_positive_int, default=20000)
    s.add_argument("--fifo-depth", type=_fifo_depth, action="append", default=[],
                   metavar="NAME=N", help="override a FIFO depth, e.g. M5->M6.r=34")
    s.add_argument("--scheduler", choices=("det", "conc"), default="det")
    s.add_argument("--trace", help="residual trace CSV output")
    s.add_argument("--report", help="JSON report output")
    s.add_argument("--b", dest="b_path", help="right-hand side, one value per line")
    s.add_argument("--x0", dest="x0_path", help="initial guess, one value per line")
    s.add_argument("--hw-faithful", action="store_true",
                   help="refuse matrices that exceed the packed index widths")
    s.add_argument("--block", type=_positive_int, default=64, help="words per stream element")
    s.add_argument("--inst-log", help="instruction log JSON output")
    s.add_argument("--transcript", help="channel transcript output (deterministic runs)")
    s.add_argument("--x-out", help="solution vector output, one value per line")
    return p


def _load_vector(path, n, what):
    v = np.loadtxt(path, dtype=np.float64, ndmin=1)
    if v.shape != (n,):
        raise ValueError(f"dimension mismatch: {what} has {v.size} entries, matrix has {n} rows")
    return v


def _solve(args) -> int:
    a = load_csr(args.matrix)
    b = _load_vector(args.b_path, a.n, "b") if args.b_path else np.ones(a.n)
    x0 = _load_vector(args.x0_path, a.n, "x0") if args.x0_path else np.zeros(a.n)

    ref = stream = None
    if args.mode in ("reference", "compare"):
        x_ref, trace = jpcg_reference(a, b, x0, args.tol, args.max_iters, args.scheme)
        ref = reference_report(trace, args.scheme, a.n, a.nnz, args.max_iters)
        x = x_ref
    if args.mode in ("streamed", "compare"):
        cfg = SolverConfig(tol=args.tol, max_iters=args.max_iters, scheme=args.scheme,
                           schedule_mode=args.schedule, fifo_depths=dict(args.fifo_depth),
                           hardware_faithful=args.hw_faithful, block=args.block,
                           scheduler=args.scheduler, record=bool(args.transcript))
        x, rep, sg = run_jpcg(a, b, x0, cfg, return_graph=True)
        stream = rep.to_dict()
        if args.inst_log:
            dump_instruction_log(rep.instruction_log, args.inst_log)
        if args.transcript:
            dump_transcripts(sg.graph, args.transcript)

    if args.mode == "compare":
        div = compare_traces([rr for _, rr in ref["residual_trace"]],
                             [rr for _, rr in stream["residual_trace"]])
        report = dict(stream)
        report["reference"] = ref
        report["compare"] = {"first_divergence": div.first_divergence,
                             "iteration_delta": div.iteration_delta,
                             "max_rel_diff": div.max_rel_diff}
    else:
        report = stream if stream is not None else ref

    if args.trace:
        emit_trace_csv(report["residual_trace"], args.trace)
    if args.report:
        emit_report_json(report, args.report)
    if args.x_out:
        np.savetxt(args.x_out, x, fmt="%.17g")
    log.info("%s: %s after %d iterations, rr=%.6g", args.matrix, report["termination"],
             report["iterations"], report["final_rr"])
    return exit_code(report)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse exits 2 on bad flags; 2 means budget here
        return EXIT_CONVERGED if exc.code == 0 else EXIT_ERROR
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return _solve(args)
    except (OSError, ValueError, MatrixFormatError, SolverError, BreakdownError,
            ZeroDivisionError, ArithmeticError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
