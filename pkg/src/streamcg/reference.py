"""Sequential FP64 JPCG and SpMV used as ground truth.

Everything here accumulates strictly left to right so results are
reproducible; mixed-precision schemes only touch the SpMV step, the solver
vectors stay in FP64.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .matrix_io import CsrMatrix, diagonal
from .spmv import PrecisionScheme, cast_values


class BreakdownError(ArithmeticError):
    pass


def _seq_sum(terms: np.ndarray) -> float:
    # cumsum is sequential, unlike np.sum's pairwise reduction
    return float(np.cumsum(terms)[-1]) if len(terms) else 0.0


def dot_reference(u, v) -> float:
    return _seq_sum(np.asarray(u) * np.asarray(v))


class _RowPositions:
    """Entry indices grouped by their position inside the row."""

    def __init__(self, a: CsrMatrix):
        lengths = a.row_lengths()
        self.levels = []
        for k in range(int(lengths.max()) if a.n else 0):
            rows = np.flatnonzero(lengths > k)
            self.levels.append((rows, a.row_ptr[rows] + k))


_POSITIONS: dict[int, tuple[CsrMatrix, _RowPositions]] = {}


def _positions(a: CsrMatrix) -> _RowPositions:
    hit = _POSITIONS.get(id(a))
    if hit is None or hit[0] is not a:
        hit = (a, _RowPositions(a))
        if len(_POSITIONS) > 8:
            _POSITIONS.clear()
        _POSITIONS[id(a)] = hit
    return hit[1]


def spmv_reference(a: CsrMatrix, x, scheme: PrecisionScheme = PrecisionScheme.DEFAULT_FP64,
                   values: np.ndarray | None = None) -> np.ndarray:
    """Row-major y = A x, each row summed left to right in column order."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (a.n,):
        raise ValueError(f"dimension mismatch: x has shape {x.shape}, expected ({a.n},)")
    acc_t = np.float32 if scheme.output_bits == 32 else np.float64
    if values is None:
        values = cast_values(a.values, scheme)
    vals = values.astype(acc_t)
    xin = x.astype(np.float32 if scheme.input_bits == 32 else np.float64).astype(acc_t)
    y = np.zeros(a.n, dtype=acc_t)
    for rows, idx in _positions(a).levels:
        y[rows] += vals[idx] * xin[a.col_idx[idx]]
    return y.astype(np.float64)


@dataclass
class OracleTrace:
    rr: list[float] = field(default_factory=list)
    alpha: list[float] = field(default_factory=list)
    beta: list[float] = field(default_factory=list)
    x: np.ndarray | None = None
    converged: bool = False

    @property
    def iterations(self) -> int:
        return len(self.rr) - 1


def jpcg_reference(a: CsrMatrix, b, x0=None, tol: float = 1e-12, max_iters: int = 20000,
                   scheme: PrecisionScheme = PrecisionScheme.DEFAULT_FP64, diag=None):
    """Textbook Jacobi-preconditioned CG; returns ``(x, trace)``.

    ``trace.rr[0]`` is the initial residual; entry ``k`` follows iteration ``k``.
    Alpha and beta are recorded per iteration (beta only when computed).
    The Jacobi diagonal comes from the FP64 matrix unless ``diag`` is given;
    the scheme only changes the SpMV.
    """
    b = np.asarray(b, dtype=np.float64)
    x = np.zeros(a.n) if x0 is None else np.array(x0, dtype=np.float64)
    m = diagonal(a) if diag is None else np.asarray(diag, dtype=np.float64)
    values = cast_values(a.values, scheme)
    spmv = lambda v: spmv_reference(a, v, scheme, values)

    r = b - spmv(x)
    z = r / m
    p = z.copy()
    rz = dot_reference(r, z)
    rr = dot_reference(r, r)
    trace = OracleTrace(rr=[rr])
    i = 0
    while i < max_iters and rr > tol:
        ap = spmv(p)
        pap = dot_reference(p, ap)
        if not pap > 0.0:
            raise BreakdownError(f"CG breakdown: p.ap = {pap!r} at iteration {i}")
        alpha = rz / pap
        x = x + alpha * p
        r = r - alpha * ap
        z = r / m
        rz_new = dot_reference(r, z)
        rr = dot_reference(r, r)
        trace.alpha.append(alpha)
        trace.rr.append(rr)
        i += 1
        if rr <= tol:
            break
        if rz == 0.0:
            raise BreakdownError(f"CG breakdown: rz = 0 at iteration {i}")
        beta = rz_new / rz
        p = z + beta * p
        rz = rz_new
        trace.beta.append(beta)
    trace.x = x
    trace.converged = rr <= tol
    return x, trace


@dataclass
class Divergence:
    first_divergence: int | None
    iteration_delta: int
    max_rel_diff: float


def compare_traces(rr1, rr2, rel_tol: float = 1e-8) -> Divergence:
    """First iteration whose rr values differ by more than ``rel_tol`` (relative)."""
    rr1 = list(getattr(rr1, "rr", rr1))
    rr2 = list(getattr(rr2, "rr", rr2))
    first = None
    worst = 0.0
    for k, (u, v) in enumerate(zip(rr1, rr2)):
        scale = max(abs(u), abs(v))
        diff = 0.0 if scale == 0.0 else abs(u - v) / scale
        worst = max(worst, diff)
        if first is None and diff > rel_tol:
            first = k
    if first is None and len(rr1) != len(rr2):
        first = min(len(rr1), len(rr2))
    return Divergence(first, (len(rr2) - 1) - (len(rr1) - 1), worst)


def random_spd(n: int, seed: int, density: float = 0.3) -> CsrMatrix:
    """Sparse SPD test matrix ``G^T G + n I`` with a sparse random ``G``."""
    rng = np.random.default_rng(seed)
    g = rng.standard_normal((n, n)) * (rng.random((n, n)) < density)
    dense = g.T @ g + n * np.eye(n)
    dense = (dense + dense.T) / 2  # exact symmetry after rounding
    return CsrMatrix.from_dense(dense)
