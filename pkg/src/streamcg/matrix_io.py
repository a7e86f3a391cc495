"""Matrix Market ingestion, CSR storage and Jacobi preconditioner extraction."""

from __future__ import annotations

import gzip
import io
from dataclasses import dataclass
from pathlib import Path
from typing import BinaryIO, Iterable, Union

import numpy as np


class MatrixFormatError(ValueError):
    """Raised for malformed or unsupported Matrix Market input."""


class SingularPreconditionerError(ValueError):
    """Raised when the matrix diagonal has a zero or missing entry."""


@dataclass
class CooMatrix:
    n_rows: int
    n_cols: int
    rows: np.ndarray
    cols: np.ndarray
    values: np.ndarray
    symmetric_stored: bool = False

    def __post_init__(self):
        self.rows = np.asarray(self.rows, dtype=np.int64)
        self.cols = np.asarray(self.cols, dtype=np.int64)
        self.values = np.asarray(self.values, dtype=np.float64)
        if not (len(self.rows) == len(self.cols) == len(self.values)):
            raise ValueError("rows, cols and values must have equal length")
        if len(self.rows):
            if self.rows.min() < 0 or self.rows.max() >= self.n_rows:
                raise MatrixFormatError("row index out of declared bounds")
            if self.cols.min() < 0 or self.cols.max() >= self.n_cols:
                raise MatrixFormatError("column index out of declared bounds")

    @property
    def nnz(self) -> int:
        return len(self.values)

    @property
    def entries(self) -> list[tuple[int, int, float]]:
        return list(zip(self.rows.tolist(), self.cols.tolist(), self.values.tolist()))

    @classmethod
    def from_entries(cls, n_rows, n_cols, entries: Iterable[tuple[int, int, float]],
                     symmetric_stored=False) -> "CooMatrix":
        entries = list(entries)
        rows = [e[0] for e in entries]
        cols = [e[1] for e in entries]
        vals = [e[2] for e in entries]
        return cls(n_rows, n_cols, rows, cols, vals, symmetric_stored)

    def canonical(self) -> "CooMatrix":
        """Sorted by (row, col) with identical duplicates removed."""
        rows, cols, vals = _dedupe(self.rows, self.cols, self.values)
        return CooMatrix(self.n_rows, self.n_cols, rows, cols, vals, self.symmetric_stored)


@dataclass
class CsrMatrix:
    n: int
    row_ptr: np.ndarray
    col_idx: np.ndarray
    values: np.ndarray

    @property
    def nnz(self) -> int:
        return len(self.values)

    def row_lengths(self) -> np.ndarray:
        return np.diff(self.row_ptr)

    def row_of_entry(self) -> np.ndarray:
        return np.repeat(np.arange(self.n, dtype=np.int64), self.row_lengths())

    def to_dense(self) -> np.ndarray:
        dense = np.zeros((self.n, self.n))
        dense[self.row_of_entry(), self.col_idx] = self.values
        return dense

    def check_invariants(self) -> None:
        rp = self.row_ptr
        assert len(rp) == self.n + 1 and rp[0] == 0 and rp[-1] == self.nnz
        assert np.all(np.diff(rp) >= 0)
        rows = self.row_of_entry()
        same_row = rows[1:] == rows[:-1]
        assert np.all(np.diff(self.col_idx)[same_row] > 0), "columns not strictly increasing"

    @classmethod
    def from_dense(cls, dense) -> "CsrMatrix":
        dense = np.asarray(dense, dtype=np.float64)
        if dense.ndim != 2 or dense.shape[0] != dense.shape[1]:
            raise ValueError("expected a square 2-D array")
        rows, cols = np.nonzero(dense)
        return to_csr(CooMatrix(dense.shape[0], dense.shape[1], rows, cols, dense[rows, cols]))

    @classmethod
    def identity(cls, n: int) -> "CsrMatrix":
        idx = np.arange(n, dtype=np.int64)
        return cls(n, np.arange(n + 1, dtype=np.int64), idx, np.ones(n))


@dataclass
class JacobiPreconditioner:
    diag: np.ndarray


def _dedupe(rows, cols, vals):
    order = np.lexsort((cols, rows))
    rows, cols, vals = rows[order], cols[order], vals[order]
    if len(rows) < 2:
        return rows, cols, vals
    dup = (rows[1:] == rows[:-1]) & (cols[1:] == cols[:-1])
    if dup.any():
        a, b = vals[:-1][dup], vals[1:][dup]
        # bitwise comparison so that 0.0 / -0.0 and NaN payloads count as different
        if np.any(a.view(np.int64) != b.view(np.int64)):
            k = int(np.flatnonzero(dup)[np.flatnonzero(a.view(np.int64) != b.view(np.int64))[0]])
            raise MatrixFormatError(
                f"conflicting duplicate entry at ({rows[k]},{cols[k]}): {vals[k]!r} vs {vals[k + 1]!r}")
        keep = np.concatenate([[True], ~dup])
        rows, cols, vals = rows[keep], cols[keep], vals[keep]
    return rows, cols, vals


def parse_matrix_market(text: Union[bytes, str, BinaryIO]) -> CooMatrix:
    """Parse a Matrix Market coordinate file.

    Accepts ``real``, ``integer`` and ``pattern`` fields with ``general`` or
    ``symmetric`` symmetry. Indices are converted to 0-based; pattern entries
    get the value 1.0. For symmetric files only the stored triangle is
    returned, with ``symmetric_stored`` set.
    """
    if isinstance(text, (bytes, bytearray)):
        stream = io.BytesIO(text)
    elif isinstance(text, str):
        stream = io.BytesIO(text.encode("ascii"))
    else:
        stream = text

    header = stream.readline().decode("ascii", "replace").strip()
    parts = header.split()
    if len(parts) != 5 or parts[0].lower() != "%%matrixmarket":
        raise MatrixFormatError(f"malformed header: {header!r}")
    obj, fmt, fld, sym = (p.lower() for p in parts[1:])
    if obj != "matrix" or fmt != "coordinate":
        raise MatrixFormatError(f"malformed header: only 'matrix coordinate' is supported, got {header!r}")
    if fld not in ("real", "integer", "pattern"):
        raise MatrixFormatError(f"malformed header: unsupported field {fld!r}")
    if sym not in ("general", "symmetric"):
        raise MatrixFormatError(f"malformed header: unsupported symmetry {sym!r}")

    line = stream.readline()
    while line and (line.lstrip().startswith(b"%") or not line.strip()):
        line = stream.readline()
    size = line.split()
    if len(size) != 3:
        raise MatrixFormatError(f"malformed header: bad size line {line!r}")
    try:
        n_rows, n_cols, nnz = (int(s) for s in size)
    except ValueError as exc:
        raise MatrixFormatError(f"malformed header: bad size line {line!r}") from exc

    ncol = 2 if fld == "pattern" else 3
    body = b" ".join(l for l in stream.read().splitlines()
                     if l.strip() and not l.lstrip().startswith(b"%"))
    try:
        flat = np.array(body.split(), dtype=np.float64) if body else np.zeros(0)
    except ValueError as exc:
        raise MatrixFormatError("non-numeric entry") from exc
    if flat.size % ncol or flat.size // ncol != nnz:
        raise MatrixFormatError(f"entry count mismatch: declared {nnz}, found {flat.size / ncol:g}")
    table = flat.reshape(nnz, ncol)
    rows = table[:, 0].astype(np.int64) - 1
    cols = table[:, 1].astype(np.int64) - 1
    vals = np.ones(nnz) if fld == "pattern" else table[:, 2].copy()
    if nnz and (rows.min() < 0 or rows.max() >= n_rows or cols.min() < 0 or cols.max() >= n_cols):
        raise MatrixFormatError("index out of declared bounds")
    rows, cols, vals = _dedupe(rows, cols, vals)
    return CooMatrix(n_rows, n_cols, rows, cols, vals, symmetric_stored=(sym == "symmetric"))


def read_matrix_market(path: Union[str, Path]) -> CooMatrix:
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as fh:
        return parse_matrix_market(fh)


def load_csr(path: Union[str, Path]) -> CsrMatrix:
    """Read a .mtx file and return the fully expanded CSR matrix."""
    coo = read_matrix_market(path)
    if coo.symmetric_stored:
        coo = expand_symmetric(coo)
    return to_csr(coo)


def write_matrix_market(a: CsrMatrix, path: Union[str, Path], symmetric: bool = False) -> None:
    """Write ``a`` as a real coordinate file; ``symmetric`` stores the lower triangle only."""
    rows, cols, vals = a.row_of_entry(), a.col_idx, a.values
    if symmetric:
        keep = rows >= cols
        rows, cols, vals = rows[keep], cols[keep], vals[keep]
    with open(path, "w") as fh:
        fh.write(f"%%MatrixMarket matrix coordinate real {'symmetric' if symmetric else 'general'}\n")
        fh.write(f"{a.n} {a.n} {len(vals)}\n")
        for i, j, v in zip(rows.tolist(), cols.tolist(), vals.tolist()):
            fh.write(f"{i + 1} {j + 1} {v!r}\n")


def expand_symmetric(m: CooMatrix) -> CooMatrix:
    if not m.symmetric_stored:
        raise ValueError("matrix is not stored symmetrically")
    off = m.rows != m.cols
    rows = np.concatenate([m.rows, m.cols[off]])
    cols = np.concatenate([m.cols, m.rows[off]])
    vals = np.concatenate([m.values, m.values[off]])
    rows, cols, vals = _dedupe(rows, cols, vals)
    return CooMatrix(m.n_rows, m.n_cols, rows, cols, vals, symmetric_stored=False)


def to_csr(m: CooMatrix) -> CsrMatrix:
    if m.n_rows != m.n_cols:
        raise ValueError(f"non-square input: {m.n_rows}x{m.n_cols}")
    if m.symmetric_stored:
        raise ValueError("expand the symmetric storage before converting to CSR")
    rows, cols, vals = _dedupe(m.rows, m.cols, m.values)
    row_ptr = np.zeros(m.n_rows + 1, dtype=np.int64)
    np.cumsum(np.bincount(rows, minlength=m.n_rows), out=row_ptr[1:])
    return CsrMatrix(m.n_rows, row_ptr, cols.astype(np.int64), vals.astype(np.float64))


def csr_to_coo(a: CsrMatrix) -> CooMatrix:
    return CooMatrix(a.n, a.n, a.row_of_entry(), a.col_idx.copy(), a.values.copy())


def diagonal(a: CsrMatrix) -> np.ndarray:
    """Diagonal of ``a``; missing diagonal entries read as 0.0."""
    rows = a.row_of_entry()
    on_diag = rows == a.col_idx
    diag = np.zeros(a.n)
    diag[rows[on_diag]] = a.values[on_diag]
    return diag


def extract_jacobi(a: CsrMatrix) -> JacobiPreconditioner:
    diag = diagonal(a)
    bad = np.flatnonzero(diag == 0.0)
    if len(bad):
        raise SingularPreconditionerError(
            f"singular Jacobi preconditioner: zero or missing diagonal at row {int(bad[0])}")
    return JacobiPreconditioner(diag)


def find_asymmetry(a: CsrMatrix):
    """First (i, j), i <= j, with A[i][j] != A[j][i] (exact), or None."""
    rows = a.row_of_entry()
    t = to_csr(CooMatrix(a.n, a.n, a.col_idx, rows, a.values))
    if (np.array_equal(t.row_ptr, a.row_ptr) and np.array_equal(t.col_idx, a.col_idx)
            and np.array_equal(t.values, a.values)):
        return None
    # union of both patterns; a coordinate missing on one side reads as 0.0
    keys = np.concatenate([rows * a.n + a.col_idx, a.col_idx * a.n + rows])
    vals = np.concatenate([a.values, -a.values])
    order = np.argsort(keys, kind="stable")
    keys, vals = keys[order], vals[order]
    uniq, start = np.unique(keys, return_index=True)
    sums = np.add.reduceat(vals, start)
    bad = uniq[sums != 0.0]
    i, j = divmod(int(bad.min()), a.n) if len(bad) else (0, 0)
    return (min(i, j), max(i, j))


def validate_solver_input(a: CsrMatrix, b, x0) -> list[str]:
    """Collect problems that would invalidate a JPCG solve.

    Positive definiteness is not checked.
    """
    diagnostics = []
    b = np.asarray(b)
    x0 = np.asarray(x0)
    if b.shape != (a.n,):
        diagnostics.append(f"dimension mismatch: b has shape {b.shape}, expected ({a.n},)")
    if x0.shape != (a.n,):
        diagnostics.append(f"dimension mismatch: x0 has shape {x0.shape}, expected ({a.n},)")
    pos = find_asymmetry(a)
    if pos is not None:
        diagnostics.append(f"asymmetric at {pos}")
    zero = np.flatnonzero(diagonal(a) == 0.0)
    if len(zero):
        diagnostics.append(f"zero diagonal at row {int(zero[0])}")
    return diagnostics
