import gzip
import io

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import SPD2_MTX
from streamcg.matrix_io import (
    CooMatrix, CsrMatrix, MatrixFormatError, SingularPreconditionerError, csr_to_coo,
    expand_symmetric, extract_jacobi, find_asymmetry, load_csr, parse_matrix_market,
    read_matrix_market, to_csr, validate_solver_input,
)
from streamcg.reference import random_spd


def test_parse_symmetric_header():
    m = parse_matrix_market(SPD2_MTX)
    assert (m.n_rows, m.n_cols, m.nnz) == (2, 2, 3)
    assert m.symmetric_stored
    assert sorted(m.entries) == [(0, 0, 4.0), (1, 0, 1.0), (1, 1, 3.0)]


def test_parse_accepts_bytes_and_streams():
    a = parse_matrix_market(SPD2_MTX.encode())
    b = parse_matrix_market(io.BytesIO(SPD2_MTX.encode()))
    assert a.entries == b.entries


def test_entry_count_mismatch():
    text = "%%MatrixMarket matrix coordinate real general\n2 2 1\n"
    with pytest.raises(MatrixFormatError, match="entry count mismatch"):
        parse_matrix_market(text)


def test_index_out_of_bounds():
    text = "%%MatrixMarket matrix coordinate real general\n2 2 1\n3 1 1.0\n"
    with pytest.raises(MatrixFormatError, match="out of declared bounds"):
        parse_matrix_market(text)


@pytest.mark.parametrize("header", [
    "%%MatrixMarket matrix array real general",
    "%%MatrixMarket matrix coordinate complex general",
    "%%MatrixMarket matrix coordinate real skew-symmetric",
    "%%MatrixMarket matrix coordinate real hermitian",
    "MatrixMarket matrix coordinate real general",
])
def test_malformed_header(header):
    with pytest.raises(MatrixFormatError, match="malformed header"):
        parse_matrix_market(header + "\n1 1 1\n1 1 1.0\n")


def test_pattern_entries_read_as_one():
    text = "%%MatrixMarket matrix coordinate pattern general\n2 2 2\n1 1\n2 2\n"
    m = parse_matrix_market(text)
    assert m.values.tolist() == [1.0, 1.0]


def test_integer_field():
    text = "%%MatrixMarket matrix coordinate integer general\n1 1 1\n1 1 7\n"
    assert parse_matrix_market(text).values.tolist() == [7.0]


def test_duplicates_identical_dropped_conflicting_rejected():
    ok = "%%MatrixMarket matrix coordinate real general\n1 1 2\n1 1 2.5\n1 1 2.5\n"
    assert parse_matrix_market(ok).nnz == 1
    bad = "%%MatrixMarket matrix coordinate real general\n1 1 2\n1 1 2.5\n1 1 3.5\n"
    with pytest.raises(MatrixFormatError, match="conflicting duplicate"):
        parse_matrix_market(bad)


def test_expand_symmetric_mirror():
    m = expand_symmetric(parse_matrix_market(SPD2_MTX))
    assert not m.symmetric_stored
    assert sorted(m.entries) == [(0, 0, 4.0), (0, 1, 1.0), (1, 0, 1.0), (1, 1, 3.0)]


def test_expand_symmetric_diagonal_only():
    m = CooMatrix.from_entries(3, 3, [(i, i, 1.0 + i) for i in range(3)], symmetric_stored=True)
    assert expand_symmetric(m).nnz == 3


def test_expand_symmetric_conflict():
    m = CooMatrix.from_entries(2, 2, [(1, 0, 1.0), (0, 1, 2.0)], symmetric_stored=True)
    with pytest.raises(MatrixFormatError, match="conflicting duplicate"):
        expand_symmetric(m)


def test_to_csr_small():
    a = to_csr(expand_symmetric(parse_matrix_market(SPD2_MTX)))
    assert a.row_ptr.tolist() == [0, 2, 4]
    assert a.col_idx.tolist() == [0, 1, 0, 1]
    assert a.values.tolist() == [4.0, 1.0, 1.0, 3.0]
    a.check_invariants()


def test_to_csr_single_entry():
    a = to_csr(CooMatrix.from_entries(1, 1, [(0, 0, 5.0)]))
    assert a.row_ptr.tolist() == [0, 1]


def test_to_csr_rejects_non_square():
    with pytest.raises(ValueError, match="non-square"):
        to_csr(CooMatrix.from_entries(2, 3, [(0, 0, 1.0)]))


def test_csr_round_trip_random():
    rng = np.random.default_rng(3)
    n = 50
    k = 400
    rows = rng.integers(0, n, k)
    cols = rng.integers(0, n, k)
    key = np.unique(rows * n + cols)
    rows, cols = key // n, key % n
    vals = rng.standard_normal(len(key))
    perm = rng.permutation(len(key))
    coo = CooMatrix(n, n, rows[perm], cols[perm], vals[perm])
    back = csr_to_coo(to_csr(coo))
    canon = coo.canonical()
    assert np.array_equal(back.rows, canon.rows)
    assert np.array_equal(back.cols, canon.cols)
    assert np.array_equal(back.values.view(np.int64), canon.values.view(np.int64))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(allow_nan=False, width=64), min_size=1, max_size=20))
def test_to_csr_preserves_bits(values):
    n = len(values)
    coo = CooMatrix(n, n, np.arange(n), (np.arange(n) * 7) % n, np.array(values))
    a = to_csr(coo)
    back = csr_to_coo(a)
    # entries stay at their own coordinates; compare through a dense lookup of bit patterns
    got = dict(zip(zip(back.rows.tolist(), back.cols.tolist()), back.values.view(np.int64).tolist()))
    want = dict(zip(zip(coo.rows.tolist(), coo.cols.tolist()), coo.values.view(np.int64).tolist()))
    assert got == want


def test_extract_jacobi(spd2):
    assert extract_jacobi(spd2).diag.tolist() == [4.0, 3.0]
    assert extract_jacobi(CsrMatrix.identity(10)).diag.tolist() == [1.0] * 10


def test_extract_jacobi_zero_diagonal():
    a = CsrMatrix.from_dense(np.array([[4.0, 1.0], [1.0, 0.0]]))
    with pytest.raises(SingularPreconditionerError, match="singular Jacobi preconditioner"):
        extract_jacobi(a)


def test_spd_diagonal_positive():
    for seed in range(10):
        assert np.all(extract_jacobi(random_spd(20, seed)).diag > 0)


def test_validate_clean(spd2):
    assert validate_solver_input(spd2, np.ones(2), np.zeros(2)) == []


def test_validate_asymmetric():
    a = CsrMatrix.from_dense(np.array([[4.0, 1.0], [2.0, 3.0]]))
    assert find_asymmetry(a) == (0, 1)
    assert "asymmetric at (0, 1)" in validate_solver_input(a, np.ones(2), np.zeros(2))


def test_validate_asymmetric_pattern():
    a = CsrMatrix.from_dense(np.array([[4.0, 0.0, 0.0], [0.0, 3.0, 1.0], [0.0, 0.0, 2.0]]))
    assert find_asymmetry(a) == (1, 2)


def test_validate_dimension_and_diagonal():
    a = CsrMatrix.from_dense(np.array([[0.0, 1.0], [1.0, 3.0]]))
    diags = validate_solver_input(a, np.ones(3), np.zeros(2))
    assert any(d.startswith("dimension mismatch") for d in diags)
    assert "zero diagonal at row 0" in diags


def test_load_csr_plain_and_gzip(spd2_file, tmp_path):
    a = load_csr(spd2_file)
    gz = tmp_path / "spd2.mtx.gz"
    with gzip.open(gz, "wt") as fh:
        fh.write(SPD2_MTX)
    b = load_csr(gz)
    assert a.to_dense().tolist() == [[4.0, 1.0], [1.0, 3.0]]
    assert np.array_equal(a.values, b.values)
    assert read_matrix_market(gz).symmetric_stored
