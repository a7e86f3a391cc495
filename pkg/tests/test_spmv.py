from collections import Counter

import numpy as np
import pytest

from streamcg.matrix_io import CsrMatrix
from streamcg.reference import random_spd, spmv_reference
from streamcg.spmv import (
    PrecisionOverflowError, PrecisionScheme, cast_matrix, cast_values, check_hw_limits,
    schedule_nonzeros, spmv_streamed,
)

ALL = list(PrecisionScheme)


def test_scheme_bits():
    assert PrecisionScheme.DEFAULT_FP64.bits == (64, 64, 64)
    assert PrecisionScheme.MIXED_V1.bits == (32, 32, 32)
    assert PrecisionScheme.MIXED_V2.bits == (32, 32, 64)
    assert PrecisionScheme.MIXED_V3.bits == (32, 64, 64)
    assert PrecisionScheme.parse("mixed-v3") is PrecisionScheme.MIXED_V3
    with pytest.raises(ValueError):
        PrecisionScheme.parse("fp16")


def test_cast_point_one():
    v = cast_values(np.array([0.1]), PrecisionScheme.MIXED_V3)
    assert v.dtype == np.float32
    assert v.view(np.uint32)[0] == 0x3DCCCCCD
    err = abs(float(v[0]) - 0.1)
    assert err == pytest.approx(1.49e-9, rel=1e-2)  # absolute; about 1.5e-8 relative


def test_cast_exact_and_identity():
    for s in ALL:
        assert float(cast_values(np.array([2.0]), s)[0]) == 2.0
    vals = np.random.default_rng(0).standard_normal(20)
    out = cast_values(vals, PrecisionScheme.DEFAULT_FP64)
    assert np.array_equal(out.view(np.int64), vals.view(np.int64))


def test_cast_overflow_names_coordinate():
    a = CsrMatrix.from_dense(np.array([[1.0, 0.0], [0.0, 1e300]]))
    with pytest.raises(PrecisionOverflowError, match=r"\(1, 1\)"):
        cast_matrix(a, PrecisionScheme.MIXED_V1)


def _multiset(a):
    rows = a.row_of_entry()
    return Counter(zip(rows.tolist(), a.col_idx.tolist(), a.values.tolist()))


def test_identity_schedule_no_padding():
    s = schedule_nonzeros(CsrMatrix.identity(8), 1, 1, dep_distance=3)
    assert s.padding_count == 0
    assert s.lane_rows[0].tolist() == list(range(8))


def test_single_row_spacing():
    a = CsrMatrix(1, np.array([0, 5]), np.arange(5), np.arange(1.0, 6.0))
    a.n = 5  # one dense row inside a 5x5 matrix
    a.row_ptr = np.array([0, 5, 5, 5, 5, 5])
    s = schedule_nonzeros(a, 1, 1, dep_distance=3)
    assert s.spacing_ok()
    assert s.padding_count == 8  # two no-ops between each of the five entries
    r = s.lane_rows[0]
    pos = np.flatnonzero(r >= 0)
    assert np.all(np.diff(pos) >= 3)


@pytest.mark.parametrize("seed", range(5))
def test_schedule_preserves_multiset_and_spacing(seed):
    a = random_spd(60, seed, density=0.5)
    s = schedule_nonzeros(a, 2, 3, dep_distance=5)
    assert s.spacing_ok()
    _, _, rows, cols, vals = s.entries()
    assert Counter(zip(rows.tolist(), cols.tolist(), vals.tolist())) == _multiset(a)


def test_dump_lines_format():
    s = schedule_nonzeros(CsrMatrix.from_dense(np.array([[4.0, 1.0], [1.0, 3.0]])), 1, 1, 2)
    lines = s.dump_lines()
    assert lines[0] == "0 0 0 0 4010000000000000"
    assert any(line.endswith("nop") for line in lines) or s.padding_count == 0


def test_small_exact():
    a = CsrMatrix.from_dense(np.array([[4.0, 1.0], [1.0, 3.0]]))
    s = schedule_nonzeros(a)
    assert spmv_streamed(s, np.ones(2)).tolist() == [5.0, 4.0]


@pytest.mark.parametrize("scheme", [PrecisionScheme.DEFAULT_FP64, PrecisionScheme.MIXED_V3])
def test_identity_is_exact(scheme):
    x = np.random.default_rng(1).standard_normal(30)
    s = schedule_nonzeros(CsrMatrix.identity(30), 4, 2, scheme=scheme)
    assert np.array_equal(spmv_streamed(s, x), x)


def test_identity_mixed_v2_reads_x_in_fp32():
    x = np.random.default_rng(1).standard_normal(30)
    s = schedule_nonzeros(CsrMatrix.identity(30), 4, 2, scheme=PrecisionScheme.MIXED_V2)
    assert np.array_equal(spmv_streamed(s, x), x.astype(np.float32).astype(np.float64))


def test_dimension_mismatch():
    s = schedule_nonzeros(CsrMatrix.identity(3))
    with pytest.raises(ValueError, match="dimension mismatch"):
        spmv_streamed(s, np.ones(4))


@pytest.mark.parametrize("seed", range(100))
def test_single_pe_in_order_matches_reference(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 65))
    a = random_spd(n, seed)
    x = rng.standard_normal(n)
    s = schedule_nonzeros(a, 1, 1, dep_distance=1)
    y = spmv_streamed(s, x)
    assert np.array_equal(y.view(np.int64), spmv_reference(a, x).view(np.int64))


def test_multi_lane_close_to_reference():
    a = random_spd(64, 7)
    x = np.random.default_rng(7).standard_normal(64)
    y = spmv_streamed(schedule_nonzeros(a, 4, 4, 5), x)
    assert np.allclose(y, spmv_reference(a, x), rtol=1e-13, atol=1e-12)


def test_mixed_v3_is_cast_then_fp64():
    a = random_spd(40, 2)
    x = np.random.default_rng(2).standard_normal(40)
    a32 = CsrMatrix(a.n, a.row_ptr, a.col_idx, a.values.astype(np.float32).astype(np.float64))
    y = spmv_streamed(schedule_nonzeros(a, 1, 1, 1, PrecisionScheme.MIXED_V3), x)
    assert np.array_equal(y, spmv_reference(a32, x))


def test_mixed_v1_runs_in_fp32():
    a = random_spd(40, 4)
    x = np.random.default_rng(4).standard_normal(40)
    y = spmv_streamed(schedule_nonzeros(a, 1, 1, 1, PrecisionScheme.MIXED_V1), x)
    ref = spmv_reference(a, x, PrecisionScheme.MIXED_V1)
    assert np.array_equal(y, ref)
    assert np.array_equal(y, y.astype(np.float32).astype(np.float64))


def test_hw_limits():
    assert check_hw_limits(schedule_nonzeros(CsrMatrix.identity(1000))).ok
    rep = check_hw_limits(schedule_nonzeros(CsrMatrix.identity(20000)), column_tiling=True)
    assert rep.ok and rep.n_windows == 5
    untiled = check_hw_limits(schedule_nonzeros(CsrMatrix.identity(20000)), column_tiling=False)
    assert not untiled.ok and "4096" in untiled.violations[0]


def test_hw_row_limit_single_partition():
    s = schedule_nonzeros(CsrMatrix.identity(4), 1, 1)
    rep = check_hw_limits(s, n=2 ** 18)
    assert not rep.ok and "row index" in rep.violations[0]
    assert check_hw_limits(s, n=2 ** 18, hardware_faithful=False).ok
