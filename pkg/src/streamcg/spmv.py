"""Streamed sparse matrix-vector multiply with selectable FP32/FP64 precision.

Rows are dealt round-robin over ``n_channels * n_pes`` processing-engine
lanes. Inside a lane, entries of the same row must sit at least
``dep_distance`` slots apart so that an accumulation has retired before the
next one into the same row starts; the scheduler interleaves rows greedily
and pads with no-ops only when nothing else is eligible.
"""

from __future__ import annotations

import enum
import heapq
import math
from dataclasses import dataclass, field

import numpy as np

from .matrix_io import CsrMatrix
from .runtime import fp64_hex

X_WINDOW = 4096
Y_DEPTH = 24576
COL_INDEX_BITS = 14
ROW_INDEX_BITS = 18


class PrecisionScheme(enum.Enum):
    DEFAULT_FP64 = ("fp64", 64, 64, 64)
    MIXED_V1 = ("mixed-v1", 32, 32, 32)
    MIXED_V2 = ("mixed-v2", 32, 32, 64)
    MIXED_V3 = ("mixed-v3", 32, 64, 64)

    def __init__(self, label, matrix_bits, input_bits, output_bits):
        self.label = label
        self.matrix_bits = matrix_bits
        self.input_bits = input_bits
        self.output_bits = output_bits

    @property
    def bits(self) -> tuple[int, int, int]:
        return (self.matrix_bits, self.input_bits, self.output_bits)

    @classmethod
    def parse(cls, text) -> "PrecisionScheme":
        if isinstance(text, cls):
            return text
        key = str(text).lower().replace("_", "-")
        aliases = {"default": "fp64", "default-fp64": "fp64", "v1": "mixed-v1", "v2": "mixed-v2",
                   "v3": "mixed-v3"}
        key = aliases.get(key, key)
        for s in cls:
            if s.label == key:
                return s
        raise ValueError(f"unknown precision scheme {text!r}")


def _dtype(bits):
    return np.float32 if bits == 32 else np.float64


class PrecisionOverflowError(OverflowError):
    pass


def cast_values(values: np.ndarray, scheme: PrecisionScheme, rows=None, cols=None) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    if scheme.matrix_bits == 64:
        return values.copy()
    with np.errstate(over="ignore"):
        out = values.astype(np.float32)
    bad = np.flatnonzero(np.isinf(out) & np.isfinite(values))
    if len(bad):
        k = int(bad[0])
        where = f"({int(rows[k])}, {int(cols[k])})" if rows is not None else f"entry {k}"
        raise PrecisionOverflowError(f"value {float(values[k])!r} at {where} overflows FP32")
    return out


def cast_matrix(a: CsrMatrix, scheme: PrecisionScheme) -> np.ndarray:
    """Matrix values at the scheme's storage precision (FP32 uses round-to-nearest-even)."""
    return cast_values(a.values, scheme, a.row_of_entry(), a.col_idx)


@dataclass
class ScheduledNonzeros:
    n: int
    n_channels: int
    n_pes: int
    dep_distance: int
    scheme: PrecisionScheme
    # one entry per lane (channel * n_pes + pe); row == -1 marks a no-op slot
    lane_rows: list[np.ndarray]
    lane_cols: list[np.ndarray]
    lane_values: list[np.ndarray]
    _plan: object = field(default=None, repr=False, compare=False)

    @property
    def n_lanes(self) -> int:
        return self.n_channels * self.n_pes

    @property
    def padding_count(self) -> int:
        return int(sum(np.count_nonzero(r < 0) for r in self.lane_rows))

    @property
    def max_lane_length(self) -> int:
        return max((len(r) for r in self.lane_rows), default=0)

    def lane_of_row(self, row):
        return np.asarray(row) % self.n_lanes

    def entries(self):
        """Real (non-padding) entries as (lane, seq, row, col, value) arrays."""
        lanes, seqs, rows, cols, vals = [], [], [], [], []
        for lane, (r, c, v) in enumerate(zip(self.lane_rows, self.lane_cols, self.lane_values)):
            keep = np.flatnonzero(r >= 0)
            lanes.append(np.full(len(keep), lane, dtype=np.int64))
            seqs.append(keep)
            rows.append(r[keep])
            cols.append(c[keep])
            vals.append(v[keep])
        cat = lambda xs, dt: np.concatenate(xs) if xs else np.zeros(0, dtype=dt)
        return (cat(lanes, np.int64), cat(seqs, np.int64), cat(rows, np.int64), cat(cols, np.int64),
                cat(vals, np.float64))

    def spacing_ok(self) -> bool:
        for r in self.lane_rows:
            last = {}
            for pos, row in enumerate(r.tolist()):
                if row < 0:
                    continue
                if row in last and pos - last[row] < self.dep_distance:
                    return False
                last[row] = pos
        return True

    def dump_lines(self) -> list[str]:
        lines = []
        for lane, (r, c, v) in enumerate(zip(self.lane_rows, self.lane_cols, self.lane_values)):
            for seq, (row, col, val) in enumerate(zip(r.tolist(), c.tolist(), v.tolist())):
                if row < 0:
                    lines.append(f"{lane} {seq} nop")
                else:
                    lines.append(f"{lane} {seq} {row} {col} {fp64_hex(val)}")
        return lines


def _order_lane(rows: np.ndarray, dep: int) -> np.ndarray:
    """Slot order for one lane; -1 marks a no-op. ``rows`` is grouped by row."""
    m = len(rows)
    if dep <= 1 or m == 0:
        return np.arange(m)
    boundaries = np.flatnonzero(np.diff(rows)) + 1
    starts = np.concatenate([[0], boundaries]).tolist()
    ends = np.concatenate([boundaries, [m]]).tolist()
    nxt = list(starts)
    eligible = [(s, g) for g, s in enumerate(starts)]
    heapq.heapify(eligible)
    cooling: list = []
    out = []
    pos = 0
    while eligible or cooling:
        while cooling and cooling[0][0] <= pos:
            _, idx, g = heapq.heappop(cooling)
            heapq.heappush(eligible, (idx, g))
        if eligible:
            idx, g = heapq.heappop(eligible)
            out.append(idx)
            nxt[g] = idx + 1
            if nxt[g] < ends[g]:
                heapq.heappush(cooling, (pos + dep, nxt[g], g))
        else:
            out.append(-1)
        pos += 1
    return np.asarray(out, dtype=np.int64)


def schedule_nonzeros(a: CsrMatrix, n_channels: int = 16, n_pes: int = 8, dep_distance: int = 5,
                      scheme: PrecisionScheme = PrecisionScheme.DEFAULT_FP64) -> ScheduledNonzeros:
    if dep_distance < 1:
        raise ValueError("dep_distance must be >= 1")
    if n_channels < 1 or n_pes < 1:
        raise ValueError("need at least one channel and one PE")
    fan_out = n_channels * n_pes
    rows = a.row_of_entry()
    values = cast_values(a.values, scheme, rows, a.col_idx)
    lanes = rows % fan_out
    # stable: keeps row-major order inside each lane
    by_lane = np.argsort(lanes, kind="stable")
    counts = np.bincount(lanes, minlength=fan_out)
    offsets = np.concatenate([[0], np.cumsum(counts)])
    lane_rows, lane_cols, lane_values = [], [], []
    for lane in range(fan_out):
        idx = by_lane[offsets[lane]:offsets[lane + 1]]
        slots = _order_lane(rows[idx], dep_distance)
        nop = slots < 0
        pick = idx[np.where(nop, 0, slots)] if len(idx) else np.zeros(len(slots), dtype=np.int64)
        r = np.where(nop, -1, rows[pick] if len(idx) else -1)
        c = np.where(nop, 0, a.col_idx[pick] if len(idx) else 0)
        v = np.where(nop, 0.0, values[pick] if len(idx) else 0.0).astype(values.dtype)
        lane_rows.append(r.astype(np.int64))
        lane_cols.append(c.astype(np.int64))
        lane_values.append(v)
    return ScheduledNonzeros(a.n, n_channels, n_pes, dep_distance, scheme, lane_rows, lane_cols,
                             lane_values)


@dataclass
class _SpmvPlan:
    levels: list  # per accumulation step: (pair ids, cols, values)
    combine: list  # per lane-rank: (rows, pair ids)
    n_pairs: int


def _build_plan(sched: ScheduledNonzeros) -> _SpmvPlan:
    lanes, seqs, rows, cols, vals = sched.entries()
    if sched.scheme.matrix_bits == 32:
        vals = vals.astype(np.float32)
    # scheduled order is (lane, seq); entries() already returns it that way
    pair_key = lanes * max(sched.n, 1) + rows
    uniq, pair_id = np.unique(pair_key, return_inverse=True)
    order = np.argsort(pair_id, kind="stable")
    sorted_ids = pair_id[order]
    first = np.searchsorted(sorted_ids, sorted_ids, side="left")
    rank = np.empty(len(order), dtype=np.int64)
    rank[order] = np.arange(len(order)) - first
    levels = []
    by_rank = np.argsort(rank, kind="stable")
    bounds = np.cumsum(np.bincount(rank)) if len(rank) else []
    start = 0
    for stop in bounds:
        sel = by_rank[start:stop]
        levels.append((pair_id[sel], cols[sel], vals[sel]))
        start = stop
    pair_lane = uniq // max(sched.n, 1)
    pair_row = uniq % max(sched.n, 1)
    # partial rows combine in ascending lane order
    order2 = np.lexsort((pair_lane, pair_row))
    r_sorted = pair_row[order2]
    first2 = np.searchsorted(r_sorted, r_sorted, side="left")
    rank2 = np.arange(len(order2)) - first2
    combine = []
    for k in range(int(rank2.max()) + 1 if len(rank2) else 0):
        sel = order2[rank2 == k]
        combine.append((pair_row[sel], sel))
    return _SpmvPlan(levels, combine, len(uniq))


def spmv_streamed(sched: ScheduledNonzeros, x, scheme: PrecisionScheme | None = None) -> np.ndarray:
    """y = A x evaluated in the scheduled accumulation order.

    The matrix is used at the precision it was scheduled with; ``x`` is read
    at the scheme's input precision and products/sums run at the output
    precision. The result is returned widened to FP64.
    """
    scheme = sched.scheme if scheme is None else scheme
    if scheme.matrix_bits != sched.scheme.matrix_bits:
        raise ValueError(f"schedule holds {sched.scheme.matrix_bits}-bit values, scheme wants "
                         f"{scheme.matrix_bits}-bit")
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (sched.n,):
        raise ValueError(f"dimension mismatch: x has shape {x.shape}, expected ({sched.n},)")
    if sched._plan is None:
        sched._plan = _build_plan(sched)
    plan = sched._plan
    acc = _dtype(scheme.output_bits)
    xin = x.astype(_dtype(scheme.input_bits)).astype(acc)
    partial = np.zeros(plan.n_pairs, dtype=acc)
    for ids, cols, vals in plan.levels:
        partial[ids] += vals.astype(acc) * xin[cols]
    y = np.zeros(sched.n, dtype=acc)
    for rows, ids in plan.combine:
        y[rows] += partial[ids]
    return y.astype(np.float64)


@dataclass
class HwLimitReport:
    violations: list[str]
    n_windows: int

    @property
    def ok(self) -> bool:
        return not self.violations


def check_hw_limits(sched: ScheduledNonzeros, n: int | None = None, column_tiling: bool = True,
                    hardware_faithful: bool = True) -> HwLimitReport:
    """Check the 14-bit column window and 18-bit row index of the packed nonzero format.

    With column tiling the X buffer is refilled once per 4096-column window.
    A channel partition must hold fewer than 2**18 rows.
    """
    n = sched.n if n is None else n
    n_windows = max(1, math.ceil(n / X_WINDOW)) if column_tiling else 1
    if not hardware_faithful:
        return HwLimitReport([], n_windows)
    violations = []
    if not column_tiling and n > X_WINDOW:
        violations.append(f"column window of {n} entries exceeds X buffer depth {X_WINDOW} "
                          f"(column {X_WINDOW} needs more than {COL_INDEX_BITS} bits)")
    fan_out = sched.n_channels * sched.n_pes
    for ch in range(sched.n_channels):
        lanes = range(ch * sched.n_pes, (ch + 1) * sched.n_pes)
        rows_in_partition = sum(len(range(lane, n, fan_out)) for lane in lanes)
        if rows_in_partition >= 2 ** ROW_INDEX_BITS:
            violations.append(f"channel {ch} partition holds {rows_in_partition} rows; "
                              f"row index reaches 2^{ROW_INDEX_BITS}")
    return HwLimitReport(violations, n_windows)
