"""Rate matching, FIFO sizing and the per-iteration cycle model."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

DOT_PHASE2_II = 5  # final reduction over the delay buffer runs at II=5


def min_safe_depth(latency: int) -> int:
    """Smallest fast-side FIFO depth that avoids the join deadlock behind a pipeline of ``latency`` steps."""
    if latency < 0:
        raise ValueError("pipeline depth must be >= 0")
    return latency + 1


def matching_frequency(bw_per_channel: float, max_datawidth: float) -> float:
    """Clock frequency (Hz) at which one ``max_datawidth``-byte beat per cycle saturates a channel."""
    if max_datawidth <= 0:
        raise ValueError("max datawidth must be positive")
    if bw_per_channel <= 0:
        raise ValueError("bandwidth must be positive")
    return bw_per_channel / max_datawidth


@dataclass
class PhaseTiming:
    """Streams that run concurrently within one phase.

    ``pipeline_depths`` lists the stage latencies on the phase's critical
    path; ``dot_products`` is nonzero when the phase ends in a delay-buffer
    reduction (the reductions of one phase run side by side).
    """
    stream_lengths: Sequence[int]
    pipeline_depths: Sequence[int] = ()
    dot_products: int = 0
    name: str = ""


def estimate_iteration_cycles(phases: Sequence[PhaseTiming], l_acc: int = 8) -> int:
    total = 0
    for ph in phases:
        cycles = max(ph.stream_lengths, default=0) + sum(ph.pipeline_depths)
        if ph.dot_products:
            cycles += DOT_PHASE2_II * l_acc
        total += cycles
    return total


def solver_phase_timings(n: int, spmv_stream_len: int, *, m5_latency: int = 33,
                         spmv_latency: int = 0, skip_update_p: bool = False,
                         init: bool = False, naive: bool = False) -> list[PhaseTiming]:
    """Phase list for one solver iteration of the streamed dataflow.

    ``spmv_stream_len`` is the longest per-PE scheduled nonzero list
    (padding included). In the naive schedule every module is its own phase.
    """
    spmv = PhaseTiming([spmv_stream_len, n], [spmv_latency], name="spmv")
    if naive:
        phases = [spmv]
        if not init:
            phases.append(PhaseTiming([n], dot_products=1, name="M2"))
        phases += [PhaseTiming([n], name="M3"), PhaseTiming([n], name="M4"),
                   PhaseTiming([n], dot_products=1, name="M8")]
        if not skip_update_p:
            phases += [PhaseTiming([n], [m5_latency], name="M5"),
                       PhaseTiming([n], dot_products=1, name="M6"),
                       PhaseTiming([n], name="M7")]
        return phases
    phases = [spmv]
    if not init:
        phases.append(PhaseTiming([n], dot_products=1, name="phase1.2"))
    phases.append(PhaseTiming([n], [m5_latency], dot_products=1, name="phase2"))
    depths = [] if skip_update_p else [m5_latency]
    phases.append(PhaseTiming([n], depths, name="phase3"))
    return phases
