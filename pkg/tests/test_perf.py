import pytest

from streamcg.perf import (
    DOT_PHASE2_II, PhaseTiming, estimate_iteration_cycles, matching_frequency, min_safe_depth,
    solver_phase_timings,
)


def test_min_safe_depth():
    assert min_safe_depth(33) == 34
    assert min_safe_depth(0) == 1
    with pytest.raises(ValueError):
        min_safe_depth(-1)


def test_matching_frequency_unit_and_table_values():
    assert matching_frequency(64, 64) == 1.0
    assert matching_frequency(460e9 / 32, 64) == 224_609_375.0
    assert round(matching_frequency(460e9 / 32, 64) / 1e6) == 225
    assert matching_frequency(345e9 / 16, 64) == pytest.approx(336.9e6, rel=1e-3)


@pytest.mark.parametrize("bw,width", [(1.0, 0), (0, 64), (-1.0, 64)])
def test_matching_frequency_rejects(bw, width):
    with pytest.raises(ValueError):
        matching_frequency(bw, width)


def test_cycle_model_examples():
    assert estimate_iteration_cycles([PhaseTiming([1000], [33])]) == 1033
    assert estimate_iteration_cycles([PhaseTiming([1000, 600])]) == 1000
    assert estimate_iteration_cycles([PhaseTiming([500], [7], dot_products=1)]) == 500 + 5 * 8 + 7
    assert DOT_PHASE2_II == 5


def test_solver_phase_timings_shapes():
    steady = solver_phase_timings(100, 40)
    init = solver_phase_timings(100, 40, init=True)
    assert len(steady) == len(init) + 1
    naive = solver_phase_timings(100, 40, naive=True)
    assert len(naive) == 8
    last = solver_phase_timings(100, 40, naive=True, skip_update_p=True)
    assert len(last) == 5
    assert estimate_iteration_cycles(steady) > estimate_iteration_cycles(
        solver_phase_timings(100, 40, skip_update_p=True))
