"""Global controller: instruction bundles, scalar bookkeeping and the solve loop.

The initialization lines of JPCG run as iteration ``rp = -1`` of the main
loop on the same modules: the host preloads the read side of ``p`` and ``x``
with ``x0`` and the read side of ``r`` with ``b``; M1 then forms ``A x0``,
M4 runs with alpha = 1 (``r = b - A x0``), M7 runs with beta = 0
(``p = z``) and M3 runs with alpha = 0 (copying ``x0`` across the ping-pong
pair). M2 is skipped because no alpha is needed.

M8 (``r . r``) sits right after M4 in the phase-2 chain, so the controller
knows whether the solve has converged before issuing phase 3 and can leave
out M5, M6 and M7 on the final iteration. The bundle layout beyond those two
transformations is a reconstruction from the three-phase wiring.
"""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import asdict, dataclass, field

import numpy as np

from . import modules as mod
from .isa import InstCmp, InstVCtrl
from .matrix_io import CsrMatrix, diagonal, validate_solver_input
from .memory import DoubleChannelBinding, MemoryChannelModel, SingleChannelBinding
from .perf import estimate_iteration_cycles, min_safe_depth, solver_phase_timings
from .reference import BreakdownError
from .runtime import DataflowGraph, recv, run_dataflow, send
from .spmv import PrecisionScheme, check_hw_limits, schedule_nonzeros, spmv_streamed

log = logging.getLogger(__name__)

SCHEDULE_MODES = ("naive", "decentralized")


class SolverError(RuntimeError):
    pass


class SolverDeadlockError(SolverError):
    def __init__(self, blocked):
        self.blocked = dict(blocked)
        ops = ", ".join(f"{k}: {v}" for k, v in sorted(self.blocked.items()))
        super().__init__(f"dataflow deadlock ({ops})")


class HardwareLimitError(SolverError):
    pass


@dataclass
class SolverConfig:
    tol: float = 1e-12
    max_iters: int = 20000
    scheme: PrecisionScheme = PrecisionScheme.DEFAULT_FP64
    schedule_mode: str = "decentralized"
    fifo_depths: dict = field(default_factory=dict)
    n_channels: int = 16
    n_pes: int = 8
    dep_distance: int = 5
    hardware_faithful: bool = False
    block: int = 8  # words per stream element
    scheduler: str = "deterministic"
    record: bool = False
    early_exit: bool = True
    m5_latency: int = mod.DEFAULT_M5_LATENCY
    l_acc: int = mod.DEFAULT_L_ACC
    default_depth: int = 2
    step_budget: int | None = None

    def __post_init__(self):
        if not self.tol > 0:
            raise ValueError("tol must be > 0")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if self.schedule_mode not in SCHEDULE_MODES:
            raise ValueError(f"schedule_mode must be one of {SCHEDULE_MODES}")
        if self.block < 1:
            raise ValueError("block must be >= 1")
        if isinstance(self.scheme, str):
            self.scheme = PrecisionScheme.parse(self.scheme)


@dataclass
class ScalarState:
    rz: float = 0.0
    rr: float = float("inf")
    rz_new: float = 0.0
    alpha: float = 0.0
    beta: float = 0.0
    rp: int = -1


@dataclass
class SolverReport:
    converged: bool
    iterations: int
    final_rr: float
    termination: str
    residual_trace: list
    vector_read_count: list
    vector_write_count: list
    read_split: list
    reads_per_iteration: int | None
    writes_per_iteration: int | None
    instruction_log_length: int
    write_instructions: int
    mem_responses: int
    padding_count: int
    estimated_cycles: int
    parity_flips: dict
    schedule_mode: str
    scheme: str
    n: int
    nnz: int

    def to_dict(self) -> dict:
        return asdict(self)


def compute_alpha(rz: float, p_dot_ap: float, rp: int = 0) -> float:
    if not p_dot_ap > 0.0:
        raise BreakdownError(f"CG breakdown: p.ap = {p_dot_ap!r} at iteration {rp}")
    return rz / p_dot_ap


def compute_beta(rz_new: float, rz: float, rp: int = 0) -> float:
    if rz == 0.0:
        raise BreakdownError(f"CG breakdown: rz = 0 at iteration {rp}")
    return rz_new / rz


def scalar_step(rz: float, rz_new: float, p_dot_ap: float) -> tuple[float, float]:
    return compute_alpha(rz, p_dot_ap), compute_beta(rz_new, rz)


def should_terminate(rr: float, rp: int, cfg: SolverConfig) -> tuple[bool, str | None]:
    if rr <= cfg.tol:
        return True, "converged"
    if rp + 1 >= cfg.max_iters:
        return True, "budget"
    return False, None


# ---------------------------------------------------------------- bundles

DECENTRALIZED_STEPS = ("phase1", "phase2_prefetch", "phase2", "phase3")
NAIVE_STEPS = ("M1", "M2", "M3", "M4", "M8", "M5", "M6", "M7")


def _rd(q, n):
    return InstVCtrl(1, 0, 0, n, q)


def _wr(q, n):
    return InstVCtrl(0, 1, 0, n, q)


def _rdwr(q, n):
    return InstVCtrl(1, 1, 0, n, q)


def _cmp(q, n, alpha=0.0):
    return InstCmp(n, float(alpha), q)


def bundle(step: str, rp: int, n: int, mode: str = "decentralized", alpha: float = 0.0,
           beta: float = 0.0, exit: bool = False) -> list:
    """Instructions ``[(target, inst), ...]`` for one step of iteration ``rp``.

    ``alpha`` is the iteration's alpha; at ``rp = -1`` the fixed init values
    (1 for M4, 0 for M3 and M7) are substituted. An empty list means the
    step is skipped.
    """
    init = rp == -1
    a_r = 1.0 if init else alpha
    a_x = 0.0 if init else alpha
    b_p = 0.0 if init else beta
    if mode == "decentralized":
        if step == "phase1":
            out = [("VC_p", _rd(0, n)), ("VC_ap", _wr(0, n)), ("M1", _cmp(1 if init else 0, n))]
            if not init:  # prefetch p for M2 alongside M1
                out += [("VC_p", _rd(1, n)), ("M2", _cmp(0, n))]
            return out
        if step == "phase2_prefetch":
            return [("VC_r", _rd(0, n)), ("VC_M", _rd(0, n)), ("M8", _cmp(0, n)),
                    ("M5", _cmp(0, n)), ("M6", _cmp(0, n))]
        if step == "phase2":
            return [("VC_ap", _rd(1, n)), ("M4", _cmp(0, n, a_r))]
        if step == "phase3":
            if exit:
                return [("VC_r", _rdwr(2, n)), ("VC_ap", _rd(1, n)), ("M4", _cmp(2, n, a_r)),
                        ("VC_p", _rd(3, n)), ("VC_x", _rdwr(0, n)), ("M3", _cmp(1, n, a_x))]
            return [("VC_r", _rdwr(1, n)), ("VC_ap", _rd(1, n)), ("VC_M", _rd(0, n)),
                    ("M4", _cmp(1, n, a_r)), ("M5", _cmp(1, n)),
                    ("VC_p", _rdwr(2, n)), ("M7", _cmp(0, n, b_p)),
                    ("VC_x", _rdwr(0, n)), ("M3", _cmp(0, n, a_x))]
    elif mode == "naive":
        if step == "M1":
            return [("VC_p", _rd(0, n)), ("VC_ap", _wr(0, n)), ("M1", _cmp(0, n))]
        if step == "M2":
            return [] if init else [("VC_p", _rd(1, n)), ("VC_ap", _rd(1, n)), ("M2", _cmp(0, n))]
        if step == "M3":
            return [("VC_x", _rd(0, n)), ("VC_p", _rd(2, n)), ("VC_x", _wr(1, n)),
                    ("M3", _cmp(0, n, a_x))]
        if step == "M4":
            return [("VC_r", _rd(0, n)), ("VC_ap", _rd(2, n)), ("VC_r", _wr(1, n)),
                    ("M4", _cmp(0, n, a_r))]
        if step == "M8":
            return [("VC_r", _rd(2, n)), ("M8", _cmp(0, n))]
        if exit:
            return []
        if step == "M5":
            return [("VC_M", _rd(0, n)), ("VC_r", _rd(3, n)), ("VC_z", _wr(0, n)), ("M5", _cmp(0, n))]
        if step == "M6":
            return [("VC_r", _rd(4, n)), ("VC_z", _rd(1, n)), ("M6", _cmp(0, n))]
        if step == "M7":
            return [("VC_z", _rd(2, n)), ("VC_p", _rd(3, n)), ("VC_p", _wr(4, n)),
                    ("M7", _cmp(0, n, b_p))]
    else:
        raise ValueError(f"unknown schedule mode {mode!r}")
    raise ValueError(f"unknown step {step!r} for {mode} schedule")


def issue_sequence(rp: int, n: int, mode: str = "decentralized", exit: bool = False,
                   alpha: float = 0.0, beta: float = 0.0) -> list:
    """The full ordered instruction bundle of iteration ``rp``."""
    steps = DECENTRALIZED_STEPS if mode == "decentralized" else NAIVE_STEPS
    out = []
    for step in steps:
        out += bundle(step, rp, n, mode, alpha, beta, exit)
    return out


def phase_traffic(rp: int, n: int, mode: str = "decentralized", exit: bool = False) -> dict:
    """Vector reads and writes requested by each step of iteration ``rp``.

    Derived from the instruction bundles: ``{step: {"reads": Counter, "writes": Counter}}``
    keyed by vector name. The solver's memory counters must agree with the totals.
    """
    steps = DECENTRALIZED_STEPS if mode == "decentralized" else NAIVE_STEPS
    out = {}
    for step in steps:
        reads, writes = Counter(), Counter()
        for target, ins in bundle(step, rp, n, mode, exit=exit):
            if isinstance(ins, InstVCtrl):
                vec = target[len("VC_"):]
                reads[vec] += ins.rd
                writes[vec] += ins.wr
        out[step] = {"reads": +reads, "writes": +writes}
    return out


# ---------------------------------------------------------------- graph construction

@dataclass
class SolverGraph:
    graph: DataflowGraph
    bindings: dict
    channels: list
    vc_fsms: dict
    cmp_fsms: dict
    result: dict


def default_fifo_depths(cfg: SolverConfig) -> dict:
    # the fast side of the M5 -> M6 join must cover M5's pipeline latency
    return {mod.channel_name("M5", "M6", "r"): min_safe_depth(cfg.m5_latency)}


def build_solver_graph(a: CsrMatrix, b, x0, cfg: SolverConfig, observer=None) -> SolverGraph:
    n = a.n
    wiring = mod.WIRING[cfg.schedule_mode]
    depths = default_fifo_depths(cfg)
    depths.update(cfg.fifo_depths)
    used_depths = set()

    g = DataflowGraph(record=cfg.record)

    def chan(name, depth=None):
        used_depths.add(name)
        return g.channel(name, depths.get(name, cfg.default_depth if depth is None else depth))

    # memory
    channels, bindings = [], {}
    for vec in wiring["vectors"]:
        if vec in wiring["double"]:
            pair = []
            for side in "ab":
                ch = MemoryChannelModel(len(channels), n, f"{vec}.{side}")
                channels.append(ch)
                pair.append(ch)
            bindings[vec] = DoubleChannelBinding(*pair)
        else:
            ch = MemoryChannelModel(len(channels), n, vec)
            channels.append(ch)
            bindings[vec] = SingleChannelBinding(ch)
    bindings["p"].read_side.load(0, x0)
    bindings["x"].read_side.load(0, x0)
    bindings["r"].read_side.load(0, b)
    bindings["M"].read_side.load(0, diagonal(a))

    # instruction channels
    inst = {}
    for vec in wiring["vectors"]:
        inst[f"VC_{vec}"] = chan(mod.channel_name("CTRL", f"VC_{vec}", "inst"), 8)
    for mid in mod.COMPUTE_MODULES:
        inst[mid] = chan(mod.channel_name("CTRL", mid, "inst"), 8)

    # module inputs and outputs
    in_chs = {mid: {} for mid in mod.COMPUTE_MODULES}
    out_chs = {mid: {} for mid in mod.COMPUTE_MODULES}
    port_out = {vec: {} for vec in wiring["vectors"]}
    port_in = {vec: {} for vec in wiring["vectors"]}
    for mid, routes in wiring["cmp"].items():
        for route in routes.values():
            for vec, src in route.inputs:
                key = (vec, src)
                if key in in_chs[mid]:
                    continue
                if src == "mem":
                    ch = chan(mod.channel_name(f"RD_{vec}", mid, vec))
                    port_out[vec][mid] = ch
                else:
                    ch = chan(mod.channel_name(src, mid, vec))
                    out_chs[src][(vec, mid)] = ch
                in_chs[mid][key] = ch
    for mid, routes in wiring["cmp"].items():
        for route in routes.values():
            for vec, dst in route.outputs:
                    key = (vec, dst)
                    if dst == "mem":
                        if key not in out_chs[mid]:
                            ch = chan(mod.channel_name(mid, f"WR_{vec}", vec))
                            out_chs[mid][key] = ch
                            port_in[vec][mid] = ch
                    elif key not in out_chs[mid]:
                        raise mod.FsmMismatchError(f"{mid} sends {vec} to {dst}, which never reads it")
    scalar_chs = {mid: chan(mod.channel_name(mid, "CTRL", name), 2)
                  for mid, name in mod.SCALAR_OUTPUTS.items()}

    sched = schedule_nonzeros(a, cfg.n_channels, cfg.n_pes, cfg.dep_distance, cfg.scheme)
    if cfg.hardware_faithful:
        hw = check_hw_limits(sched, n, column_tiling=True, hardware_faithful=True)
        if not hw.ok:
            raise HardwareLimitError("; ".join(hw.violations))

    def spmv(v):
        return spmv_streamed(sched, v, cfg.scheme)

    # vector control and memory ports
    vc_fsms, resp_chs = {}, {}
    for vec in wiring["vectors"]:
        fsm = mod.ModuleFsm(f"VC_{vec}", wiring["vc_fsm"][vec])
        vc_fsms[vec] = fsm
        routes = wiring["vc"][vec]
        has_rd = any(r.read_dest for r in routes.values())
        has_wr = any(r.write_src for r in routes.values())
        rd_cmd = chan(mod.channel_name(f"VC_{vec}", f"RD_{vec}", "cmd"), 4) if has_rd else None
        wr_cmd = chan(mod.channel_name(f"VC_{vec}", f"WR_{vec}", "cmd"), 4) if has_wr else None
        g.task(f"VC_{vec}", mod.vector_control_task, vec, fsm, routes, bindings[vec],
               inst[f"VC_{vec}"], rd_cmd, wr_cmd, reads=[inst[f"VC_{vec}"]],
               writes=[c for c in (rd_cmd, wr_cmd) if c is not None])
        if has_rd:
            g.task(f"RD_{vec}", mod.read_port_task, rd_cmd, port_out[vec], cfg.block,
                   reads=[rd_cmd], writes=list(port_out[vec].values()))
        if has_wr:
            resp = chan(mod.channel_name(f"WR_{vec}", "CTRL", "resp"), 2)
            resp_chs[vec] = resp
            g.task(f"WR_{vec}", mod.write_port_task, wr_cmd, port_in[vec], resp, cfg.block,
                   reads=[wr_cmd] + list(port_in[vec].values()), writes=[resp])

    cmp_fsms = {}
    for mid in mod.COMPUTE_MODULES:
        fsm = mod.ModuleFsm(mid, wiring["cmp_fsm"][mid])
        cmp_fsms[mid] = fsm
        scalar = scalar_chs.get(mid)
        writes = list(out_chs[mid].values()) + ([scalar] if scalar is not None else [])
        g.task(mid, mod.compute_task, mid, fsm, wiring["cmp"][mid], inst[mid], in_chs[mid],
               out_chs[mid], scalar, cfg.block, cfg.m5_latency, cfg.l_acc,
               spmv=spmv if mid == "M1" else None,
               reads=[inst[mid]] + list(in_chs[mid].values()), writes=writes)

    unknown = set(cfg.fifo_depths) - used_depths
    if unknown:
        raise ValueError(f"unknown FIFO name(s): {', '.join(sorted(unknown))}")

    result = {"sched": sched}
    g.task("CTRL", controller_task, cfg, n, inst, scalar_chs, resp_chs, bindings, channels,
           result, observer, sched, vc_fsms, cmp_fsms,
           reads=list(scalar_chs.values()) + list(resp_chs.values()), writes=list(inst.values()))
    return SolverGraph(g, bindings, channels, vc_fsms, cmp_fsms, result)


# ---------------------------------------------------------------- controller task

def controller_task(cfg, n, inst, scalar_chs, resp_chs, bindings, channels, result, observer,
                    sched, vc_fsms, cmp_fsms):
    mode = cfg.schedule_mode
    naive = mode == "naive"
    state = ScalarState()
    ilog = result.setdefault("instruction_log", [])
    trace = result.setdefault("residual_trace", [])
    per_iter = result.setdefault("per_iteration", [])
    counts = result.setdefault("counts", Counter())
    cycles = 0

    def issue(step, exit=False):
        for target, ins in bundle(step, state.rp, n, mode, state.alpha, state.beta, exit):
            ilog.append((target, ins))
            if isinstance(ins, InstVCtrl) and ins.wr:
                counts["write_instructions"] += 1
            yield from send((inst[target],), (ins,))

    def await_writes(*vecs):
        for vec in vecs:
            yield from recv(resp_chs[vec])
            counts["responses"] += 1

    def scalar(mid):
        (v,) = yield from recv(scalar_chs[mid])
        return v

    for ch in channels:
        ch.reset_counters()
    while True:
        init = state.rp == -1
        if naive:
            yield from issue("M1")
            yield from await_writes("ap")
            if not init:
                yield from issue("M2")
                pap = yield from scalar("M2")
                state.alpha = compute_alpha(state.rz, pap, state.rp)
            yield from issue("M3")
            yield from await_writes("x")
            yield from issue("M4")
            yield from await_writes("r")
            yield from issue("M8")
            state.rr = yield from scalar("M8")
            done, reason = should_terminate(state.rr, state.rp, cfg)
            exit = done and cfg.early_exit
            if not exit:
                yield from issue("M5")
                yield from await_writes("z")
                yield from issue("M6")
                state.rz_new = yield from scalar("M6")
                if not done:
                    state.beta = 0.0 if init else compute_beta(state.rz_new, state.rz, state.rp)
                yield from issue("M7")
                yield from await_writes("p")
        else:
            yield from issue("phase1")
            yield from issue("phase2_prefetch")
            if not init:
                pap = yield from scalar("M2")
                state.alpha = compute_alpha(state.rz, pap, state.rp)
            yield from await_writes("ap")
            yield from issue("phase2")
            state.rr = yield from scalar("M8")
            state.rz_new = yield from scalar("M6")
            done, reason = should_terminate(state.rr, state.rp, cfg)
            exit = done and cfg.early_exit
            if not done:
                state.beta = 0.0 if init else compute_beta(state.rz_new, state.rz, state.rp)
            yield from issue("phase3", exit)
            yield from await_writes("r", "x") if exit else await_writes("r", "p", "x")

        trace.append((state.rp + 1, state.rr))
        reads = Counter()
        writes = Counter()
        for vec, binding in bindings.items():
            for ch in binding.channels:
                reads[vec] += ch.read_ops
                writes[vec] += ch.write_ops
                ch.reset_counters()
        per_iter.append({"rp": state.rp, "reads": dict(reads), "writes": dict(writes),
                         "exit": exit})
        cycles += estimate_iteration_cycles(
            solver_phase_timings(n, sched.max_lane_length, m5_latency=cfg.m5_latency,
                                 skip_update_p=exit, init=init, naive=naive), cfg.l_acc)
        if observer is not None:
            observer({"rp": state.rp, "rr": state.rr, "alpha": state.alpha, "beta": state.beta,
                      "x": bindings["x"].read_side.peek(), "r": bindings["r"].read_side.peek(),
                      "p": bindings["p"].read_side.peek(), "exit": exit,
                      "fsms_initial": all(f.at_initial for f in (*vc_fsms.values(), *cmp_fsms.values()))})
        if done:
            result["reason"] = reason
            break
        state.rz = state.rz_new
        state.rp += 1
    result["estimated_cycles"] = cycles
    result["state"] = state


# ---------------------------------------------------------------- entry point

def _steady_value(values):
    if not values:
        return None
    return Counter(values).most_common(1)[0][0]


def run_jpcg(a: CsrMatrix, b=None, x0=None, cfg: SolverConfig | None = None, observer=None,
             return_graph: bool = False):
    """Solve ``A x = b`` on the streamed dataflow model; returns ``(x, report)``.

    ``b`` defaults to all ones and ``x0`` to zeros. ``observer`` is called
    after every iteration with a dict of scalars and memory-resident vectors.
    """
    cfg = SolverConfig() if cfg is None else cfg
    b = np.ones(a.n) if b is None else np.asarray(b, dtype=np.float64)
    x0 = np.zeros(a.n) if x0 is None else np.asarray(x0, dtype=np.float64)
    problems = validate_solver_input(a, b, x0)
    if problems:
        raise SolverError("invalid solver input: " + "; ".join(problems))

    sg = build_solver_graph(a, b, x0, cfg, observer)
    outcome = run_dataflow(sg.graph, cfg.scheduler, cfg.step_budget)
    if outcome.status == "deadlock":
        raise SolverDeadlockError(outcome.blocked)
    if outcome.status != "completed":
        raise SolverError(f"dataflow run stopped: {outcome.status}")
    res = sg.result
    x = sg.bindings["x"].read_side.peek()

    per_iter = res["per_iteration"]
    reads = [sum(it["reads"].values()) for it in per_iter]
    writes = [sum(it["writes"].values()) for it in per_iter]
    steady = [k for k, it in enumerate(per_iter) if it["rp"] >= 0 and not it["exit"]]
    split = [it["reads"] for it in per_iter]
    trace = res["residual_trace"]
    report = SolverReport(
        converged=res["reason"] == "converged",
        iterations=trace[-1][0],
        final_rr=trace[-1][1],
        termination=res["reason"],
        residual_trace=trace,
        vector_read_count=reads,
        vector_write_count=writes,
        read_split=split,
        reads_per_iteration=_steady_value([reads[k] for k in steady]),
        writes_per_iteration=_steady_value([writes[k] for k in steady]),
        instruction_log_length=len(res["instruction_log"]),
        write_instructions=res["counts"]["write_instructions"],
        mem_responses=res["counts"]["responses"],
        padding_count=res["sched"].padding_count,
        estimated_cycles=res["estimated_cycles"],
        parity_flips={vec: bnd.flips for vec, bnd in sg.bindings.items()},
        schedule_mode=cfg.schedule_mode,
        scheme=cfg.scheme.label,
        n=a.n,
        nnz=a.nnz,
    )
    if report.reads_per_iteration is not None:
        log.info("steady-state reads per iteration %d, split %s", report.reads_per_iteration,
                 per_iter[steady[0]]["reads"])
    report.instruction_log = res["instruction_log"]
    if return_graph:
        return x, report, sg
    return x, report
