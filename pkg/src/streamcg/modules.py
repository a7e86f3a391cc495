"""Computation modules M1-M8, vector-control modules and their scheduling FSMs.

Module roles in one JPCG iteration::

    M1  ap = A p                 M5  z = r / diag(A)   (pipeline latency L)
    M2  p . ap                   M6  r . z
    M3  x = x + alpha p          M7  p = z + beta p
    M4  r = r - alpha ap         M8  r . r

Two wirings exist. ``decentralized`` groups the modules into three phases
separated by scalar barriers and forwards vectors between modules of the
same phase over FIFOs, so z never touches memory and r is read once for
four modules. ``naive`` reads every input from memory and writes every
output back, one module at a time.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .isa import InstCmp, InstRdWr, InstVCtrl, MemResponse
from .memory import check_writable
from .runtime import DataflowGraph, Fire, PipelineStage, StreamEnded, recv, send

DEFAULT_L_ACC = 8
DEFAULT_M5_LATENCY = 33


class FsmMismatchError(RuntimeError):
    pass


class StreamUnderrunError(RuntimeError):
    pass


# ---------------------------------------------------------------- kernels

class DelayBuffer:
    """Cyclic partial sums: term ``i`` of a stream lands in slot ``i mod length``."""

    def __init__(self, length: int = DEFAULT_L_ACC):
        if length < 1:
            raise ValueError("delay buffer length must be >= 1")
        self.length = length
        self.partials = np.zeros(length)
        self.count = 0

    def add(self, terms) -> None:
        terms = np.asarray(terms, dtype=np.float64).ravel()
        if not len(terms):
            return
        L = self.length
        head = self.count % L
        tail = (-(head + len(terms))) % L
        # +0.0 padding is exact: the partials start at +0.0 and never become -0.0
        padded = np.concatenate([np.zeros(head), terms, np.zeros(tail)]).reshape(-1, L)
        self.partials = np.cumsum(np.vstack([self.partials, padded]), axis=0)[-1]
        self.count += len(terms)

    def total(self) -> float:
        s = 0.0
        for v in self.partials.tolist():
            s += v
        return s


def dot_product(xs, ys, l_acc: int = DEFAULT_L_ACC) -> float:
    db = DelayBuffer(l_acc)
    db.add(np.asarray(xs, dtype=np.float64) * np.asarray(ys, dtype=np.float64))
    return db.total()


def update_x(x, p, alpha):
    return np.asarray(x) + alpha * np.asarray(p)


def update_r(r, ap, alpha):
    return np.asarray(r) - alpha * np.asarray(ap)


def update_p(z, p, beta):
    """New search direction; the caller forwards the old ``p`` unchanged."""
    return np.asarray(z) + beta * np.asarray(p)


def left_divide(m, r, offset: int = 0):
    m = np.asarray(m)
    zero = np.flatnonzero(m == 0.0)
    if len(zero):
        raise ZeroDivisionError(f"left divide by zero diagonal at index {offset + int(zero[0])}")
    return np.asarray(r) / m


# ---------------------------------------------------------------- FSMs

class ModuleFsm:
    """Expected q_id sequence of one module over an iteration.

    Each state is ``(allowed q_ids, optional)``. Optional states may be skipped
    (the init iteration skips M2, the final iteration skips M5-M7).
    """

    def __init__(self, name: str, states):
        self.name = name
        self.states = [(frozenset(q), bool(opt)) for q, opt in states]
        self.index = 0
        self.cycles = 0

    def _find(self, start, q):
        for j in range(start, len(self.states)):
            allowed, optional = self.states[j]
            if q in allowed:
                return j
            if not optional:
                return None
        return -1  # remainder all optional

    def advance(self, q_id: int) -> tuple[bool, bool]:
        """Consume one instruction; returns (cycle closed before it, cycle closed by it)."""
        closed_before = False
        j = self._find(self.index, q_id)
        if j == -1 and self.index > 0:
            self.cycles += 1
            closed_before = True
            j = self._find(0, q_id)
        if j is None or j == -1:
            raise FsmMismatchError(
                f"{self.name}: q_id {q_id} does not match state {self.index} "
                f"(expects {sorted(self.states[self.index][0]) if self.index < len(self.states) else 'end'})")
        self.index = j + 1
        if self.index == len(self.states):
            self.index = 0
            self.cycles += 1
            return closed_before, True
        return closed_before, False

    def finish(self) -> bool:
        if self.index == 0:
            return False
        if any(not opt for _, opt in self.states[self.index:]):
            raise FsmMismatchError(f"{self.name}: stream ended in state {self.index}")
        self.index = 0
        self.cycles += 1
        return True

    @property
    def at_initial(self) -> bool:
        return self.index == 0


@dataclass(frozen=True)
class VcRoute:
    read_dest: str | None
    write_src: str | None


@dataclass(frozen=True)
class CmpRoute:
    inputs: tuple  # ((vector, source module), ...)
    outputs: tuple = ()  # ((vector, destination module), ...)


def _vc(d):
    return {q: VcRoute(*v) for q, v in d.items()}


# q_id -> route tables and FSM state lists for both wirings. "mem" in a
# compute route means the vector's memory port.
WIRING = {
    "decentralized": {
        "vectors": ("p", "r", "x", "ap", "M"),
        "double": ("p", "r", "x"),
        "vc": {
            "p": _vc({0: ("M1", None), 1: ("M2", None), 2: ("M7", "M7"), 3: ("M3", None)}),
            "r": _vc({0: ("M4", None), 1: ("M4", "M5"), 2: ("M4", "M4")}),
            "x": _vc({0: ("M3", "M3")}),
            "ap": _vc({0: (None, "M1"), 1: ("M4", None)}),
            "M": _vc({0: ("M5", None)}),
        },
        "vc_fsm": {
            "p": [({0}, False), ({1}, True), ({2, 3}, False)],
            "r": [({0}, False), ({1, 2}, False)],
            "x": [({0}, False)],
            "ap": [({0}, False), ({1}, False), ({1}, False)],
            "M": [({0}, False), ({0}, True)],
        },
        "cmp": {
            "M1": {0: CmpRoute((("p", "mem"),), (("ap", "mem"), ("ap", "M2"))),
                   1: CmpRoute((("p", "mem"),), (("ap", "mem"),))},
            "M2": {0: CmpRoute((("p", "mem"), ("ap", "M1")))},
            "M3": {0: CmpRoute((("x", "mem"), ("pold", "M7")), (("x", "mem"),)),
                   1: CmpRoute((("x", "mem"), ("p", "mem")), (("x", "mem"),))},
            "M4": {0: CmpRoute((("r", "mem"), ("ap", "mem")), (("r", "M8"),)),
                   1: CmpRoute((("r", "mem"), ("ap", "mem")), (("r", "M5"),)),
                   2: CmpRoute((("r", "mem"), ("ap", "mem")), (("r", "mem"),))},
            "M5": {0: CmpRoute((("M", "mem"), ("r", "M8")), (("z", "M6"), ("r", "M6"))),
                   1: CmpRoute((("M", "mem"), ("r", "M4")), (("z", "M7"), ("r", "mem")))},
            "M6": {0: CmpRoute((("r", "M5"), ("z", "M5")))},
            "M7": {0: CmpRoute((("z", "M5"), ("p", "mem")), (("p", "mem"), ("pold", "M3")))},
            "M8": {0: CmpRoute((("r", "M4"),), (("r", "M5"),))},
        },
        "cmp_fsm": {
            "M1": [({0, 1}, False)],
            "M2": [({0}, True)],
            "M3": [({0, 1}, False)],
            "M4": [({0}, False), ({1, 2}, False)],
            "M5": [({0}, False), ({1}, True)],
            "M6": [({0}, False)],
            "M7": [({0}, True)],
            "M8": [({0}, False)],
        },
    },
    "naive": {
        "vectors": ("p", "r", "x", "ap", "M", "z"),
        "double": (),
        "vc": {
            "p": _vc({0: ("M1", None), 1: ("M2", None), 2: ("M3", None), 3: ("M7", None),
                      4: (None, "M7")}),
            "r": _vc({0: ("M4", None), 1: (None, "M4"), 2: ("M8", None), 3: ("M5", None),
                      4: ("M6", None)}),
            "x": _vc({0: ("M3", None), 1: (None, "M3")}),
            "ap": _vc({0: (None, "M1"), 1: ("M2", None), 2: ("M4", None)}),
            "M": _vc({0: ("M5", None)}),
            "z": _vc({0: (None, "M5"), 1: ("M6", None), 2: ("M7", None)}),
        },
        "vc_fsm": {
            "p": [({0}, False), ({1}, True), ({2}, False), ({3}, True), ({4}, True)],
            "r": [({0}, False), ({1}, False), ({2}, False), ({3}, True), ({4}, True)],
            "x": [({0}, False), ({1}, False)],
            "ap": [({0}, False), ({1}, True), ({2}, False)],
            "M": [({0}, True)],
            "z": [({0}, True), ({1}, True), ({2}, True)],
        },
        "cmp": {
            "M1": {0: CmpRoute((("p", "mem"),), (("ap", "mem"),))},
            "M2": {0: CmpRoute((("p", "mem"), ("ap", "mem")))},
            "M3": {0: CmpRoute((("x", "mem"), ("p", "mem")), (("x", "mem"),))},
            "M4": {0: CmpRoute((("r", "mem"), ("ap", "mem")), (("r", "mem"),))},
            "M5": {0: CmpRoute((("M", "mem"), ("r", "mem")), (("z", "mem"),))},
            "M6": {0: CmpRoute((("r", "mem"), ("z", "mem")))},
            "M7": {0: CmpRoute((("z", "mem"), ("p", "mem")), (("p", "mem"),))},
            "M8": {0: CmpRoute((("r", "mem"),))},
        },
        "cmp_fsm": {
            "M1": [({0}, False)],
            "M2": [({0}, True)],
            "M3": [({0}, False)],
            "M4": [({0}, False)],
            "M5": [({0}, True)],
            "M6": [({0}, True)],
            "M7": [({0}, True)],
            "M8": [({0}, False)],
        },
    },
}

SCALAR_OUTPUTS = {"M2": "pap", "M6": "rz", "M8": "rr"}
COMPUTE_MODULES = ("M1", "M2", "M3", "M4", "M5", "M6", "M7", "M8")


def _memory_vector(vec):
    return "p" if vec == "pold" else vec


def channel_name(src: str, dst: str, what: str) -> str:
    return f"{src}->{dst}.{what}"


def _n_blocks(length, block):
    return math.ceil(length / block)


# ---------------------------------------------------------------- streaming bodies

def left_divide_stream(m_in, r_in, r_out, z_out, n_blocks, latency, offsets=None):
    """Consume (m, r) pairs, forward r at once and release z after ``latency`` firings.

    ``m_in`` may be a FIFO or a plain sequence of blocks read from local memory.
    """
    stage = PipelineStage(latency)
    consumed = 0
    local_m = not hasattr(m_in, "can_pop")
    local_r = not hasattr(r_in, "can_pop")
    while consumed < n_blocks or len(stage):
        consuming = consumed < n_blocks
        release = stage.will_release(consuming)
        pops = tuple(ch for ch, local in ((m_in, local_m), (r_in, local_r)) if consuming and not local)
        pushes = tuple(([r_out] if consuming and r_out is not None else [])
                       + ([z_out] if release else []))
        vals = yield Fire(pops=pops, pushes=pushes)
        out = []
        if consuming:
            vals = list(vals)
            m = m_in[consumed] if local_m else vals.pop(0)
            r = r_in[consumed] if local_r else vals.pop(0)
            z = left_divide(m, r, 0 if offsets is None else offsets[consumed])
            released = stage.advance(z)
            if r_out is not None:
                out.append(r)
            consumed += 1
        else:
            released = stage.advance()
        if release:
            out.append(released)
        if pushes:
            yield tuple(out)


def dot_stream(inputs, forwards, n_blocks, l_acc):
    """Delay-buffer dot product of one or two input streams, forwarding the first."""
    db = DelayBuffer(l_acc)
    for _ in range(n_blocks):
        vals = yield Fire(pops=tuple(inputs), pushes=tuple(forwards))
        a = vals[0]
        b = vals[1] if len(vals) > 1 else vals[0]
        db.add(a * b)
        if forwards:
            yield tuple(a for _ in forwards)
    return db.total()


def build_join_graph(latency: int, fast_depth: int, slow_depth: int = 2, n: int = 1000,
                     record: bool = False, seed: int = 0):
    """Left-divide module feeding a joint consumer through a fast and a slow FIFO.

    M5 reads ``m`` and ``r`` from its own memory, forwards ``r`` immediately on
    the fast FIFO and emits ``z`` on the slow FIFO ``latency`` firings later.
    M6 needs the heads of both FIFOs to fire, so it stalls until the first
    ``z`` arrives. Returns ``(graph, result)`` with ``result["rz"]`` set after
    a completed run.
    """
    rng = np.random.default_rng(seed)
    m = [np.array([v]) for v in rng.uniform(1.0, 2.0, n)]
    r = [np.array([v]) for v in rng.standard_normal(n)]
    g = DataflowGraph(record=record)
    r_ch = g.channel("r", fast_depth)
    z_ch = g.channel("z", slow_depth)
    result = {}

    def m5():
        yield from left_divide_stream(m, r, r_ch, z_ch, n, latency)

    def m6():
        result["rz"] = yield from dot_stream((r_ch, z_ch), (), n, DEFAULT_L_ACC)

    g.task("M5", m5, writes=[r_ch, z_ch])
    g.task("M6", m6, reads=[r_ch, z_ch])
    result["expected_rz"] = dot_product(np.concatenate(r), np.concatenate(r) / np.concatenate(m))
    return g, result


# ---------------------------------------------------------------- tasks

def vector_control_task(vec, fsm: ModuleFsm, routes, binding, inst_ch, rd_cmd, wr_cmd):
    """Decode vector-control instructions into memory-port commands.

    The physical channel is resolved at dispatch, so a ping-pong flip never
    redirects a transfer already in flight.
    """
    try:
        while True:
            (inst,) = yield from recv(inst_ch)
            if not isinstance(inst, InstVCtrl):
                raise FsmMismatchError(f"VC_{vec}: unexpected instruction {inst!r}")
            closed_before, _ = fsm.advance(inst.q_id)
            if closed_before:
                binding.flip()
            route = routes[inst.q_id]
            if bool(route.read_dest) != inst.rd or bool(route.write_src) != inst.wr:
                raise FsmMismatchError(f"VC_{vec}: q_id {inst.q_id} does not match rd/wr flags of {inst}")
            cmds, chans = [], []
            if inst.rd:
                cmds.append((InstRdWr(1, 0, inst.base_addr, inst.len), route.read_dest, binding.read_side))
                chans.append(rd_cmd)
            if inst.wr:
                target = binding.write_side
                check_writable(binding, target)
                cmds.append((InstRdWr(0, 1, inst.base_addr, inst.len), route.write_src, target))
                chans.append(wr_cmd)
            yield from send(chans, cmds)
            if fsm.at_initial:
                binding.flip()
    except StreamEnded:
        if fsm.finish():
            binding.flip()


def read_port_task(cmd_ch, outs: dict, block: int):
    while True:
        ((inst, dest, channel),) = yield from recv(cmd_ch)
        out = outs[dest]
        channel.begin_read()
        for start in range(0, inst.len, block):
            blk = channel.read_words(inst.base_addr + start, min(block, inst.len - start))
            yield from send((out,), (blk,))


def write_port_task(cmd_ch, ins: dict, resp_ch, block: int):
    while True:
        ((inst, src, channel),) = yield from recv(cmd_ch)
        inp = ins[src]
        channel.begin_write()
        written = 0
        while written < inst.len:
            (blk,) = yield from recv(inp)
            channel.write_words(inst.base_addr + written, blk)
            written += len(blk)
        if written != inst.len:
            raise StreamUnderrunError(f"write of {inst.len} words received {written}")
        yield from send((resp_ch,), (MemResponse(channel.channel_id, "write", inst.len),))


def compute_task(mid, fsm: ModuleFsm, routes, inst_ch, in_chs: dict, out_chs: dict, scalar_ch,
                 block: int, m5_latency: int, l_acc: int, spmv=None):
    """Generic computation module: one compute instruction per vector pass."""
    try:
        while True:
            (inst,) = yield from recv(inst_ch)
            if not isinstance(inst, InstCmp):
                raise FsmMismatchError(f"{mid}: unexpected instruction {inst!r}")
            fsm.advance(inst.q_id)
            route = routes[inst.q_id]
            ins = tuple(in_chs[key] for key in route.inputs)
            outs = tuple(out_chs[key] for key in route.outputs)
            nb = _n_blocks(inst.len, block)
            alpha = inst.alpha
            if mid == "M1":
                blocks = []
                for _ in range(nb):
                    (blk,) = yield from recv(*ins)
                    blocks.append(blk)
                y = spmv(np.concatenate(blocks))
                for k in range(nb):
                    piece = y[k * block:(k + 1) * block]
                    yield from send(outs, tuple(piece for _ in outs))
            elif mid in SCALAR_OUTPUTS:
                forwards = outs
                value = yield from dot_stream(ins, forwards, nb, l_acc)
                yield from send((scalar_ch,), (value,))
            elif mid == "M5":
                z_out = out_chs[route.outputs[0]]
                r_out = out_chs[route.outputs[1]] if len(route.outputs) > 1 else None
                offsets = [k * block for k in range(nb)]
                yield from left_divide_stream(ins[0], ins[1], r_out, z_out, nb, m5_latency, offsets)
            else:
                for _ in range(nb):
                    vals = yield Fire(pops=ins, pushes=outs)
                    if mid == "M3":
                        res = (update_x(vals[0], vals[1], alpha),)
                    elif mid == "M4":
                        res = (update_r(vals[0], vals[1], alpha),)
                    elif mid == "M7":
                        new_p = update_p(vals[0], vals[1], alpha)
                        res = tuple(new_p if vec == "p" else vals[1] for vec, _ in route.outputs)
                    else:
                        raise ValueError(f"unknown module {mid}")
                    if outs:
                        yield res
    except StreamEnded:
        fsm.finish()
