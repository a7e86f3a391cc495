"""Bounded-FIFO dataflow runtime.

Modules are generator functions. A module asks the scheduler for an atomic
*firing* by yielding a :class:`Fire` that names the channels it pops from and
the channels it pushes to. The firing happens only when every pop channel has
an element and every push channel has room. The popped values are sent back
into the generator; if the firing declared pushes, the generator's next yield
must be the tuple of values to push, in the same order::

    def scale(src, dst, k):
        while True:
            (v,) = yield Fire(pops=(src,))
            yield Fire(pushes=(dst,))
            yield (v * k,)

Popping from a channel that is closed and drained raises :class:`StreamEnded`
inside the generator; a module that lets it propagate simply finishes. When a
module finishes, every channel it writes is closed.

Two schedulers execute a graph. The deterministic one is a round-robin stepper
(one firing attempt per module per round); the concurrent one runs every module
on its own thread. Channel contents do not depend on the scheduler.
"""

from __future__ import annotations

import struct
import threading
from collections import deque
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable

import numpy as np


class _Signal:
    def __init__(self, name):
        self.name = name

    def __repr__(self):
        return self.name.upper()


ACCEPTED = _Signal("accepted")
WOULD_BLOCK = _Signal("would_block")
END_OF_STREAM = _Signal("end_of_stream")


class ChannelClosedError(RuntimeError):
    pass


class GraphError(ValueError):
    pass


class StreamEnded(Exception):
    def __init__(self, channel):
        super().__init__(channel.name)
        self.channel = channel


class FifoChannel:
    """Bounded FIFO with one producer and one consumer."""

    def __init__(self, name: str, depth: int = 2, record: bool = False):
        if depth < 1:
            raise ValueError(f"FIFO depth must be >= 1, got {depth}")
        self.name = name
        self.depth = depth
        self.producer: str | None = None
        self.consumer: str | None = None
        self.closed = False
        self.pushed = 0
        self.max_occupancy = 0
        self.transcript: list | None = [] if record else None
        self._q: deque = deque()

    def __repr__(self):
        return f"FifoChannel({self.name!r}, depth={self.depth}, occupancy={len(self._q)})"

    @property
    def occupancy(self) -> int:
        return len(self._q)

    def can_push(self) -> bool:
        return len(self._q) < self.depth

    def can_pop(self) -> bool:
        return bool(self._q)

    def at_end(self) -> bool:
        return self.closed and not self._q

    def push(self, element):
        if self.closed:
            raise ChannelClosedError(f"push to {self.name} after stream completion")
        if len(self._q) >= self.depth:
            return WOULD_BLOCK
        self._q.append(element)
        self.pushed += 1
        if len(self._q) > self.max_occupancy:
            self.max_occupancy = len(self._q)
        if self.transcript is not None:
            self.transcript.append(element)
        return ACCEPTED

    def pop(self):
        if self._q:
            return self._q.popleft()
        return END_OF_STREAM if self.closed else WOULD_BLOCK

    def close(self) -> None:
        self.closed = True


@dataclass(frozen=True)
class Fire:
    pops: tuple = ()
    pushes: tuple = ()


def recv(*channels):
    """``vals = yield from recv(a, b)``: one firing popping each channel once."""
    return (yield Fire(pops=channels))


def send(channels, values):
    """``yield from send((a, b), (va, vb))``: one firing pushing each channel once."""
    yield Fire(pushes=tuple(channels))
    yield tuple(values)


class PipelineStage:
    """Fixed-latency pipeline: an input taken at step ``s`` leaves at step ``s + depth``.

    The stage advances only when its module fires, so back-pressure stalls it.
    """

    def __init__(self, depth: int):
        if depth < 0:
            raise ValueError("pipeline depth must be >= 0")
        self.depth = depth
        self.step = 0
        self._inflight: deque = deque()

    def __len__(self):
        return len(self._inflight)

    def will_release(self, consuming: bool) -> bool:
        if self._inflight:
            return self._inflight[0][1] <= self.step
        return consuming and self.depth == 0

    def advance(self, *value):
        """Move one step, optionally taking one input; return the released output or None."""
        if value:
            self._inflight.append((value[0], self.step + self.depth))
        out = None
        if self._inflight and self._inflight[0][1] <= self.step:
            out = self._inflight.popleft()[0]
        self.step += 1
        return out


@dataclass
class _Task:
    name: str
    gen: Any
    reads: frozenset
    writes: frozenset
    pending: Fire | None = None
    done: bool = False
    firings: int = 0


class DataflowGraph:
    def __init__(self, record: bool = False):
        self.record = record
        self.channels: dict[str, FifoChannel] = {}
        self.tasks: list[_Task] = []
        self._started = False

    def channel(self, name: str, depth: int = 2) -> FifoChannel:
        if name in self.channels:
            raise GraphError(f"duplicate channel {name!r}")
        ch = FifoChannel(name, depth, record=self.record)
        self.channels[name] = ch
        return ch

    def task(self, name: str, fn: Callable, *args, reads: Iterable = (), writes: Iterable = (), **kwargs):
        if any(t.name == name for t in self.tasks):
            raise GraphError(f"duplicate task {name!r}")
        reads, writes = frozenset(reads), frozenset(writes)
        for ch in reads:
            if ch.consumer is not None:
                raise GraphError(f"malformed graph: {ch.name} has two consumers ({ch.consumer}, {name})")
            ch.consumer = name
        for ch in writes:
            if ch.producer is not None:
                raise GraphError(f"malformed graph: {ch.name} has two producers ({ch.producer}, {name})")
            ch.producer = name
        t = _Task(name, fn(*args, **kwargs), reads, writes)
        self.tasks.append(t)
        return t

    def validate(self) -> None:
        for ch in self.channels.values():
            if ch.producer is None or ch.consumer is None:
                raise GraphError(f"malformed graph: channel {ch.name} needs one producer and one consumer")

    def transcripts(self) -> dict[str, list]:
        return {name: ch.transcript for name, ch in self.channels.items()}


@dataclass
class RunOutcome:
    status: str  # "completed" | "deadlock" | "budget_exhausted"
    blocked: dict[str, str] = field(default_factory=dict)
    rounds: int = 0
    firings: int = 0

    @property
    def completed(self) -> bool:
        return self.status == "completed"


def _ready(req: Fire) -> bool:
    for ch in req.pops:
        if ch.at_end():
            return True
    return all(ch._q for ch in req.pops) and all(len(ch._q) < ch.depth for ch in req.pushes)


def _blocking_op(req: Fire) -> str:
    for ch in req.pops:
        if not ch.can_pop():
            return f"pop {ch.name}"
    for ch in req.pushes:
        if not ch.can_push():
            return f"push {ch.name}"
    return "runnable"


def _check_request(t: _Task, req) -> Fire:
    if not isinstance(req, Fire):
        raise GraphError(f"task {t.name} yielded {req!r}, expected a Fire request")
    for ch in req.pops:
        if ch not in t.reads:
            raise GraphError(f"task {t.name} pops undeclared channel {ch.name}")
    for ch in req.pushes:
        if ch not in t.writes:
            raise GraphError(f"task {t.name} pushes undeclared channel {ch.name}")
    return req


def _finish(t: _Task) -> None:
    t.done = True
    t.pending = None
    for ch in t.writes:
        ch.close()


def _start(t: _Task) -> None:
    try:
        t.pending = _check_request(t, next(t.gen))
    except (StopIteration, StreamEnded):
        _finish(t)


def _resume(t: _Task, req: Fire, popped, lock=None) -> None:
    """Hand popped values to the task and perform its pushes."""
    try:
        if popped is None:
            ended = next(ch for ch in req.pops if ch.at_end())
            nxt = t.gen.throw(StreamEnded(ended))
        else:
            if lock is not None:
                lock.release()
            try:
                nxt = t.gen.send(popped)
            finally:
                if lock is not None:
                    lock.acquire()
            if req.pushes:
                if not isinstance(nxt, tuple) or len(nxt) != len(req.pushes):
                    raise GraphError(f"task {t.name} must yield {len(req.pushes)} push values, got {nxt!r}")
                for ch, v in zip(req.pushes, nxt):
                    if ch.push(v) is not ACCEPTED:
                        raise GraphError(f"push to full channel {ch.name}")
                nxt = next(t.gen)
        t.pending = _check_request(t, nxt)
    except (StopIteration, StreamEnded):
        _finish(t)


def _fire(t: _Task, lock=None) -> None:
    req = t.pending
    t.firings += 1
    if any(ch.at_end() for ch in req.pops):
        _resume(t, req, None, lock)
        return
    popped = [ch._q.popleft() for ch in req.pops]
    _resume(t, req, popped, lock)


def detect_deadlock(graph: DataflowGraph) -> dict[str, str] | None:
    """Blocked modules with the channel operation each waits on.

    Returns None when every module finished or at least one can fire.
    """
    live = [t for t in graph.tasks if not t.done]
    if not live or any(t.pending is not None and _ready(t.pending) for t in live):
        return None
    return {t.name: _blocking_op(t.pending) for t in live}


def run_dataflow(graph: DataflowGraph, scheduler: str = "deterministic",
                 step_budget: int | None = None) -> RunOutcome:
    """Execute ``graph`` until every module finishes, deadlocks, or the budget runs out.

    ``step_budget`` counts scheduler rounds for the deterministic scheduler and
    total firings for the concurrent one.
    """
    if graph._started:
        raise GraphError("graph already executed")
    graph.validate()
    graph._started = True
    if scheduler in ("deterministic", "det"):
        return _run_deterministic(graph, step_budget)
    if scheduler in ("concurrent", "conc"):
        return _run_concurrent(graph, step_budget)
    raise ValueError(f"unknown scheduler {scheduler!r}")


def _run_deterministic(graph, step_budget):
    tasks = graph.tasks
    for t in tasks:
        _start(t)
    live = [t for t in tasks if not t.done]
    rounds = firings = 0
    while live:
        if step_budget is not None and rounds >= step_budget:
            return RunOutcome("budget_exhausted", rounds=rounds, firings=firings)
        progress = False
        for t in live:
            if t.pending is not None and _ready(t.pending):
                _fire(t)
                firings += 1
                progress = True
        rounds += 1
        if not progress:
            return RunOutcome("deadlock", detect_deadlock(graph) or {}, rounds, firings)
        live = [t for t in live if not t.done]
    return RunOutcome("completed", rounds=rounds, firings=firings)


def _run_concurrent(graph, step_budget):
    cond = threading.Condition()
    tasks = graph.tasks
    state = {"live": 0, "firings": 0, "abort": None, "error": None}
    blocked: set = set()

    for t in tasks:
        _start(t)
    state["live"] = sum(not t.done for t in tasks)

    def worker(t):
        with cond:
            while not t.done and state["abort"] is None:
                if _ready(t.pending):
                    if step_budget is not None and state["firings"] >= step_budget:
                        state["abort"] = "budget_exhausted"
                        cond.notify_all()
                        break
                    state["firings"] += 1
                    try:
                        _fire(t, lock=cond)
                    except BaseException as exc:  # surfaced to the caller
                        state["error"] = exc
                        state["abort"] = "error"
                        cond.notify_all()
                        break
                    blocked.clear()
                    if t.done:
                        state["live"] -= 1
                    cond.notify_all()
                else:
                    blocked.add(t.name)
                    if len(blocked) >= state["live"]:
                        state["abort"] = "deadlock"
                        cond.notify_all()
                        break
                    cond.wait()
                    blocked.discard(t.name)

    threads = [threading.Thread(target=worker, args=(t,), daemon=True, name=t.name)
               for t in tasks if not t.done]
    for th in threads:
        th.start()
    for th in threads:
        th.join()
    if state["error"] is not None:
        raise state["error"]
    if state["abort"] == "deadlock":
        return RunOutcome("deadlock", detect_deadlock(graph) or {}, firings=state["firings"])
    if state["abort"] == "budget_exhausted":
        return RunOutcome("budget_exhausted", firings=state["firings"])
    return RunOutcome("completed", firings=state["firings"])


def fp64_hex(v: float) -> str:
    return struct.pack(">d", float(v)).hex()


def _element_texts(v) -> list[str]:
    if isinstance(v, np.ndarray):
        return [fp64_hex(x) for x in v.ravel().tolist()]
    if isinstance(v, (float, int, np.floating, np.integer)) and not isinstance(v, bool):
        return [fp64_hex(v)]
    from .isa import render_trace, InstCmp, InstRdWr, InstVCtrl
    if isinstance(v, (InstCmp, InstRdWr, InstVCtrl)):
        return [render_trace(v)]
    if isinstance(v, tuple):
        return [" ".join(t for x in v for t in _element_texts(x))]
    return [repr(v)]


def transcript_lines(graph: DataflowGraph) -> list[str]:
    """``channel seq value`` lines, FP64 payloads as big-endian hex bits."""
    lines = []
    for name in sorted(graph.channels):
        tr = graph.channels[name].transcript
        if tr is None:
            raise GraphError("graph was built without transcript recording")
        seq = 0
        for element in tr:
            for text in _element_texts(element):
                lines.append(f"{name} {seq} {text}")
                seq += 1
    return lines


def dump_transcripts(graph: DataflowGraph, path) -> None:
    with open(path, "w") as fh:
        for line in transcript_lines(graph):
            fh.write(line + "\n")
