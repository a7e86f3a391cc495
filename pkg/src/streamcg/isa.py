"""The three instruction types driving the accelerator modules.

Vector-control instructions go to the per-vector control modules, compute
instructions to the computation modules, and memory instructions to the
read/write ports that sit on the off-chip channels. Every instruction value
is immutable and validated on construction.
"""

from __future__ import annotations

import json
import re
from dataclasses import asdict, dataclass
from typing import Iterable, Union

Q_ID_LIMIT = 8  # q_id is a 3-bit field


class InstructionError(ValueError):
    pass


def _check_len(length):
    if not isinstance(length, int) or isinstance(length, bool) or length <= 0:
        raise InstructionError(f"len must be a positive integer, got {length!r}")


def _check_qid(q_id):
    if not isinstance(q_id, int) or isinstance(q_id, bool) or not 0 <= q_id < Q_ID_LIMIT:
        raise InstructionError(f"q_id must be in 0..{Q_ID_LIMIT - 1}, got {q_id!r}")


def _check_rdwr(rd, wr):
    if not (rd or wr):
        raise InstructionError("neither read nor write requested")


def _check_addr(base_addr):
    if not isinstance(base_addr, int) or isinstance(base_addr, bool) or base_addr < 0:
        raise InstructionError(f"base_addr must be a non-negative word offset, got {base_addr!r}")


@dataclass(frozen=True)
class InstVCtrl:
    rd: bool
    wr: bool
    base_addr: int
    len: int
    q_id: int

    def __post_init__(self):
        object.__setattr__(self, "rd", bool(self.rd))
        object.__setattr__(self, "wr", bool(self.wr))
        _check_rdwr(self.rd, self.wr)
        _check_addr(self.base_addr)
        _check_len(self.len)
        _check_qid(self.q_id)


@dataclass(frozen=True)
class InstCmp:
    len: int
    alpha: float
    q_id: int

    def __post_init__(self):
        object.__setattr__(self, "alpha", float(self.alpha))
        _check_len(self.len)
        _check_qid(self.q_id)


@dataclass(frozen=True)
class InstRdWr:
    rd: bool
    wr: bool
    base_addr: int
    len: int

    def __post_init__(self):
        object.__setattr__(self, "rd", bool(self.rd))
        object.__setattr__(self, "wr", bool(self.wr))
        _check_rdwr(self.rd, self.wr)
        _check_addr(self.base_addr)
        _check_len(self.len)


@dataclass(frozen=True)
class MemResponse:
    channel: int
    op: str
    len: int


Instruction = Union[InstVCtrl, InstCmp, InstRdWr]


def make_vctrl(rd, wr, base_addr, len, q_id) -> InstVCtrl:
    return InstVCtrl(rd, wr, base_addr, len, q_id)


def make_cmp(len, alpha, q_id) -> InstCmp:
    return InstCmp(len, alpha, q_id)


def make_rdwr(rd, wr, base_addr, len) -> InstRdWr:
    return InstRdWr(rd, wr, base_addr, len)


def _ops(rd, wr):
    return "+".join(op for op, on in (("rd", rd), ("wr", wr)) if on)


def render_trace(inst: Instruction) -> str:
    """One-line text form of an instruction; ``parse_trace`` inverts it.

    ``alpha`` uses ``repr`` so the FP64 value survives the round trip.
    """
    if isinstance(inst, InstCmp):
        return f"CMP len={inst.len} alpha={_fmt_float(inst.alpha)} q={inst.q_id}"
    if isinstance(inst, InstVCtrl):
        return f"VCTRL {_ops(inst.rd, inst.wr)} base={inst.base_addr} len={inst.len} q={inst.q_id}"
    if isinstance(inst, InstRdWr):
        return f"MEM {_ops(inst.rd, inst.wr)} base={inst.base_addr} len={inst.len}"
    raise TypeError(f"not an instruction: {inst!r}")


def _fmt_float(v: float) -> str:
    text = repr(v)
    return text[:-2] if text.endswith(".0") else text


_CMP_RE = re.compile(r"^CMP len=(\d+) alpha=(\S+) q=(\d+)$")
_VCTRL_RE = re.compile(r"^VCTRL (rd|wr|rd\+wr) base=(\d+) len=(\d+) q=(\d+)$")
_MEM_RE = re.compile(r"^MEM (rd|wr|rd\+wr) base=(\d+) len=(\d+)$")


def parse_trace(line: str) -> Instruction:
    line = line.strip()
    if m := _CMP_RE.match(line):
        return InstCmp(int(m[1]), float(m[2]), int(m[3]))
    if m := _VCTRL_RE.match(line):
        ops = m[1].split("+")
        return InstVCtrl("rd" in ops, "wr" in ops, int(m[2]), int(m[3]), int(m[4]))
    if m := _MEM_RE.match(line):
        ops = m[1].split("+")
        return InstRdWr("rd" in ops, "wr" in ops, int(m[2]), int(m[3]))
    raise InstructionError(f"unparseable trace line: {line!r}")


def dump_instruction_log(log: Iterable[tuple[str, Instruction]], path) -> None:
    """Write ``(target, instruction)`` pairs as a JSON array."""
    records = []
    for target, inst in log:
        rec = {"target": target, "type": type(inst).__name__, "trace": render_trace(inst)}
        rec.update(asdict(inst))
        records.append(rec)
    with open(path, "w") as fh:
        json.dump(records, fh, indent=1)
