"""Off-chip memory model: 64-bit word channels with access counters and ping-pong pairs."""

from __future__ import annotations

import numpy as np

from .isa import MemResponse

WORD_BYTES = 8
BURST_WORDS = 8  # one 512-bit beat


class MemoryAccessError(RuntimeError):
    pass


class MemoryChannelModel:
    """One off-chip channel holding ``capacity`` FP64 words.

    ``read_count``/``write_count`` are in words, ``read_ops``/``write_ops`` in
    vector accesses; all four are cleared by :meth:`reset_counters` at
    iteration boundaries.
    """

    def __init__(self, channel_id: int, capacity: int, name: str = ""):
        self.channel_id = channel_id
        self.name = name or f"ch{channel_id}"
        self.words = np.zeros(capacity)
        self.read_count = 0
        self.write_count = 0
        self.read_ops = 0
        self.write_ops = 0
        self.total_read_ops = 0
        self.total_write_ops = 0

    def __repr__(self):
        return f"MemoryChannelModel({self.name})"

    @property
    def capacity(self) -> int:
        return len(self.words)

    def _check(self, base_addr, length):
        if base_addr < 0 or length < 0 or base_addr + length > self.capacity:
            raise MemoryAccessError(
                f"out-of-bounds access on {self.name}: [{base_addr}, {base_addr + length}) "
                f"exceeds capacity {self.capacity}")

    def load(self, base_addr: int, values) -> None:
        """Host-side preload; not counted."""
        values = np.asarray(values, dtype=np.float64)
        self._check(base_addr, len(values))
        self.words[base_addr:base_addr + len(values)] = values

    def peek(self, base_addr: int = 0, length: int | None = None) -> np.ndarray:
        """Host-side inspection; not counted."""
        length = self.capacity - base_addr if length is None else length
        self._check(base_addr, length)
        return self.words[base_addr:base_addr + length].copy()

    def read_words(self, base_addr: int, length: int) -> np.ndarray:
        self._check(base_addr, length)
        self.read_count += length
        return self.words[base_addr:base_addr + length].copy()

    def write_words(self, base_addr: int, values: np.ndarray) -> None:
        self._check(base_addr, len(values))
        self.words[base_addr:base_addr + len(values)] = values
        self.write_count += len(values)

    def begin_read(self):
        self.read_ops += 1
        self.total_read_ops += 1

    def begin_write(self):
        self.write_ops += 1
        self.total_write_ops += 1

    def reset_counters(self) -> None:
        self.read_count = self.write_count = 0
        self.read_ops = self.write_ops = 0


class DoubleChannelBinding:
    """Two channels that swap read/write roles once per iteration.

    At iteration ``t`` the vector is read from one channel and its update is
    written to the other; :meth:`flip` swaps them so the next iteration reads
    what was just written.
    """

    def __init__(self, channel_a: MemoryChannelModel, channel_b: MemoryChannelModel):
        self.channel_a = channel_a
        self.channel_b = channel_b
        self.parity = 0
        self.flips = 0

    @property
    def read_side(self) -> MemoryChannelModel:
        return self.channel_a if self.parity == 0 else self.channel_b

    @property
    def write_side(self) -> MemoryChannelModel:
        return self.channel_b if self.parity == 0 else self.channel_a

    @property
    def channels(self):
        return (self.channel_a, self.channel_b)

    def flip(self) -> None:
        self.parity ^= 1
        self.flips += 1


class SingleChannelBinding:
    """A vector living on one channel that serves both reads and writes."""

    def __init__(self, channel: MemoryChannelModel):
        self.channel = channel
        self.flips = 0

    read_side = property(lambda self: self.channel)
    write_side = property(lambda self: self.channel)
    channels = property(lambda self: (self.channel,))

    def flip(self) -> None:
        pass


def _resolve(binding, side):
    return getattr(binding, side) if hasattr(binding, side) else binding


def mem_read(binding, base_addr: int, length: int, block: int | None = None):
    """Words of ``[base_addr, base_addr + length)`` from the read side, as an iterator of blocks.

    Bounds are checked and the access counted immediately; blocks of ``block``
    words are produced lazily (one block when None).
    """
    ch = _resolve(binding, "read_side")
    ch._check(base_addr, length)
    ch.begin_read()
    step = max(length if block is None else block, 1)

    def blocks():
        for start in range(0, length, step):
            yield ch.read_words(base_addr + start, min(step, length - start))

    return blocks()


def check_writable(binding, channel: MemoryChannelModel) -> None:
    if isinstance(binding, DoubleChannelBinding) and channel is binding.read_side:
        raise MemoryAccessError(
            f"write to read-side channel {channel.name} of a double-channel pair in the same iteration")


def mem_write(binding, base_addr: int, stream, channel: MemoryChannelModel | None = None) -> MemResponse:
    """Store a stream of word blocks and return the single write response.

    ``channel`` pins the physical channel resolved when the write was issued;
    writing to the binding's current read side is refused.
    """
    channel = _resolve(binding, "write_side") if channel is None else channel
    check_writable(binding, channel)
    channel.begin_write()
    addr = base_addr
    for chunk in stream:
        chunk = np.atleast_1d(np.asarray(chunk, dtype=np.float64))
        channel.write_words(addr, chunk)
        addr += len(chunk)
    return MemResponse(channel.channel_id, "write", addr - base_addr)
