import numpy as np
import pytest

from streamcg.memory import (
    DoubleChannelBinding, MemoryAccessError, MemoryChannelModel, SingleChannelBinding, mem_read,
    mem_write,
)


def test_write_then_read_counts_words():
    ch = MemoryChannelModel(0, 8)
    b = SingleChannelBinding(ch)
    resp = mem_write(b, 0, [np.array([1.0, 2.0, 3.0])])
    assert (resp.channel, resp.op, resp.len) == (0, "write", 3)
    got = np.concatenate(list(mem_read(b, 0, 3)))
    assert got.tolist() == [1.0, 2.0, 3.0]
    assert (ch.read_count, ch.write_count) == (3, 3)
    assert (ch.read_ops, ch.write_ops) == (1, 1)


def test_read_in_blocks():
    ch = MemoryChannelModel(0, 10)
    ch.load(0, np.arange(10.0))
    blocks = list(mem_read(ch, 2, 7, block=3))
    assert [len(b) for b in blocks] == [3, 3, 1]
    assert np.concatenate(blocks).tolist() == list(np.arange(2.0, 9.0))


def test_out_of_bounds_read_fails_eagerly():
    ch = MemoryChannelModel(0, 4)
    with pytest.raises(MemoryAccessError, match="out-of-bounds"):
        mem_read(ch, 2, 3)
    with pytest.raises(MemoryAccessError):
        mem_write(ch, 3, [np.ones(2)])


def test_reset_counters():
    ch = MemoryChannelModel(0, 4)
    ch.read_words(0, 4)
    ch.reset_counters()
    assert ch.read_count == ch.write_count == ch.read_ops == ch.write_ops == 0


def test_ping_pong():
    a, b = MemoryChannelModel(0, 3, "a"), MemoryChannelModel(1, 3, "b")
    pair = DoubleChannelBinding(a, b)
    assert pair.read_side is a and pair.write_side is b
    v = np.array([1.0, 2.0, 3.0])
    mem_write(pair, 0, [v])
    assert b.peek().tolist() == v.tolist()
    pair.flip()
    assert pair.read_side is b
    assert np.concatenate(list(mem_read(pair, 0, 3))).tolist() == v.tolist()
    assert pair.flips == 1


def test_write_to_read_side_refused():
    a, b = MemoryChannelModel(0, 3), MemoryChannelModel(1, 3)
    pair = DoubleChannelBinding(a, b)
    with pytest.raises(MemoryAccessError, match="read-side"):
        mem_write(pair, 0, [np.ones(3)], channel=a)


def test_pinned_write_survives_flip():
    a, b = MemoryChannelModel(0, 2), MemoryChannelModel(1, 2)
    pair = DoubleChannelBinding(a, b)
    target = pair.write_side
    pair.flip()
    pair.flip()
    resp = mem_write(pair, 0, [np.ones(2)], channel=target)
    assert resp.channel == 1
