import itertools
import threading

import pytest
from hypothesis import given, strategies as st

from dmsync.mempool import (MASK64, AllocationError, FaultError, KvBlock, MemoryPool,
                            VerbCounters)
from dmsync.verify import lockstep

from conftest import make_rig

words = st.integers(0, MASK64)


def test_region_is_zeroed_and_disjoint():
    pool = MemoryPool()
    a = pool.alloc_region(8 * 10**6)
    b = pool.alloc_region(64)
    assert a.region != b.region
    assert pool.read_word(a + 8 * 999_999) == 0
    assert pool.read(b, 64) == bytes(64)
    pool.write_word(a, 7)
    assert pool.read_word(b) == 0


def test_degenerate_and_exhausted_regions():
    pool = MemoryPool(capacity=128)
    with pytest.raises(AllocationError):
        pool.alloc_region(0)
    pool.alloc_region(100)
    with pytest.raises(AllocationError):
        pool.alloc_region(100)


def test_read_your_write_and_bounds():
    pool = MemoryPool()
    a = pool.alloc_region(32)
    pool.write(a + 3, b"hello")
    assert pool.read(a + 3, 5) == b"hello"
    with pytest.raises(FaultError):
        pool.read(a + 30, 8)
    with pytest.raises(FaultError):
        pool.write(a + 28, b"12345")


def test_atomics_require_alignment():
    pool = MemoryPool()
    a = pool.alloc_region(32)
    for verb in (lambda: pool.cas(a + 4, 0, 1), lambda: pool.faa(a + 1, 1),
                 lambda: pool.masked_cas(a + 2, 0, 0, 1, 1)):
        with pytest.raises(FaultError):
            verb()


def test_cas_examples():
    pool = MemoryPool()
    a = pool.alloc_region(8)
    pool.write_word(a, 5)
    assert pool.cas(a, 5, 9) == 5 and pool.local_word(a) == 9
    pool.write_word(a, 5)
    assert pool.cas(a, 7, 9) == 5 and pool.local_word(a) == 5


def test_masked_cas_bit_formula():
    pool = MemoryPool()
    a = pool.alloc_region(8)
    pool.write_word(a, 0x35)
    assert pool.masked_cas(a, 0x05, 0x0F, 0x20, 0xF0) == 0x35
    assert pool.local_word(a) == 0x25


def test_faa_examples():
    pool = MemoryPool()
    a = pool.alloc_region(8)
    assert pool.faa(a, 1) == 0 and pool.local_word(a) == 1
    pool.write_word(a, 10)
    assert pool.faa(a, -3) == 10 and pool.local_word(a) == 7


def test_concurrent_faa_counts():
    pool = MemoryPool()
    a = pool.alloc_region(8)
    threads = [threading.Thread(target=lambda: [pool.faa(a, 1) for _ in range(500)])
               for _ in range(8)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert pool.local_word(a) == 4000


def test_no_torn_words_under_concurrent_writes():
    pool = MemoryPool()
    a = pool.alloc_region(64)
    x, y = b"\xaa" * 64, b"\x55" * 64
    stop = threading.Event()

    def writer():
        while not stop.is_set():
            pool.write(a, x)
            pool.write(a, y)

    t = threading.Thread(target=writer)
    t.start()
    try:
        for _ in range(2000):
            raw = pool.read(a, 64)
            for i in range(0, 64, 8):
                assert raw[i:i + 8] in (x[:8], y[:8], bytes(8))
    finally:
        stop.set()
        t.join()


def test_kv_alloc_is_bump_per_client_and_write_once():
    pool = MemoryPool(arena_capacity=1024, arena_chunk=256)
    a1, a2 = pool.kv_alloc(1, 24), pool.kv_alloc(1, 24)
    b1 = pool.kv_alloc(2, 24)
    assert a1.region == a2.region and a2.offset > a1.offset
    assert b1.region != a1.region
    pool.write(a1, b"x" * 24)
    with pytest.raises(FaultError):
        pool.write(a1, b"y" * 24)
    with pytest.raises(AllocationError):
        for _ in range(100):
            pool.kv_alloc(3, 24)


def test_kv_block_roundtrip():
    blk = KvBlock(42, b"abc")
    raw = blk.encode(8)
    assert len(raw) == KvBlock.size_for(8) == 24
    assert KvBlock.decode(raw) == blk
    with pytest.raises(ValueError):
        KvBlock(1, b"123456789").encode(8)


def test_stats_counting():
    pool = MemoryPool()
    assert pool.stats() == VerbCounters()
    a = pool.alloc_region(16)
    pool.write(a, b"12345678")
    s = pool.stats()
    assert s.writes == 1 and s.bytes_written == 8 and s.total == 1
    pool.local_set_word(a, 3)
    pool.local_word(a)
    assert pool.stats().total == 1


def test_stats_after_lockstep_microtest():
    from dmsync.bench import Deployment
    dep = Deployment("osync", 4, nodes=4, keys=1, policy="round_robin")

    def prog(c, i):
        yield from c.update(0, bytes([i]) * 8)

    for i, c in enumerate(dep.clients):
        dep.spawn(c, prog(c, i))
    dep.run()
    s = dep.pool.stats()
    # 4 successes + 6 failures; each failure re-reads the pointer once.
    assert s.cas == 10
    assert s.by_tag["ptr_read"] == 4 + 6 and s.writes == 4
    assert lockstep("osync", 4).ptr_cas_failures == 6


@given(st.lists(st.sampled_from(["read", "write", "cas", "masked_cas", "faa"]), max_size=40))
def test_counters_match_issued_verbs(verbs):
    pool = MemoryPool()
    a = pool.alloc_region(8)
    calls = {"read": lambda: pool.read(a, 8), "write": lambda: pool.write(a, bytes(8)),
             "cas": lambda: pool.cas(a, 0, 1), "masked_cas": lambda: pool.masked_cas(a, 0, 0, 1, 1),
             "faa": lambda: pool.faa(a, 1)}
    for v in verbs:
        calls[v]()
    s = pool.stats()
    got = {"read": s.reads, "write": s.writes, "cas": s.cas, "masked_cas": s.masked_cas,
           "faa": s.faa}
    assert got == {v: verbs.count(v) for v in calls}
    assert s.total == len(verbs)


@given(words, words, words)
def test_full_mask_masked_cas_is_cas(init, compare, swap):
    p1, p2 = MemoryPool(), MemoryPool()
    a1, a2 = p1.alloc_region(8), p2.alloc_region(8)
    p1.write_word(a1, init)
    p2.write_word(a2, init)
    assert p1.cas(a1, compare, swap) == p2.masked_cas(a2, compare, MASK64, swap, MASK64)
    assert p1.local_word(a1) == p2.local_word(a2)


@given(words, words, words, words)
def test_zero_compare_mask_always_writes(init, compare, swap, swap_mask):
    pool = MemoryPool()
    a = pool.alloc_region(8)
    pool.write_word(a, init)
    assert pool.masked_cas(a, compare, 0, swap, swap_mask) == init
    assert pool.local_word(a) == (init & ~swap_mask | swap & swap_mask) & MASK64


@given(st.lists(st.tuples(st.integers(1, 3), st.integers(1, 40)), max_size=30))
def test_kv_alloc_never_overlaps(requests):
    pool = MemoryPool(arena_chunk=128)
    spans = [(pool.kv_alloc(owner, n), n) for owner, n in requests]
    for (a, n), (b, m) in itertools.combinations(spans, 2):
        if a.region == b.region:
            assert a.offset + n <= b.offset or b.offset + m <= a.offset


atomic_op = st.one_of(
    st.tuples(st.just("cas"), st.integers(0, 3), st.integers(0, 3)),
    st.tuples(st.just("faa"), st.integers(-2, 2)),
    st.tuples(st.just("masked_cas"), st.integers(0, 3), st.sampled_from([0, 1, 3]),
              st.integers(0, 3), st.sampled_from([1, 2, 3])),
)


def _apply_atomic(word, op):
    if op[0] == "cas":
        return (op[2] if word == op[1] else word), word
    if op[0] == "faa":
        return (word + op[1]) & MASK64, word
    _, cmp, cmask, swap, smask = op
    new = (word & ~smask | swap & smask) & MASK64 if (word & cmask) == (cmp & cmask) else word
    return new, word


@given(st.lists(st.lists(atomic_op, min_size=1, max_size=2), min_size=1, max_size=3),
       st.integers(0, 2**32))
def test_atomic_verbs_linearizable_per_word(programs, seed):
    """Returned priors must match some total order of the verbs on the word."""
    programs = [p for p in programs][:3]
    rig = make_rig(len(programs), seed=seed, policy="random")
    a = rig.pool.alloc_region(8)
    got: dict[tuple[int, int], int] = {}

    def client(i, ctx, ops):
        for j, op in enumerate(ops):
            if op[0] == "cas":
                got[i, j] = yield from ctx.cas(a, op[1], op[2])
            elif op[0] == "faa":
                got[i, j] = yield from ctx.faa(a, op[1])
            else:
                got[i, j] = yield from ctx.masked_cas(a, *op[1:])

    for i, (ctx, ops) in enumerate(zip(rig.ctxs, programs)):
        rig.sched.spawn(ctx.cid, client(i, ctx, ops))
    rig.sched.run()
    final = rig.pool.local_word(a)

    def search(pos, word):
        if all(pos[i] == len(p) for i, p in enumerate(programs)):
            return word == final
        for i, p in enumerate(programs):
            j = pos[i]
            if j < len(p):
                new, prior = _apply_atomic(word, p[j])
                if prior == got[i, j] and search(pos[:i] + (j + 1,) + pos[i + 1:], new):
                    return True
        return False

    assert search(tuple(0 for _ in programs), 0)
