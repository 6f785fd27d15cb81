import pytest
from hypothesis import given, settings, strategies as st

from dmsync.bench import Deployment, check_linearizable
from dmsync.kvstore import (ALL_MODES, FENCED, INVALID, OK, DataPointer, Mode, OpResult,
                            ResultKind, StoreOptions, build, initial_value, pack_pointer,
                            unpack_pointer, verbs_per_committed_op)
from dmsync.mempool import Address, MemoryPool
from dmsync.verify import batch_drill, fencing_scenario, lockstep, small_run

V1, V2 = b"1" * 8, b"2" * 8


def run_ops(mode, ops, *, keys=1, prefill=1.0, clients=1, **kw):
    """Run per-client op lists; returns (deployment, results per client)."""
    dep = Deployment(mode, clients, nodes=clients, keys=keys, prefill=prefill,
                     policy="round_robin", **kw)
    out = {c.cid: [] for c in dep.clients}

    def prog(c, lst):
        for kind, *args in lst:
            res = yield from getattr(c, kind)(*args)
            out[c.cid].append(res)

    for c, lst in zip(dep.clients, ops):
        dep.spawn(c, prog(c, lst))
    dep.run()
    return dep, out


def test_pointer_packing():
    a = Address(3, 48)
    assert unpack_pointer(pack_pointer(a, 5)) == (a, 5)
    assert unpack_pointer(pack_pointer(None, 15)) == (None, 15)
    p = DataPointer.from_word(pack_pointer(a, 2))
    assert (p.block, p.version, p.word) == (a, 2, pack_pointer(a, 2))


def test_results_and_modes():
    assert OK.ok and not INVALID.ok and not FENCED.ok and FENCED.fenced
    assert FENCED.kind is ResultKind.INVALID
    for r in (OK, INVALID, FENCED):
        assert OpResult.from_code(r.code).kind is r.kind
    assert Mode.parse("cider+lwc") == Mode("cider", True)
    assert len(ALL_MODES) == 8 and str(Mode("mcs", False)) == "mcs"
    with pytest.raises(ValueError):
        Mode.parse("spin")


def test_build_prefill():
    arr = build(10, 1.0)
    assert all(arr.peek_value(k) == initial_value(k) for k in range(10))
    assert arr.pool.stats().total == 0
    arr = build(10, 0.0)
    assert all(arr.peek(k).block is None for k in range(10))
    arr = build(1000, 0.5, seed=3)
    assert sum(arr.peek(k).block is not None for k in range(1000)) == 500


@pytest.mark.parametrize("mode", [str(m) for m in ALL_MODES])
def test_basic_workflows(mode):
    ops = [[("search", 0), ("insert", 0, V1), ("search", 0), ("insert", 0, V2),
            ("update", 0, V2), ("search", 0), ("delete", 0), ("search", 0),
            ("delete", 0), ("update", 0, V1), ("insert", 0, V1), ("update", 0, V2),
            ("search", 0)]]
    dep, out = run_ops(mode, ops, prefill=0.0)
    got = [(r.ok, r.value) for r in out[1]]
    assert got == [(False, None), (True, None), (True, V1), (False, None), (True, None),
                   (True, V2), (True, None), (False, None), (False, None), (False, None),
                   (True, None), (True, None), (True, V2)]
    # delete -> insert -> update runs against the bumped version.
    assert dep.array.peek(0).version == 1


def test_delete_absent_touches_no_lock():
    dep, out = run_ops("mcs", [[("delete", 0)]], prefill=0.0)
    assert out[1] == [INVALID]
    tags = dep.pool.stats().by_tag
    assert dict(tags) == {"ptr_read": 1}


def test_single_update_is_three_verbs_in_osync():
    dep, out = run_ops("osync", [[("update", 0, V1)]])
    assert out[1] == [OK]
    assert dep.pool.stats().total == 3


def test_uncontended_stream_costs():
    n = 50
    dep, out = run_ops("osync", [[("update", k, V1) for k in range(n)]], keys=n)
    assert verbs_per_committed_op(dep.pool.stats(), n) == 3.0
    dep, out = run_ops("osync", [[("search", k) for k in range(n)]], keys=n)
    assert verbs_per_committed_op(dep.pool.stats(), n) == 2.0


@pytest.mark.parametrize("script", [[1, 1, 1, 2, 2, 2], [2, 2, 2, 1, 1, 1], [1, 2, 1, 2, 1, 2]])
def test_concurrent_inserts_one_wins(script):
    dep, out = run_ops("osync", [[("insert", 0, V1)], [("insert", 0, V2)]], prefill=0.0,
                       clients=2, script=script)
    oks = [r.ok for rs in out.values() for r in rs]
    assert sorted(oks) == [False, True]
    winner = V1 if out[1][0].ok else V2
    assert dep.array.peek_value(0) == winner


def test_update_racing_delete_that_won_the_lock():
    dep, _, history = fencing_scenario("mcs", [2, 2] + [1] * 40 + [2] * 40)
    got = {r.op: r.result for r in history}
    assert got == {"update": "invalid", "delete": "ok"}


def test_pessimistic_batch_last_writer():
    dep, members, results = batch_drill(3)
    assert all(r.ok for r in results.values())
    assert dep.array.peek_value(0)[0] == members[-1].cid


def test_hot_key_cider_cheaper_than_osync():
    for n in (8, 16):
        assert lockstep("cider", n).verbs < lockstep("osync", n).verbs


def test_block_write_once_is_enforced():
    dep, out = run_ops("osync", [[("update", 0, V1)]])
    addr = dep.array.peek(0).block
    with pytest.raises(Exception):
        dep.pool.write(addr, bytes(24))


def test_rewrite_on_retry_option():
    for rewrite, writes in ((False, 4), (True, 10)):
        dep = Deployment("osync", 4, nodes=4, keys=1, policy="round_robin",
                         options=StoreOptions(rewrite_on_retry=rewrite))
        for i, c in enumerate(dep.clients):
            dep.spawn(c, c.update(0, bytes([i]) * 8))
        dep.run()
        assert dep.pool.stats().by_tag["kv_write"] == writes


class RecordingPool(MemoryPool):
    def __init__(self):
        super().__init__()
        self.swapped: set[int] = set()
        self.observed: list[int] = []

    def cas(self, addr, expect, swap, tag="cas"):
        prior = super().cas(addr, expect, swap, tag)
        if tag == "ptr_cas" and prior == expect:
            self.swapped.add(swap)
        return prior

    def read_word(self, addr, tag="read"):
        w = super().read_word(addr, tag)
        if tag == "ptr_read":
            self.observed.append(w)
        return w


@settings(max_examples=30)
@given(st.integers(0, 10**6), st.sampled_from(["cider", "cider+lwc"]))
def test_mixed_modes_only_commit_cas_arguments(seed, mode):
    pool = RecordingPool()
    dep = Deployment(mode, 4, nodes=2, keys=1, seed=seed, pool=pool)
    dep.grant(0, seed % 3)
    initial = pool.local_word(dep.array.slot(0))
    for i, c in enumerate(dep.clients):
        def prog(c=c, i=i):
            for j in range(3):
                yield from c.update(0, bytes([i, j]) * 4)
        dep.spawn(c, prog())
    dep.run()
    allowed = pool.swapped | {initial}
    assert set(pool.observed) <= allowed
    assert pool.local_word(dep.array.slot(0)) in pool.swapped


@settings(max_examples=25)
@given(st.integers(0, 10**6), st.sampled_from([str(m) for m in ALL_MODES]))
def test_small_runs_linearizable(seed, mode):
    dep, init, history = small_run(mode, seed)
    assert dep.finished
    assert check_linearizable(history, init).ok


@settings(max_examples=20)
@given(st.integers(0, 10**6), st.sampled_from(["osync", "mcs", "cider"]))
def test_search_never_torn(seed, mode):
    dep = Deployment(mode, 4, nodes=4, keys=1, seed=seed)
    written = {initial_value(0)}
    seen = []
    for i, c in enumerate(dep.clients):
        def prog(c=c, i=i):
            for j in range(4):
                if i % 2:
                    v = bytes([i, j]) * 4
                    written.add(v)
                    yield from c.update(0, v)
                else:
                    seen.append((yield from c.search(0)).value)
        dep.spawn(c, prog())
    dep.run()
    assert set(seen) <= written


def test_free_running_cider():
    dep = Deployment("cider", 4, nodes=2, keys=4, deterministic=False)
    dep.grant(0, 20)
    done = []
    for i, c in enumerate(dep.clients):
        def prog(c=c, i=i):
            for j in range(30):
                res = yield from c.update(j % 4, bytes([i, j]) * 4)
                done.append(res.ok)
        dep.spawn(c, prog())
    dep.run()
    assert len(done) == 120 and all(done)
