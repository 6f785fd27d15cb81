import pytest
from hypothesis import given, settings, strategies as st

from dmsync.bench import Deployment
from dmsync.gwc import WcRole
from dmsync.verify import _val, batch_accounting, batch_drill, enqueue_order, lww_run


def test_solo_holder_sends_no_wc_messages():
    dep = Deployment("cider", 1, keys=1)
    dep.grant(0, 5)
    (c,) = dep.clients
    out = []

    def prog():
        out.append((yield from c.update(0, b"v" * 8)))

    dep.spawn(c, prog())
    dep.run()
    assert out[0].ok and c.info.role == "solo" and c.info.path == "pessimistic"
    assert sum(dep.fabric.messages[t] for t in ("wc_notify", "wc_handback", "wc_wave")) == 0
    assert dep.store.gwc.batches == []


@pytest.mark.parametrize("k", [2, 3, 5, 8])
def test_batch_roles_and_single_write(k):
    acc = batch_accounting(k)
    assert acc["batches"] == [k]
    assert (acc["kv_write"], acc["ptr_cas"], acc["wc_entry_read"]) == (1, 1, 1)
    assert acc["coord_exec_messages"] == 2 and acc["wave_messages"] == k - 1
    assert acc["all_ok"] and acc["final_value"] == acc["last_value"]
    dep, members, _ = batch_drill(k)
    roles = [m.info.role for m in members]
    assert roles == ["coordinator"] + ["participant"] * (k - 2) + ["executor"]
    # Handback and notify are fabric messages, never pool verbs.
    assert dep.fabric.messages["wc_handback"] == 1
    assert dep.pool.stats().by_tag["wc_handback"] == 0
    # Members between coordinator and executor never touch the pool.
    log = dep.driver.log
    for m in members[1:-1]:
        pool_steps = [l for c, l in log if c == m.cid
                      and l not in ("lock_acquire", "ptr_read", "link", "wc_wave")]
        assert pool_steps == []
    assert [b.size for b in dep.store.gwc.batches] == [m.info.batch_size for m in members[-1:]]


def test_late_arrival_forms_next_episode():
    dep = Deployment("cider", 4, nodes=4, keys=1, policy="round_robin", script=[1, 1])
    dep.grant(0, 100)
    h, a, b, d = dep.clients
    lock = dep.store.lock

    def hold():
        yield from lock.acquire(h.ctx, 0, 0)
        yield from h.ctx.wait(None, 200, label="hold")
        yield from lock.release(h.ctx, 0)
        yield from lock.bump_epoch(h.ctx, 0)

    def member(c, delay=0):
        if delay:
            yield from c.ctx.wait(None, delay, label="late")
        yield from c.update(0, _val(c.cid, 0))

    dep.spawn(h, hold())
    dep.spawn(a, member(a))
    dep.spawn(b, member(b))
    dep.spawn(d, member(d, 204))
    dep.run()
    log = dep.driver.log
    read_at = log.index((a.cid, "wc_entry_read"))
    d_at = log.index((d.cid, "lock_acquire"))
    exec_done = max(i for i, (c, _) in enumerate(log) if c == b.cid)
    assert read_at < d_at < exec_done
    assert [(x.info.role) for x in (a, b, d)] == ["coordinator", "executor", "solo"]
    assert [x.size for x in dep.store.gwc.batches] == [2]
    assert dep.array.peek_value(0) == _val(d.cid, 0)
    assert lock.table.snapshot(0).tail == 0


@settings(max_examples=40)
@given(st.integers(0, 10**6))
def test_batches_never_interleave_and_last_writer_wins(seed):
    ok, info = lww_run(seed)
    assert ok, info


def test_enqueue_order_matches_batch_segments():
    dep, members, _ = batch_drill(4)
    assert enqueue_order(dep) == [1] + [m.cid for m in members]
    b = dep.store.gwc.batches[0]
    assert (b.coordinator, b.executor, b.size) == (members[0].cid, members[-1].cid, 4)
    assert b.result == 0
    assert WcRole(members[0].info.role) is WcRole.COORDINATOR
