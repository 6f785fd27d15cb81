"""Deterministic verification suites and the lockstep microtest.

Every suite returns a :class:`SuiteResult`; ``failures`` carries enough of
the run (seed, mode, history) to replay it.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field

from .bench import Deployment, OpRecord, Sequencer, check_linearizable
from .kvstore import ALL_MODES, Mode, StoreOptions, Timing, initial_value

OP_KINDS = ("search", "insert", "update", "delete")
# Small runs finish in a few hundred steps; hitting this means livelock.
STEP_BUDGET = 50_000


@dataclass
class SuiteResult:
    name: str
    runs: int = 0
    failures: list[dict] = field(default_factory=list)
    details: dict = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return not self.failures

    def fail(self, **witness) -> None:
        self.failures.append(witness)


def _val(cid: int, i: int) -> bytes:
    return bytes([cid, i]) + b"\x00" * 6


def record_program(dep: Deployment, client, ops, history: list, seq: Sequencer):
    """Run ``ops`` (kind, key) in order, appending one OpRecord per op."""
    for i, (kind, key) in enumerate(ops):
        value = _val(client.cid, i) if kind in ("insert", "update") else None
        inv = seq()
        if kind == "search":
            res = yield from client.search(key)
        elif kind == "insert":
            res = yield from client.insert(key, value)
        elif kind == "update":
            res = yield from client.update(key, value)
        else:
            res = yield from client.delete(key)
        history.append(OpRecord(client.cid, kind, key, value, inv, seq(),
                                "ok" if res.ok else "invalid",
                                res.value if kind == "search" else None))


def initial_state(dep: Deployment) -> dict[int, bytes]:
    arr = dep.array
    return {k: arr.peek_value(k) for k in range(arr.count) if arr.peek(k).block is not None}


def small_run(mode: Mode | str, seed: int, *, clients: int | None = None,
              options: StoreOptions | None = None, max_ops: int = 12):
    """A seeded random run of at most 4 clients, 3 keys and ``max_ops`` ops."""
    rng = random.Random(seed)
    n = clients or rng.randint(2, 4)
    keys = rng.randint(1, 3)
    nodes = 2 if n % 2 == 0 else 1
    dep = Deployment(mode, n, nodes=nodes, keys=keys, prefill=rng.choice([0.0, 0.5, 1.0]),
                     seed=seed, policy="random", options=options, max_steps=STEP_BUDGET)
    if dep.mode.name == "cider":
        # Random warm credit so both synchronization paths get exercised.
        for c in dep.clients:
            for k in range(keys):
                dep.store.ledger(c.ctx.node).grant(k, rng.choice([0, 0, 1, 3, 40]))
    init = initial_state(dep)
    per_client = max(1, max_ops // n)
    weights = (2, 1, 4, 2)
    history: list[OpRecord] = []
    seq = Sequencer()
    for c in dep.clients:
        ops = [(rng.choices(OP_KINDS, weights)[0], rng.randrange(keys))
               for _ in range(per_client)]
        dep.spawn(c, record_program(dep, c, ops, history, seq))
    dep.run()
    return dep, init, history


# -- linearizability -------------------------------------------------------------


def linearizability_suite(seeds: int = 500, modes=ALL_MODES, start: int = 0,
                          options: StoreOptions | None = None) -> SuiteResult:
    res = SuiteResult("linearizability")
    for mode in modes:
        for seed in range(start, start + seeds):
            dep, init, history = small_run(mode, seed, options=options)
            res.runs += 1
            if not dep.finished:
                res.fail(mode=str(mode), seed=seed, problems=["did not terminate"],
                         history=[r.to_json() for r in history])
                continue
            verdict = check_linearizable(history, init)
            if not verdict.ok:
                res.fail(mode=str(mode), seed=seed, initial=init,
                         history=[r.to_json() for r in history],
                         witness=[r.to_json() for r in verdict.witness])
    return res


# -- version fencing ------------------------------------------------------------------

# Client 1 updates, client 2 deletes; scripts pick those clients first, in order.
# Expected update results; the delete always commits.
FENCING_SCRIPTS = {
    "update_then_delete": ([1] * 40 + [2] * 40, "ok"),
    "delete_then_update": ([2] * 40 + [1] * 40, "invalid"),
    "update_read_then_delete": ([1] + [2] * 40 + [1] * 40, "invalid"),
    "delete_read_then_update": ([2] + [1] * 40 + [2] * 40, "ok"),
    # The delete holds the lock with the entry version raised. Lock-based
    # updates are fenced; an optimistic one commits before the delete does.
    "delete_enqueued_then_update": ([2, 2] + [1] * 40 + [2] * 40, "lock-dependent"),
}


def expected_update(scenario: str, mode: Mode, credit: int) -> str:
    exp = FENCING_SCRIPTS[scenario][1]
    if exp != "lock-dependent":
        return exp
    optimistic = mode.name == "cider" and credit == 0
    return "ok" if optimistic else "invalid"


def fencing_scenario(mode: Mode | str, script, *, options: StoreOptions | None = None,
                     credit: int = 0):
    dep = Deployment(mode, 2, nodes=2, keys=1, policy="round_robin", script=script,
                     options=options, max_steps=STEP_BUDGET)
    if credit:
        dep.grant(0, credit)
    v0 = dep.array.peek(0).version
    history: list[OpRecord] = []
    seq = Sequencer()
    u, d = dep.clients
    dep.spawn(u, record_program(dep, u, [("update", 0)], history, seq))
    dep.spawn(d, record_program(dep, d, [("delete", 0)], history, seq))
    dep.run()
    return dep, v0, history


def combining_fencing_scenario(options: StoreOptions | None = None, hold: int = 100,
                               settle: int = 2000):
    """A delete queued inside a would-be combining batch.

    Client 1 holds the lock while updater C (2), deleter D (3) and updater U
    (4) enqueue in that order; C then searches. The delete's version bump
    must fence U so that D executes rather than being combined away. Client
    1 searches once everything has settled, which exposes a lost delete.
    """
    dep = Deployment("cider", 4, nodes=4, keys=1, policy="round_robin",
                     script=[1, 2, 2, 3, 3, 4, 4], options=options, max_steps=STEP_BUDGET)
    dep.grant(0, 50)
    history: list[OpRecord] = []
    seq = Sequencer()
    h, c, d, u = dep.clients
    lock = dep.store.lock
    version = dep.array.peek(0).version

    def hold_then_search():
        yield from lock.acquire(h.ctx, 0, version)
        yield from h.ctx.wait(None, hold, label="hold")
        yield from lock.release(h.ctx, 0)
        yield from lock.bump_epoch(h.ctx, 0)
        yield from h.ctx.wait(None, settle, label="settle")
        yield from record_program(dep, h, [("search", 0)], history, seq)

    dep.spawn(h, hold_then_search())
    dep.spawn(c, record_program(dep, c, [("update", 0), ("search", 0)], history, seq))
    dep.spawn(d, record_program(dep, d, [("delete", 0)], history, seq))
    dep.spawn(u, record_program(dep, u, [("update", 0)], history, seq))
    dep.run()
    return dep, history


def fencing_suite(options: StoreOptions | None = None, random_seeds: int = 100) -> SuiteResult:
    res = SuiteResult("fencing")
    init = {0: initial_value(0)}
    for mode in ALL_MODES:
        for name, (script, _) in FENCING_SCRIPTS.items():
            for credit in ((0, 50) if mode.name == "cider" else (0,)):
                dep, v0, history = fencing_scenario(mode, script, options=options,
                                                    credit=credit)
                res.runs += 1
                got = {r.op: r.result for r in history}
                expect = {"update": expected_update(name, mode, credit), "delete": "ok"}
                ptr = dep.array.peek(0)
                problems = []
                if not dep.finished:
                    problems.append("did not terminate")
                elif got != expect:
                    problems.append(f"results {got} != {expect}")
                if got.get("delete") == "ok" and (ptr.block is not None
                                                  or ptr.version != (v0 + 1) % 16):
                    problems.append(f"deleted key left pointer {ptr}")
                if not check_linearizable(history, init).ok:
                    problems.append("not linearizable")
                if problems:
                    res.fail(mode=str(mode), scenario=name, credit=credit, problems=problems,
                             history=[r.to_json() for r in history])
    dep, history = combining_fencing_scenario(options)
    res.runs += 1
    verdict = check_linearizable(history, init)
    if not dep.finished or not verdict.ok:
        res.fail(mode="cider", scenario="delete_inside_combining_queue",
                 problems=["did not terminate" if not dep.finished else "not linearizable"],
                 history=[r.to_json() for r in history],
                 witness=[r.to_json() for r in verdict.witness])
    for seed in range(random_seeds):
        dep, init_r, hist = small_run("cider", 10_000 + seed, options=options)
        res.runs += 1
        if not dep.finished:
            res.fail(mode="cider", seed=10_000 + seed, problems=["did not terminate"])
            continue
        verdict = check_linearizable(hist, init_r)
        if not verdict.ok:
            res.fail(mode="cider", seed=10_000 + seed, problems=["not linearizable"],
                     history=[r.to_json() for r in hist],
                     witness=[r.to_json() for r in verdict.witness])
    return res


# -- global write combining -------------------------------------------------------------


def batch_drill(k: int, *, hold: int = 200):
    """A holder keeps the lock while ``k`` pessimistic updaters queue behind it.

    The holder takes the lock without writing, so every pool write and
    pointer CAS in the run belongs to the batch the updaters form.
    """
    dep = Deployment("cider", k + 1, nodes=k + 1, keys=1, policy="round_robin",
                     script=[1, 1])
    dep.grant(0, 100)
    holder, *members = dep.clients
    lock = dep.store.lock
    version = dep.array.peek(0).version

    def hold_lock():
        yield from lock.acquire(holder.ctx, 0, version)
        yield from holder.ctx.wait(None, hold, label="hold")
        yield from lock.release(holder.ctx, 0)
        yield from lock.bump_epoch(holder.ctx, 0)

    dep.spawn(holder, hold_lock())
    results = {}

    def member(c, value):
        results[c.cid] = yield from c.update(0, value)

    for i, c in enumerate(members):
        dep.spawn(c, member(c, _val(c.cid, i)))
    dep.pool.reset_stats()
    dep.run()
    return dep, members, results


def batch_accounting(k: int) -> dict:
    dep, members, results = batch_drill(k)
    tags = dep.pool.stats().by_tag
    msgs = dep.fabric.messages
    return {
        "batches": [b.size for b in dep.store.gwc.batches],
        "kv_write": tags["kv_write"],
        "ptr_cas": tags["ptr_cas"],
        "wc_entry_read": tags["wc_entry_read"],
        "coord_exec_messages": msgs["wc_notify"] + msgs["wc_handback"],
        "wave_messages": msgs["wc_wave"],
        "all_ok": all(r.ok for r in results.values()),
        "final_value": dep.array.peek_value(0),
        "last_value": _val(members[-1].cid, len(members) - 1),
    }


def enqueue_order(dep: Deployment) -> list[int]:
    return [cid for cid, label in dep.driver.log
            if label in ("lock_acquire", "lock_acquire_delete")]


def lww_run(seed: int) -> tuple[bool, dict]:
    """Random schedule of pessimistic updaters on one key; check every batch.

    A batch is the queue segment from its coordinator to its executor. Every
    member must return the executor's result, and the key must end with the
    value of the last client ever enqueued.
    """
    rng = random.Random(seed)
    n = rng.randint(3, 8)
    dep = Deployment("cider", n, nodes=n, keys=1, seed=seed, policy="random")
    dep.grant(0, 1000)
    results: dict[tuple[int, int], int] = {}
    roles: dict[tuple[int, int], str | None] = {}
    values: dict[tuple[int, int], bytes] = {}

    def member(c, rounds):
        for i in range(rounds):
            values[(c.cid, i)] = _val(c.cid, i)
            results[(c.cid, i)] = (yield from c.update(0, values[(c.cid, i)])).code
            roles[(c.cid, i)] = c.info.role

    for c in dep.clients:
        dep.spawn(c, member(c, rng.randint(1, 3)))
    dep.run()
    # With ample credit every update enqueues exactly once, in op order per client.
    counts: dict[int, int] = {}
    queue = []
    for cid in enqueue_order(dep):
        queue.append((cid, counts.get(cid, 0)))
        counts[cid] = counts.get(cid, 0) + 1
    problems = []
    executors = [j for j, q in enumerate(queue) if roles[q] == "executor"]
    batches = dep.store.gwc.batches
    if len(executors) != len(batches):
        problems.append(f"{len(executors)} executors for {len(batches)} batches")
    for j, b in zip(executors, batches):
        if queue[j][0] != b.executor:
            problems.append(f"batch order mismatch at queue position {j}")
            continue
        co = max((i for i in range(j) if queue[i][0] == b.coordinator), default=None)
        if co is None or roles[queue[co]] != "coordinator":
            problems.append(f"no coordinator op for the batch of {b.executor}")
            continue
        seg = queue[co:j + 1]
        if len(seg) != b.size:
            problems.append(f"batch of {b.executor} spans {len(seg)} ops, size {b.size}")
        for m in seg[1:-1]:
            if roles[m] != "participant":
                problems.append(f"{m} inside a batch has role {roles[m]}")
        for m in seg:
            if results[m] != b.result:
                problems.append(f"member {m} returned {results[m]}, executor {b.result}")
    final = dep.array.peek_value(0)
    if final != values[queue[-1]]:
        problems.append(f"final value {final!r} is not the queue-last member's")
    return not problems, {"seed": seed, "clients": n, "batches": len(batches),
                          "problems": problems}


def gwc_suite(seeds: int = 200, start: int = 0) -> SuiteResult:
    res = SuiteResult("gwc")
    for k in (2, 3, 5, 8):
        acc = batch_accounting(k)
        res.runs += 1
        expect = {"batches": [k], "kv_write": 1, "ptr_cas": 1, "wc_entry_read": 1,
                  "coord_exec_messages": 2, "wave_messages": k - 1, "all_ok": True}
        bad = {key: acc[key] for key in expect if acc[key] != expect[key]}
        if acc["final_value"] != acc["last_value"]:
            bad["final_value"] = acc["final_value"]
        res.details[f"k={k}"] = acc
        if bad:
            res.fail(k=k, mismatches=bad)
    for seed in range(start, start + seeds):
        ok, info = lww_run(seed)
        res.runs += 1
        if not ok:
            res.fail(**info)
    return res


# -- epoch-based recovery -------------------------------------------------------------------


def epoch_drill(mode: str = "mcs", waiters: int = 4, max_duration: int = 1000) -> dict:
    """Kill the lock holder inside its critical section with ``waiters`` queued."""
    n = waiters + 1
    dep = Deployment(mode, n, nodes=n, keys=1, policy="round_robin", script=[1, 1],
                     timing=Timing(max_duration=max_duration))
    if dep.mode.name == "cider":
        dep.grant(0, 100)
    holder = dep.clients[0]
    killed_at = []
    dep.driver.kill_when(holder.cid, lambda label: label == "kv_write"
                         and not killed_at.append(dep.driver.now()))
    completions: dict[int, list] = {c.cid: [] for c in dep.clients}

    def prog(c):
        res = yield from c.update(0, _val(c.cid, 0))
        completions[c.cid].append(res)

    for c in dep.clients:
        dep.spawn(c, prog(c))
    dep.run()
    stalls = {c.cid: [e[2] for e in c.ctx.events if e[0] == "stalled"]
              for c in dep.clients[1:]}
    baselines = {c.cid: [e[2] for e in c.ctx.events if e[0] == "epoch"][:1]
                 for c in dep.clients[1:]}
    return {
        "killed": dep.driver.killed,
        "killed_at": killed_at[0] if killed_at else None,
        "stalls": stalls,
        "baselines": baselines,
        "repairs": dep.store.lock.controller.repairs,
        "completions": {cid: [r.ok for r in rs] for cid, rs in completions.items()},
        "lock_free": dep.array.locks.snapshot(0).tail == 0,
        "max_duration": max_duration,
        "final_value": dep.array.peek_value(0),
    }


def check_epoch_drill(d: dict) -> list[str]:
    problems = []
    if len(d["killed"]) != 1:
        problems.append("holder was not killed")
    firsts = [ts[0] for ts in d["stalls"].values() if ts]
    if len(firsts) != len(d["stalls"]):
        problems.append(f"not every waiter reported a stall: {d['stalls']}")
    elif max(firsts) - min(firsts) > d["max_duration"]:
        problems.append(f"stall reports spread over more than one window: {firsts}")
    # One window after the baseline read, plus the epoch read that closes it
    # (each live client may take one step in between).
    slack = len(d["completions"])
    for cid, ts in d["stalls"].items():
        base = d["baselines"][cid]
        if ts and (not base or ts[0] - base[0] > d["max_duration"] + slack):
            problems.append(f"waiter {cid} took more than one window past its baseline")
    if d["repairs"] != 1:
        problems.append(f"expected one repair, saw {d['repairs']}")
    for cid, done in d["completions"].items():
        if cid in d["killed"]:
            continue
        if done != [True]:
            problems.append(f"waiter {cid} completed {done}")
    if not d["lock_free"]:
        problems.append("lock still held at the end")
    return problems


def epoch_suite() -> SuiteResult:
    res = SuiteResult("epoch")
    for mode in ("mcs", "cider"):
        d = epoch_drill(mode)
        res.runs += 1
        res.details[mode] = d
        problems = check_epoch_drill(d)
        if problems:
            res.fail(mode=mode, problems=problems)
    return res


SUITES = {
    "linearizability": linearizability_suite,
    "fencing": fencing_suite,
    "gwc": gwc_suite,
    "epoch": epoch_suite,
}


# -- lockstep microtest --------------------------------------------------------------------


@dataclass
class MicroResult:
    mode: str
    clients: int
    ptr_cas_failures: int
    verbs: int
    messages: int
    combined: int
    all_ok: bool

    @property
    def verbs_per_op(self) -> float:
        return self.verbs / self.clients


def lockstep(mode: str, n: int, credit: int = 100) -> MicroResult:
    """``n`` clients update one key in lockstep, one update each."""
    dep = Deployment(mode, n, nodes=n, keys=1, policy="round_robin")
    if dep.mode.name == "cider" and credit:
        dep.grant(0, credit)
    results = {}
    infos = {}

    def prog(c, i):
        results[c.cid] = yield from c.update(0, _val(c.cid, i))
        infos[c.cid] = c.info

    for i, c in enumerate(dep.clients):
        dep.spawn(c, prog(c, i))
    dep.run()
    return MicroResult(mode, n, sum(i.retries for i in infos.values()),
                       dep.pool.stats().total, dep.fabric.total_messages,
                       sum(i.combined for i in infos.values()),
                       all(r.ok for r in results.values()))
