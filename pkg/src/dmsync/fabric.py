"""Compute-side fabric: client identities, peer-writable lock nodes and schedulers.

Client logic is written as generators. A generator yields a step label (a
``str``) right before each pool verb or peer message, and yields a
:class:`Wait` to block on client-local state. Two drivers execute them:

* :class:`Scheduler` steps clients cooperatively on one thread, picking the
  next runnable client with a seeded policy. Equal seeds give equal step logs.
* :class:`FreeRunner` gives every client its own thread; labels are ignored
  and waits spin on wall-clock time.
"""

from __future__ import annotations

import heapq
import random
import threading
import time
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Generator, Iterable

MAX_CLIENTS = (1 << 16) - 1

LOCKED_WAITING = 0
LOCKED_OWNER = 1
LOCKED_COMBINED = 0x3

NODE_FIELDS = ("next", "coordinator", "result", "locked", "batch")
_FIELD_BITS = {"next": 64, "coordinator": 16, "result": 16, "locked": 32, "batch": 16}


class FabricError(Exception):
    pass


class DeadlockSuspect(Exception):
    """Every live client is blocked and none has a timeout pending."""

    def __init__(self, blocked: Iterable[int], step: int):
        self.blocked = sorted(blocked)
        self.step = step
        super().__init__(f"all clients blocked at step {step}: {self.blocked}")


@dataclass
class Wait:
    """Block until ``predicate()`` is true or ``timeout`` driver units pass.

    The driver sends back ``True`` when the predicate held, ``False`` on timeout.
    ``predicate=None`` is a pure delay.
    """

    predicate: Callable[[], bool] | None
    timeout: float | None = None
    label: str = "wait"


Proc = Generator[object, object, object]


@dataclass
class LockNode:
    next: int = 0
    coordinator: int = 0
    result: int = 0
    locked: int = LOCKED_WAITING
    batch: int = 0

    def reset(self) -> None:
        self.next = self.coordinator = self.result = self.batch = 0
        self.locked = LOCKED_WAITING


@dataclass(frozen=True)
class PeerWrite:
    """One cross-CN message updating one or more fields of a peer's lock node."""

    target: int
    lock: int
    updates: tuple[tuple[str, int], ...]

    @classmethod
    def single(cls, target: int, lock: int, field_name: str, value: int) -> "PeerWrite":
        return cls(target, lock, ((field_name, value),))


@dataclass
class ClientInfo:
    cid: int
    node: int
    thread: int
    nodes: dict[int, LockNode] = field(default_factory=dict)


class Fabric:
    def __init__(self) -> None:
        self._clients: dict[int, ClientInfo] = {}
        self._by_place: dict[tuple[int, int], int] = {}
        self.messages: Counter = Counter()
        self._lock = threading.RLock()
        self._listeners: list[Callable[[int], None]] = []

    def register_client(self, node: int, thread: int) -> int:
        with self._lock:
            if (node, thread) in self._by_place:
                raise FabricError(f"client for node {node} thread {thread} already registered")
            if len(self._clients) >= MAX_CLIENTS:
                raise FabricError("16-bit client id space exhausted")
            cid = len(self._clients) + 1
            self._clients[cid] = ClientInfo(cid, node, thread)
            self._by_place[(node, thread)] = cid
            return cid

    def client(self, cid: int) -> ClientInfo:
        info = self._clients.get(cid)
        if info is None:
            raise FabricError(f"unknown client {cid}")
        return info

    @property
    def client_ids(self) -> list[int]:
        return sorted(self._clients)

    def node_of(self, cid: int) -> int:
        return self.client(cid).node

    def lock_node(self, cid: int, lock: int) -> LockNode:
        """The client's own lock node, allocated on first use."""
        nodes = self.client(cid).nodes
        ln = nodes.get(lock)
        if ln is None:
            ln = nodes[lock] = LockNode()
        return ln

    def add_listener(self, fn: Callable[[int], None]) -> None:
        self._listeners.append(fn)

    def write_peer_field(self, w: PeerWrite, tag: str = "peer") -> None:
        if w.lock < 0:
            raise FabricError(f"invalid lock id {w.lock}")
        with self._lock:
            ln = self.lock_node(w.target, w.lock)
            for name, value in w.updates:
                if name not in _FIELD_BITS:
                    raise FabricError(f"unknown lock-node field {name!r}")
                setattr(ln, name, value & ((1 << _FIELD_BITS[name]) - 1))
            self.messages[tag] += 1
        for fn in self._listeners:
            fn(w.target)

    def poll_field(self, cid: int, lock: int, field_name: str) -> int:
        return getattr(self.lock_node(cid, lock), field_name)

    def notify(self, cid: int) -> None:
        """Signal a change to client-local state that ``cid`` may be waiting on."""
        for fn in self._listeners:
            fn(cid)

    @property
    def total_messages(self) -> int:
        return sum(self.messages.values())


# -- deterministic scheduler -------------------------------------------------


@dataclass
class _Task:
    cid: int
    gen: Proc
    pending: object = None      # str label or Wait
    wait_start: int = 0
    wait_id: int = 0
    expired: bool = False
    done: bool = False
    result: object = None


class Scheduler:
    """Cooperative single-threaded driver with a seeded pick policy.

    ``policy`` is ``"random"`` or ``"round_robin"``. ``script`` lists client
    ids to pick first, in order; an entry whose client is not runnable is
    skipped. Timeouts are measured in scheduler steps; when every client is
    blocked and some wait has a timeout, the clock jumps to the earliest
    deadline.
    """

    mode = "deterministic"

    def __init__(self, seed: int = 0, policy: str = "random", record_steps: bool = True,
                 max_steps: int | None = None, script: Iterable[int] = ()):
        if policy not in ("random", "round_robin"):
            raise ValueError(f"unknown policy {policy!r}")
        self.seed = seed
        self.policy = policy
        self.rng = random.Random(seed)
        self.record_steps = record_steps
        self.max_steps = max_steps
        self.script = list(script)
        self.clock = 0
        self.steps = 0
        self.log: list[tuple[int, str]] = []
        self._tasks: dict[int, _Task] = {}
        self._order: list[int] = []
        self._rr = 0
        self._runnable: list[int] = []
        self._blocked: dict[int, _Task] = {}
        self._dirty: set[int] = set()
        self._deadlines: list[tuple[float, int, int]] = []
        self._kill_rules: list[tuple[int, Callable[[str], bool]]] = []
        self.killed: list[int] = []

    def now(self) -> int:
        return self.clock

    def attach(self, fabric: Fabric) -> None:
        fabric.add_listener(self._mark_dirty)

    def _mark_dirty(self, cid: int) -> None:
        self._dirty.add(cid)

    def spawn(self, cid: int, gen: Proc) -> None:
        if cid in self._tasks:
            raise ValueError(f"client {cid} already spawned")
        task = _Task(cid, gen)
        self._tasks[cid] = task
        self._order.append(cid)
        self._advance(task, None)

    def kill_when(self, cid: int, predicate: Callable[[str], bool]) -> None:
        """Crash ``cid`` just before it executes a step whose label matches."""
        self._kill_rules.append((cid, predicate))

    def kill(self, cid: int) -> None:
        task = self._tasks[cid]
        if task.done:
            return
        task.done = True
        task.gen.close()
        self._blocked.pop(cid, None)
        if cid in self._runnable:
            self._runnable.remove(cid)
        self.killed.append(cid)

    def result(self, cid: int) -> object:
        return self._tasks[cid].result

    @property
    def live(self) -> list[int]:
        return [c for c in self._order if not self._tasks[c].done]

    def _advance(self, task: _Task, value: object) -> None:
        try:
            y = task.gen.send(value)
        except StopIteration as stop:
            task.done = True
            task.result = stop.value
            return
        self._set_pending(task, y)

    def _set_pending(self, task: _Task, y: object) -> None:
        task.pending = y
        if type(y) is str:
            self._runnable.append(task.cid)
        elif isinstance(y, Wait):
            task.expired = False
            if y.predicate is not None and y.predicate():
                self._runnable.append(task.cid)
            else:
                task.wait_start = self.clock
                task.wait_id += 1
                self._blocked[task.cid] = task
                if y.timeout is not None:
                    heapq.heappush(self._deadlines,
                                   (self.clock + y.timeout, task.cid, task.wait_id))
        else:
            raise TypeError(f"client {task.cid} yielded {y!r}")

    def _wake_dirty(self) -> None:
        if not self._dirty:
            return
        dirty, self._dirty = self._dirty, set()
        for cid in dirty:
            task = self._blocked.get(cid)
            if task is not None and task.pending.predicate is not None and task.pending.predicate():
                del self._blocked[cid]
                self._runnable.append(cid)

    def _release_due(self) -> None:
        dl = self._deadlines
        while dl and dl[0][0] <= self.clock:
            _, cid, wid = heapq.heappop(dl)
            task = self._blocked.get(cid)
            if task is not None and task.wait_id == wid:
                del self._blocked[cid]
                task.expired = True
                self._runnable.append(cid)

    def _expire(self) -> bool:
        """Jump the clock to the earliest live wait deadline. False if none."""
        dl = self._deadlines
        while dl:
            at, cid, wid = dl[0]
            task = self._blocked.get(cid)
            if task is None or task.wait_id != wid:
                heapq.heappop(dl)
                continue
            self.clock = max(self.clock, at)
            self._release_due()
            return True
        return False

    def pick(self) -> int | None:
        """Choose the next runnable client (the ``step`` operation)."""
        self._wake_dirty()
        if not self._runnable:
            return None
        while self.script:
            cid = self.script.pop(0)
            if cid in self._runnable:
                return cid
        if self.policy == "random":
            return self._runnable[self.rng.randrange(len(self._runnable))]
        n = len(self._order)
        for i in range(n):
            cid = self._order[(self._rr + i) % n]
            if cid in self._runnable:
                self._rr = (self._rr + i + 1) % n
                return cid
        return None

    def step(self) -> bool:
        """Execute one step. Returns False once no client remains."""
        cid = self.pick()
        if cid is None:
            if not self._blocked:
                return False
            if not self._expire():
                raise DeadlockSuspect(self._blocked, self.clock)
            return True
        self._runnable.remove(cid)
        task = self._tasks[cid]
        y = task.pending
        if type(y) is str:
            for kc, pred in self._kill_rules:
                if kc == cid and pred(y):
                    self.kill(cid)
                    return True
            self.clock += 1
            self.steps += 1
            if self.record_steps:
                self.log.append((cid, y))
            self._advance(task, None)
        else:
            ok = y.predicate is not None and y.predicate()
            if ok or task.expired or y.predicate is None:
                self._advance(task, ok)
            else:
                # Woken, but the condition flipped back before this client ran.
                self._set_pending(task, y)
        if self._deadlines and self._deadlines[0][0] <= self.clock:
            self._release_due()
        return True

    def run(self) -> None:
        while self.step():
            if self.max_steps is not None and self.steps >= self.max_steps:
                break


# -- free-running driver -----------------------------------------------------


class FreeRunner:
    """Runs each client generator on its own thread; timeouts are seconds."""

    mode = "free"

    def __init__(self, spin_sleep: float = 0.0):
        self.spin_sleep = spin_sleep
        self._threads: dict[int, threading.Thread] = {}
        self._results: dict[int, object] = {}
        self._errors: list[BaseException] = []
        self._t0 = time.perf_counter()

    def now(self) -> float:
        return time.perf_counter() - self._t0

    def attach(self, fabric: Fabric) -> None:
        pass

    def _drive(self, cid: int, gen: Proc) -> None:
        try:
            value: object = None
            while True:
                y = gen.send(value)
                value = None
                if isinstance(y, Wait):
                    value = self._wait(y)
                else:
                    time.sleep(0)
        except StopIteration as stop:
            self._results[cid] = stop.value
        except BaseException as exc:  # surfaced by run()
            self._errors.append(exc)

    def _wait(self, w: Wait) -> bool:
        deadline = None if w.timeout is None else time.perf_counter() + w.timeout
        while True:
            if w.predicate is not None and w.predicate():
                return True
            if deadline is not None and time.perf_counter() >= deadline:
                return False
            time.sleep(self.spin_sleep)

    def spawn(self, cid: int, gen: Proc) -> None:
        t = threading.Thread(target=self._drive, args=(cid, gen), daemon=True)
        self._threads[cid] = t

    def result(self, cid: int) -> object:
        return self._results.get(cid)

    def run(self) -> None:
        for t in self._threads.values():
            t.start()
        for t in self._threads.values():
            t.join()
        if self._errors:
            raise self._errors[0]


# -- per-client verb context -------------------------------------------------


class ClientContext:
    """A logical client bound to a pool, the fabric and a driver.

    Every remote action is a generator: ``yield from ctx.cas(...)`` first
    yields the step label to the driver, then performs the verb atomically.
    """

    def __init__(self, cid: int, pool, fabric: Fabric, driver):
        self.cid = cid
        self.pool = pool
        self.fabric = fabric
        self.driver = driver
        self.node = fabric.node_of(cid)
        self.events: list[tuple] = []

    def now(self) -> float:
        return self.driver.now()

    def read(self, addr, length: int, tag: str = "read"):
        yield tag
        return self.pool.read(addr, length, tag=tag)

    def read_word(self, addr, tag: str = "read"):
        yield tag
        return self.pool.read_word(addr, tag=tag)

    def write(self, addr, data: bytes, tag: str = "write"):
        yield tag
        self.pool.write(addr, data, tag=tag)

    def cas(self, addr, expect: int, swap: int, tag: str = "cas"):
        yield tag
        return self.pool.cas(addr, expect, swap, tag=tag)

    def masked_cas(self, addr, compare: int, compare_mask: int, swap: int,
                   swap_mask: int, tag: str = "masked_cas"):
        yield tag
        return self.pool.masked_cas(addr, compare, compare_mask, swap, swap_mask, tag=tag)

    def faa(self, addr, delta: int, tag: str = "faa"):
        yield tag
        return self.pool.faa(addr, delta, tag=tag)

    def send(self, target: int, lock: int, tag: str = "peer", **updates: int):
        yield tag
        self.fabric.write_peer_field(PeerWrite(target, lock, tuple(updates.items())), tag=tag)

    def wait(self, predicate, timeout=None, label: str = "wait"):
        ok = yield Wait(predicate, timeout, label)
        return ok

    def lock_node(self, lock: int) -> LockNode:
        return self.fabric.lock_node(self.cid, lock)
