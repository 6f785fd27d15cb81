"""Contention-aware mode arbitration and local write combining.

Each compute node keeps a credit ledger keyed by data-pointer address. An
UPDATE spends one credit to go pessimistic; without credit it goes
optimistic. Credits grow by ``initial_credit`` after two consecutive
optimistic commits that each needed ``hotness_threshold`` or more retries,
grow by 2 after a pessimistic episode that combined, and are divided by
``aimd_factor`` after one that did not.
"""

from __future__ import annotations

import enum
import threading
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Callable, Iterable


class SyncMode(enum.Enum):
    PESSIMISTIC = "pessimistic"
    OPTIMISTIC = "optimistic"


@dataclass(frozen=True)
class SyncParams:
    aimd_factor: int = 2
    initial_credit: int = 36
    hotness_threshold: int = 2
    ledger_cap: int = 1 << 20

    def __post_init__(self):
        if self.aimd_factor < 2:
            raise ValueError("aimd_factor must be at least 2")
        if self.initial_credit < 0 or self.hotness_threshold < 0:
            raise ValueError("credits and thresholds must be non-negative")


class CreditLedger:
    """Per-node ``credit`` and ``retryRecord`` maps; absent keys read as 0."""

    def __init__(self, params: SyncParams | None = None):
        self.params = params or SyncParams()
        self._entries: OrderedDict[object, list[int]] = OrderedDict()
        self._lock = threading.Lock()
        self.evictions = 0

    def credit(self, ptr) -> int:
        e = self._entries.get(ptr)
        return e[0] if e else 0

    def retry_record(self, ptr) -> int:
        e = self._entries.get(ptr)
        return e[1] if e else 0

    def __len__(self) -> int:
        return len(self._entries)

    def _entry(self, ptr) -> list[int]:
        e = self._entries.get(ptr)
        if e is None:
            e = self._entries[ptr] = [0, 0]
            if len(self._entries) > self.params.ledger_cap:
                self._evict()
        else:
            self._entries.move_to_end(ptr)
        return e

    def _evict(self) -> None:
        thr = self.params.hotness_threshold
        for key, (credit, retry) in list(self._entries.items()):
            if len(self._entries) <= self.params.ledger_cap:
                break
            if credit == 0 and retry < thr:
                del self._entries[key]
                self.evictions += 1

    def decide_mode(self, ptr) -> SyncMode:
        with self._lock:
            e = self._entries.get(ptr)
            if e and e[0] > 0:
                e[0] -= 1
                self._entries.move_to_end(ptr)
                return SyncMode.PESSIMISTIC
            return SyncMode.OPTIMISTIC

    def after_pessimistic(self, ptr, batch_size: int) -> None:
        with self._lock:
            e = self._entry(ptr)
            if batch_size > 1:
                e[0] += 2
            else:
                e[0] //= self.params.aimd_factor

    def after_optimistic(self, ptr, n_retry: int) -> None:
        thr = self.params.hotness_threshold
        with self._lock:
            e = self._entry(ptr)
            if n_retry >= thr and e[1] >= thr:
                e[0] += self.params.initial_credit
            e[1] = n_retry

    def grant(self, ptr, credit: int) -> None:
        """Seed a credit directly, e.g. to model a warmed-up ledger."""
        with self._lock:
            self._entry(ptr)[0] = credit


def replay(events: Iterable[tuple], params: SyncParams | None = None, ptr=0) -> list[dict]:
    """Run a scripted episode sequence through a fresh ledger.

    Events are ``("decide",)``, ``("pessimistic", batch_size)`` or
    ``("optimistic", n_retry)``. Returns the ledger state after each event,
    with the mode for decide events.
    """
    ledger = CreditLedger(params)
    trace = []
    for ev in events:
        row: dict = {"event": ev}
        if ev[0] == "decide":
            row["mode"] = ledger.decide_mode(ptr)
        elif ev[0] == "pessimistic":
            ledger.after_pessimistic(ptr, ev[1])
        elif ev[0] == "optimistic":
            ledger.after_optimistic(ptr, ev[1])
        else:
            raise ValueError(f"unknown event {ev!r}")
        row["credit"] = ledger.credit(ptr)
        row["retry_record"] = ledger.retry_record(ptr)
        trace.append(row)
    return trace


# -- local write combining ----------------------------------------------------


class LocalWcStatus(enum.Enum):
    BECAME_COMBINER = "became_combiner"
    COMBINED_LOCALLY = "combined_locally"


@dataclass(eq=False)
class LocalWcEntry:
    ptr: object
    combiner: int
    buffer: bytes
    members: list[int] = field(default_factory=list)
    sealed: bool = False
    active: bool = False
    done: bool = False
    result: object = None


class LocalWcTable:
    """Per-node combining table.

    For each pointer there is at most one active entry (its combiner is
    executing) and one pending entry collecting arrivals for the next round.
    Arrivals overwrite the pending buffer, so it always holds the last
    writer's value. The combiner seals its entry right before the value is
    committed to the pool; later arrivals go to the next round.
    """

    def __init__(self, notify: Callable[[int], None] | None = None):
        self._active: dict[object, LocalWcEntry] = {}
        self._pending: dict[object, LocalWcEntry] = {}
        self._notify = notify or (lambda cid: None)
        self._lock = threading.Lock()

    def enter(self, ptr, value: bytes, cid: int) -> tuple[LocalWcStatus, LocalWcEntry]:
        with self._lock:
            cur = self._active.get(ptr)
            if cur is None:
                e = LocalWcEntry(ptr, cid, value, [cid], active=True)
                self._active[ptr] = e
                return LocalWcStatus.BECAME_COMBINER, e
            if not cur.sealed:
                cur.buffer = value
                cur.members.append(cid)
                return LocalWcStatus.COMBINED_LOCALLY, cur
            nxt = self._pending.get(ptr)
            if nxt is None:
                nxt = self._pending[ptr] = LocalWcEntry(ptr, cid, value, [cid])
                return LocalWcStatus.BECAME_COMBINER, nxt
            nxt.buffer = value
            nxt.members.append(cid)
            return LocalWcStatus.COMBINED_LOCALLY, nxt

    def seal(self, entry: LocalWcEntry) -> bytes:
        with self._lock:
            entry.sealed = True
            return entry.buffer

    def exit(self, entry: LocalWcEntry, result) -> None:
        """Publish the combiner's result and promote the pending round."""
        with self._lock:
            entry.result = result
            entry.done = True
            del self._active[entry.ptr]
            nxt = self._pending.pop(entry.ptr, None)
            if nxt is not None:
                nxt.active = True
                self._active[entry.ptr] = nxt
        for cid in entry.members:
            self._notify(cid)
        if nxt is not None:
            self._notify(nxt.combiner)
