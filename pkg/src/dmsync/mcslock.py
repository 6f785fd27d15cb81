"""Distributed MCS queue lock over the memory pool.

Each lock has a 16-byte entry in the pool: a word packing the queue tail
(bits 63..4) with a 4-bit version (bits 3..0), followed by a 64-bit epoch.
Waiters queue through their client-local lock nodes, so a waiting client
never polls the pool until its epoch window runs out.

The epoch counts releases in its low 32 bits and lock repairs in its high
32 bits; a waiter that sees the repair count move knows its queue is void.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

from .fabric import (LOCKED_COMBINED, LOCKED_OWNER, LOCKED_WAITING, ClientContext,
                     LockNode)
from .mempool import MASK64, Address, MemoryPool

VERSION_BITS = 4
VERSION_MASK = (1 << VERSION_BITS) - 1
TAIL_MASK = MASK64 & ~VERSION_MASK
ENTRY_BYTES = 16
REPAIR_STRIDE = 1 << 32


def pack_entry(tail: int, version: int) -> int:
    return (tail << VERSION_BITS) | (version & VERSION_MASK)


def unpack_entry(word: int) -> tuple[int, int]:
    return word >> VERSION_BITS, word & VERSION_MASK


def repair_generation(epoch: int) -> int:
    return epoch // REPAIR_STRIDE


@dataclass(frozen=True)
class LockEntry:
    tail: int
    version: int
    epoch: int


class Outcome(enum.Enum):
    OWNER = "owner"
    COMBINED = "combined"
    VERSION_MISMATCH = "version_mismatch"
    EXECUTOR = "executor"


@dataclass(frozen=True)
class AcquireOutcome:
    kind: Outcome
    waited: bool = False
    result: int = 0
    old_version: int = 0
    coordinator: int = 0
    batch: int = 0


class WatchStatus(enum.Enum):
    PROGRESS = "progress"
    STALLED = "stalled"


@dataclass
class LockConfig:
    """``max_duration`` is in driver units: scheduler steps or seconds."""

    max_duration: float | None = 1000
    # Mutation hook for the fencing suite: acquire_delete leaves the version alone.
    skip_delete_version_bump: bool = False


class LockTable:
    """Pool region holding one 16-byte lock entry per lock id."""

    def __init__(self, pool: MemoryPool, count: int):
        self.pool = pool
        self.count = count
        self.base = pool.alloc_region(count * ENTRY_BYTES)

    def entry_addr(self, lock: int) -> Address:
        if not 0 <= lock < self.count:
            raise IndexError(f"lock {lock} outside table of {self.count}")
        return self.base + lock * ENTRY_BYTES

    def epoch_addr(self, lock: int) -> Address:
        return self.entry_addr(lock) + 8

    def snapshot(self, lock: int) -> LockEntry:
        """Memory-node-local view, not a verb."""
        tail, version = unpack_entry(self.pool.local_word(self.entry_addr(lock)))
        return LockEntry(tail, version, self.pool.local_word(self.epoch_addr(lock)))


class MemoryNodeController:
    """Lock-repair handler running on the memory node's CPU.

    Clients reach it through a control channel, so a repair is not a
    one-sided verb.
    """

    def __init__(self, table: LockTable):
        self.table = table
        self.repairs = 0
        self.requests = 0
        self.on_repair: list = []

    def repair(self, lock: int, observed_epoch: int) -> bool:
        """Reset the lock if its epoch still equals what the reporter saw stall."""
        self.requests += 1
        pool = self.table.pool
        ea = self.table.epoch_addr(lock)
        if pool.local_word(ea) != observed_epoch:
            return False
        entry = self.table.entry_addr(lock)
        pool.local_set_word(entry, pool.local_word(entry) & VERSION_MASK)
        pool.local_set_word(ea, (observed_epoch // REPAIR_STRIDE + 1) * REPAIR_STRIDE)
        self.repairs += 1
        for fn in self.on_repair:
            fn(lock)
        return True


class EpochWatch:
    """Stall detector for one waiting episode.

    The first expired window only records a baseline, which keeps waiting
    verb-free in the common case. Each later window reports STALLED when the
    epoch did not move, or when a repair happened since the baseline.
    """

    def __init__(self) -> None:
        self.baseline: int | None = None

    def observe(self, epoch: int) -> WatchStatus:
        base = self.baseline
        self.baseline = epoch
        if base is None:
            return WatchStatus.PROGRESS
        if repair_generation(epoch) != repair_generation(base) or epoch == base:
            return WatchStatus.STALLED
        return WatchStatus.PROGRESS


class McsLock:
    def __init__(self, table: LockTable, config: LockConfig | None = None):
        self.table = table
        self.config = config or LockConfig()
        self.controller = MemoryNodeController(table)

    # -- enqueue / wait -------------------------------------------------------

    def _enqueue(self, ctx: ClientContext, lock: int, compare: int, compare_mask: int,
                 swap: int, swap_mask: int, tag: str):
        ctx.lock_node(lock).reset()
        prior = yield from ctx.masked_cas(self.table.entry_addr(lock), compare,
                                          compare_mask, swap, swap_mask, tag=tag)
        return prior

    def _wait_turn(self, ctx: ClientContext, lock: int, prev: int):
        """Link behind ``prev`` and wait for a handover. False means the queue was repaired."""
        node = ctx.lock_node(lock)
        yield from ctx.send(prev, lock, tag="link", next=ctx.cid)
        watch = EpochWatch()
        while True:
            ok = yield from ctx.wait(lambda: node.locked != LOCKED_WAITING,
                                     self.config.max_duration, label="handover")
            if ok:
                return True
            base = watch.baseline
            status = yield from self.watch_epoch(ctx, lock, watch)
            ctx.events.append(("epoch", lock, ctx.now(), status))
            if status is WatchStatus.STALLED:
                ctx.events.append(("stalled", lock, ctx.now()))
                if watch.baseline == base:
                    yield from self.report_stall(ctx, lock, base)
                node.reset()
                return False

    def report_stall(self, ctx: ClientContext, lock: int, observed_epoch: int):
        yield "repair"
        repaired = self.controller.repair(lock, observed_epoch)
        ctx.events.append(("repair", lock, ctx.now(), repaired))
        return repaired

    # -- public operations ----------------------------------------------------

    def acquire(self, ctx: ClientContext, lock: int, expected_version: int):
        """Plain MCS acquisition fenced by ``expected_version``.

        Returns OWNER, or VERSION_MISMATCH without enqueuing. If ownership
        arrives with a combining state (global write combining) the raw
        outcome is returned, see :func:`dmsync.gwc.classify`.
        """
        while True:
            prior = yield from self._enqueue(
                ctx, lock, expected_version, VERSION_MASK,
                pack_entry(ctx.cid, 0), TAIL_MASK, tag="lock_acquire")
            prev, version = unpack_entry(prior)
            if version != expected_version & VERSION_MASK:
                return AcquireOutcome(Outcome.VERSION_MISMATCH)
            if prev == 0:
                return AcquireOutcome(Outcome.OWNER)
            if (yield from self._wait_turn(ctx, lock, prev)):
                return classify(ctx.lock_node(lock))

    def acquire_delete(self, ctx: ClientContext, lock: int, expected_version: int | None = None):
        """Enqueue while bumping the entry version, fencing later UPDATE acquirers.

        With ``expected_version`` the caller is fenced exactly like
        :meth:`acquire`. Without it, the current version is read and the
        attempt repeats until the bump lands.
        """
        bumped_already = False
        while True:
            if expected_version is None:
                word = yield from ctx.read_word(self.table.entry_addr(lock), tag="entry_read")
                observed = word & VERSION_MASK
            else:
                observed = expected_version & VERSION_MASK
            if bumped_already or self.config.skip_delete_version_bump:
                compare, swap, swap_mask = observed, pack_entry(ctx.cid, 0), TAIL_MASK
            else:
                compare = observed
                swap, swap_mask = pack_entry(ctx.cid, observed + 1), MASK64
            prior = yield from self._enqueue(ctx, lock, compare, VERSION_MASK, swap,
                                             swap_mask, tag="lock_acquire_delete")
            prev, version = unpack_entry(prior)
            if version != observed:
                if expected_version is None:
                    continue
                return AcquireOutcome(Outcome.VERSION_MISMATCH)
            old_version = (observed - 1) & VERSION_MASK if bumped_already else observed
            if prev == 0:
                return AcquireOutcome(Outcome.OWNER, old_version=old_version)
            if (yield from self._wait_turn(ctx, lock, prev)):
                out = classify(ctx.lock_node(lock))
                return AcquireOutcome(out.kind, True, out.result, old_version,
                                      out.coordinator, out.batch)
            # The repaired queue kept our bump: rejoin against the bumped version.
            if not (bumped_already or self.config.skip_delete_version_bump):
                bumped_already = True
                if expected_version is not None:
                    expected_version = (observed + 1) & VERSION_MASK

    def release(self, ctx: ClientContext, lock: int, tag: str = "handover"):
        node = ctx.lock_node(lock)
        if node.next == 0:
            prior = yield from ctx.masked_cas(
                self.table.entry_addr(lock), pack_entry(ctx.cid, 0), TAIL_MASK,
                0, TAIL_MASK, tag="lock_release")
            if prior >> VERSION_BITS == ctx.cid:
                node.reset()
                return
            yield from ctx.wait(lambda: node.next != 0, label="await_successor")
        succ = node.next
        node.reset()
        yield from ctx.send(succ, lock, tag=tag, locked=LOCKED_OWNER, coordinator=0)

    def bump_epoch(self, ctx: ClientContext, lock: int):
        yield from ctx.faa(self.table.epoch_addr(lock), 1, tag="epoch_faa")

    def watch_epoch(self, ctx: ClientContext, lock: int, watch: EpochWatch):
        """Read the epoch once and feed it to ``watch``."""
        epoch = yield from ctx.read_word(self.table.epoch_addr(lock), tag="epoch_read")
        return watch.observe(epoch)

    def repair(self, lock: int, observed_epoch: int | None = None) -> bool:
        """Memory-node side reset; with no epoch given the reset is unconditional."""
        if observed_epoch is None:
            observed_epoch = self.table.pool.local_word(self.table.epoch_addr(lock))
        return self.controller.repair(lock, observed_epoch)


def classify(node: LockNode) -> AcquireOutcome:
    """Interpret a lock node after its wait for a handover ended."""
    if node.locked == LOCKED_COMBINED:
        return AcquireOutcome(Outcome.COMBINED, True, node.result, batch=node.batch)
    if node.locked == LOCKED_OWNER and node.coordinator:
        return AcquireOutcome(Outcome.EXECUTOR, True, coordinator=node.coordinator)
    return AcquireOutcome(Outcome.OWNER, True)
