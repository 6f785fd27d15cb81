"""Global write combining on top of the MCS wait queue.

The first lock holder that finds a successor becomes the coordinator. It
reads the lock entry to find the queue tail, hands the lock to that tail
(the executor) together with its own id, waits for the executor's result,
then pushes a ``0x3`` wave carrying the result down its own chain. Members
between coordinator and executor never touch the pool. When the wave
reaches the executor it releases the lock normally, so clients that queued
behind it form the next batch.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

from .fabric import LOCKED_COMBINED, LOCKED_OWNER, LOCKED_WAITING, ClientContext
from .mcslock import McsLock, Outcome, VERSION_BITS

RESULT_OK = 0
RESULT_INVALID = 1
RESULT_FENCED = 2


class WcRole(enum.Enum):
    SOLO = "solo"
    COORDINATOR = "coordinator"
    PARTICIPANT = "participant"
    EXECUTOR = "executor"


class WcKind(enum.Enum):
    EXECUTOR_GO = "executor_go"
    COMBINED = "combined"
    VERSION_MISMATCH = "version_mismatch"


@dataclass(frozen=True)
class WcOutcome:
    kind: WcKind
    role: WcRole | None = None
    result: int = 0
    coordinator: int = 0
    waited: bool = False
    # 1-based place in the batch; 0 when unknown (coordinator, solo).
    position: int = 0


@dataclass(frozen=True)
class WcBatch:
    lock: int
    executor: int
    size: int
    result: int
    coordinator: int = 0


class GlobalWc:
    def __init__(self, lock: McsLock):
        self.mcs = lock
        self.batches: list[WcBatch] = []

    def try_lock_and_wc(self, ctx: ClientContext, lock: int, expected_version: int):
        out = yield from self.mcs.acquire(ctx, lock, expected_version)
        if out.kind is Outcome.VERSION_MISMATCH:
            return WcOutcome(WcKind.VERSION_MISMATCH)
        if out.kind is Outcome.COMBINED:
            yield from self.forward_wave(ctx, lock)
            ctx.events.append(("wc", lock, WcRole.PARTICIPANT, out.batch, out.result))
            return WcOutcome(WcKind.COMBINED, WcRole.PARTICIPANT, out.result,
                             waited=True, position=out.batch)
        if out.kind is Outcome.EXECUTOR:
            return WcOutcome(WcKind.EXECUTOR_GO, WcRole.EXECUTOR,
                             coordinator=out.coordinator, waited=True)
        node = ctx.lock_node(lock)
        if node.next == 0:
            return WcOutcome(WcKind.EXECUTOR_GO, WcRole.SOLO, waited=out.waited)
        result = yield from self.coordinate(ctx, lock)
        return WcOutcome(WcKind.COMBINED, WcRole.COORDINATOR, result,
                         waited=out.waited, position=1)

    def coordinate(self, ctx: ClientContext, lock: int):
        node = ctx.lock_node(lock)
        word = yield from ctx.read_word(self.mcs.table.entry_addr(lock), tag="wc_entry_read")
        executor = word >> VERSION_BITS
        node.locked = LOCKED_WAITING
        yield from ctx.send(executor, lock, tag="wc_notify",
                            coordinator=ctx.cid, locked=LOCKED_OWNER)
        yield from ctx.wait(lambda: node.locked == LOCKED_OWNER, label="handback")
        result = node.result
        succ = node.next
        node.reset()
        yield from ctx.send(succ, lock, tag="wc_wave", locked=LOCKED_COMBINED,
                            result=result, batch=2)
        ctx.events.append(("wc", lock, WcRole.COORDINATOR, 1, result))
        return result

    def forward_wave(self, ctx: ClientContext, lock: int):
        node = ctx.lock_node(lock)
        yield from ctx.wait(lambda: node.next != 0, label="await_successor")
        succ, result, pos = node.next, node.result, node.batch
        node.reset()
        yield from ctx.send(succ, lock, tag="wc_wave", locked=LOCKED_COMBINED,
                            result=result, batch=pos + 1)

    def executor_handback(self, ctx: ClientContext, lock: int, coordinator: int, result: int):
        node = ctx.lock_node(lock)
        node.locked = LOCKED_WAITING
        yield from ctx.send(coordinator, lock, tag="wc_handback",
                            result=result, locked=LOCKED_OWNER)

    def batch_final_release(self, ctx: ClientContext, lock: int, result: int = 0,
                            coordinator: int = 0):
        """Wait for the wave, release the lock once for the batch; returns the batch size."""
        node = ctx.lock_node(lock)
        yield from ctx.wait(lambda: node.locked == LOCKED_COMBINED, label="await_wave")
        size = node.batch
        node.locked = LOCKED_WAITING
        node.coordinator = 0
        yield from self.mcs.release(ctx, lock)
        yield from self.mcs.bump_epoch(ctx, lock)
        self.batches.append(WcBatch(lock, ctx.cid, size, result, coordinator))
        ctx.events.append(("wc", lock, WcRole.EXECUTOR, size, result))
        return size
