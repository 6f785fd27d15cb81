"""Pointer-array KV store: SEARCH/INSERT/UPDATE/DELETE over the pool.

Key ``k`` owns data-pointer slot ``k`` and lock entry ``k``. A data pointer
packs a 60-bit block reference with a 4-bit version (low bits). Values are
never updated in place: writers put a fresh immutable block in their arena
and swing the pointer with CAS, whatever the synchronization mode.

The version advances only when a DELETE commits. A writer that sees the
version move since its pointer read therefore knows the key was absent at
some point during its operation, and may fail as Invalid.
"""

from __future__ import annotations

import enum
import random
from dataclasses import dataclass

import numpy as np

from .casync import CreditLedger, LocalWcStatus, LocalWcTable, SyncMode, SyncParams
from .fabric import ClientContext, Fabric
from .gwc import RESULT_FENCED, RESULT_INVALID, RESULT_OK, GlobalWc, WcKind, WcRole
from .mcslock import (MASK64, TAIL_MASK, VERSION_MASK, LockConfig, LockTable, McsLock,
                      Outcome, pack_entry, unpack_entry)
from .mempool import WORD, Address, KvBlock, MemoryPool, VerbCounters

REGION_SHIFT = 32
MODES = ("osync", "cas_backoff", "mcs", "cider")


def pack_pointer(block: Address | None, version: int) -> int:
    if block is None:
        return version & VERSION_MASK
    ref = (block.region << REGION_SHIFT) | (block.offset // WORD)
    return ((ref << 4) | (version & VERSION_MASK)) & MASK64


def unpack_pointer(word: int) -> tuple[Address | None, int]:
    ref = word >> 4
    if ref == 0:
        return None, word & VERSION_MASK
    offset = (ref & ((1 << REGION_SHIFT) - 1)) * WORD
    return Address(ref >> REGION_SHIFT, offset), word & VERSION_MASK


@dataclass(frozen=True)
class DataPointer:
    block: Address | None
    version: int

    @classmethod
    def from_word(cls, word: int) -> "DataPointer":
        return cls(*unpack_pointer(word))

    @property
    def word(self) -> int:
        return pack_pointer(self.block, self.version)


class ResultKind(enum.Enum):
    OK = "ok"
    INVALID = "invalid"


@dataclass(frozen=True)
class OpResult:
    """Callers only see Ok or Invalid; ``fenced`` records why an Invalid happened."""

    kind: ResultKind
    value: bytes | None = None
    fenced: bool = False

    @property
    def ok(self) -> bool:
        return self.kind is ResultKind.OK

    @property
    def code(self) -> int:
        if self.ok:
            return RESULT_OK
        return RESULT_FENCED if self.fenced else RESULT_INVALID

    @classmethod
    def from_code(cls, code: int) -> "OpResult":
        if code == RESULT_OK:
            return OK
        return FENCED if code == RESULT_FENCED else INVALID


OK = OpResult(ResultKind.OK)
INVALID = OpResult(ResultKind.INVALID)
FENCED = OpResult(ResultKind.INVALID, fenced=True)


@dataclass(frozen=True)
class Mode:
    name: str
    local_wc: bool = False

    def __post_init__(self):
        if self.name not in MODES:
            raise ValueError(f"unknown mode {self.name!r}; expected one of {MODES}")

    @classmethod
    def parse(cls, text: str) -> "Mode":
        """``cider``, ``mcs+lwc`` and the like."""
        name, plus, suffix = text.partition("+")
        if plus and suffix != "lwc":
            raise ValueError(f"unknown mode suffix {suffix!r}")
        return cls(name, bool(plus))

    def __str__(self) -> str:
        return self.name + ("+lwc" if self.local_wc else "")


ALL_MODES = tuple(Mode(n, lwc) for n in MODES for lwc in (False, True))


@dataclass
class Timing:
    """Delays in driver units: scheduler steps, or seconds when free-running."""

    max_duration: float = 1000
    backoff_base: float = 2
    backoff_cap: float = 64

    @classmethod
    def free_running(cls) -> "Timing":
        return cls(max_duration=0.05, backoff_base=2e-6, backoff_cap=1e-3)


@dataclass
class StoreOptions:
    value_size: int = 8
    # Re-write the KV block before every optimistic CAS retry.
    rewrite_on_retry: bool = False
    # Mutation hook for the fencing suite.
    skip_delete_version_bump: bool = False
    check_exclusion: bool = True


class MutualExclusionViolation(AssertionError):
    pass


class PointerArray:
    """``count`` data pointers plus their lock entries, both in the pool."""

    def __init__(self, pool: MemoryPool, count: int, value_size: int = 8):
        if count < 1:
            raise ValueError("pointer array needs at least one slot")
        self.pool = pool
        self.count = count
        self.value_size = value_size
        self.block_size = KvBlock.size_for(value_size)
        self.base = pool.alloc_region(count * WORD)
        self.locks = LockTable(pool, count)

    def slot(self, key: int) -> Address:
        if not 0 <= key < self.count:
            raise KeyError(key)
        return self.base + key * WORD

    def prefill(self, keys) -> None:
        """Insert ``keys`` with :func:`initial_value` directly on the memory node.

        A loader path: no verbs are counted.
        """
        keys = np.unique(np.asarray(list(keys), dtype=np.uint64))
        if len(keys) == 0:
            return
        if self.value_size < 8:
            raise ValueError("prefill needs value_size >= 8")
        bs = self.block_size
        wpb = bs // WORD
        region = self.pool.alloc_region(len(keys) * bs)
        blocks = np.zeros((len(keys), wpb), dtype=np.uint64)
        blocks[:, 0] = keys
        blocks[:, 1] = 8
        blocks[:, 2] = keys
        words = np.frombuffer(self.pool.local_read(self.base, self.count * WORD),
                              dtype=np.uint64).copy()
        refs = (np.uint64(region.region) << np.uint64(REGION_SHIFT)) \
            + np.arange(len(keys), dtype=np.uint64) * np.uint64(wpb)
        idx = keys.astype(np.int64)
        words[idx] = (refs << np.uint64(4)) | (words[idx] & np.uint64(VERSION_MASK))
        self.pool.local_bulk_write(region, blocks.astype("<u8").tobytes())
        self.pool.local_bulk_write(self.base, words.astype("<u8").tobytes())

    def peek(self, key: int) -> DataPointer:
        """Memory-node-local view of a pointer, not a verb."""
        return DataPointer.from_word(self.pool.local_word(self.slot(key)))

    def peek_value(self, key: int) -> bytes | None:
        ptr = self.peek(key)
        if ptr.block is None:
            return None
        return KvBlock.decode(self.pool.local_read(ptr.block, self.block_size)).value


def initial_value(key: int) -> bytes:
    return key.to_bytes(8, "little")


def build(count: int, prefill: float = 1.0, *, pool: MemoryPool | None = None,
          value_size: int = 8, seed: int = 0) -> PointerArray:
    """Allocate a pointer array and insert ``prefill`` of its keys.

    Which keys are present is a seeded choice; prefilled values are the key
    as 8 little-endian bytes.
    """
    if not 0.0 <= prefill <= 1.0:
        raise ValueError("prefill must lie in [0, 1]")
    pool = pool or MemoryPool()
    arr = PointerArray(pool, count, value_size)
    n = round(prefill * count)
    keys = range(count) if n == count else random.Random(seed).sample(range(count), n)
    arr.prefill(keys)
    pool.reset_stats()
    return arr


def verbs_per_committed_op(stats: VerbCounters, committed: int) -> float:
    if committed <= 0:
        raise ValueError("no committed operations")
    return stats.total / committed


@dataclass
class OpInfo:
    """Per-operation bookkeeping consumed by the metrics layer."""

    kind: str
    key: int
    path: str = "none"             # optimistic | pessimistic | lock | none
    retries: int = 0               # failed pointer CAS attempts
    role: str | None = None        # WcRole value, or "local"
    combined: bool = False
    batch_size: int = 0            # exact size, known to executors only
    fenced: bool = False
    decided: SyncMode | None = None


class KvStore:
    """Shared state of one deployment: pool, locks and per-node tables."""

    def __init__(self, array: PointerArray, fabric: Fabric, mode: Mode,
                 params: SyncParams | None = None, timing: Timing | None = None,
                 options: StoreOptions | None = None):
        self.array = array
        self.pool = array.pool
        self.fabric = fabric
        self.mode = mode
        self.params = params or SyncParams()
        self.timing = timing or Timing()
        self.options = options or StoreOptions()
        self.lock = McsLock(array.locks, LockConfig(
            max_duration=self.timing.max_duration,
            skip_delete_version_bump=self.options.skip_delete_version_bump))
        self.lock.controller.on_repair.append(self._revoke)
        self.gwc = GlobalWc(self.lock)
        self.ledgers: dict[int, CreditLedger] = {}
        self._local: dict[int, LocalWcTable] = {}
        self._owners: dict[int, int] = {}
        self._revoked: dict[int, int] = {}

    def ledger(self, node: int) -> CreditLedger:
        led = self.ledgers.get(node)
        if led is None:
            led = self.ledgers[node] = CreditLedger(self.params)
        return led

    def local_table(self, node: int) -> LocalWcTable:
        tbl = self._local.get(node)
        if tbl is None:
            tbl = self._local[node] = LocalWcTable(self.fabric.notify)
        return tbl

    def client(self, ctx: ClientContext, seed: int = 0) -> "KvClient":
        return KvClient(self, ctx, seed)

    # Shadow ownership: who is inside the critical section of each lock.

    def enter_cs(self, lock: int, cid: int) -> None:
        if not self.options.check_exclusion:
            return
        holder = self._owners.get(lock)
        if holder is not None:
            raise MutualExclusionViolation(f"client {cid} entered lock {lock} held by {holder}")
        self._owners[lock] = cid

    def exit_cs(self, lock: int, cid: int) -> None:
        if not self.options.check_exclusion:
            return
        if self._revoked.get(lock) == cid:
            # A repair evicted a holder that was alive after all.
            raise MutualExclusionViolation(f"lock {lock} repaired under live holder {cid}")
        if self._owners.get(lock) == cid:
            del self._owners[lock]

    def _revoke(self, lock: int) -> None:
        holder = self._owners.pop(lock, None)
        if holder is not None:
            self._revoked[lock] = holder


class _Restart(Exception):
    """Retry the operation from its pointer read."""


class KvClient:
    """Operation workflows for one logical client.

    Every operation is a generator returning an :class:`OpResult`; the
    matching :class:`OpInfo` is left in ``self.info``.
    """

    def __init__(self, store: KvStore, ctx: ClientContext, seed: int = 0):
        self.store = store
        self.ctx = ctx
        self.cid = ctx.cid
        self.array = store.array
        self.rng = random.Random(seed)
        self.info = OpInfo("none", -1)
        self._shared_round = False

    # -- helpers --------------------------------------------------------------

    def _read_ptr(self, key: int):
        word = yield from self.ctx.read_word(self.array.slot(key), tag="ptr_read")
        return word

    def _write_block(self, key: int, value: bytes):
        addr = self.store.pool.kv_alloc(self.cid, self.array.block_size)
        yield from self.ctx.write(addr, KvBlock(key, value).encode(self.array.value_size),
                                  tag="kv_write")
        return addr

    def _backoff(self, attempt: int):
        t = self.store.timing
        delay = min(t.backoff_cap, t.backoff_base * (1 << min(attempt, 30)))
        yield from self.ctx.wait(None, self.rng.uniform(delay / 2, delay), label="backoff")

    def _version_moved(self) -> OpResult:
        """The key was deleted after our pointer read. Never call with a lock held."""
        if self._shared_round:
            # Locally combined members may have arrived after the delete.
            raise _Restart
        self.info.fenced = True
        return FENCED

    def _confirm_fenced(self, key: int, version: int):
        """The lock fenced us: wait until the delete that raised the version commits."""
        attempt = 0
        while True:
            word = yield from self._read_ptr(key)
            block, ver = unpack_pointer(word)
            if block is None:
                self.info.fenced = True
                return FENCED
            if ver != version:
                return self._version_moved()
            yield from self._backoff(attempt)
            attempt += 1

    def _commit_under_lock(self, key: int, word: int, version: int, new_word: int):
        """Pointer CAS by a lock holder; optimistic writers may still race it."""
        while True:
            block, ver = unpack_pointer(word)
            if block is None:
                return INVALID
            if ver != version:
                self.info.fenced = True
                return FENCED
            prior = yield from self.ctx.cas(self.array.slot(key), word, new_word, tag="ptr_cas")
            if prior == word:
                return OK
            self.info.retries += 1
            word = prior

    # -- SEARCH ---------------------------------------------------------------

    def search(self, key: int):
        self.info = OpInfo("search", key)
        word = yield from self._read_ptr(key)
        block, _ = unpack_pointer(word)
        if block is None:
            return INVALID
        raw = yield from self.ctx.read(block, self.array.block_size, tag="kv_read")
        kv = KvBlock.decode(raw)
        if kv.key != key:
            raise AssertionError(f"slot {key} references a block of key {kv.key}")
        return OpResult(ResultKind.OK, kv.value)

    # -- INSERT ---------------------------------------------------------------

    def insert(self, key: int, value: bytes):
        word = yield from self._read_ptr(key)
        return (yield from self._insert_from(key, value, word))

    def _insert_from(self, key: int, value: bytes, word: int):
        self.info = OpInfo("insert", key, path="optimistic")
        if unpack_pointer(word)[0] is not None:
            return INVALID
        addr = yield from self._write_block(key, value)
        while True:
            _, version = unpack_pointer(word)
            prior = yield from self.ctx.cas(self.array.slot(key), word,
                                            pack_pointer(addr, version), tag="ptr_cas")
            if prior == word:
                return OK
            self.info.retries += 1
            if unpack_pointer(prior)[0] is not None:
                return INVALID
            word = prior

    # -- DELETE ---------------------------------------------------------------

    def delete(self, key: int):
        self.info = OpInfo("delete", key)
        self._shared_round = False
        mode = self.store.mode.name
        word = yield from self._read_ptr(key)
        block, version = unpack_pointer(word)
        if block is None:
            return INVALID
        if mode == "osync":
            return (yield from self._delete_optimistic(key, word, version))
        if mode == "cas_backoff":
            return (yield from self._delete_spin(key, word, version))
        return (yield from self._delete_mcs(key, word, version))

    def _delete_optimistic(self, key: int, word: int, version: int):
        self.info.path = "optimistic"
        tomb = pack_pointer(None, version + 1)
        while True:
            prior = yield from self.ctx.cas(self.array.slot(key), word, tomb, tag="ptr_cas")
            if prior == word:
                return OK
            self.info.retries += 1
            block, ver = unpack_pointer(prior)
            if block is None:
                return INVALID
            if ver != version:
                self.info.fenced = True
                return FENCED
            word = prior

    def _locked_delete(self, key: int, word: int, version: int, waited: bool):
        self.store.enter_cs(key, self.cid)
        if waited:
            word = yield from self._read_ptr(key)
        res = yield from self._commit_under_lock(key, word, version,
                                                 pack_pointer(None, version + 1))
        self.store.exit_cs(key, self.cid)
        return res

    def _delete_spin(self, key: int, word: int, version: int):
        self.info.path = "lock"
        waited = yield from self._spin_acquire(key, version, bump=True)
        if waited is None:
            return (yield from self._confirm_fenced(key, version))
        res = yield from self._locked_delete(key, word, version, waited)
        yield from self._spin_release(key)
        return res

    def _delete_mcs(self, key: int, word: int, version: int):
        self.info.path = "pessimistic"
        lock, gwc = self.store.lock, self.store.gwc
        out = yield from lock.acquire_delete(self.ctx, key, version)
        if out.kind is Outcome.VERSION_MISMATCH:
            return (yield from self._confirm_fenced(key, version))
        if out.kind is Outcome.COMBINED:
            # Reachable only with the version bump mutated away.
            yield from gwc.forward_wave(self.ctx, key)
            self.info.combined = True
            self.info.role = WcRole.PARTICIPANT.value
            return OpResult.from_code(out.result)
        res = yield from self._locked_delete(key, word, version, out.waited)
        if out.kind is Outcome.EXECUTOR:
            self.info.role = WcRole.EXECUTOR.value
            yield from gwc.executor_handback(self.ctx, key, out.coordinator, res.code)
            self.info.batch_size = yield from gwc.batch_final_release(
                self.ctx, key, res.code, out.coordinator)
        else:
            yield from lock.release(self.ctx, key)
            yield from lock.bump_epoch(self.ctx, key)
        return res

    # -- UPDATE ---------------------------------------------------------------

    def update(self, key: int, value: bytes):
        word = yield from self._read_ptr(key)
        return (yield from self._update_from(key, value, word))

    def upsert(self, key: int, value: bytes):
        """A workload write: UPDATE when the key exists, INSERT otherwise."""
        word = yield from self._read_ptr(key)
        if unpack_pointer(word)[0] is None:
            return (yield from self._insert_from(key, value, word))
        return (yield from self._update_from(key, value, word))

    def _update_from(self, key: int, value: bytes, word: int):
        self.info = OpInfo("update", key)
        self._shared_round = False
        if not self.store.mode.local_wc:
            return (yield from self._update_retrying(key, lambda: value, word))
        table = self.store.local_table(self.ctx.node)
        status, entry = table.enter(key, value, self.cid)
        if status is LocalWcStatus.COMBINED_LOCALLY:
            yield from self.ctx.wait(lambda: entry.done, label="local_wc")
            self.info.combined = True
            self.info.role = "local"
            return entry.result
        if not entry.active:
            yield from self.ctx.wait(lambda: entry.active, label="local_wc_turn")
            word = None

        def take_value() -> bytes:
            buf = table.seal(entry)
            self._shared_round = len(entry.members) > 1
            return buf

        res = INVALID
        try:
            res = yield from self._update_retrying(key, take_value, word)
        finally:
            table.exit(entry, res)
        return res

    def _update_retrying(self, key: int, take_value, word: int | None):
        while True:
            if word is None:
                word = yield from self._read_ptr(key)
            try:
                return (yield from self._update_once(key, take_value, word))
            except _Restart:
                word = None

    def _update_once(self, key: int, take_value, word: int):
        block, version = unpack_pointer(word)
        if block is None:
            return INVALID
        mode = self.store.mode.name
        if mode == "osync":
            return (yield from self._update_optimistic(key, word, take_value))
        if mode == "cas_backoff":
            return (yield from self._update_spin(key, word, take_value))
        if mode == "mcs":
            return (yield from self._update_mcs(key, word, take_value))
        ledger = self.store.ledger(self.ctx.node)
        decided = ledger.decide_mode(key)
        self.info.decided = decided
        if decided is SyncMode.OPTIMISTIC:
            res = yield from self._update_optimistic(key, word, take_value)
            ledger.after_optimistic(key, self.info.retries)
            return res
        return (yield from self._update_cider_pessimistic(key, word, take_value, ledger))

    def _update_optimistic(self, key: int, word: int, take_value):
        self.info.path = "optimistic"
        _, version = unpack_pointer(word)
        value = take_value()
        addr = yield from self._write_block(key, value)
        while True:
            prior = yield from self.ctx.cas(self.array.slot(key), word,
                                            pack_pointer(addr, version), tag="ptr_cas")
            if prior == word:
                return OK
            self.info.retries += 1
            word = yield from self._read_ptr(key)
            block, ver = unpack_pointer(word)
            if block is None:
                return INVALID
            if ver != version:
                return self._version_moved()
            if self.store.options.rewrite_on_retry:
                addr = yield from self._write_block(key, value)

    def _execute_locked(self, key: int, word: int, waited: bool, value: bytes):
        """Out-of-place write plus pointer CAS by the current lock holder."""
        _, version = unpack_pointer(word)
        self.store.enter_cs(key, self.cid)
        if waited:
            # Earlier holders swung the pointer while we queued.
            word = yield from self._read_ptr(key)
        addr = yield from self._write_block(key, value)
        res = yield from self._commit_under_lock(key, word, version,
                                                 pack_pointer(addr, version))
        self.store.exit_cs(key, self.cid)
        return res

    def _update_mcs(self, key: int, word: int, take_value):
        self.info.path = "pessimistic"
        _, version = unpack_pointer(word)
        value = take_value()
        lock = self.store.lock
        out = yield from lock.acquire(self.ctx, key, version)
        if out.kind is Outcome.VERSION_MISMATCH:
            return (yield from self._confirm_fenced(key, version))
        res = yield from self._execute_locked(key, word, out.waited, value)
        yield from lock.release(self.ctx, key)
        yield from lock.bump_epoch(self.ctx, key)
        return res

    def _update_cider_pessimistic(self, key: int, word: int, take_value,
                                  ledger: CreditLedger):
        self.info.path = "pessimistic"
        _, version = unpack_pointer(word)
        value = take_value()
        gwc = self.store.gwc
        out = yield from gwc.try_lock_and_wc(self.ctx, key, version)
        if out.kind is WcKind.VERSION_MISMATCH:
            ledger.after_pessimistic(key, 1)
            return (yield from self._confirm_fenced(key, version))
        self.info.role = out.role.value
        if out.kind is WcKind.COMBINED:
            self.info.combined = True
            ledger.after_pessimistic(key, max(2, out.position))
            return OpResult.from_code(out.result)
        res = yield from self._execute_locked(key, word, out.waited, value)
        if out.role is WcRole.EXECUTOR:
            yield from gwc.executor_handback(self.ctx, key, out.coordinator, res.code)
            size = yield from gwc.batch_final_release(self.ctx, key, res.code, out.coordinator)
        else:
            yield from self.store.lock.release(self.ctx, key)
            yield from self.store.lock.bump_epoch(self.ctx, key)
            size = 1
        self.info.batch_size = size
        ledger.after_pessimistic(key, size)
        return res

    # -- CAS spinlock baseline ------------------------------------------------

    def _spin_acquire(self, key: int, version: int, bump: bool = False):
        """Spin on the lock entry with truncated exponential backoff.

        Returns whether the caller had to wait, or None when fenced.
        """
        entry = self.array.locks.entry_addr(key)
        swap = pack_entry(self.cid, version + 1 if bump else version)
        attempt = 0
        while True:
            prior = yield from self.ctx.masked_cas(entry, pack_entry(0, version), MASK64,
                                                   swap, MASK64, tag="spin_acquire")
            tail, ver = unpack_entry(prior)
            if ver != version & VERSION_MASK:
                return None
            if tail == 0:
                return attempt > 0
            yield from self._backoff(attempt)
            attempt += 1

    def _spin_release(self, key: int):
        yield from self.ctx.masked_cas(self.array.locks.entry_addr(key), 0, 0, 0, TAIL_MASK,
                                       tag="spin_release")

    def _update_spin(self, key: int, word: int, take_value):
        self.info.path = "lock"
        _, version = unpack_pointer(word)
        value = take_value()
        waited = yield from self._spin_acquire(key, version)
        if waited is None:
            return (yield from self._confirm_fenced(key, version))
        res = yield from self._execute_locked(key, word, waited, value)
        yield from self._spin_release(key)
        return res
