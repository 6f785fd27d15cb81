"""Simulated memory node exposing one-sided verbs.

Regions are zero-initialised byte arrays. Every 8-byte aligned word is an
atomic unit: READ/WRITE never tear a word, and CAS, masked CAS and FAA are
linearizable per word. Wider accesses are not snapshots.

All verbs are counted, both per verb class and per caller-supplied tag, so
protocol tests can assert exactly which remote accesses an operation made.
"""

from __future__ import annotations

import threading
import time
from collections import Counter
from dataclasses import dataclass, field

WORD = 8
MASK64 = (1 << 64) - 1


class PoolError(Exception):
    pass


class FaultError(PoolError):
    """Out-of-bounds, misaligned or write-once violating access."""


class AllocationError(PoolError):
    """Pool capacity or a client arena is exhausted."""


@dataclass(frozen=True, order=True)
class Address:
    region: int
    offset: int

    def __add__(self, delta: int) -> "Address":
        return Address(self.region, self.offset + delta)


@dataclass
class VerbCounters:
    reads: int = 0
    writes: int = 0
    cas: int = 0
    masked_cas: int = 0
    faa: int = 0
    bytes_read: int = 0
    bytes_written: int = 0
    by_tag: Counter = field(default_factory=Counter)

    @property
    def total(self) -> int:
        return self.reads + self.writes + self.cas + self.masked_cas + self.faa

    def copy(self) -> "VerbCounters":
        return VerbCounters(self.reads, self.writes, self.cas, self.masked_cas,
                            self.faa, self.bytes_read, self.bytes_written,
                            Counter(self.by_tag))

    def __sub__(self, other: "VerbCounters") -> "VerbCounters":
        tags = Counter(self.by_tag)
        tags.subtract(other.by_tag)
        return VerbCounters(
            self.reads - other.reads, self.writes - other.writes,
            self.cas - other.cas, self.masked_cas - other.masked_cas,
            self.faa - other.faa, self.bytes_read - other.bytes_read,
            self.bytes_written - other.bytes_written, +tags)


@dataclass(frozen=True)
class VerbLatency:
    """Nanoseconds slept per verb class; only meaningful in free-running mode."""

    read_ns: int = 0
    write_ns: int = 0
    atomic_ns: int = 0


@dataclass(frozen=True)
class KvBlock:
    key: int
    value: bytes

    @property
    def length(self) -> int:
        return len(self.value)

    @staticmethod
    def size_for(value_size: int) -> int:
        return 2 * WORD + _round_up(value_size)

    def encode(self, value_size: int) -> bytes:
        if len(self.value) > value_size:
            raise ValueError(f"value of {len(self.value)} bytes exceeds {value_size}")
        body = self.value.ljust(_round_up(value_size), b"\0")
        return (self.key.to_bytes(WORD, "little")
                + len(self.value).to_bytes(WORD, "little") + body)

    @classmethod
    def decode(cls, raw: bytes) -> "KvBlock":
        key = int.from_bytes(raw[:WORD], "little")
        length = int.from_bytes(raw[WORD:2 * WORD], "little")
        return cls(key, bytes(raw[2 * WORD:2 * WORD + length]))


def _round_up(n: int) -> int:
    return (n + WORD - 1) // WORD * WORD


class _Region:
    __slots__ = ("size", "buf", "words", "write_once", "written")

    def __init__(self, size: int, write_once: bool):
        self.size = size
        self.buf = bytearray(_round_up(size))
        self.words = memoryview(self.buf).cast("Q")
        self.write_once = write_once
        self.written: set[int] | None = set() if write_once else None


class Arena:
    """Per-client bump allocator for out-of-place KV blocks; never frees."""

    def __init__(self, pool: "MemoryPool", owner: int, capacity: int, chunk: int):
        self.pool = pool
        self.owner = owner
        self.capacity = capacity
        self.chunk = chunk
        self.used = 0
        self._region: int | None = None
        self._cursor = 0
        self._limit = 0

    def alloc(self, length: int) -> Address:
        if length <= 0:
            raise ValueError("allocation length must be positive")
        length = _round_up(length)
        if self.used + length > self.capacity:
            raise AllocationError(f"arena of client {self.owner} exhausted")
        if self._region is None or self._cursor + length > self._limit:
            size = max(self.chunk, length)
            self._region = self.pool._new_region(size, write_once=True).region
            self._cursor, self._limit = 0, size
        addr = Address(self._region, self._cursor)
        self._cursor += length
        self.used += length
        return addr


class MemoryPool:
    """A byte-addressable memory node.

    ``tag`` on every verb is free-form and only feeds ``VerbCounters.by_tag``.
    """

    def __init__(self, capacity: int = 1 << 34, latency: VerbLatency | None = None,
                 arena_capacity: int = 1 << 28, arena_chunk: int = 1 << 18):
        self.capacity = capacity
        self.latency = latency or VerbLatency()
        self.arena_capacity = arena_capacity
        self.arena_chunk = arena_chunk
        self._regions: dict[int, _Region] = {}
        self._next_region = 1
        self._allocated = 0
        self._arenas: dict[int, Arena] = {}
        self._counters = VerbCounters()
        self._lock = threading.RLock()

    # -- allocation ---------------------------------------------------------

    def alloc_region(self, size: int) -> Address:
        if size <= 0:
            raise AllocationError("region size must be positive")
        return self._new_region(size, write_once=False)

    def _new_region(self, size: int, write_once: bool) -> Address:
        with self._lock:
            if self._allocated + size > self.capacity:
                raise AllocationError(
                    f"pool capacity {self.capacity} exhausted ({self._allocated} in use)")
            rid = self._next_region
            self._next_region += 1
            self._regions[rid] = _Region(size, write_once)
            self._allocated += size
            return Address(rid, 0)

    def arena(self, owner: int) -> Arena:
        with self._lock:
            arena = self._arenas.get(owner)
            if arena is None:
                arena = self._arenas[owner] = Arena(
                    self, owner, self.arena_capacity, self.arena_chunk)
            return arena

    def kv_alloc(self, owner: int, length: int) -> Address:
        with self._lock:
            return self.arena(owner).alloc(length)

    # -- helpers ------------------------------------------------------------

    def _region(self, addr: Address, length: int) -> _Region:
        region = self._regions.get(addr.region)
        if region is None:
            raise FaultError(f"unknown region {addr.region}")
        if addr.offset < 0 or length < 0 or addr.offset + length > region.size:
            raise FaultError(f"access [{addr.offset}, +{length}) outside region "
                             f"{addr.region} of size {region.size}")
        return region

    def _word(self, addr: Address) -> tuple[_Region, int]:
        if addr.offset % WORD:
            raise FaultError(f"atomic verb on misaligned offset {addr.offset}")
        return self._region(addr, WORD), addr.offset // WORD

    def _sleep(self, ns: int) -> None:
        if ns:
            time.sleep(ns / 1e9)

    # -- verbs --------------------------------------------------------------

    def read(self, addr: Address, length: int, tag: str = "read") -> bytes:
        self._sleep(self.latency.read_ns)
        with self._lock:
            region = self._region(addr, length)
            c = self._counters
            c.reads += 1
            c.bytes_read += length
            c.by_tag[tag] += 1
            return bytes(region.buf[addr.offset:addr.offset + length])

    def read_word(self, addr: Address, tag: str = "read") -> int:
        """One READ verb of a single aligned word."""
        self._sleep(self.latency.read_ns)
        with self._lock:
            region, idx = self._word(addr)
            c = self._counters
            c.reads += 1
            c.bytes_read += WORD
            c.by_tag[tag] += 1
            return region.words[idx]

    def write(self, addr: Address, data: bytes, tag: str = "write") -> None:
        self._sleep(self.latency.write_ns)
        with self._lock:
            region = self._region(addr, len(data))
            if region.write_once:
                if addr.offset in region.written:
                    raise FaultError(f"KV block at {addr} written twice")
                region.written.add(addr.offset)
            region.buf[addr.offset:addr.offset + len(data)] = data
            c = self._counters
            c.writes += 1
            c.bytes_written += len(data)
            c.by_tag[tag] += 1

    def write_word(self, addr: Address, value: int, tag: str = "write") -> None:
        self.write(addr, (value & MASK64).to_bytes(WORD, "little"), tag)

    def cas(self, addr: Address, expect: int, swap: int, tag: str = "cas") -> int:
        self._sleep(self.latency.atomic_ns)
        with self._lock:
            region, idx = self._word(addr)
            prior = region.words[idx]
            if prior == expect & MASK64:
                region.words[idx] = swap & MASK64
            self._counters.cas += 1
            self._counters.by_tag[tag] += 1
            return prior

    def masked_cas(self, addr: Address, compare: int, compare_mask: int,
                   swap: int, swap_mask: int, tag: str = "masked_cas") -> int:
        self._sleep(self.latency.atomic_ns)
        with self._lock:
            region, idx = self._word(addr)
            prior = region.words[idx]
            if (prior & compare_mask) == (compare & compare_mask):
                region.words[idx] = ((prior & ~swap_mask) | (swap & swap_mask)) & MASK64
            self._counters.masked_cas += 1
            self._counters.by_tag[tag] += 1
            return prior

    def faa(self, addr: Address, delta: int, tag: str = "faa") -> int:
        self._sleep(self.latency.atomic_ns)
        with self._lock:
            region, idx = self._word(addr)
            prior = region.words[idx]
            region.words[idx] = (prior + delta) & MASK64
            self._counters.faa += 1
            self._counters.by_tag[tag] += 1
            return prior

    # -- memory-node local access (no verb accounting) -----------------------

    def local_word(self, addr: Address) -> int:
        with self._lock:
            region, idx = self._word(addr)
            return region.words[idx]

    def local_read(self, addr: Address, length: int) -> bytes:
        with self._lock:
            region = self._region(addr, length)
            return bytes(region.buf[addr.offset:addr.offset + length])

    def local_set_word(self, addr: Address, value: int) -> None:
        with self._lock:
            region, idx = self._word(addr)
            region.words[idx] = value & MASK64

    def local_bulk_write(self, addr: Address, data: bytes) -> None:
        """Loader path used when pre-populating; bypasses accounting."""
        with self._lock:
            region = self._region(addr, len(data))
            region.buf[addr.offset:addr.offset + len(data)] = data

    # -- accounting ---------------------------------------------------------

    def stats(self) -> VerbCounters:
        with self._lock:
            return self._counters.copy()

    def reset_stats(self) -> None:
        with self._lock:
            self._counters = VerbCounters()
