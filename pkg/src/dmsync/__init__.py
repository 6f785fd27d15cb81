"""Contention-aware synchronization for a simulated disaggregated-memory KV store."""

from .casync import CreditLedger, SyncMode, SyncParams
from .fabric import Fabric, FreeRunner, Scheduler
from .kvstore import KvStore, Mode, OpResult, build
from .mempool import MemoryPool

__all__ = ["CreditLedger", "SyncMode", "SyncParams", "Fabric", "FreeRunner", "Scheduler",
           "KvStore", "Mode", "OpResult", "build", "MemoryPool"]
