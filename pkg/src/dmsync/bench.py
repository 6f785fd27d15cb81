"""Workloads, the deployment harness, metrics, history checking and CSV export."""

from __future__ import annotations

import csv
import io
import json
import math
import os
from collections import Counter
from dataclasses import asdict, dataclass, field, fields
from typing import Iterable, Sequence

import numpy as np

from .casync import SyncMode, SyncParams
from .fabric import ClientContext, Fabric, FreeRunner, Scheduler
from .kvstore import (KvClient, KvStore, Mode, OpResult, StoreOptions, Timing, build,
                      initial_value, verbs_per_committed_op)
from .mempool import MemoryPool, VerbCounters

MIXES = {"write_intensive": 0.5, "read_intensive": 0.05, "write_only": 1.0}
CLIENTS_PER_NODE = 4


# -- workload ----------------------------------------------------------------


@dataclass(frozen=True)
class WorkloadSpec:
    mix: str = "write_intensive"
    theta: float = 0.99
    key_count: int = 1_000_000
    ops_per_client: int = 1000
    seed: int = 0
    prefill: float = 1.0

    def __post_init__(self):
        if self.mix not in MIXES:
            raise ValueError(f"unknown mix {self.mix!r}; expected one of {sorted(MIXES)}")
        if not 0.0 <= self.theta < 1.0:
            raise ValueError("theta must lie in [0, 1)")
        if self.key_count < 1 or self.ops_per_client < 0:
            raise ValueError("key_count must be positive and ops_per_client non-negative")

    @property
    def write_ratio(self) -> float:
        return MIXES[self.mix]


def zipf_probabilities(n: int, theta: float) -> np.ndarray:
    """P(rank r) = r^-theta / sum_i i^-theta for r = 1..n."""
    w = np.arange(1, n + 1, dtype=np.float64) ** -theta
    return w / w.sum()


class ZipfianGenerator:
    """Exact inverse-CDF Zipfian sampler; rank r maps to key r - 1."""

    def __init__(self, n: int, theta: float, seed: int | Sequence[int] = 0):
        if n < 1:
            raise ValueError("n must be positive")
        if not 0.0 <= theta < 1.0:
            raise ValueError("theta must lie in [0, 1)")
        self.n = n
        self.theta = theta
        self.rng = np.random.Generator(np.random.PCG64(seed))
        cdf = np.cumsum(zipf_probabilities(n, theta))
        cdf[-1] = 1.0
        self._cdf = cdf

    def sample(self, size: int) -> np.ndarray:
        u = self.rng.random(size)
        return np.searchsorted(self._cdf, u, side="right").astype(np.int64)

    def next(self) -> int:
        return int(self.sample(1)[0])


# -- deployment harness -----------------------------------------------------


class Deployment:
    """Pool, fabric, driver and store plus one :class:`KvClient` per logical client.

    Clients are split evenly over ``nodes`` compute nodes, in id order.
    """

    def __init__(self, mode: Mode | str, clients: int, *, nodes: int | None = None,
                 keys: int = 1, prefill: float = 1.0, seed: int = 0,
                 deterministic: bool = True, policy: str = "random",
                 params: SyncParams | None = None, timing: Timing | None = None,
                 options: StoreOptions | None = None, script: Iterable[int] = (),
                 pool: MemoryPool | None = None, max_steps: int | None = None):
        if clients < 1:
            raise ValueError("need at least one client")
        nodes = nodes or max(1, math.ceil(clients / CLIENTS_PER_NODE))
        if nodes < 1 or clients % nodes:
            raise ValueError(f"{clients} clients do not divide into {nodes} nodes")
        self.mode = Mode.parse(mode) if isinstance(mode, str) else mode
        self.deterministic = deterministic
        if timing is None:
            timing = Timing(max_duration=default_max_duration(clients)) if deterministic \
                else Timing.free_running()
        self.array = build(keys, prefill, pool=pool, seed=seed)
        self.pool = self.array.pool
        self.fabric = Fabric()
        self.driver = (Scheduler(seed, policy, script=script, max_steps=max_steps)
                       if deterministic else FreeRunner())
        self.driver.attach(self.fabric)
        self.store = KvStore(self.array, self.fabric, self.mode, params, timing, options)
        per_node = clients // nodes
        self.clients: list[KvClient] = []
        for i in range(clients):
            cid = self.fabric.register_client(i // per_node, i % per_node)
            ctx = ClientContext(cid, self.pool, self.fabric, self.driver)
            self.clients.append(self.store.client(ctx, seed=seed * 1_000_003 + cid))

    def spawn(self, client: KvClient, gen) -> None:
        self.driver.spawn(client.cid, gen)

    def run(self) -> None:
        self.driver.run()

    @property
    def finished(self) -> bool:
        """False if the step budget ran out with clients still live."""
        return not self.deterministic or not self.driver.live

    def grant(self, key: int, credit: int) -> None:
        """Warm every node's credit ledger for ``key``."""
        for c in self.clients:
            self.store.ledger(c.ctx.node).grant(key, credit)


def default_max_duration(clients: int) -> int:
    # Long combining waves starve the epoch, so the window grows with clients.
    return max(1000, 200 * clients)


# -- history ------------------------------------------------------------------


@dataclass
class OpRecord:
    client: int
    op: str
    key: int
    value: bytes | None
    t_inv: int
    t_res: int
    result: str
    result_value: bytes | None = None

    def to_json(self) -> dict:
        d = asdict(self)
        d["value"] = None if self.value is None else self.value.hex()
        d["result_value"] = None if self.result_value is None else self.result_value.hex()
        return d

    @classmethod
    def from_json(cls, d: dict) -> "OpRecord":
        d = dict(d)
        for k in ("value", "result_value"):
            if d.get(k) is not None:
                d[k] = bytes.fromhex(d[k])
        return cls(**d)


def dump_history(history: Iterable[OpRecord], path: str) -> None:
    with open(path, "w") as f:
        for rec in history:
            f.write(json.dumps(rec.to_json(), sort_keys=True) + "\n")


def load_history(path: str) -> list[OpRecord]:
    with open(path) as f:
        return [OpRecord.from_json(json.loads(line)) for line in f if line.strip()]


class Sequencer:
    """Global invoke/response counter; single-threaded in deterministic mode."""

    def __init__(self) -> None:
        self.n = 0

    def __call__(self) -> int:
        self.n += 1
        return self.n


# -- linearizability ---------------------------------------------------------


class HistoryTooLarge(ValueError):
    pass


@dataclass
class LinearizabilityResult:
    ok: bool
    order: list[OpRecord] = field(default_factory=list)
    witness: list[OpRecord] = field(default_factory=list)

    def __bool__(self) -> bool:
        return self.ok


def _apply(state: dict, rec: OpRecord):
    """Sequential KV semantics; returns the new state, or None if ``rec`` disagrees."""
    present = rec.key in state
    ok = rec.result == "ok"
    if rec.op == "search":
        if not present:
            return None if ok else state
        return state if ok and rec.result_value == state[rec.key] else None
    if rec.op == "insert":
        if present == ok:
            return None
        return {**state, rec.key: rec.value} if ok else state
    if rec.op == "update":
        if present != ok:
            return None
        return {**state, rec.key: rec.value} if ok else state
    if rec.op == "delete":
        if present != ok:
            return None
        if not ok:
            return state
        return {k: v for k, v in state.items() if k != rec.key}
    raise ValueError(f"unknown op {rec.op!r}")


def check_linearizable(history: Sequence[OpRecord], initial: dict[int, bytes] | None = None,
                       max_ops: int = 16) -> LinearizabilityResult:
    """Search for a sequential order that respects real time and every response.

    Exponential in the worst case, hence the size limit.
    """
    if len(history) > max_ops:
        raise HistoryTooLarge(f"{len(history)} ops exceed the oracle limit of {max_ops}")
    ops = list(history)
    n = len(ops)
    # before[j]: ops that must precede j (they responded before j was invoked).
    before = [0] * n
    for j, b in enumerate(ops):
        for i, a in enumerate(ops):
            if a.t_res < b.t_inv:
                before[j] |= 1 << i
    full = (1 << n) - 1
    dead: set = set()
    best: list[int] = []

    def search(done: int, state: dict, path: list[int]) -> list[int] | None:
        if done == full:
            return path
        memo = (done, tuple(sorted(state.items())))
        if memo in dead:
            return None
        for j in range(n):
            if done >> j & 1 or before[j] & ~done:
                continue
            nxt = _apply(state, ops[j])
            if nxt is None:
                continue
            path.append(j)
            if len(path) > len(best):
                best[:] = path
            found = search(done | 1 << j, nxt, path)
            if found is not None:
                return found
            path.pop()
        dead.add(memo)
        return None

    order = search(0, dict(initial or {}), [])
    if order is not None:
        return LinearizabilityResult(True, [ops[j] for j in order])
    placed = set(best)
    return LinearizabilityResult(False, [ops[j] for j in best],
                                 [ops[j] for j in range(n) if j not in placed])


# -- metrics --------------------------------------------------------------------


@dataclass
class MetricsReport:
    mode: str
    mix: str
    theta: float
    clients: int
    nodes: int
    keys: int
    ops_per_client: int
    seed: int
    schedule: str
    issued: int = 0
    committed: int = 0
    invalid: int = 0
    fenced: int = 0
    updates: int = 0
    committed_updates: int = 0
    verbs: VerbCounters = field(default_factory=VerbCounters)
    messages: int = 0
    retry_histogram: dict[int, int] = field(default_factory=dict)
    ptr_cas_failures: int = 0
    combined: int = 0
    locally_combined: int = 0
    executed_solo: int = 0
    executed_as_executor: int = 0
    wc_rate: float = 0.0
    pessimistic: int = 0
    pessimistic_combined: int = 0
    pessimistic_ratio: float = 0.0
    ideal_pessimistic_ratio: float = 0.0
    wc_batch_avg: float = 1.0
    wc_batch_max: int = 1
    hot_share_traffic: float = 0.0
    hot_share_pessimistic: float = 0.0
    latency_p50: float = 0.0
    latency_p99: float = 0.0
    repairs: int = 0
    steps: int = 0

    @property
    def verbs_per_op(self) -> float:
        return verbs_per_committed_op(self.verbs, self.committed) if self.committed else math.inf

    @property
    def pessimistic_wc_rate(self) -> float:
        return self.pessimistic_combined / self.pessimistic if self.pessimistic else 0.0

    def row(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)
             if f.name not in ("verbs", "retry_histogram")}
        v = self.verbs
        d.update(reads=v.reads, writes=v.writes, cas=v.cas, masked_cas=v.masked_cas,
                 faa=v.faa, verbs_total=v.total, verbs_per_op=self.verbs_per_op,
                 pessimistic_wc_rate=self.pessimistic_wc_rate,
                 retry_histogram=";".join(f"{k}:{n}" for k, n in sorted(self.retry_histogram.items())))
        return {c: d[c] for c in CSV_COLUMNS}

    def summary(self) -> str:
        return (f"{self.mode:<16} committed={self.committed} invalid={self.invalid} "
                f"fenced={self.fenced} verbs/op={self.verbs_per_op:.3f} "
                f"msgs={self.messages} ptr_cas_fail={self.ptr_cas_failures} "
                f"wc_rate={self.wc_rate:.3f} pess_ratio={self.pessimistic_ratio:.3f} "
                f"batch_avg={self.wc_batch_avg:.2f} p50={self.latency_p50:g} "
                f"p99={self.latency_p99:g}")


CSV_COLUMNS = (
    "mode", "mix", "theta", "clients", "nodes", "keys", "ops_per_client", "seed", "schedule",
    "issued", "committed", "invalid", "fenced", "updates", "committed_updates",
    "reads", "writes", "cas", "masked_cas", "faa", "verbs_total", "verbs_per_op", "messages",
    "ptr_cas_failures", "retry_histogram", "combined", "locally_combined", "executed_solo",
    "executed_as_executor", "wc_rate", "pessimistic", "pessimistic_combined",
    "pessimistic_ratio", "pessimistic_wc_rate", "ideal_pessimistic_ratio", "wc_batch_avg",
    "wc_batch_max", "hot_share_traffic", "hot_share_pessimistic", "latency_p50",
    "latency_p99", "repairs", "steps",
)


def _fmt(v) -> str:
    if isinstance(v, float):
        return "inf" if math.isinf(v) else f"{v:.6f}"
    return str(v)


def format_csv(reports: Iterable[MetricsReport], header: bool = True) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    if header:
        w.writerow(CSV_COLUMNS)
    for report in reports:
        row = report.row()
        w.writerow([_fmt(row[c]) for c in CSV_COLUMNS])
    return buf.getvalue()


def export_csv(report: MetricsReport, path: str, append: bool = True) -> None:
    """Write a header (for a new or empty file) and one data row."""
    new = not append or not os.path.exists(path) or os.path.getsize(path) == 0
    with open(path, "w" if new else "a", newline="") as f:
        f.write(format_csv([report], header=new))


# -- the run loop -----------------------------------------------------------------


@dataclass
class RunConfig:
    mode: str = "cider"
    clients: int = 64
    nodes: int | None = None
    workload: WorkloadSpec = field(default_factory=WorkloadSpec)
    params: SyncParams = field(default_factory=SyncParams)
    deterministic: bool = True
    policy: str = "random"
    record_history: bool = False
    options: StoreOptions = field(default_factory=StoreOptions)

    @property
    def resolved_nodes(self) -> int:
        return self.nodes or max(1, math.ceil(self.clients / CLIENTS_PER_NODE))


def _value(cid: int, i: int) -> bytes:
    return ((cid << 32) | (i & 0xFFFFFFFF)).to_bytes(8, "little")


def run(cfg: RunConfig) -> tuple[MetricsReport, list[OpRecord]]:
    wl = cfg.workload
    dep = Deployment(cfg.mode, cfg.clients, nodes=cfg.resolved_nodes, keys=wl.key_count,
                     prefill=wl.prefill, seed=wl.seed, deterministic=cfg.deterministic,
                     policy=cfg.policy, params=cfg.params, options=cfg.options)
    per_op: list[tuple] = []
    history: list[OpRecord] = []
    seq = Sequencer()
    now = dep.driver.now

    def program(client: KvClient, keys: np.ndarray, writes: np.ndarray):
        cid = client.cid
        for i in range(len(keys)):
            key = int(keys[i])
            t0, inv = now(), seq()
            if writes[i]:
                value = _value(cid, i)
                res: OpResult = yield from client.upsert(key, value)
            else:
                value = None
                res = yield from client.search(key)
            lat, done = now() - t0, seq()
            info = client.info
            per_op.append((info.kind, key, res.ok, info.fenced, info.retries, info.role,
                           info.combined, info.batch_size, info.path, lat))
            if cfg.record_history:
                history.append(OpRecord(cid, info.kind, key, value, inv, done,
                                        "ok" if res.ok else "invalid",
                                        res.value if info.kind == "search" else None))

    for c in dep.clients:
        rng = np.random.default_rng([wl.seed, c.cid])
        zipf = ZipfianGenerator(wl.key_count, wl.theta, [wl.seed, c.cid, 1])
        keys = zipf.sample(wl.ops_per_client)
        writes = rng.random(wl.ops_per_client) < wl.write_ratio
        dep.spawn(c, program(c, keys, writes))
    dep.run()
    report = collect(dep, cfg, per_op)
    return report, history


def collect(dep: Deployment, cfg: RunConfig, per_op: list[tuple]) -> MetricsReport:
    wl = cfg.workload
    r = MetricsReport(str(dep.mode), wl.mix, wl.theta, cfg.clients, cfg.resolved_nodes,
                      wl.key_count, wl.ops_per_client, wl.seed,
                      "deterministic" if cfg.deterministic else "free")
    thr = cfg.params.hotness_threshold
    hot = max(1, wl.key_count // 10)
    retries: Counter = Counter()
    lat = []
    sizes = []
    ideal = hot_updates = hot_pess = 0
    for kind, key, ok, fenced, n_retry, role, combined, batch, path, latency in per_op:
        r.issued += 1
        lat.append(latency)
        r.ptr_cas_failures += n_retry
        if ok:
            r.committed += 1
        elif fenced:
            r.fenced += 1
        else:
            r.invalid += 1
        if kind != "update":
            continue
        r.updates += 1
        retries[n_retry] += 1
        ideal += n_retry >= thr
        hot_updates += key < hot
        if ok:
            r.committed_updates += 1
            if combined:
                r.combined += 1
                r.locally_combined += role == "local"
            elif role == "executor":
                r.executed_as_executor += 1
            else:
                r.executed_solo += 1
        if path == "pessimistic" or path == "lock":
            r.pessimistic += 1
            r.pessimistic_combined += combined and role != "local"
            hot_pess += key < hot
            if role == "executor":
                sizes.append(batch)
            elif role in (None, "solo"):
                sizes.append(1)
    r.verbs = dep.pool.stats()
    r.messages = dep.fabric.total_messages
    r.retry_histogram = dict(sorted(retries.items()))
    if r.updates:
        r.wc_rate = r.combined / r.updates
        r.pessimistic_ratio = r.pessimistic / r.updates
        r.ideal_pessimistic_ratio = ideal / r.updates
        r.hot_share_traffic = hot_updates / r.updates
    if r.pessimistic:
        r.hot_share_pessimistic = hot_pess / r.pessimistic
    if sizes:
        r.wc_batch_avg = float(np.mean(sizes))
        r.wc_batch_max = int(max(sizes))
    if lat:
        r.latency_p50, r.latency_p99 = (float(x) for x in np.percentile(lat, [50, 99]))
    r.repairs = dep.store.lock.controller.repairs
    r.steps = getattr(dep.driver, "steps", 0)
    return r
