from __future__ import annotations

from dataclasses import dataclass

import pytest
from hypothesis import HealthCheck, settings

from dmsync.fabric import ClientContext, Fabric, Scheduler
from dmsync.mempool import MemoryPool

settings.register_profile("dmsync", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("dmsync")


@dataclass
class Rig:
    pool: MemoryPool
    fabric: Fabric
    sched: Scheduler
    ctxs: list[ClientContext]


def make_rig(n: int, *, seed: int = 0, policy: str = "round_robin", nodes: int | None = None,
             script=(), pool: MemoryPool | None = None) -> Rig:
    """``n`` clients on ``nodes`` compute nodes (one per client by default)."""
    pool = pool or MemoryPool()
    fabric = Fabric()
    sched = Scheduler(seed, policy, script=script)
    sched.attach(fabric)
    nodes = nodes or n
    per = n // nodes
    ctxs = []
    for i in range(n):
        cid = fabric.register_client(i // per, i % per)
        ctxs.append(ClientContext(cid, pool, fabric, sched))
    return Rig(pool, fabric, sched, ctxs)


@pytest.fixture
def rig():
    return make_rig


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
