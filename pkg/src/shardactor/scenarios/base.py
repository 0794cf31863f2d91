"""Scenario configuration and the shared run loop."""

from __future__ import annotations

import asyncio
import random
from dataclasses import asdict, dataclass, field
from typing import Any, Callable, Mapping, Protocol, Sequence

from ..api import Application
from ..clock import Clock, new_loop
from ..harness.chaos import ChaosSchedule
from ..harness.client import Client, ClientRequest
from ..harness.cluster import Cluster
from ..harness.oracles import ScenarioOracle, run_oracles
from ..harness.report import LatencySample, RunReport
from ..kv import KVStore
from ..model import OUTBOX, OutboxRecord
from ..worker import EventLog, Worker, WorkerConfig

SCENARIOS = ("banking", "hotel")
ARRIVALS = ("burst", "uniform", "paced")


@dataclass(frozen=True)
class ScenarioSpec:
    """Everything that determines a run.

    Arrival patterns: ``burst`` injects every request at once, ``uniform``
    spreads them at random over ``requests / arrival_rate`` seconds, and
    ``paced`` sends one request every ``paced_gap`` polling intervals with the
    offsets inside the interval stratified, which keeps shards free of queueing.
    """

    name: str
    requests: int
    accounts: int = 300
    banks: int = 20
    users: int = 20
    hotels: int = 10
    shards_per_partition: int = 16
    workers: int = 2
    polling_interval: float = 0.5
    processing_time: float = 0.02
    chaos: ChaosSchedule = field(default_factory=ChaosSchedule)
    seed: int = 0
    fake_clock: bool = True
    arrival: str = "uniform"
    arrival_rate: float = 50.0
    paced_gap: int = 2
    timeout: float = 900.0
    fencing: bool = True
    worker_options: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.name not in SCENARIOS:
            raise ValueError(f"unknown scenario {self.name!r}; choose from {', '.join(SCENARIOS)}")
        if self.requests < 0:
            raise ValueError("requests must be >= 0")
        for attr in ("accounts", "banks", "users", "hotels", "shards_per_partition"):
            if getattr(self, attr) < 1:
                raise ValueError(f"{attr} must be >= 1")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")
        if self.polling_interval <= 0:
            raise ValueError("polling interval must be positive")
        if self.processing_time < 0:
            raise ValueError("processing_time must be >= 0")
        if self.arrival not in ARRIVALS:
            raise ValueError(f"unknown arrival pattern {self.arrival!r}")
        if self.arrival_rate <= 0 or self.paced_gap < 1:
            raise ValueError("arrival_rate must be positive and paced_gap >= 1")
        if self.name == "banking" and self.banks > self.accounts:
            raise ValueError("need at least one account per bank")
        self.worker_config("probe")  # surface invalid worker options early

    def worker_config(self, worker_id: str = "w") -> WorkerConfig:
        opts = {
            "polling_interval": self.polling_interval,
            "processing_time": self.processing_time,
            **self.worker_options,
        }
        return WorkerConfig(worker_id=worker_id, **opts)

    def to_dict(self) -> dict[str, Any]:
        out = asdict(self)
        out["chaos"] = self.chaos.to_dict()
        out["worker_options"] = dict(self.worker_options)
        return out


class Scenario(Protocol):
    app: Application

    def bootstrap(self, store: KVStore) -> None: ...

    def requests(self) -> list[ClientRequest]: ...

    def oracles(self, requests: Sequence[ClientRequest]) -> list[ScenarioOracle]: ...


def arrival_times(spec: ScenarioSpec, count: int, rng: random.Random) -> list[float]:
    if spec.arrival == "burst":
        return [0.0] * count
    if spec.arrival == "uniform":
        span = count / spec.arrival_rate
        return sorted(rng.uniform(0, span) for _ in range(count))
    p = spec.polling_interval
    phases = [(k + 0.5) / count * p for k in range(count)] if count else []
    rng.shuffle(phases)
    return [i * spec.paced_gap * p + phases[i] for i in range(count)]


def build_scenario(spec: ScenarioSpec) -> Scenario:
    if spec.name == "banking":
        from .banking import BankingScenario

        return BankingScenario(spec)
    from .hotel import HotelScenario

    return HotelScenario(spec)


@dataclass
class RunArtifacts:
    """Raw material behind a report, kept for tests that dig deeper."""

    store: KVStore
    events: EventLog
    cluster: Cluster
    client: Client
    quiescent: bool


def run_scenario(
    spec: ScenarioSpec,
    *,
    configure: Callable[[Worker], None] | None = None,
    keep: list[RunArtifacts] | None = None,
    scenario: Scenario | None = None,
) -> RunReport:
    """Run ``spec`` on a fresh loop and store; return the report.

    ``scenario`` overrides the workload built from ``spec.name``.
    """
    loop = new_loop(spec.fake_clock)
    try:
        asyncio.set_event_loop(loop)
        return loop.run_until_complete(_run(spec, Clock(loop), configure, keep, scenario))
    finally:
        pending = [t for t in asyncio.all_tasks(loop) if not t.done()]
        for task in pending:
            task.cancel()
        if pending:
            loop.run_until_complete(asyncio.gather(*pending, return_exceptions=True))
        asyncio.set_event_loop(None)
        loop.close()


async def _run(
    spec: ScenarioSpec,
    clock: Clock,
    configure: Callable[[Worker], None] | None,
    keep: list[RunArtifacts] | None,
    scenario: Scenario | None,
) -> RunReport:
    if scenario is None:
        scenario = build_scenario(spec)
    store = KVStore(spec.chaos.fault_plan, record_history=True, sleep=None)
    scenario.app.install(store)
    scenario.bootstrap(store)
    requests = scenario.requests()

    def setup(worker: Worker) -> None:
        worker.fencing = spec.fencing
        if configure is not None:
            configure(worker)

    events = EventLog()
    cluster = Cluster(
        scenario.app,
        store,
        clock,
        spec.worker_config(),
        workers=spec.workers,
        chaos=spec.chaos,
        seed=spec.seed,
        events=events,
        configure=setup,
    )
    client = Client(scenario.app, store, clock, seed=spec.seed)
    rng = random.Random(f"arrivals:{spec.seed}")
    times = arrival_times(spec, len(requests), rng)

    cluster.start()
    origin = clock.monotonic()

    async def send(at: float, req: ClientRequest) -> None:
        delay = origin + at - clock.monotonic()
        if delay > 0:
            await asyncio.sleep(delay)
        await client.inject_request(req)

    await asyncio.gather(*(send(at, req) for at, req in zip(times, requests)))
    quiescent = await cluster.wait_quiescent(spec.timeout)
    snapshot = store.snapshot()
    cluster.shutdown()
    history = list(store.history)

    cids = [r.correlation_id for r in requests]
    verdicts = run_oracles(
        snapshot,
        history,
        correlation_ids=cids,
        scenario_oracles=scenario.oracles(requests),
    )
    report = RunReport(spec.name, spec.seed, config=spec.to_dict(), verdicts=verdicts, requests=len(requests))
    report.samples, report.timeouts = _samples(client, snapshot, events, clock)
    if report.samples:
        report.makespan_s = (
            max(s.response_ms for s in report.samples) - min(s.inject_ms for s in report.samples)
        ) / 1000
    report.fault_log = cluster.fault_log + cluster.injected_failures()
    report.extra["quiescent"] = quiescent
    report.extra["events"] = len(events)
    if keep is not None:
        keep.append(RunArtifacts(store, events, cluster, client, quiescent))
    return report


def _samples(client: Client, snapshot, events: EventLog, clock: Clock) -> tuple[list[LatencySample], list[str]]:
    outbox = {i.key.partition_key: OutboxRecord.from_item(i) for i in snapshot.get(OUTBOX, ())}
    by_envelope = {inj.envelope.unique_id: cid for cid, inj in client.injections.items()}
    started: dict[str, float] = {}
    for ev in events.of_kind("processing_started"):
        cid = by_envelope.get(ev.fields.get("envelope"))
        if cid is not None and cid not in started:
            started[cid] = (clock.epoch + ev.time) * 1000
    samples, missing = [], []
    for cid, inj in client.injections.items():
        rec = outbox.get(cid)
        if rec is None:
            missing.append(cid)
            continue
        samples.append(LatencySample(cid, inj.inject_ms, rec.timestamp, started.get(cid)))
    return samples, missing
