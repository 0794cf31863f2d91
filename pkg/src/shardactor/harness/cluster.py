"""A set of worker slots driven through a chaos schedule."""

from __future__ import annotations

import asyncio
from typing import Any, Callable

from ..api import Application
from ..clock import Clock
from ..kv import KVStore
from ..model import ACTOR_INBOX, ACTOR_TASK
from ..worker import EventLog, Worker, WorkerConfig
from .chaos import CRASH, ChaosSchedule, KillEvent


class Cluster:
    """Worker slot ``i`` runs incarnations ``w{i}``, ``w{i}.1``, ``w{i}.2``...;
    a crashed slot is refilled by a fresh incarnation so the dead id's lease
    has to expire before its shards are reclaimed."""

    def __init__(
        self,
        app: Application,
        store: KVStore,
        clock: Clock,
        config: WorkerConfig,
        *,
        workers: int,
        chaos: ChaosSchedule | None = None,
        seed: int = 0,
        events: EventLog | None = None,
        configure: Callable[[Worker], None] | None = None,
    ) -> None:
        if workers < 1:
            raise ValueError("a cluster needs at least one worker")
        self.app = app
        self.store = store
        self.clock = clock
        self.config = config
        self.size = workers
        self.chaos = chaos or ChaosSchedule(seed)
        self.seed = seed
        self.events = events if events is not None else EventLog()
        self.configure = configure
        self.slots: list[Worker | None] = [None] * workers
        self.generations = [0] * workers
        self.incarnations: list[Worker] = []
        self.fault_log: list[dict[str, Any]] = []
        self._origin = 0.0
        self._chaos_task: asyncio.Task | None = None
        self._pending_chaos = 0

    def _spawn(self, index: int) -> Worker:
        gen = self.generations[index]
        self.generations[index] += 1
        wid = f"w{index}" if gen == 0 else f"w{index}.{gen}"
        worker = Worker(self.config.renamed(wid), self.app, self.store, self.clock, events=self.events, seed=self.seed)
        if self.configure is not None:
            self.configure(worker)
        self.slots[index] = worker
        self.incarnations.append(worker)
        worker.start()
        return worker

    def start(self) -> None:
        self._origin = self.clock.monotonic()
        for i in range(self.size):
            self._spawn(i)
        self._pending_chaos = len(self.chaos.kills)
        if self.chaos.kills:
            self._chaos_task = asyncio.get_running_loop().create_task(self._drive_chaos(), name="chaos")

    def live_workers(self) -> list[Worker]:
        return [w for w in self.slots if w is not None and w.alive]

    async def _drive_chaos(self) -> None:
        loop = asyncio.get_running_loop()
        for event in self.chaos.kills:
            delay = self._origin + event.time - self.clock.monotonic()
            if delay > 0:
                await asyncio.sleep(delay)
            self._apply(event, loop)

    def _apply(self, event: KillEvent, loop: asyncio.AbstractEventLoop) -> None:
        worker = self.slots[event.worker_index % self.size]
        entry = {"time": event.time, "slot": event.worker_index, "mode": event.mode}
        if worker is None or not worker.alive:
            entry["applied"] = False
            self.fault_log.append(entry)
            self._pending_chaos -= 1
            return
        entry.update(applied=True, worker=worker.id)
        self.fault_log.append(entry)
        if event.mode == CRASH:
            worker.kill()
            self.slots[event.worker_index % self.size] = None
            loop.call_later(event.respawn_after, self._respawn, event.worker_index % self.size)
        else:
            worker.stall(event.stall_duration)
            loop.call_later(event.stall_duration, self._chaos_done)

    def _respawn(self, index: int) -> None:
        if self.slots[index] is None:
            self._spawn(index)
        self._chaos_done()

    def _chaos_done(self) -> None:
        self._pending_chaos -= 1

    def store_drained(self) -> bool:
        return not self.store.table(ACTOR_TASK).all_items() and not self.store.table(ACTOR_INBOX).all_items()

    def is_quiescent(self) -> bool:
        if self._pending_chaos > 0:
            return False
        horizon = self.clock.monotonic() - 2 * self.config.polling_interval
        for worker in self.live_workers():
            if not worker.gate.is_set() or worker.idle_since is None or worker.idle_since > horizon:
                return False
        return self.store_drained()

    async def wait_quiescent(self, timeout: float) -> bool:
        deadline = self.clock.monotonic() + timeout
        while not self.is_quiescent():
            if self.clock.monotonic() >= deadline:
                return False
            await asyncio.sleep(self.config.polling_interval)
        return True

    def shutdown(self) -> None:
        if self._chaos_task is not None:
            self._chaos_task.cancel()
        for worker in self.incarnations:
            worker.kill()

    def injected_failures(self) -> list[dict[str, Any]]:
        return [{"op_index": n, "op": op, "mode": "transient"} for n, op in self.store.faults.log]
