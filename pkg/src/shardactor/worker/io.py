"""Async access to the store and the shared structured event log."""

from __future__ import annotations

import asyncio
import json
from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

from ..clock import Clock
from ..kv import Item, ItemKey, KVStore, TransientFailure, WriteAction


class StoreClient:
    """Applies the store's fault plan as awaitable latency.

    Each call draws one fault decision, sleeps for its latency on the event
    loop (never holding store locks), then runs the synchronous operation.  An
    optional gate lets tests freeze a worker mid-flight.
    """

    def __init__(self, store: KVStore, clock: Clock, gate: asyncio.Event | None = None) -> None:
        self.store = store
        self.clock = clock
        self.gate = gate

    async def _enter(self, op: str, can_fail: bool) -> None:
        if self.gate is not None:
            await self.gate.wait()
        decision = self.store.faults.decide(op, can_fail=can_fail)
        if decision.latency > 0:
            await asyncio.sleep(decision.latency)
        if self.gate is not None:
            await self.gate.wait()
        if decision.fail:
            raise TransientFailure(f"injected failure in {op}")

    async def get(self, table: str, key: ItemKey) -> Item | None:
        await self._enter("get", False)
        return self.store.get(table, key, faults=False)

    async def query(self, table: str, partition_value: Any = None, **kw: Any) -> list[Item]:
        await self._enter("query", False)
        return self.store.query(table, partition_value, faults=False, **kw)

    async def scan(self, table: str) -> list[Item]:
        await self._enter("scan", False)
        return self.store.scan(table, faults=False)

    async def write(self, action: WriteAction, *, tag: Any = None) -> Item | None:
        await self._enter("write", True)
        return self.store.write(action, faults=False, tag=tag)

    async def transact_built(self, build: Callable[[], tuple[Sequence[WriteAction], Any]]) -> int:
        """Like transact_write, but builds the actions after the injected delay,
        immediately before they apply."""
        await self._enter("transact_write", True)
        actions, tag = build()
        return self.store.transact_write(actions, faults=False, tag=tag)

    async def transact_write(self, actions: Sequence[WriteAction], *, tag: Any = None) -> int:
        await self._enter("transact_write", True)
        return self.store.transact_write(actions, faults=False, tag=tag)


@dataclass
class Event:
    time: float
    worker: str
    kind: str
    fields: dict[str, Any] = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps({"time": self.time, "worker": self.worker, "kind": self.kind, **self.fields}, default=str)


class EventLog:
    """Append-only record of worker state transitions and commit outcomes."""

    def __init__(self) -> None:
        self.events: list[Event] = []

    def emit(self, time: float, worker: str, kind: str, **fields: Any) -> None:
        self.events.append(Event(time, worker, kind, fields))

    def of_kind(self, *kinds: str) -> list[Event]:
        return [e for e in self.events if e.kind in kinds]

    def __len__(self) -> int:
        return len(self.events)
