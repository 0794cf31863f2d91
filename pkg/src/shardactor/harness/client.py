"""External-client facade: inject requests, await outbox responses."""

from __future__ import annotations

import asyncio
import random
from dataclasses import dataclass
from typing import Any

from ..api import Application
from ..clock import Clock
from ..kv import ConditionFailed, ItemKey, KVStore, TransientFailure
from ..model import OUTBOX, ActorId, MessageEnvelope, OutboxRecord, make_timestamp
from ..worker.commit import delivery, new_unique_id
from ..worker.io import StoreClient


class Timeout(Exception):
    pass


@dataclass(frozen=True)
class ClientRequest:
    correlation_id: str
    target: ActorId
    payload: Any


@dataclass
class Injection:
    request: ClientRequest
    envelope: MessageEnvelope
    inject_time: float  # loop monotonic seconds
    inject_ms: int


class Client:
    """Sends requests into actor inboxes exactly once.

    Each injection is one transaction: the inbox put (conditioned on absence,
    so a resend of the same envelope is a no-op) plus the recipient's task
    upsert.  Transient failures are retried with the same envelope identity.
    """

    def __init__(
        self,
        app: Application,
        store: KVStore,
        clock: Clock,
        *,
        seed: int = 0,
        retry_backoff: float = 0.005,
        poll_interval: float = 0.05,
    ) -> None:
        self.app = app
        self.clock = clock
        self.io = StoreClient(store, clock)
        self.rng = random.Random(f"client:{seed}")
        self.retry_backoff = retry_backoff
        self.poll_interval = poll_interval
        self._last_ts: int | None = None
        self.injections: dict[str, Injection] = {}

    def _envelope(self, req: ClientRequest, unique_id: str) -> MessageEnvelope:
        tag, blob = self.app.encode_message(req.payload)
        self._last_ts = make_timestamp(self.clock.now_ms(), self._last_ts)
        return MessageEnvelope(req.target.shard, self._last_ts, unique_id, None, req.target, tag, blob)

    async def inject_request(self, req: ClientRequest, *, envelope: MessageEnvelope | None = None) -> MessageEnvelope:
        """Deliver ``req``; passing a previously returned ``envelope`` re-sends it."""
        unique_id = new_unique_id(self.rng)
        holder: dict[str, MessageEnvelope] = {}
        if envelope is not None:
            holder["env"] = envelope
        start = self.clock.monotonic()
        start_ms = self.clock.now_ms()

        def build():
            # stamped right before applying, so stamps follow commit order
            env = holder.get("env")
            if env is None:
                env = holder["env"] = self._envelope(req, unique_id)
            now_ms = self.clock.now_ms()
            tag = {"kind": "inject", "correlation_id": req.correlation_id, "envelope": env.sort_key, "time_ms": now_ms}
            return delivery([env], now_ms, guard_new=True), tag

        while True:
            try:
                await self.io.transact_built(build)
                break
            except TransientFailure:
                await asyncio.sleep(self.retry_backoff)
            except ConditionFailed as exc:
                if exc.index == 0:
                    break  # already delivered
                raise
        env = holder["env"]
        self.injections.setdefault(req.correlation_id, Injection(req, env, start, start_ms))
        return env

    async def await_response(self, correlation_id: str, timeout: float) -> Any:
        deadline = self.clock.monotonic() + timeout
        while True:
            rec = await self.response_record(correlation_id)
            if rec is not None:
                return self.app.decode_message(rec.type_tag, rec.content)
            if self.clock.monotonic() >= deadline:
                raise Timeout(correlation_id)
            await asyncio.sleep(min(self.poll_interval, max(0.0, deadline - self.clock.monotonic())))

    async def response_record(self, correlation_id: str) -> OutboxRecord | None:
        item = await self.io.get(OUTBOX, ItemKey(correlation_id))
        return None if item is None else OutboxRecord.from_item(item)
