"""The worker: stations that claim, poll, process, park and passivate shards.

Stations are asyncio tasks that talk through queues:

* the shard station decides how much work to hold and owns one poll loop per
  running shard;
* the pulling station claims free shards with conditional updates;
* the processing station runs ``processing_slots`` executors, each working
  through one shard's polled batch at a time and committing every message in
  its own fenced transaction;
* the parking station polls parked shards infrequently and passivates the
  ones that stay idle past ``parking_threshold``;
* the lease station heartbeats and hands the shards of expired workers back.
"""

from __future__ import annotations

import asyncio
import enum
import logging
import random
from collections import deque
from dataclasses import dataclass, field
from typing import Any, Awaitable, Callable

from ..api import Actor, Application, CollectionCache, ProcessingContext, bind_features
from ..clock import Clock
from ..kv import (
    And,
    ConditionFailed,
    Delete,
    DuplicateKeyInTransaction,
    Equals,
    Exists,
    ItemKey,
    KVStore,
    LimitExceeded,
    Put,
    TransientFailure,
    Update,
)
from ..model import (
    ACTOR_INBOX,
    ACTOR_STATE,
    ACTOR_TASK,
    ACTOR_TASK_BY_WORKER,
    WORKER_LEASE,
    ActorId,
    ActorStateRecord,
    ActorTaskRecord,
    MessageEnvelope,
    ShardRef,
    WorkerLeaseRecord,
)
from .commit import build_commit_plan, dead_letter_plan, new_unique_id, ownership
from .config import WorkerConfig
from .io import EventLog, StoreClient

log = logging.getLogger(__name__)

Checkpoint = Callable[[str, ShardRef], Awaitable[None]]


class Phase(enum.Enum):
    FREE = "free"
    RUNNING = "running"
    PARKED = "parked"
    PASSIVATING = "passivating"


class Outcome(enum.Enum):
    COMMITTED = "committed"
    RETRIED = "retried"
    DEAD_LETTERED = "dead_lettered"
    LOST = "lost"


class PassivationResult(enum.Enum):
    PASSIVE = "passive"
    ABORTED = "aborted"
    LOST = "lost"


@dataclass
class LoadedActor:
    actor: Actor
    committed_state: bytes
    last_send_ts: int
    caches: dict[str, CollectionCache] = field(default_factory=dict)


@dataclass
class ShardState:
    ref: ShardRef
    token: str
    phase: Phase = Phase.RUNNING
    actors: dict[ActorId, LoadedActor] = field(default_factory=dict)
    pending: deque[MessageEnvelope] = field(default_factory=deque)
    observed_msg_count: int = 0
    attempts: dict[str, int] = field(default_factory=dict)
    empty_polls: int = 0
    parked_since: float = 0.0
    next_check: float = 0.0
    busy: bool = False
    lost: bool = False
    runner: asyncio.Task | None = None


@dataclass
class _Job:
    shard: ShardState
    found_at: float
    done: asyncio.Future


class Worker:
    def __init__(
        self,
        config: WorkerConfig,
        app: Application,
        store: KVStore,
        clock: Clock,
        *,
        events: EventLog | None = None,
        seed: int = 0,
    ) -> None:
        self.config = config
        self.id = config.worker_id
        self.app = app
        self.store = store
        self.clock = clock
        self.events = events if events is not None else EventLog()
        self.rng = random.Random(f"{seed}:{self.id}")
        self.gate = asyncio.Event()
        self.gate.set()
        self.client = StoreClient(store, clock, self.gate)
        self.shards: dict[ShardRef, ShardState] = {}
        # test hooks
        self.fencing = True
        self.checkpoint: Checkpoint | None = None

        self._jobs: asyncio.Queue[_Job] = asyncio.Queue()
        self._parked: asyncio.Queue[ShardState] = asyncio.Queue()
        self._pull_requests: asyncio.Queue[int] = asyncio.Queue(maxsize=1)
        self._tasks: list[asyncio.Task] = []
        self._queue_waits: deque[float] = deque(maxlen=32)
        self._in_flight = 0
        self._pulling = False
        self._stopping = False
        self.alive = False
        self.idle_since: float | None = None

    # -- lifecycle ------------------------------------------------------------

    def _emit(self, kind: str, **fields: Any) -> None:
        self.events.emit(self.clock.monotonic(), self.id, kind, **fields)

    def start(self) -> None:
        if self.alive:
            return
        self.alive = True
        self._emit("started")
        spawn = asyncio.get_running_loop().create_task
        self._tasks = [
            spawn(self._lease_station(), name=f"{self.id}:lease"),
            spawn(self._shard_station(), name=f"{self.id}:shards"),
            spawn(self._pulling_station(), name=f"{self.id}:pulling"),
            spawn(self._parking_station(), name=f"{self.id}:parking"),
        ]
        for i in range(self.config.processing_slots):
            self._tasks.append(spawn(self._processing_slot(), name=f"{self.id}:slot{i}"))

    def kill(self) -> None:
        """Stop abruptly, as if the process died: nothing is released."""
        if not self.alive:
            return
        self.alive = False
        for task in self._all_tasks():
            task.cancel()
        self.shards.clear()
        self._emit("killed")

    def stall(self, duration: float) -> None:
        """Freeze every store interaction for ``duration`` seconds."""
        self.gate.clear()
        self._emit("stalled", duration=duration)

        def resume() -> None:
            self.gate.set()
            self._emit("resumed")

        asyncio.get_running_loop().call_later(duration, resume)

    async def request_stop(self) -> None:
        """Graceful stop: no new claims, finish in-flight work, release every shard."""
        if not self.alive:
            return
        self._stopping = True
        self._tasks[3].cancel()  # parking station
        while self._in_flight or not self._jobs.empty():
            await asyncio.sleep(self.config.polling_interval / 4)
        for state in list(self.shards.values()):
            await self._release(state, reason="stop")
        try:
            await self.client.write(Delete(WORKER_LEASE, ItemKey(self.id)))
        except TransientFailure:
            pass
        self.alive = False
        for task in self._all_tasks():
            task.cancel()
        self._emit("stopped")

    def _all_tasks(self) -> list[asyncio.Task]:
        runners = [s.runner for s in self.shards.values() if s.runner is not None]
        return self._tasks + runners

    def is_idle(self) -> bool:
        return (
            self._in_flight == 0
            and self._jobs.empty()
            and all(not s.pending and not s.busy for s in self.shards.values())
        )

    def running_count(self) -> int:
        return sum(1 for s in self.shards.values() if s.phase is Phase.RUNNING)

    # -- lease station --------------------------------------------------------

    async def _lease_station(self) -> None:
        await self._retry(self._heartbeat)
        await self._retry(self._recover_own)
        while True:
            await asyncio.sleep(self.config.heartbeat_interval)
            await self.heartbeat_and_reclaim()

    async def _retry(self, fn: Callable[[], Awaitable[Any]]) -> Any:
        while True:
            try:
                return await fn()
            except TransientFailure:
                await asyncio.sleep(self.config.retry_backoff)

    async def _heartbeat(self) -> None:
        rec = WorkerLeaseRecord(self.id, self.clock.now_ms())
        await self.client.write(Put(WORKER_LEASE, rec.to_item()))

    async def _recover_own(self) -> None:
        # records naming this id belong to an earlier incarnation
        for item in await self.client.query(ACTOR_TASK, index=ACTOR_TASK_BY_WORKER, equals=self.id):
            rec = ActorTaskRecord.from_item(item)
            if rec.shard_ref in self.shards:
                continue
            await self._unassign(rec.shard_ref, self.id)

    async def _unassign(self, shard: ShardRef, worker_id: str) -> bool:
        try:
            await self.client.write(
                Update(
                    ACTOR_TASK,
                    ItemKey(str(shard)),
                    set={"worker_id": None, "owner_token": None, "is_sealed": False},
                    condition=And(Exists(), Equals("worker_id", worker_id)),
                )
            )
            return True
        except ConditionFailed:
            return False

    async def heartbeat_and_reclaim(self) -> list[ShardRef]:
        """Refresh our lease and free the shards of workers whose lease expired."""
        reclaimed: list[ShardRef] = []
        try:
            await self._heartbeat()
            leases = [WorkerLeaseRecord.from_item(i) for i in await self.client.scan(WORKER_LEASE)]
        except TransientFailure:
            return reclaimed
        now = self.clock.now_ms()
        expiry = int(self.config.lease_duration * 1000)
        for lease in leases:
            if lease.worker_id == self.id or now - lease.heartbeat_time <= expiry:
                continue
            try:
                owned = await self.client.query(ACTOR_TASK, index=ACTOR_TASK_BY_WORKER, equals=lease.worker_id)
                for item in owned:
                    shard = ShardRef.parse(item.key.partition_key)
                    if await self._unassign(shard, lease.worker_id):
                        reclaimed.append(shard)
                        self._emit("reclaimed", shard=str(shard), from_worker=lease.worker_id)
                await self.client.write(
                    Delete(
                        WORKER_LEASE,
                        ItemKey(lease.worker_id),
                        Equals("heartbeat_time", lease.heartbeat_time),
                    )
                )
            except (TransientFailure, ConditionFailed):
                continue
        return reclaimed

    # -- pulling station ------------------------------------------------------

    async def _pulling_station(self) -> None:
        while True:
            want = await self._pull_requests.get()
            try:
                for ref, token, count in await self.pulling_station_acquire(want):
                    self._adopt(ref, token, count)
            finally:
                self._pulling = False

    async def pulling_station_acquire(self, max_count: int) -> list[tuple[ShardRef, str, int]]:
        """Claim up to ``max_count`` free shards, oldest first."""
        if max_count <= 0:
            return []
        try:
            items = await self.client.scan(ACTOR_TASK)
        except TransientFailure:
            return []
        free = [ActorTaskRecord.from_item(i) for i in items if i.get("worker_id") is None]
        free.sort(key=lambda r: (r.insertion_time, str(r.shard_ref)))
        claimed = []
        for rec in free:
            if len(claimed) >= max_count:
                break
            token = new_unique_id(self.rng)
            try:
                item = await self.client.write(
                    Update(
                        ACTOR_TASK,
                        ItemKey(str(rec.shard_ref)),
                        set={"worker_id": self.id, "owner_token": token},
                        condition=And(Exists(), Equals("worker_id", None)),
                    )
                )
            except (ConditionFailed, TransientFailure):
                continue
            claimed.append((rec.shard_ref, token, item.get("msg_count", 0)))
        return claimed

    def _adopt(self, ref: ShardRef, token: str, msg_count: int) -> ShardState:
        state = ShardState(ref, token, observed_msg_count=msg_count)
        self.shards[ref] = state
        self._emit("claimed", shard=str(ref), token=token)
        self._run_shard(state, first_delay=0.0)
        return state

    # -- shard station --------------------------------------------------------

    async def _shard_station(self) -> None:
        p = self.config.polling_interval
        while True:
            while not self._parked.empty():
                state = self._parked.get_nowait()
                if self.shards.get(state.ref) is state and state.phase is Phase.RUNNING:
                    self._run_shard(state, first_delay=0.0)
            if not self._stopping and not self._pulling:
                want = self.config.max_active_shards - self.running_count()
                if want > 0:
                    self._pulling = True
                    self._pull_requests.put_nowait(want)
            await self._maybe_release()
            self._track_idle()
            await asyncio.sleep(p)

    def _track_idle(self) -> None:
        if self.is_idle():
            if self.idle_since is None:
                self.idle_since = self.clock.monotonic()
        else:
            self.idle_since = None

    def _run_shard(self, state: ShardState, first_delay: float) -> None:
        state.phase = Phase.RUNNING
        state.empty_polls = 0
        # random phase keeps shards claimed together from polling in lockstep
        offset = self.rng.uniform(0, self.config.polling_interval)
        state.runner = asyncio.get_running_loop().create_task(
            self._shard_runner(state, first_delay, offset), name=f"{self.id}:{state.ref}"
        )

    async def _shard_runner(self, state: ShardState, first_delay: float, offset: float) -> None:
        p = self.config.polling_interval
        if first_delay:
            await asyncio.sleep(first_delay)
        next_tick = self.clock.monotonic() + offset
        first = True
        while self.shards.get(state.ref) is state and not state.lost:
            if not first:
                await asyncio.sleep(max(0.0, next_tick - self.clock.monotonic()))
                next_tick += p
                if next_tick < self.clock.monotonic():
                    next_tick = self.clock.monotonic() + p
            first = False
            if self._stopping:
                return
            try:
                envelopes = await self.poll_inbox(state.ref)
            except TransientFailure:
                continue
            if self.shards.get(state.ref) is not state or state.lost:
                return
            if envelopes:
                state.empty_polls = 0
                state.pending = deque(envelopes)
                job = _Job(state, self.clock.monotonic(), asyncio.get_running_loop().create_future())
                state.busy = True
                await self._jobs.put(job)
                await job.done
                continue
            state.empty_polls += 1
            if state.empty_polls >= self.config.idle_polls_before_park:
                self.park(state)
                return

    async def poll_inbox(self, shard: ShardRef) -> list[MessageEnvelope]:
        items = await self.client.query(ACTOR_INBOX, str(shard))
        return [MessageEnvelope.from_item(i) for i in items]

    def park(self, state: ShardState) -> None:
        if state.pending:
            raise RuntimeError("cannot park a shard with pending messages")
        state.phase = Phase.PARKED
        now = self.clock.monotonic()
        state.parked_since = now
        state.next_check = now + self.config.parked_poll_interval
        state.runner = None
        self._emit("parked", shard=str(state.ref))

    def unpark_on_message(self, state: ShardState) -> None:
        self._emit("unparked", shard=str(state.ref))
        state.phase = Phase.RUNNING
        self._parked.put_nowait(state)

    async def _maybe_release(self) -> None:
        if len(self._queue_waits) < self._queue_waits.maxlen:
            return
        mean_wait = sum(self._queue_waits) / len(self._queue_waits)
        if mean_wait <= self.config.release_queue_threshold:
            return
        self._queue_waits.clear()
        idle = [s for s in self.shards.values() if s.phase is Phase.RUNNING and not s.busy]
        count = max(1, len(idle) // 2) if idle else 0
        await self.release_shards(count)

    async def release_shards(self, count: int) -> list[ShardRef]:
        """Hand ``count`` running shards that are not mid-processing back to the pool."""
        if count <= 0:
            return []
        candidates = sorted(
            (s for s in self.shards.values() if s.phase is Phase.RUNNING and not s.busy),
            key=lambda s: str(s.ref),
        )
        released = []
        for state in candidates[:count]:
            if await self._release(state, reason="overload"):
                released.append(state.ref)
        return released

    async def _release(self, state: ShardState, reason: str) -> bool:
        self._drop(state)
        if reason == "stop":
            # a graceful stop may interrupt passivation; clear the seal too
            cond = And(Exists(), Equals("worker_id", self.id), Equals("owner_token", state.token))
        else:
            cond = And(Exists(), ownership(self.id, state.token))
        while True:
            try:
                await self.client.write(
                    Update(
                        ACTOR_TASK,
                        ItemKey(str(state.ref)),
                        set={"worker_id": None, "owner_token": None, "is_sealed": False},
                        condition=cond,
                    )
                )
                self._emit("released", shard=str(state.ref), reason=reason)
                return True
            except ConditionFailed:
                return False
            except TransientFailure:
                await asyncio.sleep(self.config.retry_backoff)

    def _drop(self, state: ShardState) -> None:
        state.lost = True
        if self.shards.get(state.ref) is state:
            del self.shards[state.ref]
        runner = state.runner
        if runner is not None and runner is not asyncio.current_task():
            runner.cancel()

    # -- processing station ---------------------------------------------------

    async def _processing_slot(self) -> None:
        while True:
            job = await self._jobs.get()
            self._in_flight += 1
            try:
                self._queue_waits.append(self.clock.monotonic() - job.found_at)
                await self._process_batch(job.shard)
            except asyncio.CancelledError:
                raise
            except Exception:  # pragma: no cover - defensive
                log.exception("worker %s: batch for %s crashed", self.id, job.shard.ref)
            finally:
                self._in_flight -= 1
                job.shard.busy = False
                if not job.done.done():
                    job.done.set_result(None)

    async def _process_batch(self, state: ShardState) -> None:
        while state.pending and not state.lost:
            env = state.pending[0]
            outcome = await self.process_and_commit(state, env)
            if outcome is Outcome.RETRIED:
                await asyncio.sleep(self.config.retry_backoff)
                continue
            if outcome is Outcome.LOST:
                self._emit("shard_lost", shard=str(state.ref))
                self._drop(state)
                return
            state.pending.popleft()
        state.pending.clear()

    async def _load_actor(self, state: ShardState, actor_id: ActorId) -> LoadedActor | None:
        loaded = state.actors.get(actor_id)
        if loaded is not None:
            return loaded
        item = await self.client.get(ACTOR_STATE, ItemKey(str(actor_id)))
        if item is None:
            return None
        rec = ActorStateRecord.from_item(item)
        actor = self.app.decode_state(rec.type_tag, rec.current_state, actor_id)
        loaded = LoadedActor(actor, rec.current_state, rec.last_send_ts)
        state.actors[actor_id] = loaded
        return loaded

    def _rollback(self, loaded: LoadedActor) -> None:
        tag = type(loaded.actor).type_tag
        loaded.actor = self.app.decode_state(tag, loaded.committed_state, loaded.actor.id)

    async def process_and_commit(self, state: ShardState, env: MessageEnvelope) -> Outcome:
        """One processing attempt for ``env``; commits its effects atomically or not at all."""
        cfg = self.config
        try:
            loaded = await self._load_actor(state, env.receiver_id)
        except TransientFailure:
            return Outcome.RETRIED
        if loaded is None:
            return await self._dead_letter(state, env, "unknown actor", 0)

        actor = loaded.actor
        ctx = ProcessingContext(self.app, self.store, env.receiver_id, env, loaded.caches)
        self._emit("processing_started", shard=str(state.ref), envelope=env.unique_id)
        try:
            message = self.app.decode_message(env.type_tag, env.payload)
            bind_features(actor, ctx)
            actor.receive(message)
            effects = ctx.finish(actor)
        except TransientFailure:
            ctx.unbind(actor)
            self._rollback(loaded)
            return Outcome.RETRIED
        except Exception as exc:
            ctx.unbind(actor)
            self._rollback(loaded)
            return await self._application_error(state, env, f"{type(exc).__name__}: {exc}")

        if cfg.processing_time:
            await asyncio.sleep(cfg.processing_time)
            await self.gate.wait()

        plan = build_commit_plan(
            effects,
            actor_id=env.receiver_id,
            actor_tag=type(actor).type_tag,
            worker_id=self.id,
            token=state.token,
            now_ms=self.clock.now_ms(),
            last_send_ts=loaded.last_send_ts,
            rng=self.rng,
            fencing=self.fencing,
        )
        try:
            await self.client.transact_write(plan.actions, tag=plan.tag)
        except TransientFailure:
            self._rollback(loaded)
            return Outcome.RETRIED
        except LimitExceeded:
            self._rollback(loaded)
            return await self._dead_letter(state, env, "transaction limit exceeded", 1)
        except DuplicateKeyInTransaction as exc:
            self._rollback(loaded)
            return await self._application_error(state, env, f"DuplicateKeyInTransaction: {exc}")
        except ConditionFailed as exc:
            self._rollback(loaded)
            kind = plan.kind_at(exc.index)
            if kind == "spawn":
                return await self._application_error(state, env, "DuplicateActor")
            if kind in ("fence", "consume"):
                return Outcome.LOST
            return Outcome.RETRIED
        loaded.committed_state = effects.new_actor_state
        loaded.last_send_ts = plan.last_send_ts
        ctx.committed()
        state.attempts.pop(env.unique_id, None)
        self._emit(
            "committed",
            shard=str(state.ref),
            envelope=env.unique_id,
            outbox=plan.tag["outbox"],
            sent=[e.unique_id for e in plan.envelopes],
        )
        return Outcome.COMMITTED

    async def _application_error(self, state: ShardState, env: MessageEnvelope, reason: str) -> Outcome:
        attempts = state.attempts.get(env.unique_id, 0) + 1
        state.attempts[env.unique_id] = attempts
        self._emit("processing_failed", shard=str(state.ref), envelope=env.unique_id, attempt=attempts, reason=reason)
        if attempts >= self.config.max_message_retries:
            return await self._dead_letter(state, env, reason, attempts)
        return Outcome.RETRIED

    async def _dead_letter(self, state: ShardState, env: MessageEnvelope, reason: str, attempts: int) -> Outcome:
        plan = dead_letter_plan(
            env,
            reason=reason,
            attempts=attempts,
            worker_id=self.id,
            token=state.token,
            now_ms=self.clock.now_ms(),
            fencing=self.fencing,
        )
        while True:
            try:
                await self.client.transact_write(plan.actions, tag=plan.tag)
                break
            except TransientFailure:
                await asyncio.sleep(self.config.retry_backoff)
            except ConditionFailed:
                return Outcome.LOST
        state.attempts.pop(env.unique_id, None)
        self._emit("dead_lettered", shard=str(state.ref), envelope=env.unique_id, reason=reason)
        return Outcome.DEAD_LETTERED

    # -- parking station ------------------------------------------------------

    async def _parking_station(self) -> None:
        while True:
            await asyncio.sleep(self.config.polling_interval)
            now = self.clock.monotonic()
            for state in sorted(self.shards.values(), key=lambda s: str(s.ref)):
                if state.phase is not Phase.PARKED or now < state.next_check:
                    continue
                state.next_check = now + self.config.parked_poll_interval
                try:
                    envelopes = await self.poll_inbox(state.ref)
                except TransientFailure:
                    continue
                if self.shards.get(state.ref) is not state:
                    continue
                if envelopes:
                    self.unpark_on_message(state)
                elif self.clock.monotonic() - state.parked_since >= self.config.parking_threshold:
                    result = await self.passivate(state)
                    if result is PassivationResult.ABORTED:
                        self.unpark_on_message(state)

    async def _cp(self, name: str, state: ShardState) -> None:
        if self.checkpoint is not None:
            await self.checkpoint(name, state.ref)

    async def passivate(self, state: ShardState) -> PassivationResult:
        """Seal, re-check the inbox, then delete the task record if no sender raced in."""
        if state.pending:
            raise RuntimeError("cannot passivate a shard with pending messages")
        state.phase = Phase.PASSIVATING
        key = ItemKey(str(state.ref))
        await self._cp("before_seal", state)
        try:
            item = await self._step(
                lambda: self.client.write(
                    Update(ACTOR_TASK, key, set={"is_sealed": True}, condition=And(Exists(), ownership(self.id, state.token)))
                )
            )
        except ConditionFailed:
            self._emit("shard_lost", shard=str(state.ref))
            self._drop(state)
            return PassivationResult.LOST
        sealed_count = item.get("msg_count", 0)
        state.observed_msg_count = sealed_count
        self._emit("sealed", shard=str(state.ref), msg_count=sealed_count)
        await self._cp("after_seal", state)

        envelopes = await self._step(lambda: self.poll_inbox(state.ref))
        await self._cp("after_check", state)
        if envelopes:
            return await self._unseal(state, "inbox not empty")

        try:
            await self._step(
                lambda: self.client.write(
                    Delete(
                        ACTOR_TASK,
                        key,
                        And(
                            Equals("worker_id", self.id),
                            Equals("owner_token", state.token),
                            Equals("is_sealed", True),
                            Equals("msg_count", sealed_count),
                        ),
                    )
                )
            )
        except ConditionFailed:
            return await self._unseal(state, "sender raced in")
        await self._cp("after_delete", state)
        self._drop(state)
        self._emit("passivated", shard=str(state.ref))
        return PassivationResult.PASSIVE

    async def _unseal(self, state: ShardState, reason: str) -> PassivationResult:
        try:
            await self._step(
                lambda: self.client.write(
                    Update(
                        ACTOR_TASK,
                        ItemKey(str(state.ref)),
                        set={"is_sealed": False},
                        condition=And(Equals("worker_id", self.id), Equals("owner_token", state.token)),
                    )
                )
            )
        except ConditionFailed:
            self._drop(state)
            return PassivationResult.LOST
        state.phase = Phase.PARKED
        self._emit("passivation_aborted", shard=str(state.ref), reason=reason)
        return PassivationResult.ABORTED

    async def _step(self, fn: Callable[[], Awaitable[Any]]) -> Any:
        while True:
            try:
                return await fn()
            except TransientFailure:
                await asyncio.sleep(self.config.retry_backoff)
