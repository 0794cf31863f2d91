"""Turning a SideEffectSet into one fenced storage transaction."""

from __future__ import annotations

import random
from collections import Counter
from dataclasses import dataclass, field
from typing import Any

from ..api import SideEffectSet
from ..kv import (
    And,
    Condition,
    ConditionCheck,
    Delete,
    Equals,
    Exists,
    Item,
    ItemKey,
    NotExists,
    Put,
    Update,
    WriteAction,
)
from ..model import (
    ACTOR_INBOX,
    ACTOR_STATE,
    ACTOR_TASK,
    DEAD_LETTER,
    OUTBOX,
    ActorId,
    ActorStateRecord,
    CollectionItemRecord,
    MessageEnvelope,
    OutboxRecord,
    ShardRef,
    make_timestamp,
)


def new_unique_id(rng: random.Random) -> str:
    return f"{rng.getrandbits(64):016x}"


def ownership(worker_id: str, token: str) -> Condition:
    return And(Equals("worker_id", worker_id), Equals("owner_token", token), Equals("is_sealed", False))


def task_upsert(shard: ShardRef, count: int, now_ms: int, condition: Condition | None = None) -> Update:
    """Mark a recipient shard active: create {worker: null} if absent, else bump msg_count."""
    return Update(
        ACTOR_TASK,
        ItemKey(str(shard)),
        increment={"msg_count": count},
        set_if_absent={"insertion_time": now_ms, "is_sealed": False},
        condition=condition,
    )


def delivery(envelopes: list[MessageEnvelope], now_ms: int, *, guard_new: bool = False) -> list[WriteAction]:
    """Inbox puts plus one task upsert per recipient shard."""
    cond = NotExists() if guard_new else None
    actions: list[WriteAction] = [Put(ACTOR_INBOX, e.to_item(), cond) for e in envelopes]
    counts = Counter(e.shard_ref for e in envelopes)
    for shard in sorted(counts):
        actions.append(task_upsert(shard, counts[shard], now_ms))
    return actions


@dataclass
class CommitPlan:
    actions: list[WriteAction]
    kinds: list[str]
    envelopes: list[MessageEnvelope]
    last_send_ts: int
    tag: dict[str, Any] = field(default_factory=dict)

    def kind_at(self, index: int | None) -> str:
        return "unknown" if index is None or index >= len(self.kinds) else self.kinds[index]


def build_commit_plan(
    effects: SideEffectSet,
    *,
    actor_id: ActorId,
    actor_tag: str,
    worker_id: str,
    token: str,
    now_ms: int,
    last_send_ts: int,
    rng: random.Random,
    fencing: bool = True,
) -> CommitPlan:
    env = effects.consumed_envelope
    assert env is not None
    own_shard = env.shard_ref
    fence = ownership(worker_id, token) if fencing else None
    actions: list[WriteAction] = []
    kinds: list[str] = []

    def add(kind: str, action: WriteAction) -> None:
        actions.append(action)
        kinds.append(kind)

    add("consume", Delete(ACTOR_INBOX, env.key, Exists()))
    state = ActorStateRecord(actor_id, actor_tag, effects.new_actor_state, last_send_ts)
    envelopes: list[MessageEnvelope] = []
    ts = last_send_ts
    for receiver, tag, payload in effects.outgoing:
        ts = make_timestamp(now_ms, ts)
        envelopes.append(
            MessageEnvelope(receiver.shard, ts, new_unique_id(rng), actor_id, receiver, tag, payload)
        )
    if envelopes:
        state = ActorStateRecord(actor_id, actor_tag, effects.new_actor_state, ts)
    add("state", Put(ACTOR_STATE, state.to_item()))
    for new_id, tag, blob in effects.spawns:
        add("spawn", Put(ACTOR_STATE, ActorStateRecord(new_id, tag, blob).to_item(), NotExists()))
    for table, cid, item_id, blob, attrs, item_tag in effects.dirty_items:
        rec = CollectionItemRecord(cid, item_id, blob, attrs, item_tag)
        add("item", Put(table, rec.to_item()))
    for table, cid, item_id in effects.deleted_items:
        add("item", Delete(table, ItemKey(cid, item_id)))
    for e in envelopes:
        add("send", Put(ACTOR_INBOX, e.to_item()))
    counts = Counter(e.shard_ref for e in envelopes)
    for shard in sorted(counts):
        if shard == own_shard:
            add("fence", task_upsert(shard, counts[shard], now_ms, fence))
        else:
            add("wake", task_upsert(shard, counts[shard], now_ms))
    # last writer wins on a repeated correlation id within one call
    external = {cid: (tag, blob) for cid, tag, blob in effects.external}
    for cid, (tag, blob) in external.items():
        add("outbox", Put(OUTBOX, OutboxRecord(cid, tag, blob, actor_id, now_ms).to_item()))
    if fence is not None and own_shard not in counts:
        add("fence", ConditionCheck(ACTOR_TASK, ItemKey(str(own_shard)), fence))
    tag = {
        "kind": "commit",
        "worker": worker_id,
        "token": token,
        "shard": str(own_shard),
        "envelope": env.sort_key,
        "sender": env.sender_text,
        "receiver": str(env.receiver_id),
        "timestamp": env.timestamp,
        "time_ms": now_ms,
        "outbox": sorted(external),
    }
    return CommitPlan(actions, kinds, envelopes, ts, tag)


def dead_letter_plan(
    env: MessageEnvelope,
    *,
    reason: str,
    attempts: int,
    worker_id: str,
    token: str,
    now_ms: int,
    fencing: bool = True,
) -> CommitPlan:
    attrs = dict(env.to_item().attributes)
    attrs.update({"reason": reason, "attempts": attempts, "time_ms": now_ms})
    actions: list[WriteAction] = [
        Delete(ACTOR_INBOX, env.key, Exists()),
        Put(DEAD_LETTER, Item(env.key, attrs)),
    ]
    kinds = ["consume", "dead_letter"]
    if fencing:
        actions.append(ConditionCheck(ACTOR_TASK, ItemKey(str(env.shard_ref)), ownership(worker_id, token)))
        kinds.append("fence")
    tag = {
        "kind": "dead_letter",
        "worker": worker_id,
        "token": token,
        "shard": str(env.shard_ref),
        "envelope": env.sort_key,
        "sender": env.sender_text,
        "receiver": str(env.receiver_id),
        "timestamp": env.timestamp,
        "time_ms": now_ms,
        "reason": reason,
        "outbox": [],
    }
    return CommitPlan(actions, kinds, [], 0, tag)
