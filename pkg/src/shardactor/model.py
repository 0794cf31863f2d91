"""Actor identity, shard mapping, table layouts and record encodings."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Iterable

from .kv import Item, ItemKey, TableSchema

SEPARATOR = "/"
EXTERNAL_SENDER = "external"

ACTOR_TASK = "ActorTask"
ACTOR_TASK_BY_WORKER = "ActorTaskByWorker"
ACTOR_INBOX = "ActorInbox"
ACTOR_STATE = "ActorState"
OUTBOX = "Outbox"
WORKER_LEASE = "WorkerLease"
DEAD_LETTER = "DeadLetter"

# 20 decimal digits cover every non-negative signed 64-bit value
_TS_WIDTH = 20
SEQ_BITS = 20


class MalformedId(ValueError):
    pass


def _check_part(name: str, value: str) -> None:
    if not isinstance(value, str) or not value:
        raise MalformedId(f"{name} must be a non-empty string")
    if SEPARATOR in value:
        raise MalformedId(f"{name} {value!r} contains the reserved separator {SEPARATOR!r}")


@dataclass(frozen=True, order=True)
class ShardRef:
    partition_name: str
    shard_id: str

    def __post_init__(self) -> None:
        _check_part("partition_name", self.partition_name)
        _check_part("shard_id", self.shard_id)

    def __str__(self) -> str:
        return f"{self.partition_name}{SEPARATOR}{self.shard_id}"

    @classmethod
    def parse(cls, text: str) -> ShardRef:
        parts = text.split(SEPARATOR)
        if len(parts) != 2:
            raise MalformedId(f"malformed shard reference {text!r}")
        return cls(*parts)


@dataclass(frozen=True, order=True)
class ActorId:
    partition_name: str
    shard_id: str
    instance_id: str

    def __post_init__(self) -> None:
        _check_part("partition_name", self.partition_name)
        _check_part("shard_id", self.shard_id)
        _check_part("instance_id", self.instance_id)

    def __str__(self) -> str:
        return SEPARATOR.join((self.partition_name, self.shard_id, self.instance_id))

    @property
    def shard(self) -> ShardRef:
        return ShardRef(self.partition_name, self.shard_id)

    @classmethod
    def parse(cls, text: str) -> ActorId:
        parts = text.split(SEPARATOR)
        if len(parts) != 3:
            raise MalformedId(f"malformed actor id {text!r}")
        return cls(*parts)


def encode_actor_id(actor_id: ActorId) -> str:
    return str(actor_id)


def decode_actor_id(text: str) -> ActorId:
    return ActorId.parse(text)


@dataclass(frozen=True)
class ShardPolicy:
    bucket_count: int = 1
    max_actors_per_shard: int = 1_000_000

    def __post_init__(self) -> None:
        if self.bucket_count < 1 or self.max_actors_per_shard < 1:
            raise ValueError("bucket_count and max_actors_per_shard must be >= 1")


def assign_shard(partition_name: str, instance_id: str, policy: ShardPolicy) -> ShardRef:
    """Static hash bucketing of an instance id into the partition's shards."""
    digest = hashlib.blake2b(instance_id.encode(), digest_size=8).digest()
    bucket = int.from_bytes(digest, "big") % policy.bucket_count
    return ShardRef(partition_name, f"s-{bucket}")


def collection_id(actor_id: ActorId, field_name: str) -> str:
    return f"{actor_id}#{field_name}"


def collection_table(actor_tag: str, field_name: str) -> str:
    return f"Collection.{actor_tag}.{field_name}"


def queryable_attribute(name: str) -> str:
    return f"qa:{name}"


def queryable_index(name: str) -> str:
    return f"by:{name}"


def make_timestamp(now_ms: int, last: int | None = None) -> int:
    """Next ordering key for a sender: wall-clock ms in the high bits, a
    per-sender sequence in the low 20 bits, strictly above ``last``."""
    ts = now_ms << SEQ_BITS
    if last is not None and ts <= last:
        ts = last + 1
    return ts


def inbox_sort_key(timestamp: int, unique_id: str) -> str:
    if timestamp < 0:
        raise ValueError("timestamps are non-negative")
    return f"{timestamp:0{_TS_WIDTH}d}#{unique_id}"


def parse_inbox_sort_key(text: str) -> tuple[int, str]:
    ts, _, uid = text.partition("#")
    return int(ts), uid


@dataclass(frozen=True)
class MessageEnvelope:
    shard_ref: ShardRef
    timestamp: int
    unique_id: str
    sender_id: ActorId | None  # None for external clients
    receiver_id: ActorId
    type_tag: str
    payload: bytes

    @property
    def sort_key(self) -> str:
        return inbox_sort_key(self.timestamp, self.unique_id)

    @property
    def key(self) -> ItemKey:
        return ItemKey(str(self.shard_ref), self.sort_key)

    @property
    def sender_text(self) -> str:
        return EXTERNAL_SENDER if self.sender_id is None else str(self.sender_id)

    def to_item(self) -> Item:
        return Item(
            self.key,
            {
                "sender_id": self.sender_text,
                "receiver_id": str(self.receiver_id),
                "type": self.type_tag,
                "payload": self.payload,
            },
        )

    @classmethod
    def from_item(cls, item: Item) -> MessageEnvelope:
        ts, uid = parse_inbox_sort_key(item.key.sort_key)
        sender = item["sender_id"]
        return cls(
            shard_ref=ShardRef.parse(item.key.partition_key),
            timestamp=ts,
            unique_id=uid,
            sender_id=None if sender == EXTERNAL_SENDER else ActorId.parse(sender),
            receiver_id=ActorId.parse(item["receiver_id"]),
            type_tag=item["type"],
            payload=item["payload"],
        )


@dataclass(frozen=True)
class ActorTaskRecord:
    shard_ref: ShardRef
    worker_id: str | None = None
    insertion_time: int = 0
    is_sealed: bool = False
    msg_count: int = 0
    owner_token: str | None = None

    @classmethod
    def from_item(cls, item: Item) -> ActorTaskRecord:
        return cls(
            shard_ref=ShardRef.parse(item.key.partition_key),
            worker_id=item.get("worker_id"),
            insertion_time=item.get("insertion_time", 0),
            is_sealed=item.get("is_sealed", False),
            msg_count=item.get("msg_count", 0),
            owner_token=item.get("owner_token"),
        )

    def to_item(self) -> Item:
        attrs = {
            "insertion_time": self.insertion_time,
            "is_sealed": self.is_sealed,
            "msg_count": self.msg_count,
        }
        if self.worker_id is not None:
            attrs["worker_id"] = self.worker_id
        if self.owner_token is not None:
            attrs["owner_token"] = self.owner_token
        return Item(ItemKey(str(self.shard_ref)), attrs)


@dataclass(frozen=True)
class ActorStateRecord:
    actor_id: ActorId
    type_tag: str
    current_state: bytes
    last_send_ts: int = 0

    def to_item(self) -> Item:
        return Item(
            ItemKey(str(self.actor_id)),
            {"type": self.type_tag, "current_state": self.current_state, "last_send_ts": self.last_send_ts},
        )

    @classmethod
    def from_item(cls, item: Item) -> ActorStateRecord:
        return cls(
            ActorId.parse(item.key.partition_key),
            item["type"],
            item["current_state"],
            item.get("last_send_ts", 0),
        )


@dataclass(frozen=True)
class CollectionItemRecord:
    collection_id: str
    item_id: str
    payload: bytes
    queryable_attributes: dict[str, str] = field(default_factory=dict)
    type_tag: str = ""

    def to_item(self) -> Item:
        attrs: dict = {"payload": self.payload, "type": self.type_tag}
        for name, value in self.queryable_attributes.items():
            attrs[queryable_attribute(name)] = value
        return Item(ItemKey(self.collection_id, self.item_id), attrs)

    @classmethod
    def from_item(cls, item: Item) -> CollectionItemRecord:
        qa = {k[3:]: v for k, v in item.attributes.items() if k.startswith("qa:")}
        return cls(item.key.partition_key, item.key.sort_key, item["payload"], qa, item.get("type", ""))


@dataclass(frozen=True)
class OutboxRecord:
    correlation_id: str
    type_tag: str
    content: bytes
    sender_id: ActorId
    timestamp: int

    def to_item(self) -> Item:
        return Item(
            ItemKey(self.correlation_id),
            {
                "type": self.type_tag,
                "content": self.content,
                "sender_id": str(self.sender_id),
                "timestamp": self.timestamp,
            },
        )

    @classmethod
    def from_item(cls, item: Item) -> OutboxRecord:
        return cls(
            item.key.partition_key,
            item["type"],
            item["content"],
            ActorId.parse(item["sender_id"]),
            item["timestamp"],
        )


@dataclass(frozen=True)
class WorkerLeaseRecord:
    worker_id: str
    heartbeat_time: int

    def to_item(self) -> Item:
        return Item(ItemKey(self.worker_id), {"heartbeat_time": self.heartbeat_time})

    @classmethod
    def from_item(cls, item: Item) -> WorkerLeaseRecord:
        return cls(item.key.partition_key, item["heartbeat_time"])


@dataclass(frozen=True)
class CollectionDecl:
    actor_tag: str
    field_name: str
    attributes: tuple[str, ...]

    @property
    def table(self) -> str:
        return collection_table(self.actor_tag, self.field_name)


def schemas(collections: Iterable[CollectionDecl] = ()) -> list[TableSchema]:
    out = [
        TableSchema(ACTOR_TASK, "shard_ref", indexes=((ACTOR_TASK_BY_WORKER, "worker_id"),)),
        TableSchema(ACTOR_INBOX, "shard_ref", "ts_uid"),
        TableSchema(ACTOR_STATE, "actor_id"),
        TableSchema(OUTBOX, "correlation_id"),
        TableSchema(WORKER_LEASE, "worker_id"),
        TableSchema(DEAD_LETTER, "shard_ref", "ts_uid"),
    ]
    for decl in collections:
        out.append(
            TableSchema(
                decl.table,
                "collection_id",
                "item_id",
                indexes=tuple((queryable_index(a), queryable_attribute(a)) for a in decl.attributes),
            )
        )
    return out
