"""Programming model: actors, feature fields, and buffered side effects.

An actor is a class deriving from :class:`Actor` whose public instance
attributes make up its persisted state.  Infrastructure is requested by
declaring feature fields at class level::

    class TravelAgency(Actor):
        catalog = QueryableCollection(Journey)
        sender = MessageSender()
        spawner = ActorSpawner()

        def receive(self, message):
            journey = self.catalog.get(message.journey_id)
            ...
            self.sender.tell(reply, message.traveler_id)

While a message is being processed every declared feature is bound to a live
handle.  Handles never touch storage for writes: sends, spawns, and collection
changes accumulate in a :class:`SideEffectSet` that the worker commits in one
transaction, or throws away.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, ClassVar, Iterable

from .kv import ItemKey, KVStore
from .model import (
    ActorId,
    CollectionDecl,
    CollectionItemRecord,
    MessageEnvelope,
    ShardPolicy,
    assign_shard,
    collection_id,
    queryable_index,
    schemas,
)
from .serde import TypeRegistry, UnregisteredType


class ApiError(Exception):
    pass


class UnregisteredMessageType(ApiError):
    pass


class UnknownActorType(ApiError):
    pass


class ItemNotFound(ApiError, KeyError):
    pass


class UnknownQueryableAttribute(ApiError):
    pass


class DuplicateActor(ApiError):
    pass


class FeatureNotBound(ApiError, AttributeError):
    pass


# -- feature declarations -----------------------------------------------------


class Feature:
    kind: ClassVar[str] = ""
    name: str = ""

    def __set_name__(self, owner: type, name: str) -> None:
        self.name = name

    def __get__(self, obj: Any, objtype: type | None = None) -> Any:
        if obj is None:
            return self
        raise FeatureNotBound(f"{self.name!r} is only usable while a message is processed")


class MessageSender(Feature):
    kind = "sender"


class ActorSpawner(Feature):
    kind = "spawner"


class QueryableCollection(Feature):
    """Collection of items exposing ``item_id()`` and ``queryable_attributes()``.

    The item class lists the attribute names usable in ``find`` in a
    ``queryable`` class attribute.
    """

    kind = "collection"

    def __init__(self, item_type: type) -> None:
        self.item_type = item_type

    @property
    def attributes(self) -> tuple[str, ...]:
        return tuple(getattr(self.item_type, "queryable", ()))


class Actor:
    type_tag: ClassVar[str] = "Actor"
    features: ClassVar[dict[str, Feature]] = {}

    id: ActorId | None = None

    def __init_subclass__(cls, **kwargs: Any) -> None:
        super().__init_subclass__(**kwargs)
        found: dict[str, Feature] = {}
        for base in reversed(cls.__mro__):
            for name, value in vars(base).items():
                if isinstance(value, Feature):
                    found[name] = value
        cls.features = found
        if "type_tag" not in cls.__dict__:
            cls.type_tag = cls.__name__

    def receive(self, message: Any) -> None:
        raise NotImplementedError

    def get_id(self) -> ActorId | None:
        return self.id

    def set_id(self, actor_id: ActorId) -> None:
        self.id = actor_id

    def state_fields(self) -> dict[str, Any]:
        return {
            k: v
            for k, v in vars(self).items()
            if not k.startswith("_") and k != "id" and k not in self.features
        }


# -- side effects -------------------------------------------------------------


@dataclass
class SideEffectSet:
    consumed_envelope: MessageEnvelope | None = None
    new_actor_state: bytes = b""
    outgoing: list[tuple[ActorId, str, bytes]] = field(default_factory=list)
    external: list[tuple[str, str, bytes]] = field(default_factory=list)
    spawns: list[tuple[ActorId, str, bytes]] = field(default_factory=list)
    # (table, collection_id, item_id, payload, queryable attributes, item type tag)
    dirty_items: list[tuple[str, str, str, bytes, dict[str, str], str]] = field(default_factory=list)
    # (table, collection_id, item_id)
    deleted_items: list[tuple[str, str, str]] = field(default_factory=list)

    def action_count(self) -> int:
        return (
            len(self.outgoing)
            + len(self.external)
            + len(self.spawns)
            + len(self.dirty_items)
            + len(self.deleted_items)
        )


# -- application --------------------------------------------------------------


class Application:
    """Registry of actor, message and item types plus per-partition shard policies."""

    def __init__(
        self,
        *,
        actors: Iterable[type[Actor]] = (),
        messages: Iterable[type] = (),
        items: Iterable[type] = (),
        policies: dict[str, ShardPolicy] | None = None,
        default_policy: ShardPolicy = ShardPolicy(),
    ) -> None:
        self.registry = TypeRegistry()
        self.policies = dict(policies or {})
        self.default_policy = default_policy
        self._actor_types: dict[str, type[Actor]] = {}
        for cls in messages:
            self.registry.message(cls)
        for cls in items:
            self.registry.item(cls)
        for cls in actors:
            self.register_actor(cls)

    def register_actor(self, cls: type[Actor]) -> type[Actor]:
        if not (isinstance(cls, type) and issubclass(cls, Actor)):
            raise TypeError(f"{cls!r} is not an Actor subclass")
        self.registry.register(cls, cls.type_tag, kind="actor")
        self._actor_types[cls.type_tag] = cls
        for feat in cls.features.values():
            if isinstance(feat, QueryableCollection) and not self.registry.is_registered(feat.item_type):
                self.registry.item(feat.item_type)
        return cls

    def actor_type(self, tag: str) -> type[Actor]:
        try:
            return self._actor_types[tag]
        except KeyError:
            raise UnknownActorType(tag) from None

    def policy(self, partition_name: str) -> ShardPolicy:
        return self.policies.get(partition_name, self.default_policy)

    def actor_id(self, partition_name: str, instance_id: str) -> ActorId:
        shard = assign_shard(partition_name, instance_id, self.policy(partition_name))
        return ActorId(partition_name, shard.shard_id, instance_id)

    def collections(self) -> list[CollectionDecl]:
        out = []
        for tag, cls in sorted(self._actor_types.items()):
            for name, feat in cls.features.items():
                if isinstance(feat, QueryableCollection):
                    out.append(CollectionDecl(tag, name, feat.attributes))
        return out

    def schemas(self):
        return schemas(self.collections())

    def install(self, store: KVStore) -> None:
        for schema in self.schemas():
            if not store.has_table(schema.name):
                store.create_table(schema)

    # actor state

    def encode_state(self, actor: Actor) -> tuple[str, bytes]:
        tag = type(actor).type_tag
        if tag not in self._actor_types:
            raise UnknownActorType(tag)
        return tag, self.registry.dump_fields(tag, actor.state_fields())

    def decode_state(self, tag: str, blob: bytes, actor_id: ActorId) -> Actor:
        cls = self.actor_type(tag)
        actor = cls.__new__(cls)
        for k, v in self.registry.load_fields(tag, blob).items():
            setattr(actor, k, v)
        actor.set_id(actor_id)
        return actor

    def encode_message(self, payload: Any) -> tuple[str, bytes]:
        try:
            tag = self.registry.tag_of(payload)
        except UnregisteredType:
            raise UnregisteredMessageType(type(payload).__name__) from None
        if self.registry.kind_of(tag) != "message":
            raise UnregisteredMessageType(f"{tag} is not registered as a message")
        return self.registry.dumps(payload)

    def decode_message(self, tag: str, blob: bytes) -> Any:
        return self.registry.loads(tag, blob)


# -- collection cache and handles ---------------------------------------------


@dataclass
class CollectionCacheEntry:
    item_id: str
    value: Any
    dirty: bool = False


class CollectionCache:
    """Committed item payloads an actor has seen.  Survives across messages
    while the actor stays loaded; only the owning actor writes these items, so
    the cache never goes stale."""

    def __init__(self) -> None:
        self.committed: dict[str, bytes] = {}


class CollectionHandle:
    def __init__(
        self,
        context: ProcessingContext,
        decl: CollectionDecl,
        item_type: type,
        cache: CollectionCache,
    ) -> None:
        self._ctx = context
        self._decl = decl
        self._item_type = item_type
        self._cache = cache
        self.collection_id = collection_id(context.actor_id, decl.field_name)
        # per-call working set; dropped if processing fails
        self._entries: dict[str, CollectionCacheEntry] = {}
        self._baseline: dict[str, bytes | None] = {}
        self._deleted: set[str] = set()

    @property
    def table(self) -> str:
        return self._decl.table

    def _decode(self, blob: bytes) -> Any:
        return self._ctx.app.registry.loads(self._ctx.app.registry.tag_of(self._item_type), blob)

    def _track(self, item_id: str, value: Any, baseline: bytes | None) -> Any:
        self._entries[item_id] = CollectionCacheEntry(item_id, value)
        self._baseline.setdefault(item_id, baseline)
        return value

    def get(self, item_id: str) -> Any:
        if item_id in self._deleted:
            raise ItemNotFound(item_id)
        entry = self._entries.get(item_id)
        if entry is not None:
            return entry.value
        blob = self._cache.committed.get(item_id)
        if blob is None:
            self._ctx.storage_reads += 1
            found = self._ctx.store.get(self.table, ItemKey(self.collection_id, item_id), faults=False)
            if found is None:
                raise ItemNotFound(item_id)
            blob = CollectionItemRecord.from_item(found).payload
            self._cache.committed[item_id] = blob
        return self._track(item_id, self._decode(blob), blob)

    def find(self, attribute: str, value: str) -> list[Any]:
        if attribute not in self._decl.attributes:
            raise UnknownQueryableAttribute(attribute)
        self._ctx.storage_reads += 1
        hits = self._ctx.store.query(
            self.table, self.collection_id, index=queryable_index(attribute), equals=value, faults=False
        )
        for hit in hits:
            item_id = hit.key.sort_key
            if item_id in self._deleted or item_id in self._entries:
                continue
            blob = self._cache.committed.get(item_id)
            if blob is None:
                blob = CollectionItemRecord.from_item(hit).payload
                self._cache.committed[item_id] = blob
            self._track(item_id, self._decode(blob), blob)
        # overlay: judge every entry seen in this call by its current value
        out = [
            e.value
            for e in self._entries.values()
            if e.value.queryable_attributes().get(attribute) == value
        ]
        out.sort(key=lambda v: v.item_id())
        return out

    def put(self, item: Any) -> None:
        if not isinstance(item, self._item_type):
            raise TypeError(f"expected {self._item_type.__name__}, got {type(item).__name__}")
        item_id = item.item_id()
        self._deleted.discard(item_id)
        self._track(item_id, item, self._cache.committed.get(item_id))

    def delete(self, item_id: str) -> None:
        self._baseline.setdefault(item_id, self._cache.committed.get(item_id))
        self._entries.pop(item_id, None)
        self._deleted.add(item_id)

    def collect(self, effects: SideEffectSet) -> None:
        registry = self._ctx.app.registry
        for item_id, entry in sorted(self._entries.items()):
            tag, blob = registry.dumps(entry.value)
            if blob != self._baseline.get(item_id):
                entry.dirty = True
                attrs = {k: str(v) for k, v in entry.value.queryable_attributes().items()}
                effects.dirty_items.append((self.table, self.collection_id, item_id, blob, attrs, tag))
        for item_id in sorted(self._deleted):
            effects.deleted_items.append((self.table, self.collection_id, item_id))

    def commit_to_cache(self, effects: SideEffectSet) -> None:
        for table, cid, item_id, blob, _, _ in effects.dirty_items:
            if table == self.table and cid == self.collection_id:
                self._cache.committed[item_id] = blob
        for table, cid, item_id in effects.deleted_items:
            if table == self.table and cid == self.collection_id:
                self._cache.committed.pop(item_id, None)


class SenderHandle:
    def __init__(self, context: ProcessingContext) -> None:
        self._ctx = context

    def tell(self, payload: Any, receiver: ActorId) -> None:
        if not isinstance(receiver, ActorId):
            raise TypeError("receiver must be an ActorId")
        tag, blob = self._ctx.app.encode_message(payload)
        self._ctx.effects.outgoing.append((receiver, tag, blob))

    def tell_external(self, payload: Any, correlation_id: str) -> None:
        if not correlation_id:
            raise ValueError("correlation_id must be non-empty")
        tag, blob = self._ctx.app.encode_message(payload)
        self._ctx.effects.external.append((correlation_id, tag, blob))


class SpawnerHandle:
    def __init__(self, context: ProcessingContext) -> None:
        self._ctx = context

    def spawn(self, template: Actor, partition_name: str, instance_id: str) -> ActorId:
        app = self._ctx.app
        tag, blob = app.encode_state(template)
        new_id = app.actor_id(partition_name, instance_id)
        if any(a == new_id for a, _, _ in self._ctx.effects.spawns):
            raise DuplicateActor(str(new_id))
        self._ctx.effects.spawns.append((new_id, tag, blob))
        return new_id


@dataclass
class FeatureBinding:
    sender: SenderHandle | None = None
    spawner: SpawnerHandle | None = None
    collections: dict[str, CollectionHandle] = field(default_factory=dict)


class ProcessingContext:
    """Everything one message-processing call may touch."""

    def __init__(
        self,
        app: Application,
        store: KVStore,
        actor_id: ActorId,
        envelope: MessageEnvelope | None = None,
        caches: dict[str, CollectionCache] | None = None,
    ) -> None:
        self.app = app
        self.store = store
        self.actor_id = actor_id
        self.caches = caches if caches is not None else {}
        self.effects = SideEffectSet(consumed_envelope=envelope)
        self.storage_reads = 0
        self.binding: FeatureBinding | None = None

    def finish(self, actor: Actor) -> SideEffectSet:
        """Freeze the actor's outcome into the effect set and unbind features."""
        if self.binding is not None:
            for handle in self.binding.collections.values():
                handle.collect(self.effects)
        self.unbind(actor)
        _, self.effects.new_actor_state = self.app.encode_state(actor)
        return self.effects

    def unbind(self, actor: Actor) -> None:
        for name in type(actor).features:
            actor.__dict__.pop(name, None)

    def committed(self) -> None:
        """Fold a successfully committed effect set into the collection caches."""
        if self.binding is not None:
            for handle in self.binding.collections.values():
                handle.commit_to_cache(self.effects)


def bind_features(actor: Actor, context: ProcessingContext) -> FeatureBinding:
    cls = type(actor)
    context.app.actor_type(cls.type_tag)
    binding = FeatureBinding()
    for name, feat in cls.features.items():
        if isinstance(feat, MessageSender):
            handle: Any = SenderHandle(context)
            binding.sender = handle
        elif isinstance(feat, ActorSpawner):
            handle = SpawnerHandle(context)
            binding.spawner = handle
        elif isinstance(feat, QueryableCollection):
            decl = CollectionDecl(cls.type_tag, name, feat.attributes)
            cache = context.caches.setdefault(name, CollectionCache())
            handle = CollectionHandle(context, decl, feat.item_type, cache)
            binding.collections[name] = handle
        else:
            raise TypeError(f"unsupported feature kind on {cls.__name__}.{name}")
        actor.__dict__[name] = handle
    context.binding = binding
    return binding
