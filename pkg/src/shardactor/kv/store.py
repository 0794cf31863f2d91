"""Embedded transactional key-value store with conditional writes.

Emulates the subset of a DynamoDB-style service the runtime relies on:
tables with a partition key and optional sort key, conditional single-item
writes, all-or-nothing write transactions, equality queries over secondary
indexes, and seeded fault injection.  Everything is strongly consistent.

Isolation works by two-phase locking: a write or transaction takes the locks of
every key it touches in a fixed global order, evaluates its conditions, and
installs all mutations under a short store-wide latch.  Readers copy under the
same latch, so they observe either none or all of a transaction.
"""

from __future__ import annotations

import base64
import json
import threading
import time
from collections.abc import Callable, Iterable, Mapping, Sequence
from dataclasses import dataclass, field
from typing import Any, Union

from .faults import NO_FAULT, FaultDecision, FaultInjector, FaultPlan

AttributeValue = Union[str, int, bool, bytes]

_INT_MIN = -(2**63)
_INT_MAX = 2**63 - 1


class StoreError(Exception):
    pass


class DuplicateTable(StoreError):
    pass


class UnknownTable(StoreError):
    pass


class UnknownIndex(StoreError):
    pass


class TypeMismatch(StoreError):
    pass


class LimitExceeded(StoreError):
    pass


class DuplicateKeyInTransaction(StoreError):
    pass


class InvalidItem(StoreError):
    pass


class ConditionFailed(StoreError):
    """A write condition did not hold; nothing was applied.

    ``index`` is the position of the first failing action inside a
    transaction, or None for a single-item write.
    """

    def __init__(self, index: int | None = None, message: str = "") -> None:
        super().__init__(message or f"condition failed at action {index}")
        self.index = index


class TransientFailure(StoreError):
    """Injected failure raised before any effect was applied."""


def _variant(value: Any) -> type:
    # bool is a subclass of int; keep them apart
    if isinstance(value, bool):
        return bool
    if isinstance(value, int):
        return int
    if isinstance(value, str):
        return str
    if isinstance(value, (bytes, bytearray)):
        return bytes
    raise TypeMismatch(f"unsupported attribute value {value!r}")


def check_value(value: Any) -> AttributeValue:
    kind = _variant(value)
    if kind is int and not _INT_MIN <= value <= _INT_MAX:
        raise TypeMismatch(f"integer {value} outside signed 64-bit range")
    if kind is bytes:
        return bytes(value)
    return value


def compare(a: AttributeValue, b: AttributeValue) -> int:
    """Three-way comparison within one variant; mixing variants is an error."""
    ka, kb = _variant(a), _variant(b)
    if ka is not kb:
        raise TypeMismatch(f"cannot order {ka.__name__} against {kb.__name__}")
    return (a > b) - (a < b)


def values_equal(a: AttributeValue | None, b: AttributeValue | None) -> bool:
    if a is None or b is None:
        return a is None and b is None
    return _variant(a) is _variant(b) and a == b


@dataclass(frozen=True)
class ItemKey:
    partition_key: AttributeValue
    sort_key: AttributeValue | None = None


@dataclass(frozen=True)
class Item:
    key: ItemKey
    attributes: Mapping[str, AttributeValue] = field(default_factory=dict)

    def get(self, name: str, default: Any = None) -> Any:
        return self.attributes.get(name, default)

    def __getitem__(self, name: str) -> AttributeValue:
        return self.attributes[name]


# -- conditions ---------------------------------------------------------------


class Condition:
    def holds(self, item: Item | None) -> bool:
        raise NotImplementedError

    def __and__(self, other: Condition) -> And:
        left = self.parts if isinstance(self, And) else (self,)
        right = other.parts if isinstance(other, And) else (other,)
        return And(*left, *right)


@dataclass(frozen=True)
class Exists(Condition):
    def holds(self, item: Item | None) -> bool:
        return item is not None


@dataclass(frozen=True)
class NotExists(Condition):
    def holds(self, item: Item | None) -> bool:
        return item is None


@dataclass(frozen=True)
class Equals(Condition):
    """Attribute equality.  ``value=None`` means the attribute is absent."""

    attribute: str
    value: AttributeValue | None

    def holds(self, item: Item | None) -> bool:
        current = None if item is None else item.attributes.get(self.attribute)
        return values_equal(current, self.value)


class And(Condition):
    def __init__(self, *parts: Condition) -> None:
        self.parts = tuple(parts)

    def holds(self, item: Item | None) -> bool:
        return all(p.holds(item) for p in self.parts)

    def __eq__(self, other: object) -> bool:
        return isinstance(other, And) and self.parts == other.parts

    def __hash__(self) -> int:
        return hash(self.parts)

    def __repr__(self) -> str:
        return f"And{self.parts!r}"


# -- write actions ------------------------------------------------------------


@dataclass(frozen=True)
class Put:
    table: str
    item: Item
    condition: Condition | None = None

    @property
    def key(self) -> ItemKey:
        return self.item.key


@dataclass(frozen=True)
class Update:
    """Partial update.  Creates the item when absent.

    ``set`` assigns attributes (None removes one), ``increment`` adds to
    integer attributes (absent counts as 0) and ``set_if_absent`` assigns only
    attributes that are not already present.
    """

    table: str
    key: ItemKey
    set: Mapping[str, AttributeValue | None] = field(default_factory=dict)
    increment: Mapping[str, int] = field(default_factory=dict)
    set_if_absent: Mapping[str, AttributeValue] = field(default_factory=dict)
    condition: Condition | None = None


@dataclass(frozen=True)
class Delete:
    table: str
    key: ItemKey
    condition: Condition | None = None


@dataclass(frozen=True)
class ConditionCheck:
    table: str
    key: ItemKey
    condition: Condition


WriteAction = Union[Put, Update, Delete, ConditionCheck]


def _table_name(table: Any) -> str:
    return table if isinstance(table, str) else table.name


# -- schema and tables --------------------------------------------------------


@dataclass(frozen=True)
class TableSchema:
    name: str
    partition_key: str
    sort_key: str | None = None
    indexes: tuple[tuple[str, str], ...] = ()

    def __post_init__(self) -> None:
        names = [n for n, _ in self.indexes]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate index names on {self.name}: {names}")

    def index_attribute(self, index: str) -> str:
        for name, attr in self.indexes:
            if name == index:
                return attr
        raise UnknownIndex(f"{self.name} has no index {index!r}")


@dataclass(frozen=True)
class CommitRecord:
    """One committed write or transaction, in serialization order."""

    seq: int
    actions: tuple[WriteAction, ...]
    tag: Any = None


class Table:
    def __init__(self, schema: TableSchema) -> None:
        self.schema = schema
        self.name = schema.name
        # partition key -> sort key -> attributes
        self.partitions: dict[Any, dict[Any, dict[str, AttributeValue]]] = {}
        # index name -> indexed value -> partition key -> set of sort keys
        self.indexes: dict[str, dict[str, dict[Any, set[Any]]]] = {
            name: {} for name, _ in schema.indexes
        }

    def __repr__(self) -> str:
        return f"Table({self.name!r})"

    def validate_key(self, key: ItemKey) -> None:
        check_value(key.partition_key)
        has_sort = self.schema.sort_key is not None
        if has_sort != (key.sort_key is not None):
            raise InvalidItem(
                f"{self.name}: sort key presence does not match schema ({key!r})"
            )
        if has_sort:
            check_value(key.sort_key)

    def lookup(self, key: ItemKey) -> Item | None:
        attrs = self.partitions.get(key.partition_key, {}).get(key.sort_key)
        return None if attrs is None else Item(key, attrs)

    def install(self, key: ItemKey, attrs: dict[str, AttributeValue] | None) -> None:
        part = self.partitions.get(key.partition_key)
        old = None if part is None else part.get(key.sort_key)
        for (name, attr) in self.schema.indexes:
            idx = self.indexes[name]
            if old is not None and attr in old:
                bucket = idx[old[attr]][key.partition_key]
                bucket.discard(key.sort_key)
                if not bucket:
                    del idx[old[attr]][key.partition_key]
                    if not idx[old[attr]]:
                        del idx[old[attr]]
            if attrs is not None and attr in attrs:
                idx.setdefault(attrs[attr], {}).setdefault(key.partition_key, set()).add(
                    key.sort_key
                )
        if attrs is None:
            if part is not None:
                part.pop(key.sort_key, None)
                if not part:
                    del self.partitions[key.partition_key]
        else:
            self.partitions.setdefault(key.partition_key, {})[key.sort_key] = attrs

    def all_items(self) -> list[Item]:
        out = []
        for pk in sorted(self.partitions):
            part = self.partitions[pk]
            for sk in sorted(part, key=_sort_token):
                out.append(Item(ItemKey(pk, sk), part[sk]))
        return out


def _sort_token(value: Any) -> Any:
    return (0, "") if value is None else (1, value)


def _lock_token(table: str, key: ItemKey) -> tuple:
    return (
        table,
        _variant(key.partition_key).__name__,
        key.partition_key,
        "" if key.sort_key is None else _variant(key.sort_key).__name__,
        "" if key.sort_key is None else key.sort_key,
    )


# -- the store ----------------------------------------------------------------


class KVStore:
    """Thread-safe in-memory transactional store."""

    def __init__(
        self,
        fault_plan: FaultPlan | None = None,
        *,
        transaction_item_limit: int = 100,
        record_history: bool = False,
        sleep: Callable[[float], None] | None = time.sleep,
    ) -> None:
        if transaction_item_limit < 1:
            raise ValueError("transaction_item_limit must be >= 1")
        self.transaction_item_limit = transaction_item_limit
        self.faults = FaultInjector(fault_plan or FaultPlan(enabled=False))
        self.record_history = record_history
        self.history: list[CommitRecord] = []
        self._sleep = sleep
        self._tables: dict[str, Table] = {}
        self._latch = threading.Lock()
        self._key_locks: dict[tuple, threading.Lock] = {}
        self._key_locks_guard = threading.Lock()
        self._seq = 0
        self.stats = {"get": 0, "write": 0, "transact_write": 0, "query": 0, "scan": 0}

    # tables

    def create_table(self, schema: TableSchema) -> Table:
        with self._latch:
            if schema.name in self._tables:
                raise DuplicateTable(schema.name)
            table = Table(schema)
            self._tables[schema.name] = table
            return table

    def table(self, name: str) -> Table:
        try:
            return self._tables[_table_name(name)]
        except KeyError:
            raise UnknownTable(_table_name(name)) from None

    def has_table(self, name: str) -> bool:
        return name in self._tables

    @property
    def tables(self) -> list[str]:
        return sorted(self._tables)

    # fault plumbing

    def _fault(self, op: str, faults: bool, can_fail: bool) -> None:
        if not faults:
            return
        decision = self.faults.decide(op, can_fail=can_fail)
        self.apply_decision(decision, op)

    def apply_decision(self, decision: FaultDecision, op: str = "") -> None:
        if decision.latency > 0 and self._sleep is not None:
            self._sleep(decision.latency)
        if decision.fail:
            raise TransientFailure(f"injected failure in {op or 'operation'}")

    # reads

    def get(self, table: str | Table, key: ItemKey, *, faults: bool = True) -> Item | None:
        t = self.table(table)
        t.validate_key(key)
        self._fault("get", faults, can_fail=False)
        with self._latch:
            self.stats["get"] += 1
            return t.lookup(key)

    def query(
        self,
        table: str | Table,
        partition_value: AttributeValue | None = None,
        *,
        index: str | None = None,
        equals: AttributeValue | None = None,
        ascending: bool = True,
        limit: int | None = None,
        faults: bool = True,
    ) -> list[Item]:
        """Equality query on a base-table partition or on a secondary index.

        Base-table queries return the partition ordered by sort key.  Index
        queries return every item whose indexed attribute equals ``equals``,
        optionally restricted to one partition, ordered by key.
        """
        t = self.table(table)
        if index is not None:
            t.schema.index_attribute(index)
            if equals is None:
                raise ValueError("index queries need an equality value")
        elif partition_value is None:
            raise ValueError("base-table queries need a partition value")
        self._fault("query", faults, can_fail=False)
        with self._latch:
            self.stats["query"] += 1
            if index is None:
                part = t.partitions.get(partition_value, {})
                keys = [ItemKey(partition_value, sk) for sk in part]
            else:
                hits = t.indexes[index].get(equals, {})
                pks = [partition_value] if partition_value is not None else list(hits)
                keys = [ItemKey(pk, sk) for pk in pks for sk in hits.get(pk, ())]
            items = [Item(k, t.partitions[k.partition_key][k.sort_key]) for k in keys]
        items.sort(
            key=lambda it: (it.key.partition_key, _sort_token(it.key.sort_key)),
            reverse=not ascending,
        )
        if limit is not None:
            items = items[:limit]
        return items

    def scan(self, table: str | Table, *, faults: bool = True) -> list[Item]:
        t = self.table(table)
        self._fault("scan", faults, can_fail=False)
        with self._latch:
            self.stats["scan"] += 1
            return t.all_items()

    # writes

    def write(self, action: WriteAction, *, faults: bool = True, tag: Any = None) -> Item | None:
        """Apply one conditional write.  Returns the resulting item (None after a delete)."""
        if isinstance(action, ConditionCheck):
            raise ValueError("a standalone ConditionCheck has no effect; use transact_write")
        self._validate(action)
        self._fault("write", faults, can_fail=True)
        with self._locked([action]):
            # key locks exclude conflicting writers; the latch only covers install
            t = self._tables[action.table]
            current = t.lookup(action.key)
            cond = action.condition
            if cond is not None and not cond.holds(current):
                raise ConditionFailed(None, f"condition failed on {action.table} {action.key}")
            attrs = _apply(t, action, current)
            with self._latch:
                self.stats["write"] += 1
                t.install(action.key, attrs)
                self._record((action,), tag)
            return None if attrs is None else Item(action.key, attrs)

    def transact_write(
        self, actions: Sequence[WriteAction], *, faults: bool = True, tag: Any = None
    ) -> int:
        """Apply all actions atomically or none of them.

        Returns the commit sequence number.  Raises ConditionFailed carrying the
        index of the first failing action.
        """
        actions = tuple(actions)
        if not actions:
            raise ValueError("a transaction needs at least one action")
        if len(actions) > self.transaction_item_limit:
            raise LimitExceeded(
                f"{len(actions)} actions exceed the limit of {self.transaction_item_limit}"
            )
        seen = set()
        for a in actions:
            self._validate(a)
            token = _lock_token(a.table, a.key)
            if token in seen:
                raise DuplicateKeyInTransaction(f"{a.table} {a.key}")
            seen.add(token)
        self._fault("transact_write", faults, can_fail=True)
        with self._locked(actions):
            staged = []
            for i, a in enumerate(actions):
                t = self._tables[a.table]
                current = t.lookup(a.key)
                cond = a.condition
                if cond is not None and not cond.holds(current):
                    raise ConditionFailed(i, f"condition failed at action {i} on {a.table} {a.key}")
                if not isinstance(a, ConditionCheck):
                    staged.append((t, a.key, _apply(t, a, current)))
            with self._latch:
                self.stats["transact_write"] += 1
                for t, key, attrs in staged:
                    t.install(key, attrs)
                return self._record(actions, tag)

    def _validate(self, action: WriteAction) -> None:
        t = self.table(action.table)
        t.validate_key(action.key)
        schema = t.schema
        key_names = {schema.partition_key, schema.sort_key}
        assigned: Mapping[str, Any] = {}
        if isinstance(action, Put):
            assigned = action.item.attributes
        elif isinstance(action, Update):
            assigned = {**action.set_if_absent, **action.set}
        for _, attr in schema.indexes:
            value = assigned.get(attr)
            if value is not None and not isinstance(value, str):
                raise TypeMismatch(f"{schema.name}.{attr} is indexed and must be text")
        if isinstance(action, Put):
            _validate_attrs(action.item.attributes, key_names)
        elif isinstance(action, Update):
            _validate_attrs({k: v for k, v in action.set.items() if v is not None}, key_names)
            _validate_attrs(action.set_if_absent, key_names)
            for name, by in action.increment.items():
                if name in key_names or not name:
                    raise InvalidItem(f"cannot increment key attribute {name!r}")
                if _variant(by) is not int:
                    raise TypeMismatch(f"increment of {name!r} by non-integer {by!r}")
            for name in action.set:
                if name in key_names or not name:
                    raise InvalidItem(f"cannot assign key attribute {name!r}")

    def _locked(self, actions: Iterable[WriteAction]) -> _KeyLocks:
        tokens = sorted({_lock_token(a.table, a.key) for a in actions}, key=repr)
        with self._key_locks_guard:
            locks = [self._key_locks.setdefault(tok, threading.Lock()) for tok in tokens]
        return _KeyLocks(locks)

    def _record(self, actions: tuple[WriteAction, ...], tag: Any) -> int:
        self._seq += 1
        if self.record_history:
            self.history.append(CommitRecord(self._seq, actions, tag))
        return self._seq

    # debugging

    def snapshot(self) -> dict[str, list[Item]]:
        with self._latch:
            return {name: t.all_items() for name, t in sorted(self._tables.items())}

    def dump(self) -> str:
        """One line per item: ``table pk=.. [sk=..] attr=value ...``."""
        lines = []
        for name, items in self.snapshot().items():
            schema = self._tables[name].schema
            for it in items:
                parts = [name, f"{schema.partition_key}={_render(it.key.partition_key)}"]
                if schema.sort_key is not None:
                    parts.append(f"{schema.sort_key}={_render(it.key.sort_key)}")
                parts += [f"{k}={_render(v)}" for k, v in sorted(it.attributes.items())]
                lines.append(" ".join(parts))
        return "\n".join(lines)


class _KeyLocks:
    def __init__(self, locks: list[threading.Lock]) -> None:
        self._locks = locks

    def __enter__(self) -> None:
        for lock in self._locks:
            lock.acquire()

    def __exit__(self, *exc: object) -> None:
        for lock in reversed(self._locks):
            lock.release()


def _validate_attrs(attrs: Mapping[str, Any], key_names: set) -> None:
    for name, value in attrs.items():
        if not name:
            raise InvalidItem("attribute names must be non-empty")
        if name in key_names:
            raise InvalidItem(f"key attribute {name!r} duplicated in attribute map")
        check_value(value)


def _apply(table: Table, action: WriteAction, current: Item | None) -> dict | None:
    if isinstance(action, Put):
        return {k: check_value(v) for k, v in action.item.attributes.items()}
    if isinstance(action, Delete):
        return None
    assert isinstance(action, Update)
    attrs = dict(current.attributes) if current is not None else {}
    for name, value in action.set_if_absent.items():
        attrs.setdefault(name, check_value(value))
    for name, value in action.set.items():
        if value is None:
            attrs.pop(name, None)
        else:
            attrs[name] = check_value(value)
    for name, by in action.increment.items():
        base = attrs.get(name, 0)
        if _variant(base) is not int:
            raise TypeMismatch(f"{table.name}.{name} is not an integer")
        attrs[name] = check_value(base + by)
    return attrs


def _render(value: AttributeValue | None) -> str:
    if value is None:
        return "null"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, int):
        return str(value)
    if isinstance(value, bytes):
        return "b64:" + base64.b64encode(value).decode()
    return json.dumps(value)


__all__ = [
    "And",
    "AttributeValue",
    "CommitRecord",
    "Condition",
    "ConditionCheck",
    "ConditionFailed",
    "Delete",
    "DuplicateKeyInTransaction",
    "DuplicateTable",
    "Equals",
    "Exists",
    "FaultDecision",
    "InvalidItem",
    "Item",
    "ItemKey",
    "KVStore",
    "LimitExceeded",
    "NO_FAULT",
    "NotExists",
    "Put",
    "StoreError",
    "Table",
    "TableSchema",
    "TransientFailure",
    "TypeMismatch",
    "UnknownIndex",
    "UnknownTable",
    "Update",
    "WriteAction",
    "check_value",
    "compare",
    "values_equal",
]
