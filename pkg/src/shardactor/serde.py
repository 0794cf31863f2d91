"""Type registry and the versioned byte encoding for states, items and messages.

Encoded blobs are JSON documents behind a short magic prefix.  Each blob names
its format version and type tag, so a payload can be inspected without the
registry; decoding back into Python objects needs the registry.
"""

from __future__ import annotations

import base64
import dataclasses
import json
from typing import Any

from .model import ActorId

MAGIC = b"SA"
FORMAT_VERSION = 1


class SerializationError(Exception):
    pass


class UnregisteredType(SerializationError):
    pass


class TypeRegistry:
    """Maps stable type tags to Python classes.

    Messages and collection items must be dataclasses.  Actor classes are
    registered here too; their state is the instance ``__dict__`` minus private
    names and bound features (see :mod:`shardactor.api`).
    """

    def __init__(self) -> None:
        self._by_tag: dict[str, type] = {}
        self._by_type: dict[type, str] = {}
        self._kinds: dict[str, str] = {}

    def register(self, cls: type, tag: str | None = None, *, kind: str = "message") -> type:
        tag = tag or getattr(cls, "type_tag", None) or cls.__name__
        if kind in ("message", "item") and not dataclasses.is_dataclass(cls):
            raise TypeError(f"{cls.__name__} must be a dataclass to be registered as a {kind}")
        existing = self._by_tag.get(tag)
        if existing is not None and existing is not cls:
            raise ValueError(f"type tag {tag!r} already registered for {existing.__name__}")
        self._by_tag[tag] = cls
        self._by_type[cls] = tag
        self._kinds[tag] = kind
        return cls

    def message(self, cls: type) -> type:
        return self.register(cls, kind="message")

    def item(self, cls: type) -> type:
        return self.register(cls, kind="item")

    def actor(self, cls: type) -> type:
        return self.register(cls, kind="actor")

    def tag_of(self, obj_or_cls: Any) -> str:
        cls = obj_or_cls if isinstance(obj_or_cls, type) else type(obj_or_cls)
        try:
            return self._by_type[cls]
        except KeyError:
            raise UnregisteredType(f"{cls.__name__} is not registered") from None

    def cls_of(self, tag: str) -> type:
        try:
            return self._by_tag[tag]
        except KeyError:
            raise UnregisteredType(f"unknown type tag {tag!r}") from None

    def kind_of(self, tag: str) -> str:
        self.cls_of(tag)
        return self._kinds[tag]

    def is_registered(self, obj_or_cls: Any) -> bool:
        cls = obj_or_cls if isinstance(obj_or_cls, type) else type(obj_or_cls)
        return cls in self._by_type

    # values

    def _enc(self, value: Any) -> Any:
        if value is None or isinstance(value, (bool, int, float, str)):
            return value
        if isinstance(value, ActorId):
            return {"$id": str(value)}
        if isinstance(value, (bytes, bytearray)):
            return {"$b": base64.b64encode(bytes(value)).decode()}
        if isinstance(value, (list, tuple)):
            return [self._enc(v) for v in value]
        if isinstance(value, dict):
            return {"$d": [[self._enc(k), self._enc(v)] for k, v in value.items()]}
        if dataclasses.is_dataclass(value) and not isinstance(value, type):
            tag = self.tag_of(value)
            fields = {f.name: self._enc(getattr(value, f.name)) for f in dataclasses.fields(value)}
            return {"$t": tag, "f": fields}
        raise SerializationError(f"cannot encode {type(value).__name__}")

    def _dec(self, value: Any) -> Any:
        if isinstance(value, list):
            return [self._dec(v) for v in value]
        if not isinstance(value, dict):
            return value
        if "$id" in value:
            return ActorId.parse(value["$id"])
        if "$b" in value:
            return base64.b64decode(value["$b"])
        if "$d" in value:
            return {_hashable(self._dec(k)): self._dec(v) for k, v in value["$d"]}
        if "$t" in value:
            cls = self.cls_of(value["$t"])
            return cls(**{k: self._dec(v) for k, v in value["f"].items()})
        raise SerializationError(f"malformed encoded value {value!r}")

    # blobs

    def dumps(self, obj: Any) -> tuple[str, bytes]:
        """Encode a registered dataclass instance; returns (tag, blob)."""
        tag = self.tag_of(obj)
        body = {f.name: self._enc(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
        return tag, _frame(tag, body)

    def loads(self, tag: str, blob: bytes) -> Any:
        body = _unframe(tag, blob)
        cls = self.cls_of(tag)
        return cls(**{k: self._dec(v) for k, v in body.items()})

    def dump_fields(self, tag: str, fields: dict[str, Any]) -> bytes:
        """Encode a free-form field map (used for actor state)."""
        return _frame(tag, {k: self._enc(v) for k, v in fields.items()})

    def load_fields(self, tag: str, blob: bytes) -> dict[str, Any]:
        return {k: self._dec(v) for k, v in _unframe(tag, blob).items()}


def _hashable(value: Any) -> Any:
    if isinstance(value, list):
        return tuple(_hashable(v) for v in value)
    return value


def _frame(tag: str, body: dict[str, Any]) -> bytes:
    doc = {"v": FORMAT_VERSION, "t": tag, "d": body}
    return MAGIC + json.dumps(doc, sort_keys=True, separators=(",", ":")).encode()


def _unframe(tag: str, blob: bytes) -> dict[str, Any]:
    if not blob.startswith(MAGIC):
        raise SerializationError("missing format prefix")
    doc = json.loads(blob[len(MAGIC):])
    if doc.get("v") != FORMAT_VERSION:
        raise SerializationError(f"unsupported format version {doc.get('v')!r}")
    if doc.get("t") != tag:
        raise SerializationError(f"blob holds {doc.get('t')!r}, expected {tag!r}")
    return doc["d"]
