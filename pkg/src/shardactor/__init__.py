"""Actor runtime with persistent inboxes over a transactional key-value store."""

from .api import (
    Actor,
    ActorSpawner,
    Application,
    MessageSender,
    QueryableCollection,
)
from .model import ActorId, ShardPolicy, ShardRef

__version__ = "0.1.0"

__all__ = [
    "Actor",
    "ActorId",
    "ActorSpawner",
    "Application",
    "MessageSender",
    "QueryableCollection",
    "ShardPolicy",
    "ShardRef",
]
