"""Worker runtime."""

from .commit import CommitPlan, build_commit_plan, dead_letter_plan, delivery, task_upsert
from .config import POLLING_PRESETS_MS, WorkerConfig
from .io import Event, EventLog, StoreClient
from .runtime import Outcome, PassivationResult, Phase, ShardState, Worker

__all__ = [
    "CommitPlan",
    "Event",
    "EventLog",
    "Outcome",
    "POLLING_PRESETS_MS",
    "PassivationResult",
    "Phase",
    "ShardState",
    "StoreClient",
    "Worker",
    "WorkerConfig",
    "build_commit_plan",
    "dead_letter_plan",
    "delivery",
    "task_upsert",
]
