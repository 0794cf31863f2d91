from __future__ import annotations

from dataclasses import dataclass, replace

POLLING_PRESETS_MS = (100, 500, 1000)


@dataclass(frozen=True)
class WorkerConfig:
    """Tuning knobs of one worker.  Durations are seconds."""

    worker_id: str
    polling_interval: float = 0.5
    max_active_shards: int = 4
    processing_slots: int = 4
    parking_threshold: float = 10.0
    lease_duration: float = 10.0
    heartbeat_interval: float = 2.0
    max_message_retries: int = 3
    release_queue_threshold: float = 5.0
    # consecutive empty polls before a running shard is parked
    idle_polls_before_park: int = 2
    # parked shards are polled every parked_poll_factor * polling_interval
    parked_poll_factor: int = 4
    # simulated compute time per processed message
    processing_time: float = 0.0
    retry_backoff: float = 0.005

    def __post_init__(self) -> None:
        if not self.worker_id:
            raise ValueError("worker_id must be non-empty")
        if self.polling_interval <= 0:
            raise ValueError("polling_interval must be positive")
        if self.processing_slots < 1:
            raise ValueError("processing_slots must be >= 1")
        if self.max_active_shards < 1:
            raise ValueError("max_active_shards must be >= 1")
        if not self.heartbeat_interval < self.lease_duration / 2:
            raise ValueError("heartbeat_interval must be below half the lease_duration")
        if self.max_message_retries < 1:
            raise ValueError("max_message_retries must be >= 1")
        if self.idle_polls_before_park < 1 or self.parked_poll_factor < 1:
            raise ValueError("idle_polls_before_park and parked_poll_factor must be >= 1")
        if self.processing_time < 0 or self.parking_threshold < 0:
            raise ValueError("durations must be non-negative")

    @property
    def parked_poll_interval(self) -> float:
        return self.parked_poll_factor * self.polling_interval

    def renamed(self, worker_id: str) -> WorkerConfig:
        return replace(self, worker_id=worker_id)
