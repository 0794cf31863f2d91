"""Seeded worker-kill schedules."""

from __future__ import annotations

import random
import re
from dataclasses import asdict, dataclass, field

from ..kv import FaultPlan

CRASH = "crash"
STALL = "stall"
MODES = (CRASH, STALL)


@dataclass(frozen=True)
class KillEvent:
    """At ``time`` seconds into the run, take down worker slot ``worker_index``.

    A crash cancels the worker outright; the slot is refilled after
    ``respawn_after`` seconds by a fresh incarnation with a new id.  A stall
    freezes the worker's storage access for ``stall_duration`` seconds and then
    lets it carry on with whatever it believed it owned.
    """

    time: float
    worker_index: int
    mode: str = CRASH
    stall_duration: float = 0.0
    respawn_after: float = 1.0

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise ValueError(f"unknown kill mode {self.mode!r}")
        if self.time < 0 or self.worker_index < 0:
            raise ValueError("kill time and worker index must be non-negative")
        if self.mode == STALL and self.stall_duration <= 0:
            raise ValueError("a stall needs a positive duration")
        if self.respawn_after < 0:
            raise ValueError("respawn_after must be non-negative")


@dataclass(frozen=True)
class ChaosSchedule:
    seed: int = 0
    kills: tuple[KillEvent, ...] = ()
    fault_plan: FaultPlan = field(default_factory=FaultPlan)

    def __post_init__(self) -> None:
        object.__setattr__(self, "kills", tuple(sorted(self.kills, key=lambda k: (k.time, k.worker_index))))

    @classmethod
    def generate(
        cls,
        seed: int,
        *,
        kills: int,
        workers: int,
        window: tuple[float, float],
        modes: tuple[str, ...] = MODES,
        stall_duration: float = 15.0,
        respawn_after: float = 1.0,
        transient_failure_probability: float = 0.0,
        latency: tuple[float, float] = (0.0, 0.0),
    ) -> ChaosSchedule:
        """Random kills spread over ``window``, reproducible from ``seed``."""
        if workers < 1:
            raise ValueError("need at least one worker")
        rng = random.Random(f"chaos:{seed}")
        lo, hi = window
        events = [
            KillEvent(
                time=round(rng.uniform(lo, hi), 6),
                worker_index=rng.randrange(workers),
                mode=rng.choice(modes),
                stall_duration=stall_duration,
                respawn_after=respawn_after,
            )
            for _ in range(kills)
        ]
        plan = FaultPlan(
            seed=seed,
            transient_failure_probability=transient_failure_probability,
            latency=latency,
        )
        return cls(seed, tuple(events), plan)

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "kills": [asdict(k) for k in self.kills],
            "fault_plan": asdict(self.fault_plan),
        }


_KILL_SPEC = re.compile(r"^\s*(\d+)\s*@\s*(\d+(?:\.\d*)?|\.\d+)\s*$")


def parse_kill_spec(text: str, *, workers: int, seed: int, mode: str = CRASH, stall_duration: float = 15.0) -> list[KillEvent]:
    """Parse ``"count@time,count@time"``; victims are picked from ``seed``."""
    rng = random.Random(f"kills:{seed}")
    out: list[KillEvent] = []
    if not text.strip():
        return out
    for part in text.split(","):
        m = _KILL_SPEC.match(part)
        if m is None:
            raise ValueError(f"bad kill spec {part!r}; expected COUNT@SECONDS")
        count, at = int(m.group(1)), float(m.group(2))
        if count > workers:
            raise ValueError(f"cannot kill {count} of {workers} workers at once")
        for index in rng.sample(range(workers), count):
            out.append(KillEvent(at, index, mode, stall_duration if mode == STALL else 0.0))
    return out
