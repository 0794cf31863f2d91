"""Seeded fault injection for the key-value store."""

from __future__ import annotations

import random
import threading
from dataclasses import dataclass, field


@dataclass(frozen=True)
class FaultPlan:
    seed: int = 0
    transient_failure_probability: float = 0.0
    latency: tuple[float, float] = (0.0, 0.0)
    enabled: bool = True

    def __post_init__(self) -> None:
        if not 0.0 <= self.transient_failure_probability <= 1.0:
            raise ValueError("transient_failure_probability must be in [0, 1]")
        lo, hi = self.latency
        if lo < 0 or hi < lo:
            raise ValueError(f"invalid latency range {self.latency!r}")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be an unsigned 64-bit integer")


@dataclass(frozen=True)
class FaultDecision:
    latency: float
    fail: bool


NO_FAULT = FaultDecision(0.0, False)


@dataclass
class FaultInjector:
    """Draws per-operation fault decisions from a seeded stream.

    Decisions depend only on the plan seed and the order of calls, so the same
    operation sequence sees the same failures.
    """

    plan: FaultPlan
    _rng: random.Random = field(init=False, repr=False)
    _lock: threading.Lock = field(init=False, repr=False, default_factory=threading.Lock)
    log: list[tuple[int, str]] = field(init=False, default_factory=list)
    _count: int = field(init=False, default=0)

    def __post_init__(self) -> None:
        self._rng = random.Random(self.plan.seed)

    def decide(self, op: str, *, can_fail: bool = True) -> FaultDecision:
        if not self.plan.enabled:
            return NO_FAULT
        with self._lock:
            self._count += 1
            lo, hi = self.plan.latency
            latency = self._rng.uniform(lo, hi) if hi > 0 else 0.0
            roll = self._rng.random()
            fail = can_fail and roll < self.plan.transient_failure_probability
            if fail:
                self.log.append((self._count, op))
            return FaultDecision(latency, fail)
