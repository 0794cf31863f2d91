"""Run metrics: latency samples, throughput series, verdicts, fault log."""

from __future__ import annotations

import json
import math
import statistics
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable

from .oracles import Verdict


@dataclass(frozen=True)
class LatencySample:
    correlation_id: str
    inject_ms: int
    response_ms: int
    # first hop processing start, epoch ms; None if never observed
    started_ms: float | None = None

    @property
    def latency_ms(self) -> int:
        return self.response_ms - self.inject_ms

    @property
    def polling_wait_ms(self) -> float | None:
        return None if self.started_ms is None else self.started_ms - self.inject_ms

    @property
    def from_start_ms(self) -> float | None:
        return None if self.started_ms is None else self.response_ms - self.started_ms


def percentile(values: list[float], q: float) -> float:
    """Nearest-rank percentile."""
    if not values:
        return math.nan
    ordered = sorted(values)
    rank = max(1, math.ceil(q / 100 * len(ordered)))
    return ordered[rank - 1]


def _stats(values: list[float]) -> dict[str, float]:
    if not values:
        return {"count": 0, "mean": math.nan, "median": math.nan, "p95": math.nan}
    return {
        "count": len(values),
        "mean": statistics.fmean(values),
        "median": statistics.median(values),
        "p95": percentile(values, 95),
    }


@dataclass
class RunReport:
    scenario: str
    seed: int
    config: dict[str, Any] = field(default_factory=dict)
    samples: list[LatencySample] = field(default_factory=list)
    verdicts: list[Verdict] = field(default_factory=list)
    fault_log: list[dict[str, Any]] = field(default_factory=list)
    requests: int = 0
    timeouts: list[str] = field(default_factory=list)
    makespan_s: float = 0.0
    extra: dict[str, Any] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(v.passed for v in self.verdicts)

    @property
    def completed(self) -> int:
        return len(self.samples)

    def latencies(self) -> list[float]:
        return [s.latency_ms for s in self.samples]

    def throughput_series(self, bucket_s: float = 1.0) -> list[tuple[float, int]]:
        """(bucket start, responses completed in bucket), relative to the first injection."""
        if not self.samples:
            return []
        origin = min(s.inject_ms for s in self.samples)
        width = bucket_s * 1000
        counts = Counter(int((s.response_ms - origin) // width) for s in self.samples)
        last = max(counts)
        return [(b * bucket_s, counts.get(b, 0)) for b in range(last + 1)]

    def throughput(self) -> float:
        """Completed requests per second between first injection and last response."""
        if not self.samples:
            return 0.0
        span = (max(s.response_ms for s in self.samples) - min(s.inject_ms for s in self.samples)) / 1000
        return len(self.samples) / span if span > 0 else math.inf

    def summary(self) -> dict[str, Any]:
        waits = [s.polling_wait_ms for s in self.samples if s.polling_wait_ms is not None]
        from_start = [s.from_start_ms for s in self.samples if s.from_start_ms is not None]
        return {
            "scenario": self.scenario,
            "seed": self.seed,
            "requests": self.requests,
            "completed": self.completed,
            "timeouts": len(self.timeouts),
            "latency_ms": _stats(self.latencies()),
            "polling_wait_ms": _stats(waits),
            "latency_from_start_ms": _stats(from_start),
            "throughput_rps": self.throughput(),
            "makespan_s": self.makespan_s,
            "passed": self.passed,
            "failed_oracles": [v.name for v in self.verdicts if not v.passed],
        }

    def records(self) -> Iterable[dict[str, Any]]:
        yield {"record": "config", "scenario": self.scenario, "seed": self.seed, **self.config}
        for s in self.samples:
            yield {
                "record": "sample",
                "correlation_id": s.correlation_id,
                "inject_ms": s.inject_ms,
                "response_ms": s.response_ms,
                "latency_ms": s.latency_ms,
                "polling_wait_ms": s.polling_wait_ms,
            }
        for start, count in self.throughput_series():
            yield {"record": "throughput", "bucket_start_s": start, "completed": count}
        for v in self.verdicts:
            yield {"record": "verdict", **v.to_dict()}
        for f in self.fault_log:
            yield {"record": "fault", **f}
        yield {"record": "summary", **self.summary()}

    def to_jsonl(self) -> str:
        return "\n".join(json.dumps(r, sort_keys=True, default=str) for r in self.records()) + "\n"

    def write(self, path: str | Path) -> None:
        Path(path).write_text(self.to_jsonl())

    def summary_table(self) -> str:
        s = self.summary()
        lat, wait = s["latency_ms"], s["polling_wait_ms"]
        rows = [
            ("scenario", f"{self.scenario} (seed {self.seed})"),
            ("requests", f"{s['completed']}/{s['requests']} completed"),
            ("latency mean", f"{lat['mean']:.1f} ms"),
            ("latency median", f"{lat['median']:.1f} ms"),
            ("latency p95", f"{lat['p95']:.1f} ms"),
            ("polling wait mean", f"{wait['mean']:.1f} ms"),
            ("throughput", f"{s['throughput_rps']:.2f} req/s"),
        ]
        rows += [(f"oracle {v.name}", "pass" if v.passed else f"FAIL {v.detail}") for v in self.verdicts]
        width = max(len(k) for k, _ in rows)
        return "\n".join(f"{k:<{width}}  {v}" for k, v in rows)
