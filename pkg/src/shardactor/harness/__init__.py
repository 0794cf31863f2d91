"""Test and experiment infrastructure around the runtime."""

from .chaos import CRASH, STALL, ChaosSchedule, KillEvent, parse_kill_spec
from .client import Client, ClientRequest, Injection, Timeout
from .cluster import Cluster
from .oracles import (
    Verdict,
    consumed_exactly_once,
    fifo_per_channel,
    no_dead_letters,
    outbox_exactly_once,
    quiescence,
    run_oracles,
    single_owner,
)
from .report import LatencySample, RunReport, percentile

__all__ = [
    "CRASH",
    "STALL",
    "ChaosSchedule",
    "Client",
    "ClientRequest",
    "Cluster",
    "Injection",
    "KillEvent",
    "LatencySample",
    "RunReport",
    "Timeout",
    "Verdict",
    "consumed_exactly_once",
    "fifo_per_channel",
    "no_dead_letters",
    "outbox_exactly_once",
    "parse_kill_spec",
    "percentile",
    "quiescence",
    "run_oracles",
    "single_owner",
]
