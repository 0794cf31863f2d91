"""Post-run correctness checks.

Every oracle is a pure function of a store snapshot and/or the committed
transaction history, so rerunning one over the same inputs gives the same
verdict.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

from ..kv import CommitRecord, Delete, Item, Put, Update
from ..model import ACTOR_INBOX, ACTOR_TASK, DEAD_LETTER, OUTBOX

Snapshot = Mapping[str, Sequence[Item]]
MAX_LISTED = 20


@dataclass(frozen=True)
class Verdict:
    name: str
    passed: bool
    detail: str = ""
    violations: tuple[str, ...] = field(default_factory=tuple)

    @classmethod
    def of(cls, name: str, violations: Iterable[str], detail: str = "") -> Verdict:
        found = list(violations)
        if found and not detail:
            detail = f"{len(found)} violation(s)"
        return cls(name, not found, detail, tuple(found[:MAX_LISTED]))

    def to_dict(self) -> dict:
        return {"name": self.name, "passed": self.passed, "detail": self.detail, "violations": list(self.violations)}


def _actions(history: Sequence[CommitRecord]):
    for rec in history:
        for action in rec.actions:
            yield rec, action


def outbox_exactly_once(snapshot: Snapshot, history: Sequence[CommitRecord], correlation_ids: Iterable[str]) -> Verdict:
    """Each request has one Outbox record, written by exactly one commit."""
    expected = set(correlation_ids)
    present = Counter(item.key.partition_key for item in snapshot.get(OUTBOX, ()))
    writes = Counter(a.key.partition_key for _, a in _actions(history) if isinstance(a, Put) and a.table == OUTBOX)
    bad = []
    for cid in sorted(expected):
        if present[cid] != 1:
            bad.append(f"{cid}: {present[cid]} outbox records")
        if writes[cid] != 1:
            bad.append(f"{cid}: written by {writes[cid]} commits")
    for cid in sorted(set(present) - expected):
        bad.append(f"{cid}: unexpected outbox record")
    return Verdict.of("outbox_exactly_once", bad, f"{len(expected)} correlation ids")


def consumed_exactly_once(history: Sequence[CommitRecord]) -> Verdict:
    """Every envelope put into an inbox is deleted by exactly one commit."""
    puts: Counter = Counter()
    deletes: Counter = Counter()
    for _, a in _actions(history):
        if a.table != ACTOR_INBOX:
            continue
        key = (a.key.partition_key, a.key.sort_key)
        if isinstance(a, Put):
            puts[key] += 1
        elif isinstance(a, Delete):
            deletes[key] += 1
    bad = []
    for key in sorted(set(puts) | set(deletes)):
        if puts[key] != 1 or deletes[key] != 1:
            bad.append(f"{key[0]} {key[1]}: put {puts[key]}x, consumed {deletes[key]}x")
    return Verdict.of("consumed_exactly_once", bad, f"{len(puts)} envelopes")


def quiescence(snapshot: Snapshot) -> Verdict:
    bad = [f"task record left for {i.key.partition_key}" for i in snapshot.get(ACTOR_TASK, ())]
    bad += [f"envelope left in {i.key.partition_key}: {i.key.sort_key}" for i in snapshot.get(ACTOR_INBOX, ())]
    return Verdict.of("quiescence", bad)


def no_dead_letters(snapshot: Snapshot) -> Verdict:
    bad = [f"{i.key.partition_key} {i.key.sort_key}: {i.get('reason')}" for i in snapshot.get(DEAD_LETTER, ())]
    return Verdict.of("no_dead_letters", bad)


def _consumptions(history: Sequence[CommitRecord]):
    for rec in history:
        tag = rec.tag
        if isinstance(tag, dict) and tag.get("kind") in ("commit", "dead_letter"):
            yield rec, tag


def fifo_per_channel(history: Sequence[CommitRecord]) -> Verdict:
    """Per (sender, receiver) pair, messages are consumed in send order."""
    last: dict[tuple[str, str], int] = {}
    bad = []
    for rec, tag in _consumptions(history):
        channel = (tag["sender"], tag["receiver"])
        ts = tag["timestamp"]
        prev = last.get(channel)
        if prev is not None and ts <= prev:
            bad.append(f"{channel[0]} -> {channel[1]}: {ts} consumed after {prev} (seq {rec.seq})")
        last[channel] = ts
    return Verdict.of("fifo_per_channel", bad, f"{len(last)} channels")


def single_owner(history: Sequence[CommitRecord]) -> Verdict:
    """Every consuming commit was made under the shard's ownership epoch current
    at that point of the history, and no epoch token was ever issued twice."""
    current: dict[str, str | None] = {}
    issued: dict[str, str] = {}
    bad = []
    commits = 0
    for rec in history:
        tag = rec.tag
        if isinstance(tag, dict) and tag.get("kind") in ("commit", "dead_letter"):
            commits += 1
            shard = tag["shard"]
            if current.get(shard) != tag["token"]:
                bad.append(
                    f"seq {rec.seq}: {tag['worker']} committed on {shard} under epoch {tag['token']}, "
                    f"current epoch {current.get(shard)}"
                )
        for a in rec.actions:
            if a.table != ACTOR_TASK:
                continue
            shard = a.key.partition_key
            if isinstance(a, Delete):
                current[shard] = None
            elif isinstance(a, Update) and "owner_token" in a.set:
                token = a.set["owner_token"]
                current[shard] = token
                if token is not None:
                    if token in issued:
                        bad.append(f"seq {rec.seq}: epoch {token} issued twice ({issued[token]}, {shard})")
                    issued[token] = shard
    return Verdict.of("single_owner", bad, f"{commits} consuming commits")


ScenarioOracle = Callable[[Snapshot, Sequence[CommitRecord]], Verdict]


def run_oracles(
    snapshot: Snapshot,
    history: Sequence[CommitRecord],
    *,
    correlation_ids: Iterable[str],
    scenario_oracles: Iterable[ScenarioOracle] = (),
    expect_dead_letters: bool = False,
) -> list[Verdict]:
    verdicts = [
        outbox_exactly_once(snapshot, history, correlation_ids),
        consumed_exactly_once(history),
        quiescence(snapshot),
        fifo_per_channel(history),
        single_owner(history),
    ]
    if not expect_dead_letters:
        verdicts.append(no_dead_letters(snapshot))
    verdicts.extend(oracle(snapshot, history) for oracle in scenario_oracles)
    return verdicts
