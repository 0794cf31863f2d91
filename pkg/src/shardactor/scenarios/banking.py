"""Transfers between accounts held by bank actors."""

from __future__ import annotations

import random
from collections import defaultdict
from dataclasses import dataclass
from typing import Sequence

from ..api import Actor, Application, MessageSender, QueryableCollection
from ..harness.client import ClientRequest
from ..harness.oracles import Verdict
from ..kv import Put
from ..model import (
    ACTOR_STATE,
    OUTBOX,
    ActorId,
    ActorStateRecord,
    CollectionItemRecord,
    ShardPolicy,
    collection_id,
    collection_table,
)

PARTITION = "bank"


@dataclass
class Account:
    number: str
    owner: str
    balance: int

    queryable = ("owner",)

    def item_id(self) -> str:
        return self.number

    def queryable_attributes(self) -> dict[str, str]:
        return {"owner": self.owner}


@dataclass
class Transfer:
    correlation_id: str
    source: str
    target: str
    amount: int


@dataclass
class TransferReply:
    correlation_id: str
    accepted: bool
    reason: str = ""


class Bank(Actor):
    accounts = QueryableCollection(Account)
    sender = MessageSender()

    def __init__(self, name: str) -> None:
        self.name = name
        self.applied = 0
        self.rejected = 0

    def receive(self, message: Transfer) -> None:
        src = self.accounts.get(message.source)
        dst = self.accounts.get(message.target)
        if message.amount < 0:
            reply = TransferReply(message.correlation_id, False, "negative amount")
        elif src.balance < message.amount:
            reply = TransferReply(message.correlation_id, False, "insufficient funds")
        else:
            src.balance -= message.amount
            dst.balance += message.amount
            self.accounts.put(src)
            self.accounts.put(dst)
            reply = TransferReply(message.correlation_id, True)
        if reply.accepted:
            self.applied += 1
        else:
            self.rejected += 1
        self.sender.tell_external(reply, message.correlation_id)


def make_app(shards: int = 16) -> Application:
    return Application(
        actors=[Bank],
        messages=[Transfer, TransferReply],
        items=[Account],
        policies={PARTITION: ShardPolicy(bucket_count=shards)},
    )


class BankingScenario:
    def __init__(self, spec) -> None:
        self.spec = spec
        self.app = make_app(spec.shards_per_partition)
        rng = random.Random(f"banking:{spec.seed}")
        self.bank_ids = [self.app.actor_id(PARTITION, f"b{i:03d}") for i in range(spec.banks)]
        # account -> (bank, opening balance)
        self.accounts: dict[str, tuple[ActorId, int]] = {}
        for n in range(spec.accounts):
            bank = self.bank_ids[n % spec.banks]
            self.accounts[f"acc-{n:05d}"] = (bank, rng.randint(100, 1000))
        self._rng = rng

    @property
    def table(self) -> str:
        return collection_table(Bank.type_tag, "accounts")

    def bootstrap(self, store) -> None:
        for bank_id in self.bank_ids:
            bank = Bank(bank_id.instance_id)
            tag, blob = self.app.encode_state(bank)
            store.write(Put(ACTOR_STATE, ActorStateRecord(bank_id, tag, blob).to_item()), faults=False)
        for number, (bank_id, balance) in self.accounts.items():
            acct = Account(number, f"owner-{number[-3:]}", balance)
            tag, blob = self.app.registry.dumps(acct)
            rec = CollectionItemRecord(collection_id(bank_id, "accounts"), number, blob, acct.queryable_attributes(), tag)
            store.write(Put(self.table, rec.to_item()), faults=False)

    def requests(self) -> list[ClientRequest]:
        by_bank: dict[ActorId, list[str]] = defaultdict(list)
        for number, (bank_id, _) in self.accounts.items():
            by_bank[bank_id].append(number)
        out = []
        for i in range(self.spec.requests):
            bank_id = self._rng.choice(self.bank_ids)
            numbers = by_bank[bank_id]
            src, dst = self._rng.choice(numbers), self._rng.choice(numbers)
            amount = self._rng.randint(0, 300)
            cid = f"tx-{i:06d}"
            out.append(ClientRequest(cid, bank_id, Transfer(cid, src, dst, amount)))
        return out

    def final_balances(self, snapshot) -> dict[str, int]:
        out = {}
        for item in snapshot.get(self.table, ()):
            acct = self.app.registry.loads(item["type"], item["payload"])
            out[acct.number] = acct.balance
        return out

    def oracles(self, requests: Sequence[ClientRequest]):
        opening = {n: b for n, (_, b) in self.accounts.items()}
        transfers = {r.correlation_id: r.payload for r in requests}

        def conservation(snapshot, history) -> Verdict:
            final = self.final_balances(snapshot)
            bad = []
            if set(final) != set(opening):
                bad.append(f"account set changed: {len(final)} vs {len(opening)}")
            before, after = sum(opening.values()), sum(final.values())
            if before != after:
                bad.append(f"total balance {before} -> {after}")
            return Verdict.of("conservation", bad, f"total {before}")

        def replay_ledger(snapshot, history) -> Verdict:
            return replay_check(opening, transfers, self.final_balances(snapshot), snapshot, history, self.app)

        return [conservation, replay_ledger]


def replay_check(opening, transfers, final, snapshot, history, app) -> Verdict:
    """Re-run every answered transfer serially in commit order and compare the
    outcome of each, and the final balances, with what the system produced."""
    replies = {}
    for item in snapshot.get(OUTBOX, ()):
        replies[item.key.partition_key] = app.decode_message(item["type"], item["content"])
    order = []
    for rec in history:
        tag = rec.tag
        if isinstance(tag, dict) and tag.get("kind") == "commit":
            order.extend(c for c in tag.get("outbox", ()) if c in transfers)
    balances = dict(opening)
    bad = []
    seen = set()
    for cid in order:
        if cid in seen:
            bad.append(f"{cid}: committed twice")
            continue
        seen.add(cid)
        t = transfers[cid]
        ok = 0 <= t.amount <= balances[t.source]
        if ok:
            balances[t.source] -= t.amount
            balances[t.target] += t.amount
        reply = replies.get(cid)
        if reply is None:
            bad.append(f"{cid}: no reply")
        elif reply.accepted != ok:
            bad.append(f"{cid}: replied accepted={reply.accepted}, serial replay says {ok}")
    for cid in sorted(set(transfers) - seen):
        bad.append(f"{cid}: never committed")
    for number in sorted(balances):
        if final.get(number) != balances[number]:
            bad.append(f"{number}: balance {final.get(number)}, replay expects {balances[number]}")
    return Verdict.of("replay_ledger", bad, f"{len(order)} committed transfers")
