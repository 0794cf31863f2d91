"""Room booking: user -> hotel -> user -> outbox."""

from __future__ import annotations

import random
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from typing import Sequence

from ..api import Actor, Application, MessageSender, QueryableCollection
from ..harness.client import ClientRequest
from ..harness.oracles import Verdict
from ..kv import Put
from ..model import ACTOR_STATE, OUTBOX, ActorId, ActorStateRecord, ShardPolicy, collection_table

USERS = "user"
HOTELS = "hotel"
ROOM_TYPES = ("single", "double", "suite")
HORIZON_DAYS = 30


@dataclass
class Reservation:
    reservation_id: str
    user: str
    room_type: str
    first_day: int
    last_day: int  # inclusive

    queryable = ("room_type",)

    def item_id(self) -> str:
        return self.reservation_id

    def queryable_attributes(self) -> dict[str, str]:
        return {"room_type": self.room_type}

    def days(self) -> range:
        return range(self.first_day, self.last_day + 1)


@dataclass
class BookRoom:
    """Client request to a user actor."""

    correlation_id: str
    hotel: ActorId
    room_type: str
    first_day: int
    last_day: int


@dataclass
class ReserveRoom:
    correlation_id: str
    user: ActorId
    room_type: str
    first_day: int
    last_day: int


@dataclass
class ReservationDecision:
    correlation_id: str
    hotel: ActorId
    accepted: bool


@dataclass
class BookingResult:
    correlation_id: str
    hotel: str
    accepted: bool


class Hotel(Actor):
    reservations = QueryableCollection(Reservation)
    sender = MessageSender()

    def __init__(self, name: str, capacity: dict[str, int]) -> None:
        self.name = name
        self.capacity = capacity
        self.accepted = 0
        self.rejected = 0

    def receive(self, message: ReserveRoom) -> None:
        booked = Counter()
        for r in self.reservations.find("room_type", message.room_type):
            booked.update(r.days())
        rooms = self.capacity.get(message.room_type, 0)
        wanted = range(message.first_day, message.last_day + 1)
        ok = all(booked[d] < rooms for d in wanted)
        if ok:
            self.reservations.put(
                Reservation(message.correlation_id, str(message.user), message.room_type, message.first_day, message.last_day)
            )
            self.accepted += 1
        else:
            self.rejected += 1
        self.sender.tell(ReservationDecision(message.correlation_id, self.id, ok), message.user)


class User(Actor):
    sender = MessageSender()

    def __init__(self, name: str) -> None:
        self.name = name
        self.pending: list[str] = []
        self.confirmed: list[str] = []
        self.declined: list[str] = []

    def receive(self, message) -> None:
        if isinstance(message, BookRoom):
            self.pending.append(message.correlation_id)
            self.sender.tell(
                ReserveRoom(message.correlation_id, self.id, message.room_type, message.first_day, message.last_day),
                message.hotel,
            )
        elif isinstance(message, ReservationDecision):
            self.pending.remove(message.correlation_id)
            (self.confirmed if message.accepted else self.declined).append(message.correlation_id)
            self.sender.tell_external(
                BookingResult(message.correlation_id, str(message.hotel), message.accepted), message.correlation_id
            )
        else:
            raise TypeError(f"unexpected message {type(message).__name__}")


def make_app(shards: int = 16) -> Application:
    policy = ShardPolicy(bucket_count=shards)
    return Application(
        actors=[Hotel, User],
        messages=[BookRoom, ReserveRoom, ReservationDecision, BookingResult],
        items=[Reservation],
        policies={USERS: policy, HOTELS: policy},
    )


@dataclass
class HotelSetup:
    capacity: dict[ActorId, dict[str, int]] = field(default_factory=dict)
    users: list[ActorId] = field(default_factory=list)


class HotelScenario:
    def __init__(self, spec, *, capacity: dict[str, int] | None = None) -> None:
        self.spec = spec
        self.app = make_app(spec.shards_per_partition)
        self._rng = random.Random(f"hotel:{spec.seed}")
        self.users = [self.app.actor_id(USERS, f"u{i:03d}") for i in range(spec.users)]
        self.hotels = [self.app.actor_id(HOTELS, f"h{i:03d}") for i in range(spec.hotels)]
        self.capacity = {
            h: dict(capacity) if capacity is not None else {rt: self._rng.randint(1, 4) for rt in ROOM_TYPES}
            for h in self.hotels
        }
        self.table = collection_table(Hotel.type_tag, "reservations")

    def bootstrap(self, store) -> None:
        actors: list[tuple[ActorId, Actor]] = [(u, User(u.instance_id)) for u in self.users]
        actors += [(h, Hotel(h.instance_id, self.capacity[h])) for h in self.hotels]
        for actor_id, actor in actors:
            tag, blob = self.app.encode_state(actor)
            store.write(Put(ACTOR_STATE, ActorStateRecord(actor_id, tag, blob).to_item()), faults=False)

    def requests(self) -> list[ClientRequest]:
        out = []
        for i in range(self.spec.requests):
            user = self._rng.choice(self.users)
            hotel = self._rng.choice(self.hotels)
            first = self._rng.randrange(HORIZON_DAYS)
            last = min(HORIZON_DAYS - 1, first + self._rng.randrange(4))
            cid = f"bk-{i:06d}"
            out.append(ClientRequest(cid, user, BookRoom(cid, hotel, self._rng.choice(ROOM_TYPES), first, last)))
        return out

    def stored_reservations(self, snapshot) -> dict[str, list[Reservation]]:
        by_hotel: dict[str, list[Reservation]] = defaultdict(list)
        for item in snapshot.get(self.table, ()):
            hotel = item.key.partition_key.split("#", 1)[0]
            by_hotel[hotel].append(self.app.registry.loads(item["type"], item["payload"]))
        return by_hotel

    def actor_states(self, snapshot) -> dict[str, Actor]:
        out = {}
        for item in snapshot.get(ACTOR_STATE, ()):
            actor_id = ActorId.parse(item.key.partition_key)
            out[str(actor_id)] = self.app.decode_state(item["type"], item["current_state"], actor_id)
        return out

    def oracles(self, requests: Sequence[ClientRequest]):
        booked = {r.correlation_id: r for r in requests}
        capacity = {str(h): c for h, c in self.capacity.items()}

        def room_capacity(snapshot, history) -> Verdict:
            bad = []
            for hotel, reservations in sorted(self.stored_reservations(snapshot).items()):
                usage = Counter()
                for r in reservations:
                    for d in r.days():
                        usage[(r.room_type, d)] += 1
                for (room_type, day), n in sorted(usage.items()):
                    if n > capacity[hotel].get(room_type, 0):
                        bad.append(f"{hotel} {room_type} day {day}: {n} > {capacity[hotel].get(room_type, 0)}")
            return Verdict.of("room_capacity", bad)

        def bookings_match(snapshot, history) -> Verdict:
            """Accepted replies, stored reservations and user ledgers agree."""
            replies = {
                i.key.partition_key: self.app.decode_message(i["type"], i["content"]) for i in snapshot.get(OUTBOX, ())
            }
            stored = {
                r.reservation_id: (hotel, r) for hotel, rs in self.stored_reservations(snapshot).items() for r in rs
            }
            states = self.actor_states(snapshot)
            bad = []
            for cid, req in sorted(booked.items()):
                reply = replies.get(cid)
                if reply is None:
                    bad.append(f"{cid}: no reply")
                    continue
                want = req.payload
                if reply.hotel != str(want.hotel):
                    bad.append(f"{cid}: answered by {reply.hotel}, asked {want.hotel}")
                if reply.accepted != (cid in stored):
                    bad.append(f"{cid}: accepted={reply.accepted} but stored={cid in stored}")
                if cid in stored:
                    hotel, r = stored[cid]
                    if (hotel, r.room_type, r.first_day, r.last_day, r.user) != (
                        str(want.hotel), want.room_type, want.first_day, want.last_day, str(req.target)
                    ):
                        bad.append(f"{cid}: stored reservation differs from request")
                user = states[str(req.target)]
                ledger = user.confirmed if reply.accepted else user.declined
                if ledger.count(cid) != 1:
                    bad.append(f"{cid}: appears {ledger.count(cid)}x in user ledger")
            for uid in map(str, self.users):
                if states[uid].pending:
                    bad.append(f"{uid}: {len(states[uid].pending)} bookings still pending")
            for cid in sorted(set(stored) - set(booked)):
                bad.append(f"{cid}: reservation without request")
            return Verdict.of("bookings_match", bad, f"{len(booked)} requests")

        return [room_capacity, bookings_match]
