from __future__ import annotations

import random

import pytest

from shardactor.harness import ChaosSchedule, ClientRequest
from shardactor.kv import FaultPlan
from shardactor.model import OUTBOX
from shardactor.scenarios import RunArtifacts, ScenarioSpec, arrival_times, run_scenario
from shardactor.scenarios.banking import BankingScenario, Transfer, replay_check
from shardactor.scenarios.hotel import BookRoom, HotelScenario


def failed(report):
    return [v.name for v in report.verdicts if not v.passed]


class TestSpec:
    @pytest.mark.parametrize(
        "kw",
        [
            {"name": "poker"},
            {"requests": -1},
            {"workers": 0},
            {"polling_interval": 0},
            {"arrival": "tidal"},
            {"accounts": 2, "banks": 3},
            {"worker_options": {"max_message_retries": 0}},
        ],
    )
    def test_rejects(self, kw):
        base = {"name": "banking", "requests": 1}
        with pytest.raises(ValueError):
            ScenarioSpec(**{**base, **kw})

    def test_to_dict_is_plain(self):
        import json

        spec = ScenarioSpec("hotel", 3, chaos=ChaosSchedule.generate(1, kills=1, workers=2, window=(0, 1)))
        json.dumps(spec.to_dict())

    @pytest.mark.parametrize("arrival", ["burst", "uniform", "paced"])
    def test_arrival_times(self, arrival):
        spec = ScenarioSpec("banking", 50, arrival=arrival, arrival_rate=10, polling_interval=0.1)
        times = arrival_times(spec, 50, random.Random(0))
        assert len(times) == 50 and min(times) >= 0
        if arrival == "burst":
            assert set(times) == {0.0}
        elif arrival == "uniform":
            assert times == sorted(times) and max(times) <= 5.0
        else:
            gaps = [b - a for a, b in zip(times, times[1:])]
            assert all(g > 0 for g in gaps)
            # stratified phases: one request per slice of the polling interval
            slices = sorted(int((t % 0.2) / 0.1 * 50) for t in times)
            assert slices == list(range(50))


class TestBanking:
    def test_single_account_zero_transfer(self):
        report = run_scenario(ScenarioSpec("banking", 1, accounts=1, banks=1, workers=1, polling_interval=0.1))
        assert report.passed, failed(report)
        assert report.completed == 1

    def test_zero_requests(self):
        report = run_scenario(ScenarioSpec("banking", 0, workers=1, polling_interval=0.1))
        assert report.passed and report.completed == 0 and report.samples == []

    def test_default_run_passes(self):
        report = run_scenario(ScenarioSpec("banking", 200, workers=2, polling_interval=0.1))
        assert report.passed, failed(report)
        assert report.completed == 200 and report.timeouts == []
        names = {v.name for v in report.verdicts}
        assert {"conservation", "replay_ledger", "outbox_exactly_once", "single_owner"} <= names

    def test_replay_catches_wrong_balances(self):
        keep: list[RunArtifacts] = []
        spec = ScenarioSpec("banking", 40, accounts=10, banks=2, workers=1, polling_interval=0.1)
        run_scenario(spec, keep=keep)
        scenario = BankingScenario(spec)
        requests = scenario.requests()
        opening = {n: b for n, (_, b) in scenario.accounts.items()}
        transfers = {r.correlation_id: r.payload for r in requests}
        store = keep[0].store
        snap = store.snapshot()
        final = scenario.final_balances(snap)
        assert replay_check(opening, transfers, final, snap, store.history, scenario.app).passed
        tampered = dict(final)
        some = next(iter(tampered))
        tampered[some] += 1
        assert not replay_check(opening, transfers, tampered, snap, store.history, scenario.app).passed
        missing = {k: v for k, v in snap.items() if k != OUTBOX}
        assert not replay_check(opening, transfers, final, missing, store.history, scenario.app).passed

    def test_overdraft_rejected(self):
        spec = ScenarioSpec("banking", 1, accounts=2, banks=1, workers=1, polling_interval=0.1)

        class Overdraft(BankingScenario):
            def requests(self):
                a, b = sorted(self.accounts)
                bank = self.accounts[a][0]
                return [ClientRequest("big", bank, Transfer("big", a, b, 10**6))]

        keep: list[RunArtifacts] = []
        report = run_scenario(spec, keep=keep, scenario=Overdraft(spec))
        assert report.passed, failed(report)
        reply = keep[0].client.app.decode_message(*_outbox(keep[0], "big"))
        assert not reply.accepted and reply.reason == "insufficient funds"


def _outbox(artifacts, cid):
    from shardactor.kv import ItemKey

    item = artifacts.store.get(OUTBOX, ItemKey(cid), faults=False)
    return item["type"], item["content"]


class TestHotel:
    def test_capacity_one_accepts_exactly_one(self):
        spec = ScenarioSpec("hotel", 2, users=2, hotels=1, workers=2, polling_interval=0.1, arrival="burst")

        class Contended(HotelScenario):
            def requests(self):
                hotel = self.hotels[0]
                return [
                    ClientRequest(f"bk-{i}", user, BookRoom(f"bk-{i}", hotel, "single", 3, 5))
                    for i, user in enumerate(self.users)
                ]

        keep: list[RunArtifacts] = []
        report = run_scenario(spec, keep=keep, scenario=Contended(spec, capacity={"single": 1, "double": 1, "suite": 1}))
        assert report.passed, failed(report)
        replies = [keep[0].client.app.decode_message(*_outbox(keep[0], f"bk-{i}")) for i in range(2)]
        assert sorted(r.accepted for r in replies) == [False, True]

    def test_default_run_passes(self):
        report = run_scenario(ScenarioSpec("hotel", 150, workers=2, polling_interval=0.1))
        assert report.passed, failed(report)
        assert {"room_capacity", "bookings_match"} <= {v.name for v in report.verdicts}

    def test_under_crash(self):
        chaos = ChaosSchedule.generate(
            4, kills=2, workers=3, window=(1.0, 4.0), transient_failure_probability=0.02, latency=(0.001, 0.004)
        )
        report = run_scenario(ScenarioSpec("hotel", 150, workers=3, polling_interval=0.1, chaos=chaos, arrival_rate=30))
        assert report.passed, failed(report)
        assert any(f.get("mode") in ("crash", "stall") and f.get("applied") for f in report.fault_log)


def test_same_seed_same_outcome():
    def go():
        chaos = ChaosSchedule.generate(
            11, kills=2, workers=2, window=(1.0, 3.0), transient_failure_probability=0.05, latency=(0.001, 0.003)
        )
        return run_scenario(ScenarioSpec("banking", 120, workers=2, polling_interval=0.1, chaos=chaos, seed=11))

    a, b = go(), go()
    assert [v.to_dict() for v in a.verdicts] == [v.to_dict() for v in b.verdicts]
    assert a.fault_log == b.fault_log
    assert [(s.correlation_id, s.latency_ms) for s in a.samples] == [(s.correlation_id, s.latency_ms) for s in b.samples]


def test_transient_faults_only():
    spec = ScenarioSpec(
        "banking", 150, workers=2, polling_interval=0.1, chaos=ChaosSchedule(3, (), FaultPlan(3, 0.1, (0.001, 0.003)))
    )
    report = run_scenario(spec)
    assert report.passed, failed(report)
    assert report.fault_log
