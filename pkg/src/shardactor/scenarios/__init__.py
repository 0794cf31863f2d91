"""Benchmark workloads: bank transfers and hotel bookings."""

from .base import ARRIVALS, SCENARIOS, RunArtifacts, ScenarioSpec, arrival_times, build_scenario, run_scenario

__all__ = ["ARRIVALS", "SCENARIOS", "RunArtifacts", "ScenarioSpec", "arrival_times", "build_scenario", "run_scenario"]
