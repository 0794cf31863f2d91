"""Transactional key-value store emulation."""

from .faults import FaultDecision, FaultInjector, FaultPlan
from .store import *  # noqa: F401,F403
from .store import __all__ as _store_all

__all__ = ["FaultDecision", "FaultInjector", "FaultPlan", *_store_all]
