"""Time sources: the real clock and a virtual-time asyncio loop.

The virtual loop never sleeps.  Whenever every task is waiting on a timer it
jumps straight to the earliest deadline, so a run that spans minutes of
simulated time finishes in however long the Python code takes, and always
interleaves tasks in the same order.
"""

from __future__ import annotations

import asyncio
import selectors
import time
from collections.abc import Awaitable
from typing import Any, TypeVar

T = TypeVar("T")

# fixed epoch for simulated runs: 2023-11-14T22:13:20Z
VIRTUAL_EPOCH = 1_700_000_000.0


class _VirtualSelector(selectors.BaseSelector):
    def __init__(self, loop: VirtualTimeLoop) -> None:
        self._loop = loop
        self._inner = selectors.DefaultSelector()

    def register(self, fileobj, events, data=None):
        return self._inner.register(fileobj, events, data)

    def unregister(self, fileobj):
        return self._inner.unregister(fileobj)

    def modify(self, fileobj, events, data=None):
        return self._inner.modify(fileobj, events, data)

    def get_map(self):
        return self._inner.get_map()

    def close(self) -> None:
        self._inner.close()

    def select(self, timeout: float | None = None):
        if timeout is None:
            # nothing scheduled: only another thread can wake us
            return self._inner.select(None)
        ready = self._inner.select(0)
        if not ready and timeout > 0:
            self._loop.advance(timeout)
        return ready


class VirtualTimeLoop(asyncio.SelectorEventLoop):
    def __init__(self, start: float = 0.0) -> None:
        self._virtual_now = start
        super().__init__(selector=_VirtualSelector(self))

    def time(self) -> float:
        return self._virtual_now

    def advance(self, seconds: float) -> None:
        self._virtual_now += seconds


class Clock:
    """Wall-clock view of an event loop's monotonic time."""

    def __init__(self, loop: asyncio.AbstractEventLoop, epoch: float | None = None) -> None:
        self.loop = loop
        if epoch is None:
            epoch = VIRTUAL_EPOCH if isinstance(loop, VirtualTimeLoop) else time.time() - loop.time()
        self.epoch = epoch

    @property
    def virtual(self) -> bool:
        return isinstance(self.loop, VirtualTimeLoop)

    def now(self) -> float:
        return self.epoch + self.loop.time()

    def now_ms(self) -> int:
        return int(self.now() * 1000)

    def monotonic(self) -> float:
        return self.loop.time()

    async def sleep(self, seconds: float) -> None:
        await asyncio.sleep(max(0.0, seconds))


def new_loop(fake_clock: bool) -> asyncio.AbstractEventLoop:
    return VirtualTimeLoop() if fake_clock else asyncio.new_event_loop()


def run(main: Awaitable[T], *, fake_clock: bool = False) -> T:
    """Run a coroutine to completion on a fresh real or virtual loop."""
    loop = new_loop(fake_clock)
    try:
        asyncio.set_event_loop(loop)
        return loop.run_until_complete(main)
    finally:
        _cancel_leftovers(loop)
        asyncio.set_event_loop(None)
        loop.close()


def _cancel_leftovers(loop: asyncio.AbstractEventLoop) -> None:
    pending: Any = [t for t in asyncio.all_tasks(loop) if not t.done()]
    for task in pending:
        task.cancel()
    if pending:
        loop.run_until_complete(asyncio.gather(*pending, return_exceptions=True))
