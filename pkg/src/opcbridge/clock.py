"""Clocks and periodic activities.

Every timing-sensitive component takes a :class:`Clock`.  Production code uses
:class:`RealClock`; tests drive the very same components with
:class:`SimClock`, a discrete-event scheduler whose time only moves when the
next scheduled event is due, so a simulated second costs microseconds.

An *activity* is a step function ``step(now_ms) -> next_wake_ms | None``.
Returning ``None`` ends the activity.
"""

from __future__ import annotations

import heapq
import itertools
import logging
import threading
import time
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import Callable, Optional

logger = logging.getLogger(__name__)

Step = Callable[[int], Optional[int]]


class Activity:
    """Handle on a spawned activity."""

    def __init__(self, name: str) -> None:
        self.name = name
        self._cancelled = threading.Event()
        self._finished = threading.Event()

    def cancel(self) -> None:
        self._cancelled.set()

    @property
    def cancelled(self) -> bool:
        return self._cancelled.is_set()

    @property
    def done(self) -> bool:
        return self._finished.is_set() or self._cancelled.is_set()

    def _finish(self) -> None:
        self._finished.set()


class Clock(ABC):
    @abstractmethod
    def now_ms(self) -> int:
        """Current time in milliseconds."""

    @abstractmethod
    def sleep_until(self, t_ms: int) -> None:
        """Block the calling activity until ``t_ms``."""

    @abstractmethod
    def spawn(self, step: Step, start_ms: int | None = None, name: str = "activity",
              priority: int = 0) -> Activity:
        """Run ``step`` first at ``start_ms`` (default: now), then at each returned time."""


class RealClock(Clock):
    """Wall clock in milliseconds since the Unix epoch, never running backwards."""

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self._last = 0

    def now_ms(self) -> int:
        with self._lock:
            self._last = max(self._last, time.time_ns() // 1_000_000)
            return self._last

    def sleep_until(self, t_ms: int) -> None:
        delay = t_ms - self.now_ms()
        if delay > 0:
            time.sleep(delay / 1000.0)

    def spawn(self, step: Step, start_ms: int | None = None, name: str = "activity",
              priority: int = 0) -> Activity:
        activity = Activity(name)
        wake = self.now_ms() if start_ms is None else start_ms

        def loop() -> None:
            nxt: int | None = wake
            try:
                while nxt is not None:
                    delay = nxt - self.now_ms()
                    if delay > 0 and activity._cancelled.wait(delay / 1000.0):
                        break
                    if activity.cancelled:
                        break
                    nxt = step(self.now_ms())
            except Exception:
                logger.exception("activity %s crashed", name)
            finally:
                activity._finish()

        threading.Thread(target=loop, name=name, daemon=True).start()
        return activity


@dataclass(order=True)
class _Event:
    t_ms: int
    priority: int
    seq: int
    callback: Callable[[], None] = field(compare=False)
    activity: Optional[Activity] = field(compare=False, default=None)


class SimClock(Clock):
    """Deterministic discrete-event clock.

    Events at the same instant run by ``(priority, submission order)``; lower
    priority first.  ``sleep_until`` and ``run_until`` process every event due
    up to the target and then leave the clock at the target.
    """

    def __init__(self, start_ms: int = 0) -> None:
        if start_ms < 0:
            raise ValueError("start_ms must be non-negative")
        self._now = start_ms
        self._queue: list[_Event] = []
        self._seq = itertools.count()
        self._lock = threading.RLock()
        self._running = False

    def now_ms(self) -> int:
        return self._now

    def call_at(self, t_ms: int, callback: Callable[[], None], priority: int = 0) -> Activity:
        activity = Activity(getattr(callback, "__name__", "event"))
        self._push(t_ms, priority, callback, activity)
        return activity

    def _push(self, t_ms: int, priority: int, callback: Callable[[], None],
              activity: Activity | None) -> None:
        with self._lock:
            if t_ms < self._now:
                raise ValueError(f"cannot schedule at {t_ms} before now={self._now}")
            heapq.heappush(self._queue, _Event(t_ms, priority, next(self._seq), callback, activity))

    def spawn(self, step: Step, start_ms: int | None = None, name: str = "activity",
              priority: int = 0) -> Activity:
        activity = Activity(name)

        def fire() -> None:
            nxt = step(self._now)
            if nxt is None or activity.cancelled:
                activity._finish()
                return
            self._push(max(nxt, self._now), priority, fire, activity)

        self._push(self._now if start_ms is None else start_ms, priority, fire, activity)
        return activity

    @property
    def pending(self) -> int:
        with self._lock:
            return sum(1 for e in self._queue if not (e.activity and e.activity.cancelled))

    def next_event_ms(self) -> int | None:
        with self._lock:
            while self._queue and self._queue[0].activity and self._queue[0].activity.cancelled:
                heapq.heappop(self._queue)
            return self._queue[0].t_ms if self._queue else None

    def run_until(self, t_end: int) -> None:
        if self._running:
            raise RuntimeError("SimClock.run_until is not reentrant")
        self._running = True
        try:
            while True:
                with self._lock:
                    if not self._queue or self._queue[0].t_ms > t_end:
                        break
                    event = heapq.heappop(self._queue)
                if event.activity is not None and event.activity.cancelled:
                    continue
                self._now = event.t_ms
                event.callback()
            self._now = max(self._now, t_end)
        finally:
            self._running = False

    def run_for(self, delta_ms: int) -> None:
        self.run_until(self._now + delta_ms)

    def sleep_until(self, t_ms: int) -> None:
        self.run_until(t_ms)
