"""The OPC wrapper: poll an OPC-lite server and turn readings into stream elements.

Every ``update_period_ms`` the wrapper performs one synchronous read of all its
items.  What happens next depends on the production mode:

* ``PERIODIC`` (PPM) emits a stream element on every successful tick, so the
  production period equals the update period.
* ``CHANGE_BASED`` (CBPM) emits only when the reading differs from the last
  emitted one, timestamps excluded.  The first good reading always emits.

A tick whose reading contains a Bad-quality item emits nothing and is counted
in ``bad_quality_ticks``.

Period and mode changes are queued and applied at the next tick boundary.  A
period change re-anchors the schedule at the instant it is applied.
"""

from __future__ import annotations

import enum
import logging
import threading
from collections import deque
from dataclasses import dataclass
from typing import Callable, Optional, Sequence, Union

from .client import ClientError, ClientSession, TransportError, connect
from .clock import Activity, Clock
from .errors import BridgeError
from .model import (
    ItemValue, LengthMismatch, StreamElement, convert_item_values,
    values_equal_ignoring_timestamp,
)

logger = logging.getLogger(__name__)

FAILURES_BEFORE_RECONNECT = 3
BACKOFF_START_MS = 1000
BACKOFF_CAP_MS = 8000


class InvalidPeriod(BridgeError):
    pass


class ProductionMode(enum.Enum):
    PERIODIC = "PPM"
    CHANGE_BASED = "CBPM"

    @classmethod
    def parse(cls, token: str) -> "ProductionMode":
        token = token.strip().upper()
        aliases = {"PERIODIC": cls.PERIODIC, "CHANGEBASED": cls.CHANGE_BASED,
                   "CHANGE_BASED": cls.CHANGE_BASED}
        try:
            return cls(token)
        except ValueError:
            if token in aliases:
                return aliases[token]
            raise ValueError(f"unknown production mode {token!r}") from None


class Decision(enum.Enum):
    EMIT = "emit"
    SUPPRESS = "suppress"
    BAD_QUALITY = "bad_quality"


@dataclass(frozen=True)
class WrapperConfig:
    name: str
    items: tuple[str, ...]
    update_period_ms: int
    mode: ProductionMode = ProductionMode.PERIODIC
    server_addr: Union[str, tuple, None] = None
    include_source_timestamps: bool = False

    def __post_init__(self) -> None:
        object.__setattr__(self, "items", tuple(self.items))
        if not self.items:
            raise ValueError(f"wrapper {self.name}: items must not be empty")
        if self.update_period_ms < 1:
            raise InvalidPeriod(f"wrapper {self.name}: update_period_ms must be >= 1")


@dataclass
class WrapperState:
    last_emitted: Optional[tuple[ItemValue, ...]] = None
    ticks: int = 0
    emissions: int = 0
    suppressed: int = 0
    bad_quality_ticks: int = 0
    first_emit_time: Optional[int] = None
    last_emit_time: Optional[int] = None

    def record(self, decision: Decision, reading: Sequence[ItemValue], now: int) -> None:
        self.ticks += 1
        if decision is Decision.EMIT:
            self.emissions += 1
            self.last_emitted = tuple(reading)
            if self.first_emit_time is None:
                self.first_emit_time = now
            self.last_emit_time = now
        elif decision is Decision.SUPPRESS:
            self.suppressed += 1
        else:
            self.bad_quality_ticks += 1


def decide(state: WrapperState, mode: ProductionMode, reading: Sequence[ItemValue],
           item_count: int | None = None) -> Decision:
    """Decide what one tick's reading produces.  No side effects."""
    if item_count is not None and len(reading) != item_count:
        raise LengthMismatch(f"reading has {len(reading)} items, expected {item_count}")
    if any(iv.quality.is_bad for iv in reading):
        return Decision.BAD_QUALITY
    if mode is ProductionMode.PERIODIC:
        return Decision.EMIT
    if state.last_emitted is None:
        return Decision.EMIT
    if values_equal_ignoring_timestamp(state.last_emitted, reading):
        return Decision.SUPPRESS
    return Decision.EMIT


@dataclass(frozen=True)
class WrapperMetrics:
    ticks: int
    emissions: int
    suppressed: int
    bad_quality_ticks: int
    missed_ticks: int
    overruns: int
    transport_errors: int
    reconnects: int
    update_period_ms: int
    mode: ProductionMode
    active_update_period_ms: int
    active_mode: ProductionMode
    mean_production_period_ms: Optional[float]
    mean_read_latency_ms: Optional[float]

    def as_pairs(self) -> list[tuple[str, str]]:
        pairs = [
            ("ticks", str(self.ticks)), ("emissions", str(self.emissions)),
            ("suppressed", str(self.suppressed)),
            ("bad_quality_ticks", str(self.bad_quality_ticks)),
            ("missed_ticks", str(self.missed_ticks)), ("overruns", str(self.overruns)),
            ("transport_errors", str(self.transport_errors)),
            ("reconnects", str(self.reconnects)),
            ("period_ms", str(self.update_period_ms)), ("mode", self.mode.value),
            ("active_period_ms", str(self.active_update_period_ms)),
            ("active_mode", self.active_mode.value),
        ]
        if self.mean_production_period_ms is not None:
            pairs.append(("mean_production_period_ms", f"{self.mean_production_period_ms:g}"))
        if self.mean_read_latency_ms is not None:
            pairs.append(("mean_read_latency_ms", f"{self.mean_read_latency_ms:.3f}"))
        return pairs


Sink = Callable[[StreamElement], None]
Connector = Callable[[WrapperConfig], ClientSession]


def tcp_connector(config: WrapperConfig) -> ClientSession:
    if config.server_addr is None:
        raise ValueError(f"wrapper {config.name} has no server address")
    return connect(config.server_addr)


class CommandQueue:
    """Thread-safe command inbox, drained by the wrapper at tick boundaries."""

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self._pending: deque = deque()
        # Latest requested settings, visible before the next tick applies them.
        self.requested_period: Optional[int] = None
        self.requested_mode: Optional[ProductionMode] = None

    def set_update_period(self, ms: int) -> None:
        if isinstance(ms, bool) or not isinstance(ms, int) or ms <= 0:
            raise InvalidPeriod(f"update period must be a positive integer, got {ms!r}")
        with self._lock:
            self._pending.append(("period", ms))
            self.requested_period = ms

    def set_mode(self, mode: ProductionMode) -> None:
        with self._lock:
            self._pending.append(("mode", ProductionMode(mode)))
            self.requested_mode = mode

    def stop(self) -> None:
        with self._lock:
            self._pending.append(("stop", None))

    def drain(self) -> list:
        with self._lock:
            out = list(self._pending)
            self._pending.clear()
            return out


class OpcWrapper:
    """One polling activity bound to one server session and one item group."""

    def __init__(self, config: WrapperConfig, sink: Sink, clock: Clock,
                 connector: Connector | None = None, control: CommandQueue | None = None) -> None:
        self.config = config
        self.sink = sink
        self.clock = clock
        self.connector = connector or tcp_connector
        self.control = control or CommandQueue()
        self.state = WrapperState()
        self.period_ms = config.update_period_ms
        self.mode = config.mode
        self.session: ClientSession | None = None
        self.stopped = False
        self.activity: Activity | None = None
        self._lock = threading.Lock()
        self._anchor: int | None = None
        self._k = 0
        self._failures = 0
        self._backoff_ms: int | None = None
        self._missed = 0
        self._overruns = 0
        self._transport_errors = 0
        self._reconnects = 0
        self._latency_total = 0.0

    @property
    def name(self) -> str:
        return self.config.name

    # -- control -----------------------------------------------------------

    def set_update_period(self, ms: int) -> None:
        self.control.set_update_period(ms)

    def set_mode(self, mode: ProductionMode) -> None:
        self.control.set_mode(mode)

    def stop(self) -> None:
        """Request a stop; the wrapper closes its session at its next tick."""
        self.control.stop()

    def metrics(self) -> WrapperMetrics:
        with self._lock:
            s = self.state
            mean = None
            if s.emissions >= 2:
                mean = (s.last_emit_time - s.first_emit_time) / (s.emissions - 1)
            return WrapperMetrics(
                ticks=s.ticks, emissions=s.emissions, suppressed=s.suppressed,
                bad_quality_ticks=s.bad_quality_ticks, missed_ticks=self._missed,
                overruns=self._overruns, transport_errors=self._transport_errors,
                reconnects=self._reconnects,
                update_period_ms=self.control.requested_period or self.period_ms,
                mode=self.control.requested_mode or self.mode,
                active_update_period_ms=self.period_ms, active_mode=self.mode,
                mean_production_period_ms=mean,
                mean_read_latency_ms=self._latency_total / s.ticks if s.ticks else None,
            )

    # -- scheduling --------------------------------------------------------

    def start(self, start_ms: int | None = None, priority: int = 0) -> Activity:
        """Schedule the polling activity on the wrapper's clock.

        ``priority`` orders wrappers ticking at the same simulated instant.
        """
        self._anchor = self.clock.now_ms() if start_ms is None else start_ms
        self.activity = self.clock.spawn(self.step, self._anchor, name=f"wrapper-{self.name}",
                                         priority=priority)
        return self.activity

    def run(self) -> None:
        """Blocking polling loop; returns after a stop command."""
        nxt = self.step(self.clock.now_ms())
        while nxt is not None:
            self.clock.sleep_until(nxt)
            nxt = self.step(self.clock.now_ms())

    def _apply_commands(self, now: int) -> None:
        period = None
        for kind, arg in self.control.drain():
            if kind == "stop":
                self.stopped = True
            elif kind == "mode":
                self.mode = arg
            else:
                period = arg
        if period is not None and period != self.period_ms:
            self.period_ms = period
            self._anchor, self._k = now, 0
        if self.control.requested_period == self.period_ms:
            self.control.requested_period = None
        if self.control.requested_mode == self.mode:
            self.control.requested_mode = None

    def step(self, now: int) -> int | None:
        """Execute the tick due at ``now`` and return the next wake-up time."""
        if self._anchor is None:
            self._anchor = now
        with self._lock:
            self._apply_commands(now)
        if self.stopped:
            self._shutdown()
            return None

        if self._backoff_ms is not None:
            if not self._ensure_session():
                self._backoff_ms = min(self._backoff_ms * 2, BACKOFF_CAP_MS)
                with self._lock:
                    self._missed += self._backoff_ms // self.period_ms
                return now + self._backoff_ms
            self._backoff_ms = None
            self._anchor, self._k = now, 0
            with self._lock:
                self._reconnects += 1

        if not self._ensure_session():
            return self._fail(now)
        try:
            entries = self.session.sync_read()
        except TransportError as exc:
            logger.warning("wrapper %s: read failed: %s", self.name, exc)
            self._drop_session()
            return self._fail(now)
        except ClientError as exc:
            logger.error("wrapper %s: read refused: %s", self.name, exc)
            self._drop_session()
            return self._fail(now)

        self._failures = 0
        reading = [iv for _, iv in entries]
        with self._lock:
            decision = decide(self.state, self.mode, reading, len(self.config.items))
            self.state.record(decision, reading, now)
            self._latency_total += self.session.last_latency_ms
        if decision is Decision.EMIT:
            element = convert_item_values(entries, now, self.config.include_source_timestamps)
            try:
                self.sink(element)
            except Exception:
                logger.exception("wrapper %s: sink failed", self.name)
        return self._next_tick()

    def _next_tick(self) -> int:
        self._k += 1
        nxt = self._anchor + self._k * self.period_ms
        late = self.clock.now_ms()
        if late > nxt:
            with self._lock:
                self._overruns += 1
            self._anchor, self._k = late, 0
            return late
        return nxt

    def _fail(self, now: int) -> int:
        self._failures += 1
        with self._lock:
            self._transport_errors += 1
            self._missed += 1
        if self._failures >= FAILURES_BEFORE_RECONNECT:
            self._backoff_ms = BACKOFF_START_MS
            with self._lock:
                self._missed += BACKOFF_START_MS // self.period_ms
            logger.warning("wrapper %s: %d consecutive failures, backing off", self.name,
                           self._failures)
            return now + BACKOFF_START_MS
        return self._next_tick()

    def _ensure_session(self) -> bool:
        if self.session is not None and not self.session.dead:
            return True
        session = None
        try:
            session = self.connector(self.config)
            session.setup_items(self.config.items, self.period_ms)
        except (ClientError, OSError) as exc:
            logger.warning("wrapper %s: cannot open session: %s", self.name, exc)
            if session is not None:
                session.close()
            self.session = None
            return False
        self.session = session
        return True

    def _drop_session(self) -> None:
        if self.session is not None:
            self.session.dead = True
            self.session.transport.close()
            self.session = None

    def _shutdown(self) -> None:
        self.stopped = True
        if self.session is not None:
            session, self.session = self.session, None
            session.close()


def run(config: WrapperConfig, sink: Sink, clock: Clock, control: CommandQueue | None = None,
        connector: Connector | None = None) -> OpcWrapper:
    """Poll until a stop command arrives on ``control``."""
    wrapper = OpcWrapper(config, sink, clock, connector, control)
    wrapper.run()
    return wrapper
