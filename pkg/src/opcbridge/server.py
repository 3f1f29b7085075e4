"""OPC-lite server simulator.

The server keeps one cache cell per item.  Cell ``i`` is rewritten by its
generator at ``start + k * sampling_period_ms`` for ``k = 0, 1, ...``; a client
Write replaces the cell until the item's next generator tick.

Cache updates are applied lazily: before any request is served the cache is
brought up to ``clock.now_ms()`` by replaying every due generator tick in
order.  A client therefore observes exactly the cache a free-running sampler
would hold, and the server works unchanged on a simulated clock.

The server has no idea how often clients poll and keeps no change history.
"""

from __future__ import annotations

import errno
import logging
import math
import socket
import socketserver
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterator, Optional, Union

import yaml

from . import protocol as p
from .clock import Clock
from .errors import BridgeError
from .model import (
    GOOD, INT_RANGES, ItemValue, Quality, ScalarValue, Status, ValueType, to_float32,
)

logger = logging.getLogger(__name__)

DEFAULT_PORT = 4840

# 64-bit LCG (Knuth, MMIX); RandomWalk traces depend on these exact constants.
LCG_MULTIPLIER = 6364136223846793005
LCG_INCREMENT = 1442695040888963407
LCG_MASK = (1 << 64) - 1


class InvalidConfig(BridgeError):
    pass


class PortInUse(BridgeError):
    pass


# -- generators -----------------------------------------------------------

@dataclass(frozen=True)
class Constant:
    value: Any


@dataclass(frozen=True)
class Steps:
    values: tuple
    cycle: bool = False


@dataclass(frozen=True)
class Sine:
    amplitude: float
    period_ms: int
    offset: float = 0.0


@dataclass(frozen=True)
class RandomWalk:
    seed: int
    step: float
    start: float = 0.0


@dataclass(frozen=True)
class External:
    """Changes only through client writes; ``initial`` seeds the cell."""
    initial: Any = None


GeneratorSpec = Union[Constant, Steps, Sine, RandomWalk, External]

_UNCHANGED = object()


class Lcg:
    def __init__(self, seed: int) -> None:
        self.state = seed & LCG_MASK

    def next_unit(self) -> float:
        """Next uniform draw in [0, 1) from the top 53 bits."""
        self.state = (LCG_MULTIPLIER * self.state + LCG_INCREMENT) & LCG_MASK
        return (self.state >> 11) * (1.0 / (1 << 53))


def generator_ticks(spec: GeneratorSpec, sampling_period_ms: int) -> Iterator[Any]:
    """Yield the raw payload for ticks k = 0, 1, 2, ..."""
    if isinstance(spec, Constant):
        while True:
            yield spec.value
    elif isinstance(spec, Steps):
        k = 0
        n = len(spec.values)
        while True:
            yield spec.values[k % n if spec.cycle else min(k, n - 1)]
            k += 1
    elif isinstance(spec, Sine):
        k = 0
        while True:
            t = k * sampling_period_ms
            yield spec.offset + spec.amplitude * math.sin(2 * math.pi * t / spec.period_ms)
            k += 1
    elif isinstance(spec, RandomWalk):
        rng = Lcg(spec.seed)
        x = float(spec.start)
        while True:
            yield x
            x += spec.step * (2.0 * rng.next_unit() - 1.0)
    elif isinstance(spec, External):
        yield spec.initial
        while True:
            yield _UNCHANGED
    else:
        raise InvalidConfig(f"unknown generator {spec!r}")


def _step_at(spec: GeneratorSpec, k: int) -> Any:
    """Random access for stateless generators, used to skip idle stretches."""
    if isinstance(spec, Constant):
        return spec.value
    if isinstance(spec, Steps):
        n = len(spec.values)
        return spec.values[k % n if spec.cycle else min(k, n - 1)]
    raise TypeError


def coerce(vtype: ValueType, raw: Any) -> tuple[ScalarValue, Quality]:
    """Turn a generator payload into a typed value.  NaN becomes Bad 0.0."""
    if raw is None:
        raw = _DEFAULT_INITIAL.get(vtype, 0)
    if vtype.is_float:
        x = float(raw)
        if math.isnan(x):
            return ScalarValue(vtype, 0.0), Quality(Status.BAD, 0)
        if vtype is ValueType.FLOAT32:
            x = to_float32(x)
        return ScalarValue(vtype, x), GOOD
    if vtype in INT_RANGES:
        return ScalarValue(vtype, int(raw)), GOOD
    if vtype is ValueType.BOOLEAN:
        return ScalarValue.boolean(bool(raw)), GOOD
    return ScalarValue.text(str(raw)), GOOD


# -- configuration ---------------------------------------------------------

@dataclass(frozen=True)
class ItemSpec:
    name: str
    type: ValueType
    generator: GeneratorSpec
    sampling_period_ms: int = 100
    writable: bool = False


@dataclass(frozen=True)
class ServerConfig:
    items: tuple[ItemSpec, ...]
    listen_port: int = DEFAULT_PORT
    start_time_ms: Optional[int] = None

    def validate(self) -> None:
        names = [i.name for i in self.items]
        if len(set(names)) != len(names):
            raise InvalidConfig("item names must be unique")
        for item in self.items:
            if not p.NAME.match(item.name):
                raise InvalidConfig(f"invalid item name {item.name!r}")
            if item.sampling_period_ms < 1:
                raise InvalidConfig(f"{item.name}: sampling_period_ms must be >= 1")
            gen = item.generator
            if isinstance(gen, Steps) and not gen.values:
                raise InvalidConfig(f"{item.name}: Steps needs at least one value")
            if isinstance(gen, Sine) and gen.period_ms < 2 * item.sampling_period_ms:
                raise InvalidConfig(f"{item.name}: Sine period must be >= 2 x sampling period")
            if isinstance(gen, (Sine, RandomWalk)) and not item.type.is_float:
                raise InvalidConfig(f"{item.name}: {type(gen).__name__} needs a float type")
            try:
                for raw in _literal_payloads(gen):
                    coerce_literal(item.type, raw)
            except (TypeError, ValueError, OverflowError) as exc:
                raise InvalidConfig(f"{item.name}: {exc}") from None


def _literal_payloads(gen: GeneratorSpec) -> list:
    if isinstance(gen, Constant):
        return [gen.value]
    if isinstance(gen, Steps):
        return list(gen.values)
    if isinstance(gen, External) and gen.initial is not None:
        return [gen.initial]
    return []


def coerce_literal(vtype: ValueType, raw: Any) -> Any:
    """Check a configuration literal against its item type."""
    if vtype is ValueType.BOOLEAN and not isinstance(raw, bool):
        raise TypeError(f"expected a boolean, got {raw!r}")
    if vtype in INT_RANGES and (isinstance(raw, bool) or not isinstance(raw, int)):
        raise TypeError(f"expected an integer, got {raw!r}")
    if vtype.is_float and (isinstance(raw, bool) or not isinstance(raw, (int, float))):
        raise TypeError(f"expected a number, got {raw!r}")
    if vtype is ValueType.TEXT and not isinstance(raw, str):
        raise TypeError(f"expected a string, got {raw!r}")
    coerce(vtype, raw)
    return raw


_DEFAULT_INITIAL = {ValueType.BOOLEAN: False, ValueType.TEXT: "", ValueType.FLOAT32: 0.0,
                    ValueType.FLOAT64: 0.0}


def _generator_from_dict(d: dict, vtype: ValueType) -> GeneratorSpec:
    kind = str(d.get("kind", "")).lower()
    try:
        if kind == "constant":
            return Constant(d["value"])
        if kind == "steps":
            return Steps(tuple(d["values"]), bool(d.get("cycle", False)))
        if kind == "sine":
            return Sine(float(d["amplitude"]), int(d["period_ms"]), float(d.get("offset", 0.0)))
        if kind == "random_walk":
            return RandomWalk(int(d["seed"]), float(d["step"]), float(d.get("start", 0.0)))
        if kind == "external":
            return External(d.get("initial"))
    except KeyError as exc:
        raise InvalidConfig(f"generator {kind!r} is missing {exc.args[0]!r}") from None
    raise InvalidConfig(f"unknown generator kind {kind!r}")


def config_from_dict(d: dict) -> ServerConfig:
    if not isinstance(d, dict) or not isinstance(d.get("items"), list):
        raise InvalidConfig("config needs an 'items' list")
    items = []
    for i, raw in enumerate(d["items"]):
        try:
            vtype = ValueType.parse(raw["type"])
            items.append(ItemSpec(
                name=raw["name"],
                type=vtype,
                generator=_generator_from_dict(raw.get("generator", {}), vtype),
                sampling_period_ms=int(raw.get("sampling_period_ms", 100)),
                writable=bool(raw.get("writable", False)),
            ))
        except (KeyError, TypeError, ValueError) as exc:
            raise InvalidConfig(f"items[{i}]: {exc}") from None
    cfg = ServerConfig(
        items=tuple(items),
        listen_port=int(d.get("listen_port", DEFAULT_PORT)),
        start_time_ms=d.get("start_time_ms"),
    )
    cfg.validate()
    return cfg


def load_config(path: Union[str, Path]) -> ServerConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise InvalidConfig(f"cannot read {path}: {exc.strerror}") from None
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise InvalidConfig(f"{path}: {exc}") from None
    return config_from_dict(data)


# -- item cache ------------------------------------------------------------

class _Cell:
    __slots__ = ("spec", "ticks", "next_k", "value", "stateless")

    def __init__(self, spec: ItemSpec) -> None:
        self.spec = spec
        self.ticks = generator_ticks(spec.generator, spec.sampling_period_ms)
        self.next_k = 0
        self.value: ItemValue | None = None
        self.stateless = isinstance(spec.generator, (Constant, Steps))


CacheObserver = Callable[[str, ItemValue], None]


@dataclass
class ServerStats:
    sessions: int = 0
    requests: int = 0
    sync_reads: int = 0
    writes: int = 0


class OpcServer:
    """Item cache plus session factory; transport-independent."""

    def __init__(self, config: ServerConfig, clock: Clock, version: int = p.PROTOCOL_VERSION,
                 observer: CacheObserver | None = None) -> None:
        config.validate()
        self.config = config
        self.clock = clock
        self.version = version
        self.observer = observer
        self.start_ms = clock.now_ms() if config.start_time_ms is None else config.start_time_ms
        self.stats = ServerStats()
        self._lock = threading.RLock()
        self._cells = {spec.name: _Cell(spec) for spec in config.items}
        self.catch_up()

    @property
    def item_names(self) -> list[str]:
        return sorted(self._cells)

    def catch_up(self, now: int | None = None) -> None:
        """Apply every generator tick due at or before ``now``."""
        with self._lock:
            now = self.clock.now_ms() if now is None else now
            for cell in self._cells.values():
                period = cell.spec.sampling_period_ms
                if now < self.start_ms:
                    continue
                due = (now - self.start_ms) // period
                if cell.next_k > due:
                    continue
                if cell.stateless and self.observer is None and due - cell.next_k > 1:
                    cell.next_k = due
                    self._apply(cell, _step_at(cell.spec.generator, due), due)
                    cell.next_k = due + 1
                    continue
                while cell.next_k <= due:
                    self._apply(cell, next(cell.ticks), cell.next_k)
                    cell.next_k += 1

    def _apply(self, cell: _Cell, raw: Any, k: int) -> None:
        if raw is _UNCHANGED:
            return
        value, quality = coerce(cell.spec.type, raw)
        cell.value = ItemValue(value, quality, self.start_ms + k * cell.spec.sampling_period_ms)
        if self.observer is not None:
            self.observer(cell.spec.name, cell.value)

    def read(self, items: list[str]) -> list[tuple[str, ItemValue]]:
        """Atomic snapshot of ``items`` at the current instant."""
        with self._lock:
            self.catch_up()
            return [(name, self._cells[name].value) for name in items]

    def write(self, item: str, value: ScalarValue) -> None:
        with self._lock:
            self.catch_up()
            cell = self._cells[item]
            if value.type is not cell.spec.type:
                raise TypeError(f"{item} is {cell.spec.type.value}, got {value.type.value}")
            cell.value = ItemValue(value, GOOD, self.clock.now_ms())
            if self.observer is not None:
                self.observer(item, cell.value)

    def has_item(self, item: str) -> bool:
        return item in self._cells

    def is_writable(self, item: str) -> bool:
        return self._cells[item].spec.writable

    def count(self, counter: str) -> None:
        with self._lock:
            setattr(self.stats, counter, getattr(self.stats, counter) + 1)

    def open_session(self) -> "Session":
        self.count("sessions")
        return Session(self)


class Session:
    """Per-connection state: handshake flag and private group namespace."""

    def __init__(self, server: OpcServer) -> None:
        self.server = server
        self.groups: dict[str, list[str]] = {}
        self.greeted = False
        self.closed = False

    def handle(self, msg: p.Message) -> p.Response:
        server = self.server
        server.count("requests")
        seq = msg.seq
        if not isinstance(msg, p.REQUEST_TYPES):
            return p.Error(seq, p.ErrorCode.BAD_REQUEST, f"{type(msg).__name__} is not a request")
        if isinstance(msg, p.Hello):
            if msg.version != server.version:
                return p.Error(seq, p.ErrorCode.BAD_REQUEST,
                               f"unsupported version {msg.version}, server speaks {server.version}")
            self.greeted = True
            return p.Ok(seq)
        if not self.greeted:
            return p.Error(seq, p.ErrorCode.BAD_REQUEST, "HELLO required first")

        if isinstance(msg, p.Browse):
            return p.ItemList(seq, tuple(server.item_names))
        if isinstance(msg, p.AddGroup):
            if msg.group in self.groups:
                return p.Error(seq, p.ErrorCode.BAD_REQUEST, f"group {msg.group} exists")
            self.groups[msg.group] = []
            return p.Ok(seq)
        if isinstance(msg, p.AddItems):
            group = self.groups.get(msg.group)
            if group is None:
                return p.Error(seq, p.ErrorCode.UNKNOWN_GROUP, msg.group)
            unknown = [i for i in msg.items if not server.has_item(i)]
            if unknown:
                return p.Error(seq, p.ErrorCode.UNKNOWN_ITEM, " ".join(unknown))
            if len(set(msg.items)) != len(msg.items) or set(msg.items) & set(group):
                return p.Error(seq, p.ErrorCode.BAD_REQUEST, "item registered twice")
            group.extend(msg.items)
            return p.Ok(seq)
        if isinstance(msg, p.SyncRead):
            group = self.groups.get(msg.group)
            if group is None:
                return p.Error(seq, p.ErrorCode.UNKNOWN_GROUP, msg.group)
            server.count("sync_reads")
            return p.ReadResult(seq, tuple(server.read(group)))
        if isinstance(msg, p.Write):
            if not server.has_item(msg.item):
                return p.Error(seq, p.ErrorCode.UNKNOWN_ITEM, msg.item)
            if not server.is_writable(msg.item):
                return p.Error(seq, p.ErrorCode.WRITE_DENIED, msg.item)
            try:
                server.write(msg.item, msg.value)
            except TypeError as exc:
                return p.Error(seq, p.ErrorCode.BAD_REQUEST, str(exc))
            server.count("writes")
            return p.Ok(seq)
        if isinstance(msg, p.RemoveGroup):
            if self.groups.pop(msg.group, None) is None:
                return p.Error(seq, p.ErrorCode.UNKNOWN_GROUP, msg.group)
            return p.Ok(seq)
        # Bye
        self.closed = True
        self.groups.clear()
        return p.Ok(seq)

    def handle_line(self, line: bytes) -> bytes:
        """Decode, dispatch, encode.  ParseError closes the session."""
        try:
            msg = p.decode(line)
        except p.ParseError as exc:
            self.closed = True
            return p.encode(p.Error(0, p.ErrorCode.BAD_REQUEST, str(exc)))
        return p.encode(self.handle(msg))


# -- TCP front end ---------------------------------------------------------

class _Handler(socketserver.StreamRequestHandler):
    def handle(self) -> None:
        session = self.server.opc.open_session()  # type: ignore[attr-defined]
        peer = self.client_address
        self.server.track(self.connection, True)  # type: ignore[attr-defined]
        logger.debug("session opened from %s", peer)
        try:
            while not session.closed:
                try:
                    line = p.read_frame(self.rfile)
                except p.ParseError as exc:
                    self.wfile.write(p.encode(p.Error(0, p.ErrorCode.BAD_REQUEST, str(exc))))
                    break
                except (EOFError, OSError):
                    break
                if line is None:
                    break
                self.wfile.write(session.handle_line(line))
                self.wfile.flush()
        except OSError:
            pass
        finally:
            self.server.track(self.connection, False)  # type: ignore[attr-defined]
        logger.debug("session from %s closed", peer)


class _TcpServer(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, *args, **kwargs) -> None:
        self._conns: set[socket.socket] = set()
        self._conns_lock = threading.Lock()
        super().__init__(*args, **kwargs)

    def track(self, conn: socket.socket, open_: bool) -> None:
        with self._conns_lock:
            (self._conns.add if open_ else self._conns.discard)(conn)

    def sever_all(self) -> None:
        with self._conns_lock:
            conns = list(self._conns)
        for conn in conns:
            try:
                conn.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass


@dataclass
class ServerHandle:
    opc: OpcServer
    host: str
    port: int
    _tcp: _TcpServer = field(repr=False)
    _thread: threading.Thread = field(repr=False)

    @property
    def address(self) -> tuple[str, int]:
        return (self.host, self.port)

    def stop(self) -> None:
        """Stop listening and drop every open session."""
        self._tcp.shutdown()
        self._tcp.server_close()
        self._tcp.sever_all()
        self._thread.join(timeout=5)

    def __enter__(self) -> "ServerHandle":
        return self

    def __exit__(self, *exc) -> None:
        self.stop()


def start(config: ServerConfig, clock: Clock, host: str = "127.0.0.1",
          port: int | None = None, **kwargs) -> ServerHandle:
    """Start a TCP server; ``port=0`` picks a free port."""
    opc = OpcServer(config, clock, **kwargs)
    port = config.listen_port if port is None else port
    try:
        tcp = _TcpServer((host, port), _Handler)
    except OSError as exc:
        if exc.errno == errno.EADDRINUSE:
            raise PortInUse(f"port {port} is already in use") from None
        raise
    tcp.opc = opc  # type: ignore[attr-defined]
    thread = threading.Thread(target=tcp.serve_forever, name="opc-server", daemon=True)
    thread.start()
    host, port = tcp.server_address[:2]
    logger.info("OPC-lite server listening on %s:%d with %d items", host, port, len(config.items))
    return ServerHandle(opc, host, port, tcp, thread)
