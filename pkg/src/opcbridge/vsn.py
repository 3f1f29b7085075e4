"""A miniature sensor-fusion node hosting virtual sensors (VSs).

A VS is declared in a ``.vsd.xml`` file (see ``docs/vsd-format.md``).  Each
of its wrappers feeds stream elements through a per-wrapper selection query
into a window table; a global query over a window table produces rows for the
VS's processor, whose output is stamped, checked against the declared output
schema and delivered to subscribers and to downstream VSs.

OPC wrappers poll a server.  ``local`` wrappers receive another VS's output
by push and have no update period.
"""

from __future__ import annotations

import hashlib
import logging
import threading
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Protocol, Sequence

from .clock import Activity, Clock
from .errors import BridgeError
from .model import (
    IDENTIFIER, Field, ScalarValue, StreamElement, StreamElementSchema, ValueType, field_name,
)
from .protocol import NAME as ITEM_NAME
from .query import (
    ByCount, ByTime, Query, QueryError, QuerySyntaxError, Row, UnknownColumn, WindowSpec,
    WindowTable, eval_wrapper_request, evaluate, parse_query,
)
from .wrapper import (
    Connector, OpcWrapper, ProductionMode, WrapperConfig, tcp_connector,
)

logger = logging.getLogger(__name__)

VSD_SUFFIX = ".vsd.xml"


class SchemaError(BridgeError):
    def __init__(self, path: str, reason: str) -> None:
        super().__init__(f"{path}: {reason}")
        self.path = path
        self.reason = reason


class UnknownProcessor(BridgeError):
    pass


class UnknownProducer(BridgeError):
    pass


class CycleError(BridgeError):
    pass


class DeployError(BridgeError):
    pass


# -- descriptions ----------------------------------------------------------

@dataclass(frozen=True)
class WrapperDecl:
    name: str
    kind: str  # "opc" | "local"
    request: Query
    server: Optional[str] = None  # host:port for opc, producer VS name for local
    items: tuple[str, ...] = ()
    update_period_ms: Optional[int] = None
    mode: ProductionMode = ProductionMode.PERIODIC
    include_source_timestamps: bool = False

    def wrapper_config(self) -> WrapperConfig:
        return WrapperConfig(self.name, self.items, self.update_period_ms, self.mode,
                             self.server, self.include_source_timestamps)

    def element_fields(self) -> list[str]:
        """Field names of the elements an OPC wrapper produces."""
        names = [field_name(i) for i in self.items]
        if self.include_source_timestamps:
            names += [f"{n}_ts" for n in names]
        return names


@dataclass(frozen=True)
class ProcessorRef:
    id: str
    params: dict = field(default_factory=dict, hash=False, compare=False)


@dataclass(frozen=True)
class VsDescription:
    name: str
    wrappers: tuple[WrapperDecl, ...]
    global_request: Query
    window: WindowSpec
    processor: ProcessorRef
    output_schema: StreamElementSchema

    def wrapper(self, name: str) -> WrapperDecl:
        for w in self.wrappers:
            if w.name == name:
                return w
        raise KeyError(name)

    @property
    def producers(self) -> set[str]:
        return {w.server for w in self.wrappers if w.kind == "local"}


def _attr(el: ET.Element, name: str, path: str, required: bool = True) -> Optional[str]:
    value = el.get(name)
    if value is None and required:
        raise SchemaError(f"{path}@{name}", "missing attribute")
    return value


def _int_attr(el: ET.Element, name: str, path: str) -> int:
    raw = _attr(el, name, path)
    try:
        value = int(raw)
    except ValueError:
        raise SchemaError(f"{path}@{name}", f"expected an integer, got {raw!r}") from None
    if value < 1:
        raise SchemaError(f"{path}@{name}", "must be >= 1")
    return value


def _parse_wrapper(el: ET.Element, path: str) -> WrapperDecl:
    name = _attr(el, "name", path)
    if not IDENTIFIER.match(name):
        raise SchemaError(f"{path}@name", f"invalid wrapper name {name!r}")
    kind = (el.get("kind") or "opc").lower()
    request = parse_query(_attr(el, "request", path))
    if request.has_aggregates:
        raise QuerySyntaxError(request.text, 0, "wrapper requests cannot contain aggregates")
    if request.source != name:
        raise SchemaError(f"{path}@request", f"must select FROM {name}, not {request.source}")
    server = _attr(el, "server", path)
    if kind == "local":
        for extra in ("items", "update-period-ms", "mode"):
            if el.get(extra) is not None:
                raise SchemaError(f"{path}@{extra}", "not allowed on a local wrapper")
        return WrapperDecl(name, "local", request, server)
    if kind != "opc":
        raise SchemaError(f"{path}@kind", f"expected opc or local, got {kind!r}")
    items = tuple(_attr(el, "items", path).replace(",", " ").split())
    if not items:
        raise SchemaError(f"{path}@items", "at least one item required")
    for item in items:
        if not ITEM_NAME.match(item):
            raise SchemaError(f"{path}@items", f"invalid item name {item!r}")
    try:
        mode = ProductionMode.parse(el.get("mode", "PPM"))
    except ValueError as exc:
        raise SchemaError(f"{path}@mode", str(exc)) from None
    ts_flag = (el.get("include-source-timestamps") or "false").lower()
    if ts_flag not in ("true", "false"):
        raise SchemaError(f"{path}@include-source-timestamps", "expected true or false")
    decl = WrapperDecl(name, "opc", request, server, items,
                       _int_attr(el, "update-period-ms", path), mode, ts_flag == "true")
    fields = decl.element_fields()
    if len(set(fields)) != len(fields):
        raise SchemaError(f"{path}@items", "item names map onto duplicate field names")
    missing = request.columns() - set(fields)
    if missing:
        raise SchemaError(f"{path}@request", f"unknown columns {sorted(missing)}")
    return decl


def parse_vs_description(text: str, registry: "ProcessorRegistry | None" = None) -> VsDescription:
    """Parse and validate a ``.vsd.xml`` document."""
    try:
        root = ET.fromstring(text)
    except ET.ParseError as exc:
        raise SchemaError("/", f"malformed XML: {exc}") from None
    if root.tag != "virtual-sensor":
        raise SchemaError("/", f"root element must be virtual-sensor, not {root.tag}")
    path = "virtual-sensor"
    name = _attr(root, "name", path)
    if not ITEM_NAME.match(name):
        raise SchemaError(f"{path}@name", f"invalid VS name {name!r}")

    allowed = {"wrapper", "global-request", "window", "processor", "output"}
    for child in root:
        if child.tag not in allowed:
            raise SchemaError(f"{path}/{child.tag}", "unexpected element")

    wrappers = []
    for i, el in enumerate(root.findall("wrapper"), 1):
        wrappers.append(_parse_wrapper(el, f"{path}/wrapper[{i}]"))
    if not wrappers:
        raise SchemaError(f"{path}/wrapper", "at least one wrapper required")
    names = [w.name for w in wrappers]
    if len(set(names)) != len(names):
        raise SchemaError(f"{path}/wrapper", "wrapper names must be unique")

    def single(tag: str) -> ET.Element:
        found = root.findall(tag)
        if len(found) != 1:
            raise SchemaError(f"{path}/{tag}", f"expected exactly one, found {len(found)}")
        return found[0]

    g_el = single("global-request")
    global_request = parse_query((g_el.text or "").strip())
    if global_request.source not in names:
        raise SchemaError(f"{path}/global-request",
                          f"source {global_request.source!r} is not a wrapper of this VS")
    source = next(w for w in wrappers if w.name == global_request.source)
    if source.kind == "opc":
        available = source.request.output_columns(source.element_fields())
        missing = global_request.columns() - set(available)
        if missing:
            raise SchemaError(f"{path}/global-request", f"unknown columns {sorted(missing)}")

    w_el = single("window")
    w_path = f"{path}/window"
    if (w_el.get("count") is None) == (w_el.get("time-ms") is None):
        raise SchemaError(w_path, "exactly one of count or time-ms is required")
    window: WindowSpec = (ByCount(_int_attr(w_el, "count", w_path)) if w_el.get("count")
                          else ByTime(_int_attr(w_el, "time-ms", w_path)))

    p_el = single("processor")
    p_id = _attr(p_el, "id", f"{path}/processor")
    processor = ProcessorRef(p_id, {k: v for k, v in p_el.attrib.items() if k != "id"})
    if registry is not None and p_id not in registry:
        raise UnknownProcessor(p_id)

    o_el = single("output")
    fields = []
    for i, f_el in enumerate(o_el.findall("field"), 1):
        f_path = f"{path}/output/field[{i}]"
        try:
            vtype = ValueType.parse(_attr(f_el, "type", f_path))
        except ValueError as exc:
            raise SchemaError(f"{f_path}@type", str(exc)) from None
        fields.append(Field(_attr(f_el, "name", f_path), vtype, f_el.get("description", "")))
    try:
        schema = StreamElementSchema(fields)
    except (ValueError, BridgeError) as exc:
        raise SchemaError(f"{path}/output", str(exc)) from None
    if not schema:
        raise SchemaError(f"{path}/output", "at least one field required")

    return VsDescription(name, tuple(wrappers), global_request, window, processor, schema)


# -- processors ------------------------------------------------------------

@dataclass
class ProcessorContext:
    vs: VsDescription
    source: str
    now: int
    tables: dict[str, list[Row]]
    node: "Node"

    def element(self, **values: ScalarValue) -> StreamElement:
        """Build an output element in the VS's declared field order."""
        schema = self.vs.output_schema
        return StreamElement(schema, tuple(values[f.name] for f in schema), self.now)


class Processor(Protocol):
    def __call__(self, rows: list[Row], ctx: ProcessorContext) -> Optional[StreamElement]: ...


ProcessorFactory = Callable[[VsDescription, "Node"], Processor]


def forward_factory(vs: VsDescription, node: "Node") -> Processor:
    """Forward the newest global-request row, matched to the output fields by name."""

    def forward(rows: list[Row], ctx: ProcessorContext) -> Optional[StreamElement]:
        if not rows:
            return None
        last = rows[-1]
        return ctx.element(**{f.name: last.values[f.name] for f in vs.output_schema})

    return forward


class ProcessorRegistry:
    def __init__(self) -> None:
        self._factories: dict[str, ProcessorFactory] = {}

    def register(self, pid: str, factory: ProcessorFactory) -> None:
        self._factories[pid] = factory

    def __contains__(self, pid: str) -> bool:
        return pid in self._factories

    def create(self, vs: VsDescription, node: "Node") -> Processor:
        try:
            factory = self._factories[vs.processor.id]
        except KeyError:
            raise UnknownProcessor(vs.processor.id) from None
        return factory(vs, node)


def default_registry() -> ProcessorRegistry:
    registry = ProcessorRegistry()
    registry.register("forward", forward_factory)
    return registry


# -- runtime ---------------------------------------------------------------

@dataclass
class VsStats:
    ingested: int = 0
    selected: int = 0
    outputs: int = 0
    processor_failures: int = 0
    query_failures: int = 0


class VirtualSensor:
    def __init__(self, desc: VsDescription, node: "Node", processor: Processor) -> None:
        self.desc = desc
        self.node = node
        self.processor = processor
        self.tables = {w.name: WindowTable(desc.window) for w in desc.wrappers}
        self.wrappers: dict[str, OpcWrapper] = {}
        self.stats = VsStats()
        self.running = False
        self._lock = threading.RLock()

    @property
    def name(self) -> str:
        return self.desc.name

    def start(self) -> None:
        self.running = True
        # Declaration order breaks ties between wrappers ticking at the same instant.
        for index, decl in enumerate(self.desc.wrappers):
            if decl.kind != "opc":
                continue
            wrapper = OpcWrapper(decl.wrapper_config(), self._sink_for(decl.name),
                                 self.node.clock, self.node.connector)
            self.wrappers[decl.name] = wrapper
            wrapper.start(priority=index)
        logger.info("VS %s started with %d wrapper(s)", self.name, len(self.desc.wrappers))

    def stop(self) -> None:
        with self._lock:
            self.running = False
            for wrapper in self.wrappers.values():
                wrapper.stop()
            for table in self.tables.values():
                table.clear()
        logger.info("VS %s stopped", self.name)

    def _sink_for(self, wrapper_name: str) -> Callable[[StreamElement], None]:
        def sink(element: StreamElement) -> None:
            self.ingest(wrapper_name, element)
        return sink

    def ingest(self, wrapper_name: str, element: StreamElement) -> list[StreamElement]:
        """Run one element through selection, windowing, aggregation and processing."""
        decl = self.desc.wrapper(wrapper_name)
        with self._lock:
            if not self.running:
                return []
            self.stats.ingested += 1
            try:
                row = eval_wrapper_request(decl.request, element)
            except QueryError as exc:
                self.stats.query_failures += 1
                logger.error("VS %s/%s: wrapper request failed: %s", self.name, wrapper_name, exc)
                return []
            if row is None:
                return []
            self.stats.selected += 1
            now = self.node.clock.now_ms()
            self.tables[wrapper_name].append(row, now)
            try:
                out = self._process(wrapper_name, now)
            except Exception as exc:
                self.stats.processor_failures += 1
                logger.error("VS %s: processing failed: %s", self.name, exc)
                return []
            if out is None:
                return []
            self.stats.outputs += 1
        self.node.publish(self.name, out)
        return [out]

    def _process(self, source: str, now: int) -> Optional[StreamElement]:
        q = self.desc.global_request
        rows = evaluate(q, self.tables[q.source].rows(now))
        tables = {name: t.rows(now) for name, t in self.tables.items()}
        ctx = ProcessorContext(self.desc, source, now, tables, self.node)
        out = self.processor(rows, ctx)
        if out is None:
            return None
        schema = self.desc.output_schema
        if not schema.same_shape(out.schema):
            raise DeployError(f"output {list(out.schema.names)} does not match declared schema "
                              f"{list(schema.names)}")
        return StreamElement(schema, out.values, now)


class Node:
    """Hosts virtual sensors and routes their outputs."""

    def __init__(self, clock: Clock, registry: ProcessorRegistry | None = None,
                 connector: Connector | None = None) -> None:
        self.clock = clock
        self.registry = registry or default_registry()
        self.connector = connector or tcp_connector
        self._vss: dict[str, VirtualSensor] = {}
        self._subscribers: dict[str, list[Callable[[StreamElement], None]]] = {}
        self._lock = threading.RLock()

    # -- deployment --

    def check(self, desc: VsDescription) -> None:
        """Raise if ``desc`` cannot be deployed (replacing a VS of the same name)."""
        if desc.processor.id not in self.registry:
            raise UnknownProcessor(desc.processor.id)
        with self._lock:
            graph = {name: vs.desc.producers for name, vs in self._vss.items()
                     if name != desc.name}
            graph[desc.name] = desc.producers
            _check_acyclic(graph)
            for decl in desc.wrappers:
                if decl.kind != "local":
                    continue
                producer = self._vss.get(decl.server)
                if producer is None or decl.server == desc.name:
                    raise UnknownProducer(f"{desc.name}/{decl.name}: no VS named {decl.server!r}")
                available = producer.desc.output_schema.names
                missing = decl.request.columns() - set(available)
                if missing:
                    raise UnknownColumn(f"{desc.name}/{decl.name}: {sorted(missing)}")
                if desc.global_request.source == decl.name:
                    cols = decl.request.output_columns(available)
                    missing = desc.global_request.columns() - set(cols)
                    if missing:
                        raise UnknownColumn(f"{desc.name}/global-request: {sorted(missing)}")

    def deploy(self, desc: VsDescription) -> VirtualSensor:
        with self._lock:
            self.check(desc)
            if desc.name in self._vss:
                self.undeploy(desc.name)
            vs = VirtualSensor(desc, self, self.registry.create(desc, self))
            self._vss[desc.name] = vs
            vs.start()
            return vs

    def undeploy(self, name: str) -> bool:
        with self._lock:
            vs = self._vss.pop(name, None)
        if vs is None:
            return False
        vs.stop()
        return True

    def get(self, name: str) -> VirtualSensor | None:
        with self._lock:
            return self._vss.get(name)

    @property
    def names(self) -> list[str]:
        with self._lock:
            return sorted(self._vss)

    def stop(self) -> None:
        for name in self.names:
            self.undeploy(name)

    # -- routing --

    def subscribe(self, vs_name: str, callback: Callable[[StreamElement], None]) -> None:
        with self._lock:
            self._subscribers.setdefault(vs_name, []).append(callback)

    def publish(self, vs_name: str, element: StreamElement) -> None:
        with self._lock:
            callbacks = list(self._subscribers.get(vs_name, ()))
            consumers = [(vs, d.name) for vs in self._vss.values()
                         for d in vs.desc.wrappers if d.kind == "local" and d.server == vs_name]
        for callback in callbacks:
            try:
                callback(element)
            except Exception:
                logger.exception("subscriber of %s failed", vs_name)
        for vs, wrapper_name in consumers:
            vs.ingest(wrapper_name, element)

    # -- control-plane helpers --

    def find_wrapper(self, vs_name: str, wrapper_name: str) -> OpcWrapper | None:
        vs = self.get(vs_name)
        if vs is None:
            return None
        return vs.wrappers.get(wrapper_name)

    def list_wrappers(self) -> list[tuple[str, OpcWrapper]]:
        with self._lock:
            return [(vs.name, w) for vs in sorted(self._vss.values(), key=lambda v: v.name)
                    for w in vs.wrappers.values()]

    def watch(self, directory: str | Path, scan_period_ms: int) -> "DeployLoop":
        loop = DeployLoop(self, directory, scan_period_ms)
        loop.start()
        return loop


def _check_acyclic(graph: dict[str, set[str]]) -> None:
    """``graph`` maps each VS to the producers it consumes from."""
    state: dict[str, int] = {}

    def visit(n: str, trail: list[str]) -> None:
        if state.get(n) == 2:
            return
        if state.get(n) == 1:
            cycle = trail[trail.index(n):] + [n]
            raise CycleError(" -> ".join(reversed(cycle)))
        state[n] = 1
        for m in sorted(graph.get(n, ())):
            visit(m, trail + [n])
        state[n] = 2

    for n in sorted(graph):
        visit(n, [])


# -- hot deployment --------------------------------------------------------

@dataclass
class _Known:
    digest: str
    vs_name: Optional[str]
    retry: bool = False


class DeployLoop:
    """Keep the node's VS set in line with the ``*.vsd.xml`` files in a directory."""

    def __init__(self, node: Node, directory: str | Path, scan_period_ms: int) -> None:
        if scan_period_ms < 1:
            raise ValueError("scan_period_ms must be >= 1")
        self.node = node
        self.directory = Path(directory)
        self.scan_period_ms = scan_period_ms
        self.known: dict[Path, _Known] = {}
        self.errors: dict[Path, str] = {}
        self.activity: Activity | None = None

    def start(self) -> Activity:
        self.activity = self.node.clock.spawn(self._step, name="deploy-loop", priority=-1)
        return self.activity

    def stop(self) -> None:
        if self.activity is not None:
            self.activity.cancel()

    def _step(self, now: int) -> int:
        try:
            self.scan()
        except Exception:
            logger.exception("deploy scan failed")
        return now + self.scan_period_ms

    def scan(self) -> None:
        try:
            present = {p: p.read_bytes() for p in sorted(self.directory.glob(f"*{VSD_SUFFIX}"))
                       if p.is_file()}
        except OSError as exc:
            logger.error("cannot scan %s: %s", self.directory, exc)
            return

        for path in [p for p in self.known if p not in present]:
            entry = self.known.pop(path)
            self.errors.pop(path, None)
            if entry.vs_name:
                logger.info("%s removed, stopping VS %s", path.name, entry.vs_name)
                self.node.undeploy(entry.vs_name)

        todo: list[tuple[Path, str, VsDescription]] = []
        for path, data in present.items():
            digest = hashlib.sha256(data).hexdigest()
            entry = self.known.get(path)
            if entry is not None and entry.digest == digest and not entry.retry:
                continue
            try:
                desc = parse_vs_description(data.decode("utf-8"), self.node.registry)
            except (BridgeError, UnicodeDecodeError) as exc:
                self._fail(path, digest, entry, exc)
                continue
            owner = self._owner(desc.name)
            if owner is None or owner == path:
                owner = next((p for p, _, d in todo if d.name == desc.name), None)
            if owner is not None and owner != path:
                self._fail(path, digest, entry,
                           DeployError(f"VS {desc.name} is already deployed from {owner.name}"))
                continue
            todo.append((path, digest, desc))

        # Producers first: retry until no further progress.
        while todo:
            progress, deferred = False, []
            for path, digest, desc in todo:
                try:
                    self._deploy(path, digest, desc)
                    progress = True
                except UnknownProducer:
                    deferred.append((path, digest, desc))
                except BridgeError as exc:
                    self._fail(path, digest, self.known.get(path), exc)
            if not progress:
                for path, digest, desc in deferred:
                    try:
                        self._deploy(path, digest, desc)
                    except BridgeError as exc:
                        self._fail(path, digest, self.known.get(path), exc,
                                   retry=isinstance(exc, UnknownProducer))
                break
            todo = deferred

    def _owner(self, vs_name: str) -> Path | None:
        for path, entry in self.known.items():
            if entry.vs_name == vs_name:
                return path
        return None

    def _deploy(self, path: Path, digest: str, desc: VsDescription) -> None:
        old = self.known.get(path)
        self.node.check(desc)
        if old is not None and old.vs_name and old.vs_name != desc.name:
            self.node.undeploy(old.vs_name)
        self.node.deploy(desc)
        self.known[path] = _Known(digest, desc.name)
        self.errors.pop(path, None)
        logger.info("deployed VS %s from %s", desc.name, path.name)

    def _fail(self, path: Path, digest: str, entry: _Known | None, exc: Exception,
              retry: bool = False) -> None:
        message = f"{type(exc).__name__}: {exc}"
        if self.errors.get(path) != message:
            logger.error("%s: %s", path.name, message)
        self.errors[path] = message
        # A broken edit leaves the previously deployed version running.
        self.known[path] = _Known(digest, entry.vs_name if entry else None, retry)
