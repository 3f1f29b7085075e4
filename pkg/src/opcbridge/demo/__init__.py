"""Error detection on a surface-treatment line.

Two chained virtual sensors watch an OPC-lite server: ``workshop`` raises an
alarm with the bath's area when a work piece disappears while the robot arm is
not above that bath; ``camera`` turns each alarm into a write of
``camera.target``.  Scenarios are timed writes replayed on a simulated clock.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Optional, Sequence, Union

import yaml

from ..client import connect, connect_loopback
from ..clock import SimClock
from ..errors import BridgeError
from ..model import ScalarValue, StreamElement, ValueType
from ..server import OpcServer, ServerConfig, coerce_literal, config_from_dict, start
from ..vsn import Node, parse_vs_description
from .processors import demo_registry

# Scenario writes land before any wrapper tick at the same instant.
ACTION_PRIORITY = -10

BUNDLED_SCENARIOS = ("default", "arm_above", "quiet")


class ScenarioError(BridgeError):
    pass


class EventKind(enum.Enum):
    ALARM_RAISED = "AlarmRaised"
    CAMERA_FOCUSED = "CameraFocused"


@dataclass(frozen=True)
class Action:
    at_ms: int
    item: str
    value: object


@dataclass(frozen=True)
class ExpectedEvent:
    at_ms_range: tuple[int, int]
    kind: EventKind
    area: str

    def __post_init__(self) -> None:
        lo, hi = self.at_ms_range
        if lo > hi:
            raise ScenarioError(f"empty time range {self.at_ms_range}")


@dataclass(frozen=True)
class ScenarioScript:
    actions: tuple[Action, ...]
    duration_ms: int = 2000
    expected: tuple[ExpectedEvent, ...] = ()

    def __post_init__(self) -> None:
        times = [a.at_ms for a in self.actions]
        if times != sorted(times):
            raise ScenarioError("actions must be sorted by at_ms")


@dataclass(frozen=True)
class Event:
    at_ms: int
    kind: EventKind
    area: str

    def __str__(self) -> str:
        return f"{self.at_ms} {self.kind.value} {self.area}"


class EventLog(list):
    def render(self) -> str:
        return "".join(f"{e}\n" for e in self)


def data_path(name: str) -> Path:
    return Path(str(resources.files(__package__).joinpath("data", name)))


def server_config() -> ServerConfig:
    return config_from_dict(yaml.safe_load(data_path("server.yaml").read_text()))


def scenario_from_dict(d: dict) -> ScenarioScript:
    try:
        actions = tuple(Action(int(a["at_ms"]), str(a["item"]), a["value"])
                        for a in d.get("actions") or ())
        expected = tuple(
            ExpectedEvent((int(e["at_ms"][0]), int(e["at_ms"][1])), EventKind(e["kind"]),
                          str(e["area"]))
            for e in d.get("expected") or ())
        return ScenarioScript(actions, int(d.get("duration_ms", 2000)), expected)
    except (KeyError, TypeError, ValueError, IndexError) as exc:
        raise ScenarioError(f"malformed scenario: {exc}") from None


def load_scenario(source: Union[str, Path]) -> ScenarioScript:
    """Load a bundled scenario by name or a YAML scenario file by path."""
    if str(source) in BUNDLED_SCENARIOS:
        path = data_path(f"{source}.scenario.yaml")
    else:
        path = Path(source)
    try:
        data = yaml.safe_load(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise ScenarioError(f"cannot read scenario {path}: {exc.strerror}") from None
    except yaml.YAMLError as exc:
        raise ScenarioError(f"{path}: {exc}") from None
    if not isinstance(data, dict):
        raise ScenarioError(f"{path}: expected a mapping")
    return scenario_from_dict(data)


def _typed(config: ServerConfig, action: Action) -> ScalarValue:
    spec = next((i for i in config.items if i.name == action.item), None)
    if spec is None:
        raise ScenarioError(f"unknown item {action.item!r}")
    if not spec.writable:
        raise ScenarioError(f"item {action.item!r} is not writable")
    try:
        coerce_literal(spec.type, action.value)
    except (TypeError, ValueError) as exc:
        raise ScenarioError(f"{action.item}: {exc}") from None
    if spec.type is ValueType.FLOAT32:
        return ScalarValue.float32(action.value)
    return ScalarValue(spec.type, float(action.value) if spec.type.is_float else action.value)


def run_demo(scenario: ScenarioScript, clock: Optional[SimClock] = None,
             transport: str = "loopback") -> EventLog:
    """Replay ``scenario`` against the bundled server and VSs; return the event log."""
    clock = clock or SimClock()
    config = server_config()
    writes = [(a, _typed(config, a)) for a in scenario.actions]

    handle = None
    if transport == "tcp":
        handle = start(config, clock, port=0)
        server = handle.opc
        connector = lambda cfg: connect(handle.address)  # noqa: E731
    elif transport == "loopback":
        server = OpcServer(config, clock)
        connector = lambda cfg: connect_loopback(server)  # noqa: E731
    else:
        raise ValueError(f"unknown transport {transport!r}")

    log = EventLog()
    node = Node(clock, demo_registry(), connector)
    observer = connector(None)
    observer.setup_items(["camera.target"])

    def on_alarm(e: StreamElement) -> None:
        log.append(Event(e.timestamp, EventKind.ALARM_RAISED, e["area"].payload))

    def on_camera(e: StreamElement) -> None:
        (_, target), = observer.sync_read()
        log.append(Event(clock.now_ms(), EventKind.CAMERA_FOCUSED, target.value.payload))

    try:
        node.subscribe("workshop", on_alarm)
        node.subscribe("camera", on_camera)
        for name in ("workshop.vsd.xml", "camera.vsd.xml"):
            node.deploy(parse_vs_description(data_path(name).read_text(), node.registry))

        writer = connector(None)
        for action, value in writes:
            clock.call_at(action.at_ms, lambda a=action, v=value: writer.write(a.item, v),
                          priority=ACTION_PRIORITY)
        clock.run_until(scenario.duration_ms)
        node.stop()
        writer.close()
        observer.close()
    finally:
        if handle is not None:
            handle.stop()
    return log


@dataclass
class CheckResult:
    passed: bool
    diff: list[str] = field(default_factory=list)

    def __bool__(self) -> bool:
        return self.passed


def check(log: Sequence[Event], expected: Sequence[ExpectedEvent]) -> CheckResult:
    """Match expected events in order; anything else of a tracked kind is a failure."""
    tracked = [e for e in log if isinstance(e.kind, EventKind)]
    diff: list[str] = []
    pos = 0
    for exp in expected:
        lo, hi = exp.at_ms_range
        j = next((j for j in range(pos, len(tracked))
                  if tracked[j].kind is exp.kind and tracked[j].area == exp.area), None)
        if j is None:
            diff.append(f"missing {exp.kind.value} {exp.area} in [{lo}, {hi}]")
            continue
        diff += [f"unexpected {e}" for e in tracked[pos:j]]
        got = tracked[j]
        if not lo <= got.at_ms <= hi:
            diff.append(f"{exp.kind.value} {exp.area} at {got.at_ms}, expected [{lo}, {hi}]")
        pos = j + 1
    diff += [f"unexpected {e}" for e in tracked[pos:]]
    return CheckResult(not diff, diff)
