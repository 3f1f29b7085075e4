from __future__ import annotations

import pytest

from opcbridge.clock import SimClock
from opcbridge.model import ValueType
from opcbridge.server import ItemSpec, OpcServer, ServerConfig, Steps


def steps_item(name="x", n=1000, period=100, vtype=ValueType.INT32, **kw) -> ItemSpec:
    """An item whose k-th sample is k: a fresh value at every cache write."""
    return ItemSpec(name, vtype, Steps(tuple(range(n))), period, **kw)


def server_config(*items: ItemSpec, **kw) -> ServerConfig:
    return ServerConfig(items=tuple(items), **kw)


@pytest.fixture
def clock() -> SimClock:
    return SimClock()


@pytest.fixture
def make_server(clock):
    def make(*items, **kw):
        return OpcServer(server_config(*items), clock, **kw)
    return make


def pytest_terminal_summary(terminalreporter):
    try:
        import test_acceptance
    except ImportError:
        return
    if test_acceptance.RESULTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(test_acceptance.RESULTS):
            for line in test_acceptance.RESULTS[n]:
                terminalreporter.write_line(line)
