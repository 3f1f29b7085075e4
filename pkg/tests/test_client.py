from __future__ import annotations

import socket

import pytest

from opcbridge import protocol as p
from opcbridge.client import (
    ConnectionRefused, LoopbackTransport, TransportError, UnknownItem, VersionMismatch,
    WriteDenied, connect, connect_loopback, open_session, parse_address,
)
from opcbridge.clock import SimClock
from opcbridge.model import EmptyItemList, ScalarValue, ValueType
from opcbridge.server import External, ItemSpec, OpcServer, start
from conftest import server_config, steps_item


class Recording:
    """Transport double that records every request/response pair."""

    def __init__(self, inner):
        self.inner = inner
        self.pairs: list[tuple[p.Message, p.Message]] = []

    def request(self, frame):
        raw = self.inner.request(frame)
        self.pairs.append((p.decode(frame[:-1]), p.decode(raw)))
        return raw

    def close(self):
        self.inner.close()


@pytest.fixture
def server(clock):
    return OpcServer(server_config(
        steps_item("bath1.present", vtype=ValueType.INT32),
        steps_item("arm.pos"),
        ItemSpec("cam.target", ValueType.TEXT, External(""), 100, writable=True),
        ItemSpec("ext", ValueType.INT32, External(0), 100, writable=True),
    ), clock)


def test_seq_pairing_and_monotone(server, clock):
    rec = Recording(LoopbackTransport(server))
    s = open_session(rec)
    s.browse()
    s.setup_items(["bath1.present", "arm.pos"], 40)
    for t in range(0, 500, 40):
        clock.run_until(t)
        s.sync_read()
    s.write("ext", ScalarValue.int32(1))
    s.close()
    seqs = [req.seq for req, _ in rec.pairs]
    assert seqs[0] == 1 and seqs == sorted(set(seqs))
    assert all(req.seq == resp.seq for req, resp in rec.pairs)
    assert isinstance(rec.pairs[0][0], p.Hello) and isinstance(rec.pairs[-1][0], p.Bye)


def test_add_group_echoes_update_rate(server):
    rec = Recording(LoopbackTransport(server))
    s = open_session(rec)
    group = s.setup_items(["arm.pos"], 250)
    add = rec.pairs[1][0]
    assert add == p.AddGroup(add.seq, group, 250)
    assert p.NAME.match(group)


def test_sync_read_keeps_registration_order(server, clock):
    s = connect_loopback(server)
    s.setup_items(["arm.pos", "bath1.present"])
    clock.run_until(300)
    assert [n for n, _ in s.sync_read()] == ["arm.pos", "bath1.present"]
    assert s.last_latency_ms >= 0


def test_unknown_item_leaves_no_group(server):
    rec = Recording(LoopbackTransport(server))
    s = open_session(rec)
    with pytest.raises(UnknownItem) as info:
        s.setup_items(["arm.pos", "typo"])
    assert info.value.names == ["typo"]
    group = next(req.group for req, _ in rec.pairs if isinstance(req, p.AddGroup))
    resp = s.call(p.SyncRead(s.next_seq, group))
    assert resp.code is p.ErrorCode.UNKNOWN_GROUP


def test_empty_item_list(server):
    with pytest.raises(EmptyItemList):
        connect_loopback(server).setup_items([])


def test_write_then_read(server):
    s = connect_loopback(server)
    s.setup_items(["ext", "cam.target"])
    s.write("ext", ScalarValue.int32(7))
    s.write("cam.target", ScalarValue.text("bath2"))
    (_, ext), (_, cam) = s.sync_read()
    assert ext.value == ScalarValue.int32(7) and cam.value == ScalarValue.text("bath2")
    with pytest.raises(WriteDenied):
        s.write("arm.pos", ScalarValue.int32(3))


def test_end_to_end_over_tcp(server, clock):
    with start(server.config, clock, port=0) as handle:
        s = connect(f"127.0.0.1:{handle.port}")
        assert s.version == 1
        assert s.browse() == ["arm.pos", "bath1.present", "cam.target", "ext"]
        s.setup_items(["ext"])
        s.write("ext", ScalarValue.int32(7))
        assert s.sync_read()[0][1].value == ScalarValue.int32(7)
        s.close()


def test_version_mismatch():
    server = OpcServer(server_config(steps_item()), SimClock(), version=2)
    with pytest.raises(VersionMismatch):
        connect_loopback(server)


def test_connection_refused():
    with socket.socket() as probe:
        probe.bind(("127.0.0.1", 0))
        port = probe.getsockname()[1]
    with pytest.raises(ConnectionRefused):
        connect(("127.0.0.1", port))


def test_server_restart_is_a_transport_error(server, clock):
    handle = start(server.config, clock, port=0)
    s = connect(handle.address)
    s.setup_items(["arm.pos"])
    handle.stop()
    with pytest.raises(TransportError):
        for _ in range(3):  # the first send may still land in the socket buffer
            s.sync_read()
    assert s.dead


def test_seq_mismatch_kills_session(server):
    class Liar(LoopbackTransport):
        def request(self, frame):
            msg = p.decode(frame[:-1])
            return p.encode(p.Ok(msg.seq + 1))[:-1] if isinstance(msg, p.Browse) else \
                super().request(frame)

    s = open_session(Liar(server))
    with pytest.raises(TransportError):
        s.browse()
    assert s.dead


@pytest.mark.parametrize("text,expected", [("h:1", ("h", 1)), ("::1:4840", ("::1", 4840))])
def test_parse_address(text, expected):
    assert parse_address(text) == expected


@pytest.mark.parametrize("text", ["nohost", ":12", "h:x"])
def test_parse_address_rejects(text):
    with pytest.raises(ValueError):
        parse_address(text)
