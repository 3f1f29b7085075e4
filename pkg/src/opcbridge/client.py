"""Client side of OPC-lite, as used by the wrapper."""

from __future__ import annotations

import itertools
import logging
import os
import socket
import time
from typing import Protocol, Sequence

from . import protocol as p
from .errors import BridgeError
from .model import EmptyItemList, ItemValue, ScalarValue

logger = logging.getLogger(__name__)

DEFAULT_TIMEOUT_MS = 1000


class ClientError(BridgeError):
    pass


class TransportError(ClientError):
    pass


class ConnectionRefused(TransportError):
    pass


class VersionMismatch(ClientError):
    pass


class UnknownItem(ClientError):
    def __init__(self, names: Sequence[str]) -> None:
        super().__init__(f"unknown items: {', '.join(names)}")
        self.names = list(names)


class UnknownGroup(ClientError):
    pass


class WriteDenied(ClientError):
    pass


class RequestFailed(ClientError):
    """The server answered with an error this client has no better name for."""


class Transport(Protocol):
    def request(self, frame: bytes) -> bytes:
        """Send one encoded request, return the response line without ``\\n``."""

    def close(self) -> None: ...


class TcpTransport:
    def __init__(self, address: tuple[str, int], timeout_ms: int = DEFAULT_TIMEOUT_MS) -> None:
        try:
            self._sock = socket.create_connection(address, timeout=timeout_ms / 1000.0)
        except ConnectionRefusedError as exc:
            raise ConnectionRefused(f"{address[0]}:{address[1]}: {exc.strerror}") from None
        except OSError as exc:
            raise TransportError(f"{address[0]}:{address[1]}: {exc}") from None
        self._sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self._rfile = self._sock.makefile("rb")

    def request(self, frame: bytes) -> bytes:
        try:
            self._sock.sendall(frame)
            line = p.read_frame(self._rfile)
        except (OSError, EOFError, p.ParseError) as exc:
            raise TransportError(str(exc) or type(exc).__name__) from None
        if line is None:
            raise TransportError("connection closed by server")
        return line

    def close(self) -> None:
        try:
            self._rfile.close()
            self._sock.close()
        except OSError:
            pass


class LoopbackTransport:
    """In-process transport to an :class:`~opcbridge.server.OpcServer`.

    Frames still go through the codec, so behaviour matches TCP byte for byte.
    """

    def __init__(self, server) -> None:
        self._session = server.open_session()
        self.closed = False

    def request(self, frame: bytes) -> bytes:
        if self.closed or self._session.closed:
            raise TransportError("loopback session closed")
        if not frame.endswith(b"\n"):
            raise TransportError("unterminated frame")
        return self._session.handle_line(frame[:-1])[:-1]

    def close(self) -> None:
        self.closed = True


def parse_address(addr: str) -> tuple[str, int]:
    host, _, port = addr.rpartition(":")
    if not host or not port.isdigit():
        raise ValueError(f"expected host:port, got {addr!r}")
    return host, int(port)


_group_counter = itertools.count(1)


class ClientSession:
    """One OPC-lite session owning at most one group.  Not thread-safe."""

    def __init__(self, transport: Transport, address: object = None) -> None:
        self.transport = transport
        self.address = address
        self.version: int | None = None
        self.group: str | None = None
        self.items: list[str] = []
        self.dead = False
        self.last_latency_ms = 0.0
        self._seq = itertools.count(1)

    @property
    def next_seq(self) -> int:
        return next(self._seq)

    def call(self, msg: p.Request) -> p.Response:
        if self.dead:
            raise TransportError("session is dead")
        try:
            raw = self.transport.request(p.encode(msg))
            resp = p.decode(raw)
        except TransportError:
            self.dead = True
            raise
        except p.ParseError as exc:
            self.dead = True
            raise TransportError(f"unparseable response: {exc}") from None
        if resp.seq != msg.seq:
            self.dead = True
            raise TransportError(f"response seq {resp.seq} does not answer request {msg.seq}")
        return resp

    def hello(self) -> None:
        resp = self.call(p.Hello(self.next_seq, p.PROTOCOL_VERSION))
        if isinstance(resp, p.Error):
            raise VersionMismatch(resp.detail)
        self.version = p.PROTOCOL_VERSION

    def browse(self) -> list[str]:
        resp = self.call(p.Browse(self.next_seq))
        if not isinstance(resp, p.ItemList):
            raise _failure(resp)
        return list(resp.items)

    def setup_items(self, items: Sequence[str], update_rate_ms: int = 0) -> str:
        """Create this session's group and register ``items`` in order.

        On failure the group is removed again, so nothing is left behind.
        """
        if not items:
            raise EmptyItemList("no items to register")
        group = f"w_{os.getpid()}_{next(_group_counter)}"
        resp = self.call(p.AddGroup(self.next_seq, group, update_rate_ms))
        if not isinstance(resp, p.Ok):
            raise _failure(resp)
        resp = self.call(p.AddItems(self.next_seq, group, tuple(items)))
        if not isinstance(resp, p.Ok):
            self.call(p.RemoveGroup(self.next_seq, group))
            raise _failure(resp)
        self.group = group
        self.items = list(items)
        return group

    def sync_read(self) -> list[tuple[str, ItemValue]]:
        if self.group is None:
            raise ClientError("setup_items must be called before sync_read")
        t0 = time.perf_counter()
        resp = self.call(p.SyncRead(self.next_seq, self.group))
        self.last_latency_ms = (time.perf_counter() - t0) * 1000.0
        if not isinstance(resp, p.ReadResult):
            raise _failure(resp)
        if [name for name, _ in resp.entries] != self.items:
            self.dead = True
            raise TransportError("read result does not match the registered items")
        return list(resp.entries)

    def write(self, item: str, value: ScalarValue) -> None:
        resp = self.call(p.Write(self.next_seq, item, value))
        if not isinstance(resp, p.Ok):
            raise _failure(resp)

    def close(self) -> None:
        if not self.dead:
            try:
                self.call(p.Bye(self.next_seq))
            except ClientError:
                pass
        self.dead = True
        self.transport.close()


def _failure(resp: p.Response) -> ClientError:
    if isinstance(resp, p.Error):
        if resp.code is p.ErrorCode.UNKNOWN_ITEM:
            return UnknownItem(resp.detail.split())
        if resp.code is p.ErrorCode.UNKNOWN_GROUP:
            return UnknownGroup(resp.detail)
        if resp.code is p.ErrorCode.WRITE_DENIED:
            return WriteDenied(resp.detail)
        return RequestFailed(resp.detail)
    return RequestFailed(f"unexpected response {type(resp).__name__}")


def open_session(transport: Transport, address: object = None) -> ClientSession:
    session = ClientSession(transport, address)
    try:
        session.hello()
    except Exception:
        transport.close()
        raise
    return session


def connect(address: tuple[str, int] | str, timeout_ms: int = DEFAULT_TIMEOUT_MS) -> ClientSession:
    """Open a TCP session and perform the HELLO handshake."""
    if isinstance(address, str):
        address = parse_address(address)
    return open_session(TcpTransport(address, timeout_ms), address)


def connect_loopback(server) -> ClientSession:
    return open_session(LoopbackTransport(server), "loopback")
