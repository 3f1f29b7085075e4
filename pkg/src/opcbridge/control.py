"""Runtime control of wrappers over a line-oriented TCP text protocol.

Commands (one per line)::

    SET-PERIOD <vs> <wrapper> <ms>      -> OK
    SET-MODE <vs> <wrapper> PPM|CBPM    -> OK
    GET-METRICS <vs> <wrapper>          -> key=value key=value ...
    LIST                                -> one "<vs> <wrapper>" line per wrapper, then END

Failures answer ``ERR <reason>``.  SET commands are acknowledged once queued;
the wrapper applies them at its next tick.
"""

from __future__ import annotations

import logging
import socket
import socketserver
import threading
from dataclasses import dataclass, field

from .wrapper import InvalidPeriod, ProductionMode

logger = logging.getLogger(__name__)

DEFAULT_CONTROL_PORT = 4850
LIST_END = "END"


def handle_command(node, line: str) -> list[str]:
    """Execute one control command against ``node`` and return the response lines."""
    parts = line.split()
    if not parts:
        return ["ERR bad-arg"]
    verb, args = parts[0].upper(), parts[1:]

    if verb == "LIST":
        if args:
            return ["ERR bad-arg"]
        return [f"{vs} {w.name}" for vs, w in node.list_wrappers()] + [LIST_END]

    if verb not in ("SET-PERIOD", "SET-MODE", "GET-METRICS"):
        return ["ERR unknown-command"]
    expected = 2 if verb == "GET-METRICS" else 3
    if len(args) != expected:
        return ["ERR bad-arg"]
    wrapper = node.find_wrapper(args[0], args[1])
    if wrapper is None or wrapper.stopped:
        return ["ERR unknown-target"]

    if verb == "GET-METRICS":
        return [" ".join(f"{k}={v}" for k, v in wrapper.metrics().as_pairs())]
    if verb == "SET-PERIOD":
        if not args[2].isdigit():
            return ["ERR bad-arg"]
        try:
            wrapper.set_update_period(int(args[2]))
        except InvalidPeriod:
            return ["ERR bad-arg"]
        return ["OK"]
    try:
        mode = ProductionMode(args[2].upper())
    except ValueError:
        return ["ERR bad-arg"]
    wrapper.set_mode(mode)
    return ["OK"]


class _Handler(socketserver.StreamRequestHandler):
    def handle(self) -> None:
        node = self.server.node  # type: ignore[attr-defined]
        for raw in self.rfile:
            try:
                line = raw.decode("utf-8").strip()
            except UnicodeDecodeError:
                self.wfile.write(b"ERR bad-arg\n")
                continue
            if not line:
                continue
            try:
                reply = handle_command(node, line)
            except Exception:
                logger.exception("control command %r failed", line)
                reply = ["ERR internal"]
            self.wfile.write(("\n".join(reply) + "\n").encode("utf-8"))
            self.wfile.flush()


class _TcpServer(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True


@dataclass
class ControlServer:
    host: str
    port: int
    _tcp: _TcpServer = field(repr=False)
    _thread: threading.Thread = field(repr=False)

    def stop(self) -> None:
        self._tcp.shutdown()
        self._tcp.server_close()
        self._thread.join(timeout=5)

    def __enter__(self) -> "ControlServer":
        return self

    def __exit__(self, *exc) -> None:
        self.stop()


def serve_control(port: int, node, host: str = "127.0.0.1") -> ControlServer:
    """Serve the control protocol for ``node`` in a background thread."""
    tcp = _TcpServer((host, port), _Handler)
    tcp.node = node  # type: ignore[attr-defined]
    thread = threading.Thread(target=tcp.serve_forever, name="control-server", daemon=True)
    thread.start()
    host, port = tcp.server_address[:2]
    logger.info("control plane listening on %s:%d", host, port)
    return ControlServer(host, port, tcp, thread)


def send_command(command: str, port: int = DEFAULT_CONTROL_PORT, host: str = "127.0.0.1",
                 timeout_s: float = 5.0) -> list[str]:
    """Send one command and collect its response lines."""
    with socket.create_connection((host, port), timeout=timeout_s) as sock:
        sock.sendall((command.strip() + "\n").encode("utf-8"))
        rfile = sock.makefile("rb")
        multi = command.split()[:1] in (["LIST"], ["list"])
        lines = []
        while True:
            raw = rfile.readline()
            if not raw:
                break
            line = raw.decode("utf-8").rstrip("\n")
            if not multi or line.startswith("ERR"):
                return [line]
            if line == LIST_END:
                break
            lines.append(line)
        return lines
