"""Command-line entry point: ``opcbridge <subcommand> ...``.

Exit codes: 0 on success, 1 on configuration or usage errors, 2 on runtime failures.
"""

from __future__ import annotations

import argparse
import logging
import os
import signal
import sys
import threading
from pathlib import Path
from typing import Optional, Sequence

from .clock import RealClock
from .control import DEFAULT_CONTROL_PORT, send_command, serve_control
from .errors import BridgeError
from .server import DEFAULT_PORT, InvalidConfig, PortInUse, load_config, start

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2
LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
LOG_ENV = "OPCBRIDGE_LOG"

logger = logging.getLogger("opcbridge")


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # argparse would exit 2; usage errors are exit 1 here
        self.print_usage(sys.stderr)
        raise _UsageError(f"{self.prog}: error: {message}")


def _positive(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if value <= 0:
        raise argparse.ArgumentTypeError(f"must be positive: {value}")
    return value


def _port(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a port: {text!r}") from None
    if not 0 <= value <= 65535:
        raise argparse.ArgumentTypeError(f"port out of range: {value}")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="opcbridge", description="OPC-lite server, virtual-sensor node and tools.")
    parser.add_argument("--log-level", choices=sorted(LOG_LEVELS), default="info",
                        help=f"log verbosity on standard error (overridden by ${LOG_ENV})")
    sub = parser.add_subparsers(dest="command", metavar="<subcommand>", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("serve-opc", help="run the simulated OPC-lite server")
    p.add_argument("--config", required=True, type=Path, help="server config file (YAML)")
    p.add_argument("--port", type=_port, help=f"listen port (default: config value or {DEFAULT_PORT})")
    p.add_argument("--host", default="127.0.0.1", help="listen address (default: %(default)s)")
    p.add_argument("--duration-ms", type=_positive,
                   help="stop after this long instead of waiting for a signal")

    p = sub.add_parser("run-node", help="host virtual sensors from a watched directory")
    p.add_argument("--vs-dir", required=True, type=Path, help="directory of .vsd.xml files")
    p.add_argument("--scan-period-ms", type=_positive, default=1000,
                   help="directory scan period (default: %(default)s)")
    p.add_argument("--control-port", type=_port, default=DEFAULT_CONTROL_PORT,
                   help="control-plane TCP port (default: %(default)s)")
    p.add_argument("--duration-ms", type=_positive,
                   help="stop after this long instead of waiting for a signal")

    p = sub.add_parser("ctl", help="send one control command to a running node")
    p.add_argument("--port", type=_port, default=DEFAULT_CONTROL_PORT,
                   help="control-plane port (default: %(default)s)")
    p.add_argument("--host", default="127.0.0.1", help="node address (default: %(default)s)")
    p.add_argument("words", nargs="+", metavar="command",
                   help="SET-PERIOD <vs> <wrapper> <ms> | SET-MODE <vs> <wrapper> PPM|CBPM | "
                        "GET-METRICS <vs> <wrapper> | LIST")

    p = sub.add_parser("demo", help="replay an error-detection scenario on the simulated clock")
    p.add_argument("--scenario", default="default",
                   help="bundled scenario name (default, arm_above, quiet) or a YAML file")
    p.add_argument("--transport", choices=("loopback", "tcp"), default="loopback",
                   help="how the bridge reaches the server (default: %(default)s)")
    p.add_argument("--check", action="store_true",
                   help="compare against the scenario's expected events; exit 2 on mismatch")
    return parser


def configure_logging(level_name: str) -> None:
    env = os.environ.get(LOG_ENV, "").strip().lower()
    if env:
        if env not in LOG_LEVELS:
            raise _UsageError(f"{LOG_ENV}={env!r}: expected one of {', '.join(sorted(LOG_LEVELS))}")
        level_name = env
    logging.basicConfig(level=LOG_LEVELS[level_name], stream=sys.stderr,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s", force=True)


def _wait(duration_ms: Optional[int]) -> None:
    """Block until SIGINT/SIGTERM or until ``duration_ms`` elapses."""
    done = threading.Event()
    previous = {}
    if threading.current_thread() is threading.main_thread():
        for sig in (signal.SIGINT, signal.SIGTERM):
            previous[sig] = signal.signal(sig, lambda *_: done.set())
    try:
        done.wait(None if duration_ms is None else duration_ms / 1000.0)
    finally:
        for sig, handler in previous.items():
            signal.signal(sig, handler)


def cmd_serve_opc(args) -> int:
    config = load_config(args.config)
    with start(config, RealClock(), host=args.host, port=args.port) as handle:
        print(f"listening on {handle.address}", flush=True)
        _wait(args.duration_ms)
    return EXIT_OK


def cmd_run_node(args) -> int:
    from .demo.processors import demo_registry
    from .vsn import Node

    if not args.vs_dir.is_dir():
        raise InvalidConfig(f"--vs-dir {args.vs_dir}: not a directory")
    node = Node(RealClock(), demo_registry())
    try:
        control = serve_control(args.control_port, node)
    except OSError as exc:
        raise PortInUse(f"control port {args.control_port}: {exc.strerror}") from None
    loop = node.watch(args.vs_dir, args.scan_period_ms)
    print(f"control on {control.host}:{control.port}", flush=True)
    try:
        _wait(args.duration_ms)
    finally:
        loop.stop()
        node.stop()
        control.stop()
    return EXIT_OK


def cmd_ctl(args) -> int:
    try:
        lines = send_command(" ".join(args.words), port=args.port, host=args.host)
    except OSError as exc:
        print(f"ctl: cannot reach {args.host}:{args.port}: {exc.strerror or exc}", file=sys.stderr)
        return EXIT_RUNTIME
    for line in lines:
        print(line)
    return EXIT_CONFIG if lines and lines[0].startswith("ERR") else EXIT_OK


def cmd_demo(args) -> int:
    from .demo import ScenarioError, check, load_scenario, run_demo

    try:
        scenario = load_scenario(args.scenario)
    except ScenarioError as exc:
        raise InvalidConfig(str(exc)) from None
    try:
        log = run_demo(scenario, transport=args.transport)
    except ScenarioError as exc:
        raise InvalidConfig(str(exc)) from None
    sys.stdout.write(log.render())
    if args.check:
        result = check(log, scenario.expected)
        for line in result.diff:
            print(line, file=sys.stderr)
        if not result:
            return EXIT_RUNTIME
    return EXIT_OK


COMMANDS = {"serve-opc": cmd_serve_opc, "run-node": cmd_run_node, "ctl": cmd_ctl, "demo": cmd_demo}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        configure_logging(args.log_level)
    except _UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_CONFIG
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    try:
        return COMMANDS[args.command](args)
    except (InvalidConfig, PortInUse) as exc:
        print(f"opcbridge {args.command}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except BridgeError as exc:
        print(f"opcbridge {args.command}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except KeyboardInterrupt:
        return EXIT_OK
    except Exception as exc:
        logger.exception("unexpected failure")
        print(f"opcbridge {args.command}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
