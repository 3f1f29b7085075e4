"""Retune a running wrapper through the control plane.

Run with ``python3 demos/runtime_control.py``.  A VS polls a constant item at
100 ms.  After 2 s the period is halved, and after 4 s the wrapper switches to
change-based mode, which silences it because the value never changes.
"""

from __future__ import annotations

from opcbridge.client import connect_loopback
from opcbridge.clock import SimClock
from opcbridge.control import handle_command
from opcbridge.model import ValueType
from opcbridge.server import Constant, ItemSpec, OpcServer, ServerConfig
from opcbridge.vsn import Node, default_registry, parse_vs_description

VSD = """
<virtual-sensor name="line">
  <wrapper name="poll" kind="opc" server="127.0.0.1:4840" items="c"
           update-period-ms="100" request="SELECT * FROM poll"/>
  <global-request>SELECT * FROM poll</global-request>
  <window count="1"/>
  <processor id="forward"/>
  <output><field name="c" type="Int32"/></output>
</virtual-sensor>
"""


def main() -> None:
    clock = SimClock()
    server = OpcServer(ServerConfig((ItemSpec("c", ValueType.INT32, Constant(4)),)), clock)
    node = Node(clock, default_registry(), lambda cfg: connect_loopback(server))
    node.deploy(parse_vs_description(VSD, node.registry))
    times: list[int] = []
    node.subscribe("line", lambda e: times.append(clock.now_ms()))

    def window(lo: int, hi: int) -> int:
        return sum(1 for t in times if lo <= t < hi)

    for at, command in [(2000, "SET-PERIOD line poll 50"), (4000, "SET-MODE line poll CBPM")]:
        clock.run_until(at - 1)
        print(f"{at:>5} ms  {command:<26} -> {' '.join(handle_command(node, command))}")
    clock.run_until(6000)
    print()
    for lo, hi in [(0, 2000), (2000, 4000), (4000, 6000)]:
        print(f"emissions in [{lo}, {hi}) ms: {window(lo, hi)}")
    print()
    print(handle_command(node, "GET-METRICS line poll")[0])


if __name__ == "__main__":
    main()
