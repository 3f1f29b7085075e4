"""Bridge between an OPC-style item server and a virtual-sensor stream node.

The pieces, bottom up:

* :mod:`opcbridge.model`: scalar values, qualities, item values, stream elements.
* :mod:`opcbridge.protocol`: the OPC-lite line protocol codec.
* :mod:`opcbridge.server`: a simulated item server with per-item generators.
* :mod:`opcbridge.client`: a client session over TCP or in-process loopback.
* :mod:`opcbridge.wrapper`: the polling wrapper (periodic and change-based production).
* :mod:`opcbridge.query` and :mod:`opcbridge.vsn`: queries, windows, virtual sensors, hot deployment.
* :mod:`opcbridge.control`: runtime control of wrappers over TCP.
* :mod:`opcbridge.demo`: the error-detection scenario.
"""

from .clock import RealClock, SimClock
from .errors import BridgeError
from .model import (GOOD, ItemValue, Quality, ScalarValue, Status, StreamElement,
                    StreamElementSchema, ValueType)
from .wrapper import ProductionMode, WrapperConfig, WrapperMetrics

__version__ = "0.1.0"

__all__ = [
    "BridgeError", "GOOD", "ItemValue", "ProductionMode", "Quality", "RealClock", "ScalarValue",
    "SimClock", "Status", "StreamElement", "StreamElementSchema", "ValueType", "WrapperConfig",
    "WrapperMetrics",
]
