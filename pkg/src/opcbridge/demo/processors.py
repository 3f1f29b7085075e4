"""Processors for the error-detection demo."""

from __future__ import annotations

import logging
import re
from typing import Optional

from ..client import ClientError, ClientSession
from ..model import ScalarValue, StreamElement
from ..query import Row
from ..vsn import ProcessorContext, ProcessorRegistry, VsDescription, default_registry
from ..wrapper import WrapperConfig

logger = logging.getLogger(__name__)

_BATH_COLUMN = re.compile(r"bath(\d+)_present\Z")


def bath_alarm_factory(vs: VsDescription, node):
    """Report the first bath whose piece went missing while the arm is elsewhere.

    Rows are the last two bath readings; the arm zone comes from the newest row
    of the arm wrapper's window (``arm`` processor parameter).
    """
    arm_wrapper = vs.processor.params.get("arm", "arm")

    def bath_alarm(rows: list[Row], ctx: ProcessorContext) -> Optional[StreamElement]:
        if ctx.source != vs.global_request.source or len(rows) < 2:
            return None
        prev, cur = rows[-2], rows[-1]
        arm_rows = ctx.tables.get(arm_wrapper) or []
        zone = arm_rows[-1]["arm_zone"].payload if arm_rows else 0
        baths = sorted((int(m.group(1)), col) for col in cur.columns
                       if (m := _BATH_COLUMN.match(col)))
        for k, col in baths:
            if prev[col].payload and not cur[col].payload and zone != k:
                return ctx.element(area=ScalarValue.text(f"bath{k}"))
        return None

    return bath_alarm


def camera_focus_factory(vs: VsDescription, node):
    """Write the newest reported area to the camera item and confirm by reading it back."""
    item = vs.processor.params.get("item", "camera.target")
    config = WrapperConfig(f"{vs.name}_writer", (item,), 1,
                           server_addr=vs.processor.params.get("server"))
    session: list[ClientSession] = []

    def writer() -> ClientSession:
        if not session or session[0].dead:
            s = node.connector(config)
            s.setup_items([item])
            session[:] = [s]
        return session[0]

    def camera_focus(rows: list[Row], ctx: ProcessorContext) -> Optional[StreamElement]:
        if not rows:
            return None
        area = next(iter(rows[-1].values.values()))
        s = writer()
        try:
            s.write(item, area)
            (_, readback), = s.sync_read()
        except ClientError:
            s.dead = True
            raise
        if readback.value != area:
            raise RuntimeError(f"camera reports {readback.value!r}, expected {area!r}")
        return ctx.element(target=readback.value)

    return camera_focus


def demo_registry() -> ProcessorRegistry:
    registry = default_registry()
    registry.register("bath_alarm", bath_alarm_factory)
    registry.register("camera_focus", camera_focus_factory)
    return registry
