"""Hypothesis strategies for values and protocol messages."""

from __future__ import annotations

import struct

from hypothesis import strategies as st

from opcbridge import protocol as p
from opcbridge.model import INT_RANGES, ItemValue, Quality, ScalarValue, Status, ValueType

NAME = st.from_regex(r"[A-Za-z_][A-Za-z0-9_./]{0,12}", fullmatch=True)
SEQ = st.integers(min_value=0, max_value=2**53)


def _f32(bits: int) -> float:
    return struct.unpack("<f", struct.pack("<I", bits))[0]


float32_payloads = st.one_of(
    st.integers(0, 2**32 - 1).map(_f32).filter(lambda x: x == x),
    st.sampled_from([0.0, -0.0, _f32(1), _f32(0x807FFFFF), float("inf"), float("-inf")]),
)
float64_payloads = st.one_of(
    st.floats(allow_nan=False),
    st.sampled_from([0.0, -0.0, 5e-324, -5e-324, 2.2250738585072009e-308, 1.7976931348623157e308]),
)


def scalar_values(vtype: ValueType | None = None):
    def build(t: ValueType):
        if t is ValueType.BOOLEAN:
            payload = st.booleans()
        elif t in INT_RANGES:
            lo, hi = INT_RANGES[t]
            payload = st.integers(lo, hi)
        elif t is ValueType.FLOAT32:
            payload = float32_payloads
        elif t is ValueType.FLOAT64:
            payload = float64_payloads
        else:
            payload = st.text()
        return payload.map(lambda v: ScalarValue(t, v))

    if vtype is not None:
        return build(vtype)
    return st.sampled_from(list(ValueType)).flatmap(build)


qualities = st.one_of(
    st.just(Quality()),
    st.builds(Quality, st.sampled_from([Status.UNCERTAIN, Status.BAD]), st.integers(0, 9999)),
)
item_values = st.builds(ItemValue, scalar_values(), qualities, st.integers(0, 2**62))

messages = st.one_of(
    st.builds(p.Hello, SEQ, st.integers(0, 1000)),
    st.builds(p.Browse, SEQ),
    st.builds(p.AddGroup, SEQ, NAME, st.integers(0, 10**9)),
    st.builds(p.AddItems, SEQ, NAME, st.lists(NAME, min_size=1, max_size=6).map(tuple)),
    st.builds(p.SyncRead, SEQ, NAME),
    st.builds(p.Write, SEQ, NAME, scalar_values()),
    st.builds(p.RemoveGroup, SEQ, NAME),
    st.builds(p.Bye, SEQ),
    st.builds(p.Ok, SEQ),
    st.builds(p.ItemList, SEQ, st.lists(NAME, max_size=6).map(tuple)),
    st.builds(p.ReadResult, SEQ,
              st.lists(st.tuples(NAME, item_values), max_size=6).map(tuple)),
    st.builds(p.Error, SEQ, st.sampled_from(list(p.ErrorCode)), st.text(max_size=40)),
)
