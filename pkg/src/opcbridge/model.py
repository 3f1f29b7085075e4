"""Shared data model: OPC readings and GSN stream elements."""

from __future__ import annotations

import enum
import math
import re
import struct
from dataclasses import dataclass
from typing import Iterable, Sequence, Union

from .errors import BridgeError

IDENTIFIER = re.compile(r"[A-Za-z_][A-Za-z0-9_]*\Z")


class DuplicateName(BridgeError):
    pass


class EmptyItemList(BridgeError):
    pass


class LengthMismatch(BridgeError):
    pass


class ValueType(enum.Enum):
    BOOLEAN = "Boolean"
    INT16 = "Int16"
    INT32 = "Int32"
    INT64 = "Int64"
    FLOAT32 = "Float32"
    FLOAT64 = "Float64"
    TEXT = "Text"

    @property
    def is_numeric(self) -> bool:
        return self in _NUMERIC

    @property
    def is_float(self) -> bool:
        return self in (ValueType.FLOAT32, ValueType.FLOAT64)

    @classmethod
    def parse(cls, name: str) -> "ValueType":
        for member in cls:
            if member.value.lower() == name.lower():
                return member
        raise ValueError(f"unknown value type {name!r}")


_NUMERIC = frozenset({ValueType.INT16, ValueType.INT32, ValueType.INT64,
                      ValueType.FLOAT32, ValueType.FLOAT64})

INT_RANGES = {
    ValueType.INT16: (-(2**15), 2**15 - 1),
    ValueType.INT32: (-(2**31), 2**31 - 1),
    ValueType.INT64: (-(2**63), 2**63 - 1),
}

Payload = Union[bool, int, float, str]


def to_float32(x: float) -> float:
    """Round a Python float to the nearest IEEE single."""
    return struct.unpack("<f", struct.pack("<f", x))[0]


def _float_bits(x: float) -> int:
    return struct.unpack("<Q", struct.pack("<d", x))[0]


class ScalarValue:
    """A tagged scalar.  Floats compare bit-exactly (``-0.0 != 0.0``)."""

    __slots__ = ("type", "payload")

    def __init__(self, type: ValueType, payload: Payload) -> None:
        object.__setattr__(self, "type", type)
        object.__setattr__(self, "payload", _check_payload(type, payload))

    def __setattr__(self, name, value):
        raise AttributeError("ScalarValue is immutable")

    @classmethod
    def boolean(cls, v: bool) -> "ScalarValue":
        return cls(ValueType.BOOLEAN, v)

    @classmethod
    def int16(cls, v: int) -> "ScalarValue":
        return cls(ValueType.INT16, v)

    @classmethod
    def int32(cls, v: int) -> "ScalarValue":
        return cls(ValueType.INT32, v)

    @classmethod
    def int64(cls, v: int) -> "ScalarValue":
        return cls(ValueType.INT64, v)

    @classmethod
    def float32(cls, v: float) -> "ScalarValue":
        return cls(ValueType.FLOAT32, to_float32(v))

    @classmethod
    def float64(cls, v: float) -> "ScalarValue":
        return cls(ValueType.FLOAT64, v)

    @classmethod
    def text(cls, v: str) -> "ScalarValue":
        return cls(ValueType.TEXT, v)

    def _key(self):
        if self.type.is_float:
            return (self.type, _float_bits(self.payload))
        return (self.type, self.payload)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ScalarValue):
            return NotImplemented
        return self._key() == other._key()

    def __hash__(self) -> int:
        return hash(self._key())

    def __repr__(self) -> str:
        return f"{self.type.value}({self.payload!r})"


def _check_payload(type: ValueType, payload: Payload) -> Payload:
    if type is ValueType.BOOLEAN:
        if not isinstance(payload, bool):
            raise TypeError(f"Boolean payload must be bool, got {payload!r}")
        return payload
    if type in INT_RANGES:
        if isinstance(payload, bool) or not isinstance(payload, int):
            raise TypeError(f"{type.value} payload must be int, got {payload!r}")
        lo, hi = INT_RANGES[type]
        if not lo <= payload <= hi:
            raise ValueError(f"{payload} out of range for {type.value}")
        return payload
    if type.is_float:
        if isinstance(payload, bool) or not isinstance(payload, (int, float)):
            raise TypeError(f"{type.value} payload must be float, got {payload!r}")
        payload = float(payload)
        if math.isnan(payload):
            raise ValueError("NaN is not a valid ScalarValue")
        if type is ValueType.FLOAT32:
            try:
                exact = to_float32(payload) == payload
            except OverflowError:
                exact = False
            if not exact:
                raise ValueError(f"{payload!r} is not representable as Float32")
        return payload
    if not isinstance(payload, str):
        raise TypeError(f"Text payload must be str, got {payload!r}")
    return payload


class Status(enum.Enum):
    GOOD = "Good"
    UNCERTAIN = "Uncertain"
    BAD = "Bad"


@dataclass(frozen=True)
class Quality:
    status: Status = Status.GOOD
    substatus: int = 0

    def __post_init__(self) -> None:
        if self.substatus < 0:
            raise ValueError("substatus must be non-negative")
        if self.status is Status.GOOD and self.substatus != 0:
            raise ValueError("Good quality carries no substatus")

    @property
    def is_bad(self) -> bool:
        return self.status is Status.BAD


GOOD = Quality()


@dataclass(frozen=True)
class ItemValue:
    value: ScalarValue
    quality: Quality
    timestamp: int  # ms since epoch, server clock

    def __post_init__(self) -> None:
        if self.timestamp < 0:
            raise ValueError("timestamp must be non-negative")


@dataclass(frozen=True)
class Field:
    name: str
    type: ValueType
    description: str = ""


class StreamElementSchema(tuple):
    """Ordered, name-unique tuple of :class:`Field`."""

    def __new__(cls, fields: Iterable[Field] = ()):
        fields = tuple(fields)
        seen = set()
        for f in fields:
            if not IDENTIFIER.match(f.name):
                raise ValueError(f"invalid field name {f.name!r}")
            if f.name in seen:
                raise DuplicateName(f"duplicate field {f.name!r}")
            seen.add(f.name)
        return super().__new__(cls, fields)

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(f.name for f in self)

    def index(self, name: str) -> int:  # type: ignore[override]
        for i, f in enumerate(self):
            if f.name == name:
                return i
        raise KeyError(name)

    def same_shape(self, other: Sequence[Field]) -> bool:
        """Names and types equal, descriptions ignored."""
        return [(f.name, f.type) for f in self] == [(f.name, f.type) for f in other]


@dataclass(frozen=True)
class StreamElement:
    schema: StreamElementSchema
    values: tuple[ScalarValue, ...]
    timestamp: int

    def __post_init__(self) -> None:
        if not isinstance(self.schema, StreamElementSchema):
            object.__setattr__(self, "schema", StreamElementSchema(self.schema))
        object.__setattr__(self, "values", tuple(self.values))
        if len(self.values) != len(self.schema):
            raise LengthMismatch(
                f"{len(self.values)} values for {len(self.schema)} fields")
        for f, v in zip(self.schema, self.values):
            if v.type is not f.type:
                raise TypeError(f"field {f.name} is {f.type.value}, value is {v.type.value}")

    def __getitem__(self, name: str) -> ScalarValue:
        return self.values[self.schema.index(name)]

    def as_dict(self) -> dict[str, ScalarValue]:
        return dict(zip(self.schema.names, self.values))

    @classmethod
    def from_values(cls, values: dict[str, ScalarValue], timestamp: int,
                    description: str = "") -> "StreamElement":
        schema = StreamElementSchema(Field(k, v.type, description) for k, v in values.items())
        return cls(schema, tuple(values.values()), timestamp)


def field_name(item: str) -> str:
    """Map an OPC item name onto a stream-element field identifier."""
    name = re.sub(r"[^A-Za-z0-9_]", "_", item)
    if not name or name[0].isdigit():
        name = "_" + name
    return name


def convert_item_values(items: Sequence[tuple[str, ItemValue]], emit_time: int,
                        include_source_timestamps: bool = False) -> StreamElement:
    """Build the stream element for one wrapper read.

    Item names that are not identifiers (``bath1.present``) are mapped with
    :func:`field_name`.  Source timestamps, when requested, follow the values
    as ``<name>_ts`` Int64 fields.
    """
    if not items:
        raise EmptyItemList("no items to convert")
    names = [field_name(n) for n, _ in items]
    if len(set(n for n, _ in items)) != len(items) or len(set(names)) != len(names):
        raise DuplicateName(f"duplicate item names in {[n for n, _ in items]}")
    fields = [Field(n, iv.value.type, "opc-item") for n, (_, iv) in zip(names, items)]
    values = [iv.value for _, iv in items]
    if include_source_timestamps:
        fields += [Field(f"{n}_ts", ValueType.INT64, "opc-source-timestamp") for n in names]
        values += [ScalarValue.int64(iv.timestamp) for _, iv in items]
    return StreamElement(StreamElementSchema(fields), tuple(values), emit_time)


def values_equal_ignoring_timestamp(a: Sequence[ItemValue], b: Sequence[ItemValue]) -> bool:
    if len(a) != len(b):
        raise LengthMismatch(f"{len(a)} != {len(b)}")
    return all(x.value == y.value and x.quality.status is y.quality.status
               for x, y in zip(a, b))
