"""OPC-lite: the line protocol spoken between the server simulator and clients.

One message per line, ``SEQ VERB ARGS...`` separated by single spaces and
terminated by ``\\n``.  See ``docs/protocol.md`` for the full grammar.
"""

from __future__ import annotations

import enum
import math
import re
from dataclasses import dataclass
from typing import Iterator, Union
from urllib.parse import quote, unquote

from .errors import BridgeError
from .model import (
    INT_RANGES, ItemValue, Quality, ScalarValue, Status, ValueType, to_float32,
)

PROTOCOL_VERSION = 1
MAX_LINE = 64 * 1024

NAME = re.compile(r"[A-Za-z_][A-Za-z0-9_./]*\Z")
_INT = re.compile(r"-?[0-9]+\Z")
_HEXFLOAT = re.compile(r"-?(0x[0-9a-f]+(\.[0-9a-f]*)?p[+-][0-9]+|inf)\Z")


class ParseError(BridgeError):
    def __init__(self, offset: int, reason: str) -> None:
        super().__init__(f"at byte {offset}: {reason}")
        self.offset = offset
        self.reason = reason


class ErrorCode(enum.Enum):
    UNKNOWN_ITEM = "UnknownItem"
    UNKNOWN_GROUP = "UnknownGroup"
    BAD_REQUEST = "BadRequest"
    WRITE_DENIED = "WriteDenied"


def _check_name(name: str) -> None:
    if not isinstance(name, str) or not NAME.match(name):
        raise ValueError(f"invalid name {name!r}")


def _check_seq(seq: int) -> None:
    if isinstance(seq, bool) or not isinstance(seq, int) or seq < 0:
        raise ValueError(f"invalid seq {seq!r}")


@dataclass(frozen=True)
class Hello:
    seq: int
    version: int = PROTOCOL_VERSION

    def __post_init__(self):
        _check_seq(self.seq)
        _check_seq(self.version)


@dataclass(frozen=True)
class Browse:
    seq: int

    def __post_init__(self):
        _check_seq(self.seq)


@dataclass(frozen=True)
class AddGroup:
    seq: int
    group: str
    update_rate_ms: int

    def __post_init__(self):
        _check_seq(self.seq)
        _check_name(self.group)
        _check_seq(self.update_rate_ms)


@dataclass(frozen=True)
class AddItems:
    seq: int
    group: str
    items: tuple[str, ...]

    def __post_init__(self):
        _check_seq(self.seq)
        _check_name(self.group)
        object.__setattr__(self, "items", tuple(self.items))
        for item in self.items:
            _check_name(item)


@dataclass(frozen=True)
class SyncRead:
    seq: int
    group: str

    def __post_init__(self):
        _check_seq(self.seq)
        _check_name(self.group)


@dataclass(frozen=True)
class Write:
    seq: int
    item: str
    value: ScalarValue

    def __post_init__(self):
        _check_seq(self.seq)
        _check_name(self.item)


@dataclass(frozen=True)
class RemoveGroup:
    seq: int
    group: str

    def __post_init__(self):
        _check_seq(self.seq)
        _check_name(self.group)


@dataclass(frozen=True)
class Bye:
    seq: int

    def __post_init__(self):
        _check_seq(self.seq)


@dataclass(frozen=True)
class Ok:
    seq: int

    def __post_init__(self):
        _check_seq(self.seq)


@dataclass(frozen=True)
class ItemList:
    seq: int
    items: tuple[str, ...]

    def __post_init__(self):
        _check_seq(self.seq)
        object.__setattr__(self, "items", tuple(self.items))
        for item in self.items:
            _check_name(item)


@dataclass(frozen=True)
class ReadResult:
    seq: int
    entries: tuple[tuple[str, ItemValue], ...]

    def __post_init__(self):
        _check_seq(self.seq)
        object.__setattr__(self, "entries", tuple((n, v) for n, v in self.entries))
        for name, _ in self.entries:
            _check_name(name)


@dataclass(frozen=True)
class Error:
    seq: int
    code: ErrorCode
    detail: str = ""

    def __post_init__(self):
        _check_seq(self.seq)


Request = Union[Hello, Browse, AddGroup, AddItems, SyncRead, Write, RemoveGroup, Bye]
Response = Union[Ok, ItemList, ReadResult, Error]
Message = Union[Request, Response]

_VERBS = {
    Hello: "HELLO", Browse: "BROWSE", AddGroup: "ADD_GROUP", AddItems: "ADD_ITEMS",
    SyncRead: "SYNC_READ", Write: "WRITE", RemoveGroup: "REMOVE_GROUP", Bye: "BYE",
    Ok: "OK", ItemList: "ITEM_LIST", ReadResult: "READ_RESULT", Error: "ERROR",
}
REQUEST_TYPES = (Hello, Browse, AddGroup, AddItems, SyncRead, Write, RemoveGroup, Bye)

_TAGS = {
    ValueType.BOOLEAN: "B", ValueType.INT16: "I16", ValueType.INT32: "I32",
    ValueType.INT64: "I64", ValueType.FLOAT32: "F32", ValueType.FLOAT64: "F64",
    ValueType.TEXT: "S",
}
_TYPES_BY_TAG = {tag: t for t, tag in _TAGS.items()}


def pct(text: str) -> str:
    return quote(text, safe="")


def encode_value(value: ScalarValue) -> str:
    tag = _TAGS[value.type]
    p = value.payload
    if value.type is ValueType.BOOLEAN:
        body = "true" if p else "false"
    elif value.type in INT_RANGES:
        body = str(p)
    elif value.type.is_float:
        body = float.hex(p)
    else:
        body = pct(p)
    return f"{tag}:{body}"


def encode_quality(q: Quality) -> str:
    if q.status is Status.GOOD:
        return "G"
    return ("U" if q.status is Status.UNCERTAIN else "B") + str(q.substatus)


def encode_item_value(iv: ItemValue) -> str:
    return f"{encode_value(iv.value)};{encode_quality(iv.quality)};{iv.timestamp}"


def encode(msg: Message) -> bytes:
    parts = [str(msg.seq), _VERBS[type(msg)]]
    if isinstance(msg, Hello):
        parts.append(str(msg.version))
    elif isinstance(msg, AddGroup):
        parts += [msg.group, str(msg.update_rate_ms)]
    elif isinstance(msg, AddItems):
        parts += [msg.group, *msg.items]
    elif isinstance(msg, (SyncRead, RemoveGroup)):
        parts.append(msg.group)
    elif isinstance(msg, Write):
        parts += [msg.item, encode_value(msg.value)]
    elif isinstance(msg, ItemList):
        parts += list(msg.items)
    elif isinstance(msg, ReadResult):
        parts += [f"{name}={encode_item_value(iv)}" for name, iv in msg.entries]
    elif isinstance(msg, Error):
        parts += [msg.code.value, pct(msg.detail)]
    return (" ".join(parts) + "\n").encode("utf-8")


# -- decoding -------------------------------------------------------------

def _tokens(line: str) -> list[tuple[int, str]]:
    out, pos = [], 0
    for tok in line.split(" "):
        out.append((pos, tok))
        pos += len(tok.encode("utf-8")) + 1
    return out


def _uint(offset: int, tok: str, what: str) -> int:
    if not _INT.match(tok) or tok.startswith("-") or str(int(tok)) != tok:
        raise ParseError(offset, f"{what} must be a non-negative decimal integer, got {tok!r}")
    return int(tok)


def _name(offset: int, tok: str) -> str:
    if not NAME.match(tok):
        raise ParseError(offset, f"invalid name {tok!r}")
    return tok


def _unpct(offset: int, tok: str) -> str:
    if re.search(r"%(?![0-9A-Fa-f]{2})", tok) or quote(unquote(tok, errors="strict"), safe="") != tok:
        raise ParseError(offset, f"malformed percent-encoding {tok!r}")
    return unquote(tok, errors="strict")


def decode_value(offset: int, tok: str) -> ScalarValue:
    tag, sep, body = tok.partition(":")
    if not sep or tag not in _TYPES_BY_TAG:
        raise ParseError(offset, f"unknown value tag in {tok!r}")
    vtype = _TYPES_BY_TAG[tag]
    offset += len(tag) + 1
    if vtype is ValueType.BOOLEAN:
        if body not in ("true", "false"):
            raise ParseError(offset, f"bad boolean {body!r}")
        return ScalarValue.boolean(body == "true")
    if vtype in INT_RANGES:
        if not _INT.match(body) or str(int(body)) != body:
            raise ParseError(offset, f"bad integer {body!r}")
        try:
            return ScalarValue(vtype, int(body))
        except ValueError as exc:
            raise ParseError(offset, str(exc)) from None
    if vtype.is_float:
        if not _HEXFLOAT.match(body):
            raise ParseError(offset, f"bad hexfloat {body!r}")
        x = float.fromhex(body)
        if float.hex(x) != body:
            raise ParseError(offset, f"non-canonical hexfloat {body!r}")
        if vtype is ValueType.FLOAT32 and not math.isinf(x):
            try:
                exact = to_float32(x) == x
            except OverflowError:
                exact = False
            if not exact:
                raise ParseError(offset, f"{body} is not a Float32")
        return ScalarValue(vtype, x)
    try:
        return ScalarValue.text(_unpct(offset, body))
    except UnicodeDecodeError:
        raise ParseError(offset, "percent-encoded text is not UTF-8") from None


def decode_quality(offset: int, tok: str) -> Quality:
    if tok == "G":
        return Quality()
    if tok[:1] in ("U", "B") and _INT.match(tok[1:]) and str(int(tok[1:])) == tok[1:]:
        status = Status.UNCERTAIN if tok[0] == "U" else Status.BAD
        return Quality(status, int(tok[1:]))
    raise ParseError(offset, f"bad quality {tok!r}")


def decode_item_value(offset: int, tok: str) -> ItemValue:
    parts = tok.split(";")
    if len(parts) != 3:
        raise ParseError(offset, f"item value needs value;quality;ts, got {tok!r}")
    value = decode_value(offset, parts[0])
    q_off = offset + len(parts[0].encode()) + 1
    quality = decode_quality(q_off, parts[1])
    ts = _uint(q_off + len(parts[1]) + 1, parts[2], "timestamp")
    return ItemValue(value, quality, ts)


def _expect(args: list[tuple[int, str]], n: int, verb: str, end: int) -> None:
    if len(args) != n:
        off = args[n][0] if len(args) > n else end
        raise ParseError(off, f"{verb} takes {n} argument(s), got {len(args)}")


def decode(line: bytes) -> Message:
    if len(line) > MAX_LINE:
        raise ParseError(MAX_LINE, "line exceeds 64 KiB")
    try:
        text = line.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise ParseError(exc.start, "invalid UTF-8") from None
    if "\n" in text or "\r" in text:
        raise ParseError(max(text.find("\n"), text.find("\r")), "embedded line break")
    toks = _tokens(text)
    end = len(line)
    if len(toks) < 2:
        raise ParseError(end, "expected SEQ VERB")
    seq = _uint(toks[0][0], toks[0][1], "seq")
    verb_off, verb = toks[1]
    args = toks[2:]

    if verb in ("BROWSE", "BYE", "OK"):
        _expect(args, 0, verb, end)
        return {"BROWSE": Browse, "BYE": Bye, "OK": Ok}[verb](seq)
    if verb == "HELLO":
        _expect(args, 1, verb, end)
        return Hello(seq, _uint(*args[0], "version"))
    if verb == "ADD_GROUP":
        _expect(args, 2, verb, end)
        return AddGroup(seq, _name(*args[0]), _uint(*args[1], "update rate"))
    if verb == "ADD_ITEMS":
        if not args:
            raise ParseError(end, "ADD_ITEMS needs a group")
        return AddItems(seq, _name(*args[0]), tuple(_name(o, t) for o, t in args[1:]))
    if verb in ("SYNC_READ", "REMOVE_GROUP"):
        _expect(args, 1, verb, end)
        cls = SyncRead if verb == "SYNC_READ" else RemoveGroup
        return cls(seq, _name(*args[0]))
    if verb == "WRITE":
        _expect(args, 2, verb, end)
        return Write(seq, _name(*args[0]), decode_value(*args[1]))
    if verb == "ITEM_LIST":
        return ItemList(seq, tuple(_name(o, t) for o, t in args))
    if verb == "READ_RESULT":
        entries = []
        for off, tok in args:
            name, eq, rest = tok.partition("=")
            if not eq:
                raise ParseError(off, f"expected item=value, got {tok!r}")
            entries.append((_name(off, name), decode_item_value(off + len(name) + 1, rest)))
        return ReadResult(seq, tuple(entries))
    if verb == "ERROR":
        _expect(args, 2, verb, end)
        try:
            code = ErrorCode(args[0][1])
        except ValueError:
            raise ParseError(args[0][0], f"unknown error code {args[0][1]!r}") from None
        try:
            detail = _unpct(*args[1])
        except UnicodeDecodeError:
            raise ParseError(args[1][0], "detail is not UTF-8") from None
        return Error(seq, code, detail)
    raise ParseError(verb_off, f"unknown verb {verb!r}")


def split_frames(data: bytes) -> Iterator[bytes]:
    """Split a byte stream of complete messages into lines (without ``\\n``)."""
    if data and not data.endswith(b"\n"):
        raise ParseError(len(data), "trailing partial frame")
    for line in data.split(b"\n")[:-1]:
        yield line


def read_frame(stream) -> bytes | None:
    """Read one line from a binary file-like object; ``None`` on clean EOF."""
    line = stream.readline(MAX_LINE + 2)
    if not line:
        return None
    if not line.endswith(b"\n"):
        if len(line) > MAX_LINE:
            raise ParseError(MAX_LINE, "line exceeds 64 KiB")
        raise EOFError("connection closed mid-frame")
    return line[:-1]
