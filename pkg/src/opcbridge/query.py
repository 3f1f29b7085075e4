"""SQL-like selection and aggregation queries for virtual sensors.

Grammar (keywords case-insensitive, column names case-sensitive)::

    query      := SELECT select FROM name [WHERE expr]
    select     := '*' | item (',' item)*
    item       := name | agg '(' name ')' | COUNT '(' '*' ')'
    agg        := AVG | MIN | MAX | COUNT | LAST
    expr       := conj (OR conj)*
    conj       := atom (AND atom)*
    atom       := '(' expr ')' | operand cmp operand
    cmp        := '=' | '!=' | '<' | '<=' | '>' | '>='
    operand    := name | number | string | TRUE | FALSE

Strings are single-quoted with ``''`` as the escaped quote.  Integer literals
are Int64, other numbers Float64.  Numeric comparisons widen both sides to
Float64; Boolean and Text values only support ``=`` and ``!=``.
"""

from __future__ import annotations

import math
import re
from collections import deque
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence, Union

from .errors import BridgeError
from .model import ScalarValue, StreamElement, ValueType

KEYWORDS = {"SELECT", "FROM", "WHERE", "AND", "OR", "AVG", "MIN", "MAX", "COUNT", "LAST",
            "TRUE", "FALSE"}
AGGREGATES = ("AVG", "MIN", "MAX", "COUNT", "LAST")
COMPARATORS = ("=", "!=", "<", "<=", ">", ">=")


class QueryError(BridgeError):
    pass


class QuerySyntaxError(QueryError):
    def __init__(self, query: str, offset: int, reason: str) -> None:
        super().__init__(f"{reason} at offset {offset} in {query!r}")
        self.query = query
        self.offset = offset
        self.reason = reason


class UnknownColumn(QueryError):
    pass


class TypeMismatch(QueryError):
    pass


# -- AST -------------------------------------------------------------------

@dataclass(frozen=True)
class Column:
    name: str


@dataclass(frozen=True)
class Literal:
    value: ScalarValue


Operand = Union[Column, Literal]


@dataclass(frozen=True)
class Comparison:
    op: str
    left: Operand
    right: Operand


@dataclass(frozen=True)
class BoolOp:
    op: str  # "AND" | "OR"
    operands: tuple


Expr = Union[Comparison, BoolOp]


@dataclass(frozen=True)
class SelectItem:
    column: Optional[str]  # None for COUNT(*)
    func: Optional[str] = None

    @property
    def output_name(self) -> str:
        if self.func is None:
            return self.column
        return f"{self.func.lower()}_{self.column or 'all'}"


@dataclass(frozen=True)
class Query:
    select: Optional[tuple[SelectItem, ...]]  # None means '*'
    source: str
    where: Optional[Expr] = None
    text: str = field(default="", compare=False)

    @property
    def is_star(self) -> bool:
        return self.select is None

    @property
    def has_aggregates(self) -> bool:
        return bool(self.select) and any(s.func for s in self.select)

    def columns(self) -> set[str]:
        """Every column the query reads (``*`` excluded)."""
        cols = {s.column for s in self.select or () if s.column is not None}
        if self.where is not None:
            cols |= _expr_columns(self.where)
        return cols

    def output_columns(self, input_columns: Sequence[str]) -> list[str]:
        if self.select is None:
            return list(input_columns)
        return [s.output_name for s in self.select]


def _expr_columns(expr: Expr) -> set[str]:
    if isinstance(expr, BoolOp):
        out: set[str] = set()
        for e in expr.operands:
            out |= _expr_columns(e)
        return out
    return {o.name for o in (expr.left, expr.right) if isinstance(o, Column)}


# -- parsing ---------------------------------------------------------------

_TOKEN = re.compile(r"""
    (?P<ws>\s+)
  | (?P<number>-?\d+(?:\.\d+)?(?:[eE][+-]?\d+)?)
  | (?P<name>[A-Za-z_][A-Za-z0-9_]*)
  | (?P<string>'(?:[^']|'')*')
  | (?P<op><=|>=|!=|=|<|>)
  | (?P<punct>[(),*])
""", re.VERBOSE)


@dataclass(frozen=True)
class _Tok:
    kind: str  # number, name, kw, string, op, punct, end
    text: str
    offset: int


def _tokenize(text: str) -> list[_Tok]:
    toks, pos = [], 0
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if m is None:
            raise QuerySyntaxError(text, pos, f"unexpected character {text[pos]!r}")
        kind = m.lastgroup
        if kind != "ws":
            tok = m.group()
            if kind == "name" and tok.upper() in KEYWORDS:
                toks.append(_Tok("kw", tok.upper(), pos))
            else:
                toks.append(_Tok(kind, tok, pos))
        pos = m.end()
    toks.append(_Tok("end", "", len(text)))
    return toks


class _Parser:
    def __init__(self, text: str) -> None:
        self.text = text
        self.toks = _tokenize(text)
        self.i = 0

    @property
    def tok(self) -> _Tok:
        return self.toks[self.i]

    def fail(self, reason: str) -> QuerySyntaxError:
        return QuerySyntaxError(self.text, self.tok.offset, reason)

    def accept(self, kind: str, text: str | None = None) -> _Tok | None:
        t = self.tok
        if t.kind == kind and (text is None or t.text == text):
            self.i += 1
            return t
        return None

    def expect(self, kind: str, text: str | None = None, what: str = "") -> _Tok:
        t = self.accept(kind, text)
        if t is None:
            found = self.tok.text or "end of query"
            raise self.fail(f"expected {what or text or kind}, found {found!r}")
        return t

    def query(self) -> Query:
        self.expect("kw", "SELECT")
        if self.accept("punct", "*"):
            select = None
        else:
            items = [self.select_item()]
            while self.accept("punct", ","):
                items.append(self.select_item())
            select = tuple(items)
        self.expect("kw", "FROM")
        source = self.expect("name", what="source name").text
        where = None
        if self.accept("kw", "WHERE"):
            where = self.expr()
        if self.tok.kind != "end":
            raise self.fail(f"unexpected {self.tok.text!r}")
        if select and any(s.func for s in select) and not all(s.func for s in select):
            raise QuerySyntaxError(self.text, 0, "aggregates and plain columns cannot be mixed")
        return Query(select, source, where, self.text)

    def select_item(self) -> SelectItem:
        t = self.tok
        if t.kind == "kw" and t.text in AGGREGATES:
            self.i += 1
            self.expect("punct", "(")
            if t.text == "COUNT" and self.accept("punct", "*"):
                col = None
            else:
                col = self.expect("name", what="column name").text
            self.expect("punct", ")")
            return SelectItem(col, t.text)
        return SelectItem(self.expect("name", what="column or aggregate").text)

    def expr(self) -> Expr:
        parts = [self.conj()]
        while self.accept("kw", "OR"):
            parts.append(self.conj())
        return parts[0] if len(parts) == 1 else BoolOp("OR", tuple(parts))

    def conj(self) -> Expr:
        parts = [self.atom()]
        while self.accept("kw", "AND"):
            parts.append(self.atom())
        return parts[0] if len(parts) == 1 else BoolOp("AND", tuple(parts))

    def atom(self) -> Expr:
        if self.accept("punct", "("):
            e = self.expr()
            self.expect("punct", ")")
            return e
        left = self.operand()
        op = self.expect("op", what="comparison operator").text
        right = self.operand()
        return Comparison(op, left, right)

    def operand(self) -> Operand:
        t = self.tok
        if t.kind == "name":
            self.i += 1
            return Column(t.text)
        if t.kind == "number":
            self.i += 1
            if re.fullmatch(r"-?\d+", t.text):
                n = int(t.text)
                if not -(2**63) <= n < 2**63:
                    raise QuerySyntaxError(self.text, t.offset, "integer literal out of range")
                return Literal(ScalarValue.int64(n))
            return Literal(ScalarValue.float64(float(t.text)))
        if t.kind == "string":
            self.i += 1
            return Literal(ScalarValue.text(t.text[1:-1].replace("''", "'")))
        if t.kind == "kw" and t.text in ("TRUE", "FALSE"):
            self.i += 1
            return Literal(ScalarValue.boolean(t.text == "TRUE"))
        raise self.fail(f"expected a column or literal, found {t.text or 'end of query'!r}")


def parse_query(text: str) -> Query:
    return _Parser(text).query()


# -- evaluation ------------------------------------------------------------

@dataclass(frozen=True)
class Row:
    values: dict
    timestamp: int

    def __getitem__(self, name: str) -> ScalarValue:
        return self.values[name]

    @property
    def columns(self) -> list[str]:
        return list(self.values)


def compare(op: str, a: ScalarValue, b: ScalarValue) -> bool:
    if a.type.is_numeric and b.type.is_numeric:
        x, y = float(a.payload), float(b.payload)
    elif a.type is b.type:
        if op not in ("=", "!="):
            raise TypeMismatch(f"{op} is not defined on {a.type.value}")
        x, y = a.payload, b.payload
    else:
        raise TypeMismatch(f"cannot compare {a.type.value} with {b.type.value}")
    if op == "=":
        return x == y
    if op == "!=":
        return x != y
    if op == "<":
        return x < y
    if op == "<=":
        return x <= y
    if op == ">":
        return x > y
    return x >= y


def _operand(o: Operand, values: dict) -> ScalarValue:
    if isinstance(o, Literal):
        return o.value
    try:
        return values[o.name]
    except KeyError:
        raise UnknownColumn(o.name) from None


def eval_expr(expr: Expr | None, values: dict) -> bool:
    if expr is None:
        return True
    if isinstance(expr, Comparison):
        return compare(expr.op, _operand(expr.left, values), _operand(expr.right, values))
    if expr.op == "AND":
        return all(eval_expr(e, values) for e in expr.operands)
    return any(eval_expr(e, values) for e in expr.operands)


def _check_columns(q: Query, available: Iterable[str]) -> None:
    missing = sorted(q.columns() - set(available))
    if missing:
        raise UnknownColumn(", ".join(missing))


def eval_wrapper_request(q: Query, e: StreamElement) -> Row | None:
    """Select from one stream element; ``None`` when WHERE rejects it."""
    if q.has_aggregates:
        raise QueryError("wrapper requests cannot aggregate")
    values = e.as_dict()
    _check_columns(q, values)
    if not eval_expr(q.where, values):
        return None
    if q.select is None:
        return Row(values, e.timestamp)
    return Row({s.column: values[s.column] for s in q.select}, e.timestamp)


def _aggregate(item: SelectItem, rows: list[Row]) -> ScalarValue:
    if item.func == "COUNT":
        return ScalarValue.int64(len(rows))
    col = [r.values[item.column] for r in rows]
    if item.func == "LAST":
        return col[-1]
    vtype = col[0].type
    if not vtype.is_numeric:
        raise TypeMismatch(f"{item.func} is not defined on {vtype.value}")
    if item.func == "AVG":
        return ScalarValue.float64(math.fsum(float(v.payload) for v in col) / len(col))
    pick = min if item.func == "MIN" else max
    return pick(col, key=lambda v: v.payload)


def evaluate(q: Query, rows: Sequence[Row]) -> list[Row]:
    """Run a (global) query over window rows, oldest first.

    Aggregates over an empty selection yield no row, except pure COUNT
    queries which yield zeros.
    """
    for r in rows:
        _check_columns(q, r.values)
    selected = [r for r in rows if eval_expr(q.where, r.values)]
    if q.has_aggregates:
        if not selected:
            if all(s.func == "COUNT" for s in q.select):
                return [Row({s.output_name: ScalarValue.int64(0) for s in q.select}, 0)]
            return []
        ts = max(r.timestamp for r in selected)
        return [Row({s.output_name: _aggregate(s, selected) for s in q.select}, ts)]
    if q.select is None:
        return [Row(dict(r.values), r.timestamp) for r in selected]
    return [Row({s.column: r.values[s.column] for s in q.select}, r.timestamp)
            for r in selected]


# -- windows ---------------------------------------------------------------

@dataclass(frozen=True)
class ByCount:
    n: int

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("count window needs n >= 1")


@dataclass(frozen=True)
class ByTime:
    ms: int

    def __post_init__(self):
        if self.ms < 1:
            raise ValueError("time window needs ms >= 1")


WindowSpec = Union[ByCount, ByTime]


class WindowTable:
    """Rows retained under a window spec, oldest first.

    A time window keeps rows whose age ``now - timestamp`` is at most ``ms``.
    """

    def __init__(self, spec: WindowSpec) -> None:
        self.spec = spec
        self._rows: deque[Row] = deque()

    def append(self, row: Row, now: int) -> None:
        self._rows.append(row)
        if isinstance(self.spec, ByCount):
            while len(self._rows) > self.spec.n:
                self._rows.popleft()
        self.evict(now)

    def evict(self, now: int) -> None:
        if isinstance(self.spec, ByTime):
            while self._rows and now - self._rows[0].timestamp > self.spec.ms:
                self._rows.popleft()

    def rows(self, now: int) -> list[Row]:
        self.evict(now)
        return list(self._rows)

    def clear(self) -> None:
        self._rows.clear()

    def __len__(self) -> int:
        return len(self._rows)
