"""Query language: parsing, printing, evaluation, and rectangle planning.

Grammar (AND binds tighter than OR, parentheses honored):

    query      := expr [ "FRESHNESS" level ]
    expr       := term { "OR" term }
    term       := factor { "AND" factor }
    factor     := predicate | "(" expr ")"
    predicate  := IDENT cmp literal        cmp := "=" | "<" | "<=" | ">" | ">="
    literal    := NUMBER | '"' TEXT '"'
    level      := "strong" | "bounded:" INT | "snapshot" | "any"

The default level is "any". A parsed query normalizes to DNF; every conjunct
becomes one axis-aligned rectangle whose intervals carry exact open/closed
bounds, so the rectangle itself is the residual predicate the candidate check
re-applies.
"""

from dataclasses import dataclass, field, replace

from .regions import AttributeSchema, Interval, Region
from .staleness import Level, StalenessLevel


class QueryError(Exception):
    def __init__(self, msg: str, offset: int):
        self.offset = offset
        super().__init__(f"{msg} (at byte {offset})")


@dataclass(frozen=True)
class Pred:
    attr: str
    op: str  # = < <= > >=
    value: object


@dataclass(frozen=True)
class And:
    parts: tuple


@dataclass(frozen=True)
class Or:
    parts: tuple


@dataclass
class Query:
    expr: object
    staleness: StalenessLevel
    origin_dc: str | None = None
    text: str = ""

    def at(self, dc: str) -> "Query":
        return replace(self, origin_dc=dc)


@dataclass
class QueryResult:
    """What a coordinator hands back: exact keys, the coverage actually
    achieved, and the per-query counters."""

    query_id: str
    keys: frozenset
    clock: object  # achieved coverage clock, None on error
    target: object  # resolved target clock, None on error paths
    stats: dict
    trace: str
    error: str | None
    response_tick: int
    staleness: str
    origin_dc: str


# -- lexer ----------------------------------------------------------------------

_CMP = ("<=", ">=", "=", "<", ">")


def _tokens(text: str):
    i, n = 0, len(text)
    out = []
    while i < n:
        c = text[i]
        if c.isspace():
            i += 1
            continue
        if c == '"':
            j = text.find('"', i + 1)
            if j < 0:
                raise QueryError("unterminated string", i)
            out.append(("str", text[i + 1:j], i))
            i = j + 1
            continue
        if c.isdigit() or (c == "-" and i + 1 < n and text[i + 1].isdigit()):
            j = i + 1
            while j < n and (text[j].isdigit() or text[j] in ".eE+-"):
                # stop a trailing sign that is not part of an exponent
                if text[j] in "+-" and text[j - 1] not in "eE":
                    break
                j += 1
            raw = text[i:j]
            try:
                val = int(raw)
            except ValueError:
                try:
                    val = float(raw)
                except ValueError:
                    raise QueryError(f"bad number {raw!r}", i) from None
            out.append(("num", val, i))
            i = j
            continue
        if c.isalpha() or c == "_":
            j = i + 1
            while j < n and (text[j].isalnum() or text[j] == "_"):
                j += 1
            out.append(("ident", text[i:j], i))
            i = j
            continue
        for op in _CMP:
            if text.startswith(op, i):
                out.append(("cmp", op, i))
                i += len(op)
                break
        else:
            if c in "():":
                out.append((c, c, i))
                i += 1
            else:
                raise QueryError(f"unexpected character {c!r}", i)
    out.append(("end", "", n))
    return out


# -- parser ------------------------------------------------------------------------


class _Parser:
    def __init__(self, text: str, schema: dict[str, AttributeSchema]):
        self.text = text
        self.schema = schema
        self.toks = _tokens(text)
        self.pos = 0

    def peek(self):
        return self.toks[self.pos]

    def take(self, kind=None):
        tok = self.toks[self.pos]
        if kind is not None and tok[0] != kind:
            raise QueryError(f"expected {kind}, found {tok[1]!r}", tok[2])
        self.pos += 1
        return tok

    def parse(self) -> Query:
        expr = self.expr()
        level = StalenessLevel.any()
        kind, val, off = self.peek()
        if kind == "ident" and val == "FRESHNESS":
            self.take()
            level = self.level()
        kind, val, off = self.peek()
        if kind != "end":
            raise QueryError(f"trailing input {val!r}", off)
        return Query(expr, level, text=self.text)

    def level(self) -> StalenessLevel:
        kind, val, off = self.take()
        if kind != "ident" or val not in ("strong", "bounded", "snapshot", "any"):
            raise QueryError(f"unknown staleness level {val!r}", off)
        if val == "bounded":
            self.take(":")
            nkind, nval, noff = self.take()
            if nkind != "num" or not isinstance(nval, int) or nval < 0:
                raise QueryError("bounded: takes a non-negative integer", noff)
            return StalenessLevel.bounded(nval)
        return StalenessLevel(Level(val))

    def expr(self):
        parts = [self.term()]
        while self.peek()[:2] == ("ident", "OR"):
            self.take()
            parts.append(self.term())
        if len(parts) == 1:
            return parts[0]
        flat = []
        for p in parts:
            flat.extend(p.parts if isinstance(p, Or) else (p,))
        return Or(tuple(flat))

    def term(self):
        parts = [self.factor()]
        while self.peek()[:2] == ("ident", "AND"):
            self.take()
            parts.append(self.factor())
        if len(parts) == 1:
            return parts[0]
        flat = []
        for p in parts:
            flat.extend(p.parts if isinstance(p, And) else (p,))
        return And(tuple(flat))

    def factor(self):
        kind, val, off = self.peek()
        if kind == "(":
            self.take()
            inner = self.expr()
            self.take(")")
            return inner
        return self.predicate()

    def predicate(self) -> Pred:
        kind, attr, off = self.take()
        if kind != "ident":
            raise QueryError(f"expected attribute name, found {attr!r}", off)
        if attr in ("AND", "OR", "FRESHNESS"):
            raise QueryError(f"expected attribute name, found keyword {attr}", off)
        sch = self.schema.get(attr)
        if sch is None:
            raise QueryError(f"unknown attribute {attr!r}", off)
        _, op, _ = self.take("cmp")
        vkind, value, voff = self.take()
        if vkind == "str":
            if sch.kind != "text":
                raise QueryError(f"{attr} is numeric, got a string literal", voff)
        elif vkind == "num":
            if sch.kind == "text":
                raise QueryError(f"{attr} is text, got a number", voff)
            if sch.kind == "int" and not isinstance(value, int):
                raise QueryError(f"{attr} is integer-valued, got {value!r}", voff)
            if sch.kind == "float":
                value = float(value)
        else:
            raise QueryError(f"expected a literal, found {value!r}", voff)
        if not sch.validate(value):
            raise QueryError(f"value {value!r} outside domain of {attr}", voff)
        return Pred(attr, op, value)


def parse(text: str, schema: dict[str, AttributeSchema]) -> Query:
    if not text.strip():
        raise QueryError("empty query", 0)
    return _Parser(text, schema).parse()


# -- printer -------------------------------------------------------------------------


def _render_value(v) -> str:
    if isinstance(v, str):
        return f'"{v}"'
    return repr(v)


def _render_expr(node, parent: str = "") -> str:
    if isinstance(node, Pred):
        return f"{node.attr} {node.op} {_render_value(node.value)}"
    if isinstance(node, And):
        s = " AND ".join(_render_expr(p, "and") for p in node.parts)
        return s
    inner = " OR ".join(_render_expr(p, "or") for p in node.parts)
    return f"({inner})" if parent == "and" else inner


def render(q: Query) -> str:
    return f"{_render_expr(q.expr)} FRESHNESS {q.staleness.render()}"


# -- evaluation ----------------------------------------------------------------------


def eval_expr(node, attrs: dict) -> bool:
    if isinstance(node, Pred):
        v = attrs[node.attr]
        w = node.value
        if node.op == "=":
            return v == w
        if node.op == "<":
            return v < w
        if node.op == "<=":
            return v <= w
        if node.op == ">":
            return v > w
        return v >= w
    if isinstance(node, And):
        return all(eval_expr(p, attrs) for p in node.parts)
    return any(eval_expr(p, attrs) for p in node.parts)


# -- rectangles ------------------------------------------------------------------------


def _pred_interval(p: Pred, sch: AttributeSchema) -> Interval:
    dom = sch.domain()
    if p.op == "=":
        return Interval.point(p.value)
    if p.op == "<":
        return Interval(dom.lo, p.value, dom.lo_open, True)
    if p.op == "<=":
        return Interval(dom.lo, p.value, dom.lo_open, False)
    if p.op == ">":
        return Interval(p.value, dom.hi, True, dom.hi_open)
    return Interval(p.value, dom.hi, False, dom.hi_open)


def _dnf(node) -> list[tuple]:
    if isinstance(node, Pred):
        return [(node,)]
    if isinstance(node, Or):
        out = []
        for p in node.parts:
            out.extend(_dnf(p))
        return out
    combos = [()]
    for p in node.parts:
        combos = [c + d for c in combos for d in _dnf(p)]
    return combos


def to_rectangles(
    q: Query, schema: dict[str, AttributeSchema]
) -> list[tuple[Region, str]]:
    """DNF expansion to (rectangle, residual) pairs. Unconstrained attributes
    span their full axis; contradictory conjuncts drop out; the residual is
    the canonical text of the exact bounds."""
    out: list[tuple[Region, str]] = []
    seen = set()
    for conjunct in _dnf(q.expr):
        rect: Region | None = Region.whole(schema)
        for p in conjunct:
            rect = rect.narrowed(p.attr, _pred_interval(p, schema[p.attr]))
            if rect is None:
                break
        if rect is None:
            continue
        k = rect.key()
        if k in seen:
            continue
        seen.add(k)
        out.append((rect, rect.render()))
    return out


def rect_match(rects, attrs: dict) -> bool:
    return any(r.contains_point(attrs) for r in rects)


# -- end-to-end convenience -----------------------------------------------------------


def route(q: Query, network):
    """Submit the query and pump the simulation until its result is ready."""
    done: list = []
    network.submit(q, done.append)
    while not done:
        if not network.sim.step():
            raise RuntimeError("simulation drained before the query completed")
    return done[0]


def candidate_check(keys, q: Query, store, dc: str):
    """Re-evaluate keys against the current origin-replica state with exact
    bounds; deleted or absent objects fail. Returns (kept, removed_count)."""
    replica = store.replicas[dc]
    kept = set()
    for key in sorted(keys):
        attrs = replica.get(key)
        if attrs is not None and eval_expr(q.expr, attrs):
            kept.add(key)
    return kept, len(keys) - len(kept)
