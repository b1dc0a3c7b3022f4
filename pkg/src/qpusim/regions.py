"""Value-space geometry: attribute domains, intervals, and rectangles.

Intervals carry explicit open/closed flags on both ends so bin edges, point
lookups, and whole-domain ranges classify exactly. A hi bound of None means
"no upper bound" and only occurs on text attributes, whose domain has no
largest element.
"""

from dataclasses import dataclass
from typing import Any


def _below(a, b) -> bool:
    # a < b with None as +infinity
    if b is None:
        return a is not None
    if a is None:
        return False
    return a < b


def _beq(a, b) -> bool:
    if a is None or b is None:
        return a is None and b is None
    return a == b


@dataclass(frozen=True)
class AttributeSchema:
    """Declared domain of one indexable attribute."""

    name: str
    kind: str  # "int", "float" or "text"
    lo: Any = None
    hi: Any = None
    alphabet: str | None = None

    def __post_init__(self):
        if self.kind in ("int", "float"):
            if self.lo is None or self.hi is None or not self.lo < self.hi:
                raise ValueError(f"{self.name}: numeric domain needs lo < hi")
        elif self.kind == "text":
            if not self.alphabet or len(set(self.alphabet)) != len(self.alphabet):
                raise ValueError(f"{self.name}: text domain needs a duplicate-free alphabet")
        else:
            raise ValueError(f"{self.name}: unknown kind {self.kind!r}")

    def domain(self) -> "Interval":
        if self.kind == "text":
            return Interval("", None, False, False)
        return Interval(self.lo, self.hi, False, False)

    def validate(self, value) -> bool:
        if self.kind == "int":
            return (
                isinstance(value, int)
                and not isinstance(value, bool)
                and self.lo <= value <= self.hi
            )
        if self.kind == "float":
            return (
                isinstance(value, (int, float))
                and not isinstance(value, bool)
                and self.lo <= value <= self.hi
            )
        return isinstance(value, str) and all(c in self.alphabet for c in value)

    def embed(self, value) -> float:
        """Map a value to [0, 1] monotonically, for volume arithmetic."""
        if self.kind == "text":
            return text_embed(value, self.alphabet)
        return (value - self.lo) / (self.hi - self.lo)

    def norm_length(self, iv: "Interval") -> float:
        hi = 1.0 if iv.hi is None else self.embed(iv.hi)
        return max(hi - self.embed(iv.lo), 0.0)


def text_embed(s: str, alphabet: str, depth: int = 12) -> float:
    """Fractional base-(|alphabet|+1) expansion of the first chars.

    Order-preserving up to `depth`-char prefixes; rank 0 is reserved for
    end-of-string so "" sorts below every extension.
    """
    idx = {c: i for i, c in enumerate(alphabet)}
    base = len(alphabet) + 1
    x = 0.0
    scale = 1.0
    for c in s[:depth]:
        scale /= base
        x += (idx[c] + 1) * scale
    return x


@dataclass(frozen=True)
class Interval:
    lo: Any
    hi: Any  # None = unbounded above (text only)
    lo_open: bool = False
    hi_open: bool = False

    @classmethod
    def point(cls, v) -> "Interval":
        return cls(v, v, False, False)

    def is_empty(self) -> bool:
        if _below(self.hi, self.lo):
            return True
        if _beq(self.lo, self.hi) and (self.lo_open or self.hi_open):
            return True
        return False

    def is_point(self) -> bool:
        return _beq(self.lo, self.hi) and not self.lo_open and not self.hi_open

    def contains(self, v) -> bool:
        if _below(v, self.lo) or (v == self.lo and self.lo_open):
            return False
        if _below(self.hi, v) or (_beq(v, self.hi) and self.hi_open):
            return False
        return True

    def intersect(self, o: "Interval") -> "Interval | None":
        if _below(self.lo, o.lo):
            lo, lo_open = o.lo, o.lo_open
        elif _below(o.lo, self.lo):
            lo, lo_open = self.lo, self.lo_open
        else:
            lo, lo_open = self.lo, self.lo_open or o.lo_open
        if _below(self.hi, o.hi):
            hi, hi_open = self.hi, self.hi_open
        elif _below(o.hi, self.hi):
            hi, hi_open = o.hi, o.hi_open
        else:
            hi, hi_open = self.hi, self.hi_open or o.hi_open
        out = Interval(lo, hi, lo_open, hi_open)
        return None if out.is_empty() else out

    def wholly_inside(self, o: "Interval") -> bool:
        if _below(self.lo, o.lo):
            return False
        if _beq(self.lo, o.lo) and o.lo_open and not self.lo_open:
            return False
        if _below(o.hi, self.hi):
            return False
        if _beq(self.hi, o.hi) and o.hi_open and not self.hi_open:
            return False
        return True

    def subtract(self, o: "Interval") -> "list[Interval]":
        cut = self.intersect(o)
        if cut is None:
            return [self]
        out = []
        left = Interval(self.lo, cut.lo, self.lo_open, not cut.lo_open)
        if not left.is_empty():
            out.append(left)
        if cut.hi is not None:
            right = Interval(cut.hi, self.hi, not cut.hi_open, self.hi_open)
            if not right.is_empty():
                out.append(right)
        return out

    def key(self) -> tuple:
        return (self.lo, self.hi, self.lo_open, self.hi_open)

    def render(self) -> str:
        lb = "(" if self.lo_open else "["
        rb = ")" if self.hi_open else "]"
        hi = "inf" if self.hi is None else self.hi
        return f"{lb}{self.lo!r},{hi!r}{rb}"


class Region:
    """Axis-aligned rectangle: one Interval per schema attribute."""

    __slots__ = ("ivs",)

    def __init__(self, ivs: dict[str, Interval]):
        self.ivs = ivs

    @classmethod
    def whole(cls, schema: dict[str, AttributeSchema]) -> "Region":
        return cls({a: s.domain() for a, s in schema.items()})

    def narrowed(self, attr: str, iv: Interval) -> "Region | None":
        cut = self.ivs[attr].intersect(iv)
        if cut is None:
            return None
        out = dict(self.ivs)
        out[attr] = cut
        return Region(out)

    def intersect(self, o: "Region") -> "Region | None":
        out = {}
        for a, iv in self.ivs.items():
            cut = iv.intersect(o.ivs[a])
            if cut is None:
                return None
            out[a] = cut
        return Region(out)

    def contains_point(self, point: dict) -> bool:
        return all(iv.contains(point[a]) for a, iv in self.ivs.items())

    def wholly_inside(self, o: "Region") -> bool:
        return all(iv.wholly_inside(o.ivs[a]) for a, iv in self.ivs.items())

    def subtract(self, o: "Region") -> "list[Region]":
        """Disjoint rectangles covering self minus o, by axis sweep."""
        if self.intersect(o) is None:
            return [self]
        pieces = []
        rem = self
        for a in sorted(self.ivs):
            for part in rem.ivs[a].subtract(o.ivs[a]):
                out = dict(rem.ivs)
                out[a] = part
                pieces.append(Region(out))
            slab = rem.narrowed(a, o.ivs[a])
            if slab is None:
                return pieces
            rem = slab
        return pieces  # rem is inside o, dropped

    def volume(self, schema: dict[str, AttributeSchema]) -> float:
        v = 1.0
        for a, iv in self.ivs.items():
            v *= schema[a].norm_length(iv)
        return v

    def key(self) -> tuple:
        return tuple((a, *self.ivs[a].key()) for a in sorted(self.ivs))

    def render(self) -> str:
        return " x ".join(f"{a}:{self.ivs[a].render()}" for a in sorted(self.ivs))

    def __eq__(self, other):
        return isinstance(other, Region) and self.ivs == other.ivs

    def __hash__(self):
        return hash(self.key())

    def __repr__(self):
        return f"Region({self.render()})"


def subtract_all(targets: list[Region], cover: Region) -> list[Region]:
    out = []
    for t in targets:
        out.extend(t.subtract(cover))
    return out


def covers(target: Region, pieces: list[Region]) -> bool:
    """True when the union of pieces geometrically contains target."""
    rem = [target]
    for p in pieces:
        rem = subtract_all(rem, p)
        if not rem:
            return True
    return not rem


def greedy_cover(
    rects: list[Region],
    children: list[tuple[str, Region]],
    schema: dict[str, AttributeSchema],
) -> tuple[list[tuple[str, list[Region]]], list[Region]]:
    """Assign pieces of the query rectangles to children: repeatedly pick the
    child with the largest total intersection volume against what is still
    uncovered (ties go to the earlier child in the given order), hand it the
    intersection pieces, and subtract its region. Returns (assignments,
    uncovered remainder); a non-empty remainder means the children do not
    cover the rectangles.
    """
    remaining = [r for r in rects]
    assignments: list[tuple[str, list[Region]]] = []
    chosen: set[str] = set()
    while remaining:
        best = None
        for cid, creg in children:
            if cid in chosen:
                continue
            pieces = []
            for r in remaining:
                cut = r.intersect(creg)
                if cut is not None:
                    pieces.append(cut)
            if not pieces:
                continue
            vol = sum(p.volume(schema) for p in pieces)
            if best is None or vol > best[0]:
                best = (vol, cid, creg, pieces)
        if best is None:
            break
        _, cid, creg, pieces = best
        assignments.append((cid, pieces))
        chosen.add(cid)
        remaining = subtract_all(remaining, creg)
    return assignments, remaining
