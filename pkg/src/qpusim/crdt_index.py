"""Convergent inverted index over binned attribute values.

Postings form an add-wins observed-remove set. Every write carries a unique
tag (its stamp), adds postings for the new value's bins, and removes only the
tag the writer observed itself replacing. Removal is recorded in a tombstone
set so add and remove commute: states that applied the same entries in any
interleaving, or merged each other, hold identical visible postings.

The index never stores which exact value a posting had, only its bins, so a
range query touching part of a bin returns candidates that may not match.
Callers resolve those against source data; the scrub pass does the same in
bulk for postings whose object has moved on.
"""

import json
from dataclasses import dataclass
from typing import NamedTuple

from .geostore import DcReplica, LogEntry, Stamp
from .regions import AttributeSchema, Interval, Region
from .staleness import VectorClock


class Term(NamedTuple):
    attr: str
    bin: Interval


class Binner:
    """Deterministic value -> bin mapping shared by every index replica.

    Per attribute either "none" (each distinct value is its own closed
    point bin) or an equi-width bin count over the numeric domain; the last
    bin is closed above so the domain maximum belongs to it. Text attributes
    only support "none".
    """

    def __init__(self, schema: dict[str, AttributeSchema], spec: dict | None = None):
        self.schema = schema
        self.spec: dict[str, int | str] = {}
        spec = spec or {}
        for attr, sch in schema.items():
            mode = spec.get(attr, "none")
            if mode == "none":
                self.spec[attr] = "none"
                continue
            if not isinstance(mode, int) or mode < 1:
                raise ValueError(f"{attr}: bin count must be 'none' or int >= 1")
            if sch.kind == "text":
                raise ValueError(f"{attr}: text attributes take 'none' binning")
            self.spec[attr] = mode

    def bin_of(self, attr: str, value) -> Interval:
        mode = self.spec[attr]
        if mode == "none":
            return Interval.point(value)
        sch = self.schema[attr]
        width = (sch.hi - sch.lo) / mode
        i = min(int((value - sch.lo) / width), mode - 1)
        lo = sch.lo + i * width
        if i == mode - 1:
            return Interval(lo, sch.hi, False, False)
        return Interval(lo, lo + width, False, True)

    def terms_for(self, attrs: dict) -> tuple[Term, ...]:
        return tuple(Term(a, self.bin_of(a, v)) for a, v in sorted(attrs.items()))


@dataclass(frozen=True)
class IndexDelta:
    """Index effect of one log entry; a pure function of the entry, so any
    replica can regenerate it from its log."""

    origin: str
    seq: int
    adds: tuple  # ((Term, tag, key), ...)
    removes: tuple  # ((key, tag), ...)
    point: dict | None  # attrs behind the added tag, None for deletes

    @property
    def tag(self) -> Stamp | None:
        return self.adds[0][1] if self.adds else None


class CrdtIndex:
    def __init__(self, schema: dict[str, AttributeSchema], binner: Binner):
        self.schema = schema
        self.binner = binner
        self.terms: dict[str, dict[Interval, set[Stamp]]] = {a: {} for a in schema}
        self.tag_info: dict[Stamp, tuple[str, dict]] = {}  # visible tags only
        self.removed: set[Stamp] = set()
        self.clock = VectorClock()

    # -- ingestion -------------------------------------------------------------

    def delta_for(self, entry: LogEntry) -> IndexDelta:
        adds = ()
        point = None
        if entry.attrs is not None:
            adds = tuple(
                (t, entry.stamp, entry.key) for t in self.binner.terms_for(entry.attrs))
            point = entry.attrs
        removes = ()
        # a write only retracts the version it actually superseded; when it
        # lost the tie-break to what it observed, that version stays visible
        if entry.prev_tag is not None and entry.stamp > entry.prev_tag:
            removes = ((entry.key, entry.prev_tag),)
        return IndexDelta(entry.origin_dc, entry.seq, adds, removes, point)

    def apply_entry(self, entry: LogEntry) -> IndexDelta:
        delta = self.delta_for(entry)
        self.apply_delta(delta)
        return delta

    def apply_delta(self, delta: IndexDelta) -> bool:
        """Apply one delta; True when it advanced the state, False for a
        duplicate already covered by the clock. Gaps are protocol errors."""
        expected = self.clock.get(delta.origin) + 1
        if delta.seq < expected:
            return False
        if delta.seq > expected:
            raise ValueError(
                f"delta gap for {delta.origin}: got seq {delta.seq}, "
                f"expected {expected}")
        tag = delta.tag
        if tag is not None and tag not in self.removed:
            key = delta.adds[0][2]
            self.tag_info[tag] = (key, delta.point)
            for term, _, _ in delta.adds:
                self.terms[term.attr].setdefault(term.bin, set()).add(tag)
        for _, rtag in delta.removes:
            self._cull(rtag)
        self.clock = self.clock.with_entry(delta.origin, delta.seq)
        return True

    def _cull(self, tag: Stamp):
        self.removed.add(tag)
        info = self.tag_info.pop(tag, None)
        if info is None:
            return
        _, attrs = info
        for term in self.binner.terms_for(attrs):
            tags = self.terms[term.attr].get(term.bin)
            if tags is not None:
                tags.discard(tag)
                if not tags:
                    del self.terms[term.attr][term.bin]

    # -- merge -------------------------------------------------------------------

    def merge(self, other: "CrdtIndex"):
        for attr, bins in other.terms.items():
            mine = self.terms[attr]
            for bin_iv, tags in bins.items():
                mine.setdefault(bin_iv, set()).update(tags)
        self.tag_info.update(other.tag_info)
        culls = (self.removed | other.removed) & set(self.tag_info)
        self.removed |= other.removed
        for tag in culls:
            self._cull(tag)
        self.clock = self.clock.merge(other.clock)

    # -- reads ---------------------------------------------------------------------

    def lookup(self, rect: Region) -> dict[Stamp, tuple[str, dict]]:
        """Visible tags whose bins all intersect the rectangle, as tag ->
        (key, attrs at write time).

        Bin granularity: a tag from a bin only partly inside the rectangle is
        still returned, which is where binning false positives come from.
        """
        cand: set[Stamp] | None = None
        for attr, iv in rect.ivs.items():
            if self.schema[attr].domain().wholly_inside(iv):
                continue  # unconstrained axis selects every tag
            acc = set()
            for bin_iv, tags in self.terms[attr].items():
                if bin_iv.intersect(iv) is not None:
                    acc |= tags
            cand = acc if cand is None else cand & acc
            if not cand:
                return {}
        if cand is None:
            cand = set(self.tag_info)
        return {tag: self.tag_info[tag] for tag in cand}

    def lookup_range(
        self, attr: str, lo, hi, lo_open: bool = False, hi_open: bool = False
    ) -> tuple[set, set]:
        """Single-attribute range probe returning (exact_keys, candidate_keys):
        keys from bins wholly inside the interval are exact; keys from bins
        that only overlap it need a candidate check. Sets self.last_touched to
        the number of terms the probe visited."""
        iv = Interval(lo, hi, lo_open, hi_open)
        exact: set = set()
        cand: set = set()
        touched = 0
        if not iv.is_empty():
            for bin_iv, tags in self.terms[attr].items():
                if bin_iv.intersect(iv) is None:
                    continue
                touched += 1
                dst = exact if bin_iv.wholly_inside(iv) else cand
                for tag in tags:
                    dst.add(self.tag_info[tag][0])
        self.last_touched = touched
        return exact, cand - exact

    def visible_count(self) -> int:
        return len(self.tag_info)

    # -- maintenance ------------------------------------------------------------------

    def stale_postings(self, replica: DcReplica) -> list[tuple[str, Stamp]]:
        """Visible postings whose tag is not the current winning version of
        its key in `replica`, as sorted (key, tag) pairs."""
        stale = []
        for tag, (key, _) in self.tag_info.items():
            cur = replica.objects.get(key)
            if cur is None or cur.attrs is None or cur.stamp != tag:
                stale.append((key, tag))
        stale.sort()
        return stale

    def cull_many(self, pairs) -> int:
        n = 0
        for _, tag in pairs:
            if tag in self.tag_info:
                self._cull(tag)
                n += 1
        return n

    def scrub(self, replica: DcReplica) -> int:
        """Drop every posting whose tag is not the current winning version of
        its key in `replica`. Returns the number of postings dropped."""
        return self.cull_many(self.stale_postings(replica))

    # -- serialization -------------------------------------------------------------------

    def canonical(self) -> bytes:
        """Stable byte form of the visible state: clock plus sorted postings.
        Two converged replicas serialize identically."""
        terms = []
        for attr in sorted(self.terms):
            for bin_iv in sorted(self.terms[attr], key=lambda iv: (iv.lo, iv.lo_open)):
                tags = self.terms[attr][bin_iv]
                if not tags:
                    continue
                postings = sorted(
                    [t.ts, t.dc, t.seq, self.tag_info[t][0]] for t in tags)
                terms.append([attr, list(bin_iv.key()), postings])
        doc = {"clock": dict(sorted(self.clock.entries.items())), "terms": terms}
        return json.dumps(doc, separators=(",", ":"), ensure_ascii=True).encode()
