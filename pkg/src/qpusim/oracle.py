"""Reference answers computed directly from replica state.

Everything here is independent of the tree, the caches, and the index
structures: full scans with exact bounds, log folds to a clock, and
from-scratch index rebuilds. Tests and the verify tooling compare the fast
paths against these.
"""

from __future__ import annotations

from .crdt_index import Binner, CrdtIndex
from .geostore import DcReplica, Stamp
from .regions import Region
from .router import Query, eval_expr
from .staleness import VectorClock


def scan(replica: DcReplica, q: Query) -> set[str]:
    """Exact-bounds full scan of the replica's current state."""
    out = set()
    for key in replica.objects:
        attrs = replica.get(key)
        if attrs is not None and eval_expr(q.expr, attrs):
            out.add(key)
    return out


def replay_to(replica: DcReplica, target: VectorClock) -> dict[str, dict]:
    """Fold the local log up to `target` and return key -> attrs as of that
    clock. The fold is last-writer-wins on stamps, the same rule the store
    applies, so it reproduces the state any replica would hold at `target`."""
    for dc, seq in target.entries.items():
        if seq > replica.heads.get(dc):
            raise ValueError(f"target {target!r} is beyond local history for {dc}")
    winners: dict[str, tuple[Stamp, dict | None]] = {}
    for entry in replica.entries_after(VectorClock(), upto=target):
        cur = winners.get(entry.key)
        if cur is None or entry.stamp > cur[0]:
            winners[entry.key] = (entry.stamp, entry.attrs)
    return {k: attrs for k, (_, attrs) in winners.items() if attrs is not None}


def replay_matches(replica: DcReplica, target: VectorClock, q: Query) -> set[str]:
    state = replay_to(replica, target)
    return {k for k, attrs in state.items() if eval_expr(q.expr, attrs)}


def rebuild_index(replica: DcReplica, binner: Binner,
                  region: Region | None = None,
                  origins=None) -> CrdtIndex:
    """The index a fresh leaf would converge to from current replica state:
    one posting set per (attribute, bin) over the live winners, clock at the
    replica's heads. Scrubbed converged leaves must serialize byte-identically
    to this. `origins` restricts to winners written at those DCs, which is
    what a leaf that never ingests foreign origins ends up holding."""
    idx = CrdtIndex(replica.schema, binner)
    for key in replica.objects:
        ver = replica.objects[key]
        if ver.attrs is None:
            continue
        if region is not None and not region.contains_point(ver.attrs):
            continue
        if origins is not None and ver.stamp.dc not in origins:
            continue
        idx.tag_info[ver.stamp] = (key, ver.attrs)
        for term in binner.terms_for(ver.attrs):
            idx.terms[term.attr].setdefault(term.bin, set()).add(ver.stamp)
    heads = replica.heads
    idx.clock = heads if origins is None else heads.restrict(origins)
    return idx
