"""Query processing tree over the replicated store.

One tree serves all datacenters: a dispatch root at the home DC fans out to a
freshness node per DC, and each freshness node owns a value-partitioned
subtree of history leaves plus one live leaf. History leaves keep converging
inverted indexes fed from their colocated replica (and, in delta mode, from
peer leaves abroad); live leaves scan the tail of the local log so results can
reach targets the history side has not indexed yet.

Caching note: internal nodes and history leaves keep result caches whose
entries are frozen at their insertion coverage clock. Index deltas pushed up
the tree keep entry *contents* maintained, but never advance entry clocks, so
a hit only serves targets at or below what the entry actually joined. Any
freshness beyond a response's claimed coverage is recovered by the coordinator,
which rescans its origin log past the claim and candidate-checks every key.
That keeps cache staleness and cross-DC push reordering out of the result
path entirely.
"""

from __future__ import annotations

from collections import OrderedDict, deque
from dataclasses import dataclass, field, replace

from .crdt_index import Binner, CrdtIndex, IndexDelta
from .geostore import GeoStore, LogEntry
from .regions import Interval, Region, greedy_cover
from .router import Query, QueryResult, candidate_check, rect_match, to_rectangles
from .simcore import Envelope, Simulation
from .staleness import (
    SnapshotReport,
    UnsatisfiableStaleness,
    VectorClock,
    catch_up,
    resolve_target,
)

LOG = "log"
DELTA = "delta"


class SplitRefused(Exception):
    pass


class MergeRefused(Exception):
    pass


@dataclass(frozen=True)
class SplitPolicy:
    """Structural thresholds; the merge bar must sit well under the split bar
    or a merged leaf could immediately re-split."""

    t_split: int = 1000
    t_merge: int = 100
    auto: bool = False
    mode: str = "internal"  # what becomes of a split leaf: internal | replace

    def __post_init__(self):
        if self.t_merge < 1 or self.t_merge >= self.t_split / 2:
            raise ValueError("need 1 <= t_merge < t_split / 2")
        if self.mode not in ("internal", "replace"):
            raise ValueError(f"unknown split mode {self.mode!r}")


@dataclass(frozen=True)
class SelectivityConfig:
    """Sliding relevance window with two thresholds so mode choice has
    hysteresis: a leaf flips only after the ratio crosses the far bar."""

    window: int = 1000
    theta_low: float = 0.05
    theta_high: float = 0.15

    def __post_init__(self):
        if self.window < 1:
            raise ValueError("window must be positive")
        if not 0.0 < self.theta_low < self.theta_high < 1.0:
            raise ValueError("need 0 < theta_low < theta_high < 1")


@dataclass
class TreeConfig:
    root_dc: str
    replicated: bool = True
    repl_mode: str = LOG  # log | delta | adaptive
    gossip_every: int = 10
    cache_capacity: int = 256
    split: SplitPolicy = field(default_factory=SplitPolicy)
    selectivity: SelectivityConfig = field(default_factory=SelectivityConfig)
    history_tree: object = "leaf"
    verify: bool = False

    def __post_init__(self):
        if self.repl_mode not in (LOG, DELTA, "adaptive"):
            raise ValueError(f"unknown replication mode {self.repl_mode!r}")
        if self.gossip_every < 1:
            raise ValueError("gossip_every must be positive")


@dataclass
class Probe:
    qid: str
    rects: tuple  # Region pieces to answer, all inside the receiver's region
    residual: str  # exact-bounds text, the cache key alongside the rectangles
    origin_dc: str
    reply_to: str
    level: object = None  # StalenessLevel, set on the root probe only
    origin_heads: VectorClock | None = None  # ditto
    target: VectorClock | None = None  # resolved at the root
    boundary: VectorClock | None = None  # set on live probes


@dataclass
class Resp:
    qid: str
    hits: dict  # tag -> (key, attrs at write time)
    clock: VectorClock | None  # claimed coverage, None on error
    visited: frozenset
    cache_hits: int
    trace: tuple
    target: VectorClock | None = None  # echoed by the root
    error: str | None = None


@dataclass(frozen=True)
class ChildRef:
    actor: str
    kind: str
    region: Region
    dc: str
    scope: frozenset


# -- result cache ----------------------------------------------------------------


@dataclass
class CacheEntry:
    rects: tuple
    residual: str
    content: dict  # tag -> (key, attrs)
    clock: VectorClock  # coverage at insertion; never advanced


def bin_hit(binner: Binner, point: dict, rects) -> bool:
    """Bin-granular membership: does the point's bin intersect some rectangle
    on every axis? Matches what a leaf lookup would return for the point."""
    for r in rects:
        for attr, iv in r.ivs.items():
            if binner.bin_of(attr, point[attr]).intersect(iv) is None:
                break
        else:
            return True
    return False


class ResultCache:
    """LRU of joined results keyed by (rectangles, residual).

    A probe hits when some entry carries the same residual, each probe
    rectangle lies wholly inside one of the entry's rectangles, and the entry
    clock dominates the target; the content is then re-filtered to the probe
    rectangles at bin granularity. Pushed index deltas adjust content in
    place (see module note on frozen entry clocks).
    """

    def __init__(self, capacity: int = 256):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self.entries: OrderedDict[tuple, CacheEntry] = OrderedDict()
        self.hits = 0
        self.misses = 0

    @staticmethod
    def _key(rects, residual: str) -> tuple:
        return (tuple(r.key() for r in rects), residual)

    def probe(self, rects, residual: str, target: VectorClock, binner: Binner):
        for k, e in self.entries.items():
            if e.residual != residual or not e.clock.dominates(target):
                continue
            if not all(any(pr.wholly_inside(er) for er in e.rects) for pr in rects):
                continue
            self.entries.move_to_end(k)
            self.hits += 1
            out = {
                tag: kv for tag, kv in e.content.items() if bin_hit(binner, kv[1], rects)
            }
            return out, e.clock
        self.misses += 1
        return None

    def insert(self, rects, residual: str, content: dict, clock: VectorClock):
        k = self._key(rects, residual)
        self.entries[k] = CacheEntry(tuple(rects), residual, dict(content), clock)
        self.entries.move_to_end(k)
        while len(self.entries) > self.capacity:
            self.entries.popitem(last=False)

    def push(self, delta: IndexDelta, binner: Binner) -> int:
        touched = 0
        for e in self.entries.values():
            changed = False
            tag = delta.tag
            if tag is not None and bin_hit(binner, delta.point, e.rects):
                e.content[tag] = (delta.adds[0][2], delta.point)
                changed = True
            for _, rtag in delta.removes:
                if e.content.pop(rtag, None) is not None:
                    changed = True
            if changed:
                touched += 1
        return touched


# -- join bookkeeping --------------------------------------------------------------


@dataclass
class _Join:
    probe: Probe
    order: list  # child actors in dispatch order
    roles: dict  # child actor -> hist | live | value | dc
    expected: set = field(default_factory=set)
    hits: dict = field(default_factory=dict)
    clocks: dict = field(default_factory=dict)
    visited: set = field(default_factory=set)
    cache_hits: int = 0
    traces: dict = field(default_factory=dict)
    error: str | None = None


class Qpu:
    """One tree node: a dispatch stage (dc, freshness, value) or a leaf
    (hist, live). Split leaves morph into value nodes in place, so parents
    never have to re-learn addresses."""

    def __init__(self, net: "QpuNetwork", actor, kind, dc, region, scope, parent=None):
        self.net = net
        self.sim = net.sim
        self.actor = actor
        self.kind = kind
        self.dc = dc
        self.region = region
        self.scope = scope
        self.parent = parent
        self.children: list[ChildRef] = []
        self.child_clocks: dict[str, VectorClock] = {}
        self.child_sizes: dict[str, int] = {}
        self.cache = ResultCache(net.cfg.cache_capacity) if kind != "live" else None
        self.joins: dict[str, _Join] = {}
        self._seen_qids: set[str] = set()
        # history-leaf state; unused elsewhere
        self.index = CrdtIndex(net.schema, net.binner) if kind == "hist" else None
        self.repl_mode = LOG
        self.window: deque = deque(maxlen=net.cfg.selectivity.window)
        self.subscribers: set[str] = set()  # peers fed my local-origin deltas
        self.subscribed_to: set[str] = set()
        self.peers: dict[str, str] = {}  # dc -> same-region leaf abroad
        self.switch_log: list[tuple] = []
        self._delta_buf: dict[str, dict[int, tuple]] = {}
        # gossip
        self._gossip_armed = False
        self._gossip_sent: VectorClock | None = None

    def __repr__(self):
        return f"<Qpu {self.actor} {self.kind}>"

    @property
    def replica(self):
        return self.net.store.replicas[self.dc]

    # -- message entry point ----------------------------------------------------

    def handle(self, env: Envelope):
        if self.kind == "retired":
            return
        k = env.kind
        if k in ("query.route", "query.dc", "query.freshness", "query.value"):
            self.on_probe(env.payload)
        elif k == "query.resp":
            self.on_resp(env.src, env.payload)
        elif k == "clock.gossip":
            self.on_gossip(env.src, env.payload)
        elif k == "index.push":
            self.on_push(env.payload)
        elif k == "index.delta":
            self.on_peer_delta(env.payload)
        elif k == "index.sub":
            self.subscribers.add(env.payload)
        elif k == "index.unsub":
            self.subscribers.discard(env.payload)
        else:
            raise ValueError(f"{self.actor}: unexpected message kind {k}")

    # -- probe handling ------------------------------------------------------------

    def on_probe(self, probe: Probe):
        if probe.qid in self._seen_qids:  # duplicated cross-DC delivery
            return
        self._seen_qids.add(probe.qid)
        if probe.target is None:  # root entry: pin the freshness contract
            report = SnapshotReport(self._stable(), probe.origin_heads)
            probe = replace(probe, target=resolve_target(probe.level, report))
        if self.kind == "hist":
            self._serve_hist(probe)
            return
        if self.kind == "live":
            self._serve_live(probe)
            return
        if self.cache is not None:
            got = self.cache.probe(probe.rects, probe.residual, probe.target, self.net.binner)
            if got is not None:
                hits, cclock = got
                self._respond(probe, hits, cclock, (self._line("cache-hit", cclock),), 1)
                return
        self._dispatch(probe)

    def _dispatch(self, probe: Probe):
        if self.kind == "dc":
            plan, roles = self._plan_dc(probe)
        elif self.kind == "freshness":
            plan, roles = self._plan_freshness(probe)
        else:
            plan, roles = self._plan_value(probe)
        if plan is None:
            self._respond(probe, {}, None, (self._line("forward", None),), 0,
                          error=roles)  # roles carries the message here
            return
        join = _Join(probe, [c.actor for c, _ in plan], roles)
        join.expected = set(join.order)
        join.visited.add(self.actor)
        self.joins[probe.qid] = join
        if not plan:
            self._finalize(join)
            return
        stage = {"dc": "query.dc", "freshness": "query.freshness", "value": "query.value"}
        for ref, child_probe in plan:
            self.sim.send(self.actor, ref.actor, stage[self.kind], child_probe,
                          note=probe.qid)

    def _plan_dc(self, probe: Probe):
        plan = []
        roles = {}
        if self.net.cfg.replicated:
            ref = next((c for c in self.children if c.dc == probe.origin_dc), None)
            chosen = [ref] if ref is not None else list(self.children)
            for c in chosen:
                plan.append((c, replace(probe, reply_to=self.actor)))
                roles[c.actor] = "replica"
        else:
            # origins are partitioned across DCs: fan out with scoped targets
            for c in self.children:
                scoped = probe.target.restrict(c.scope)
                plan.append((c, replace(probe, reply_to=self.actor, target=scoped)))
                roles[c.actor] = "scoped"
        return plan, roles

    def _plan_freshness(self, probe: Probe):
        hist = [c for c in self.children if c.kind != "live"]
        live = next((c for c in self.children if c.kind == "live"), None)
        boundary = self._hist_boundary(hist)
        assignments, uncovered = greedy_cover(
            list(probe.rects), [(c.actor, c.region) for c in hist], self.net.schema)
        if uncovered:
            return None, f"history subtree does not cover {uncovered[0].render()}"
        by_actor = {c.actor: c for c in hist}
        plan = []
        roles = {}
        for actor, pieces in assignments:
            c = by_actor[actor]
            plan.append((c, replace(probe, rects=tuple(pieces), reply_to=self.actor)))
            roles[actor] = "hist"
        if live is not None and not boundary.dominates(probe.target):
            plan.append((live, replace(probe, reply_to=self.actor, boundary=boundary)))
            roles[live.actor] = "live"
        return plan, roles

    def _plan_value(self, probe: Probe):
        assignments, uncovered = greedy_cover(
            list(probe.rects), [(c.actor, c.region) for c in self.children],
            self.net.schema)
        if uncovered:
            return None, f"value children do not cover {uncovered[0].render()}"
        by_actor = {c.actor: c for c in self.children}
        plan = []
        roles = {}
        for actor, pieces in assignments:
            plan.append((by_actor[actor],
                         replace(probe, rects=tuple(pieces), reply_to=self.actor)))
            roles[actor] = "value"
        return plan, roles

    def _hist_boundary(self, hist_refs) -> VectorClock:
        out: VectorClock | None = None
        for c in hist_refs:
            cl = self.child_clocks.get(c.actor, VectorClock())
            out = cl if out is None else out.floor(cl)
        return out if out is not None else VectorClock()

    # -- responses ------------------------------------------------------------------

    def on_resp(self, src: str, resp: Resp):
        join = self.joins.get(resp.qid)
        if join is None or src not in join.expected:
            return
        join.expected.discard(src)
        join.visited |= resp.visited
        join.cache_hits += resp.cache_hits
        join.traces[src] = resp.trace
        join.hits.update(resp.hits)
        join.clocks[src] = resp.clock
        if resp.error and join.error is None:
            join.error = resp.error
        if join.error or not join.expected:
            del self.joins[resp.qid]
            self._finalize(join)

    def _finalize(self, join: _Join):
        probe = join.probe
        if join.error:
            lines = self._assemble_trace(join, None)
            self._respond(probe, {}, None, lines, join.cache_hits,
                          visited=join.visited, error=join.error)
            return
        coverage = self._joined_clock(join)
        lines = self._assemble_trace(join, coverage)
        if self.cache is not None:
            self.cache.insert(probe.rects, probe.residual, join.hits, coverage)
        self._respond(probe, join.hits, coverage, lines, join.cache_hits,
                      visited=join.visited)

    def _joined_clock(self, join: _Join) -> VectorClock:
        """Coverage of the union result. Complementary-range children (history
        plus live, disjoint origin scopes) combine by max; children answering
        the same question independently combine by min."""
        if self.kind == "dc" and not self.net.cfg.replicated:
            out = VectorClock()
            for a in join.order:
                out = out.merge(join.clocks[a])
            return out
        if self.kind == "freshness":
            hist = [join.clocks[a] for a in join.order if join.roles[a] != "live"]
            out: VectorClock | None = None
            for cl in hist:
                out = cl if out is None else out.floor(cl)
            out = out if out is not None else VectorClock()
            for a in join.order:
                if join.roles[a] == "live":
                    out = out.merge(join.clocks[a])
            return out
        out = None
        for a in join.order:
            cl = join.clocks[a]
            out = cl if out is None else out.floor(cl)
        return out if out is not None else join.probe.target.copy()

    def _assemble_trace(self, join: _Join, coverage) -> tuple:
        lines = [self._line("forward", coverage, target=join.probe.target)]
        for a in join.order:
            for ln in join.traces.get(a, ()):
                lines.append("  " + ln)
        return tuple(lines)

    def _line(self, decision: str, clock, target=None) -> str:
        reg = self.region.render()
        s = f"{self.actor} [{self.kind}] region=({reg}) decision={decision}"
        if target is not None and self.actor == self.net.root.actor:
            s += f" target={target!r}"
        if clock is not None:
            s += f" clock={clock!r}"
        return s

    def _respond(self, probe: Probe, hits, clock, trace, cache_hits,
                 visited=None, error=None):
        resp = Resp(
            qid=probe.qid,
            hits=hits,
            clock=clock,
            visited=frozenset(visited or {self.actor}),
            cache_hits=cache_hits,
            trace=trace,
            target=probe.target if self.actor == self.net.root.actor else None,
            error=error,
        )
        self.sim.send(self.actor, probe.reply_to, "query.resp", resp, note=probe.qid)

    # -- leaf serving ------------------------------------------------------------

    def _serve_hist(self, probe: Probe):
        if self.cache is not None:
            got = self.cache.probe(probe.rects, probe.residual, probe.target, self.net.binner)
            if got is not None:
                hits, cclock = got
                if self.net.cfg.verify:
                    fresh = self._lookup(probe.rects)
                    if fresh != hits:
                        self.net.verify_errors.append(
                            f"{self.actor}: cache hit diverges from fresh lookup "
                            f"for {probe.residual}")
                self._respond(probe, hits, self.index.clock,
                              (self._line("cache-hit", self.index.clock),), 1)
                return
        try:
            catch_up(self, self.replica, probe.target)
        except UnsatisfiableStaleness as exc:
            self._respond(probe, {}, None, (self._line("leaf-serve", None),), 0,
                          error=str(exc))
            return
        hits = self._lookup(probe.rects)
        self.cache.insert(probe.rects, probe.residual, hits, self.index.clock)
        self._respond(probe, hits, self.index.clock,
                      (self._line("leaf-serve", self.index.clock),), 0)

    def _lookup(self, rects) -> dict:
        hits: dict = {}
        for rect in rects:
            hits.update(self.index.lookup(rect))
        return hits

    def _serve_live(self, probe: Probe):
        boundary = probe.boundary or VectorClock()
        hits: dict = {}
        for entry in self.replica.entries_after(boundary, upto=probe.target):
            if entry.origin_dc not in self.scope or entry.attrs is None:
                continue
            if rect_match(probe.rects, entry.attrs):
                hits[entry.stamp] = (entry.key, entry.attrs)
        claim = boundary.merge(probe.target.floor(self.replica.heads))
        self._respond(probe, hits, claim, (self._line("leaf-serve", claim),), 0)

    # catch_up view protocol
    @property
    def clock(self) -> VectorClock:
        return self.index.clock

    def apply_entry(self, entry: LogEntry):
        self._apply_entry(entry)

    # -- ingest ---------------------------------------------------------------------

    def _on_feed(self, entry: LogEntry):
        # synchronous callback from the colocated replica's apply
        if self.kind != "hist" or entry.origin_dc not in self.scope:
            return
        if self.repl_mode == DELTA and entry.origin_dc != self.dc:
            return
        if entry.seq <= self.index.clock.get(entry.origin_dc):
            return  # already in via peer delta or catch-up
        self._apply_entry(entry)

    def _apply_entry(self, entry: LogEntry):
        delta = self.index.delta_for(entry)
        if delta.point is not None and not self.region.contains_point(delta.point):
            delta = replace(delta, adds=(), point=None)
        self.index.apply_delta(delta)
        self._post_apply(delta, entry.attrs, entry.origin_dc)

    def on_peer_delta(self, payload):
        if self.kind != "hist":
            return
        delta, raw_attrs = payload
        if delta.seq <= self.index.clock.get(delta.origin):
            return
        buf = self._delta_buf.setdefault(delta.origin, {})
        buf[delta.seq] = payload
        self._drain_deltas(delta.origin)

    def _drain_deltas(self, origin: str):
        buf = self._delta_buf.get(origin)
        if not buf:
            return
        while self.index.clock.get(origin) + 1 in buf:
            delta, raw_attrs = buf.pop(self.index.clock.get(origin) + 1)
            self.index.apply_delta(delta)
            self._post_apply(delta, raw_attrs, origin)

    def _post_apply(self, delta: IndexDelta, raw_attrs, origin: str):
        if raw_attrs is not None:  # selectivity tracks writes, not deletes
            self.window.append(1 if self.region.contains_point(raw_attrs) else 0)
        if delta.adds or delta.removes:
            if self.cache is not None:
                self.cache.push(delta, self.net.binner)
            if self.parent is not None:
                self.sim.send(self.actor, self.parent, "index.push", delta)
        if origin == self.dc and self.subscribers:
            for peer in sorted(self.subscribers):
                self.sim.send(self.actor, peer, "index.delta", (delta, raw_attrs),
                              note=f"{delta.origin}:{delta.seq}")
        self._mark_dirty()
        self._maybe_switch()
        pol = self.net.cfg.split
        if pol.auto:
            n = self.index.visible_count()
            if n > pol.t_split:
                self.net._request_maintenance("split", self.actor)
            elif n < pol.t_merge:
                self.net._request_maintenance("merge", self.actor)

    # -- replication mode ----------------------------------------------------------

    def _maybe_switch(self):
        cfg = self.net.cfg
        if cfg.repl_mode != "adaptive" or len(self.window) < self.window.maxlen:
            return
        s = sum(self.window) / len(self.window)
        if self.repl_mode == DELTA and s > cfg.selectivity.theta_high:
            self._switch(LOG, s)
        elif self.repl_mode == LOG and s < cfg.selectivity.theta_low:
            self._switch(DELTA, s)

    def _switch(self, to: str, ratio: float):
        self.switch_log.append((self.sim.now, self.repl_mode, to, round(ratio, 4)))
        self.repl_mode = to
        # a fresh window must fill before the next flip can happen
        self.window.clear()
        if to == LOG:
            self.net._unsubscribe_peers(self)
            self._replay_local_gap()
        else:
            self.net._subscribe_peers(self)

    def _replay_local_gap(self):
        for entry in self.replica.entries_after(self.index.clock):
            if entry.origin_dc in self.scope:
                if entry.seq == self.index.clock.get(entry.origin_dc) + 1:
                    self._apply_entry(entry)
        for origin in list(self._delta_buf):
            buf = self._delta_buf[origin]
            for seq in [s for s in buf if s <= self.index.clock.get(origin)]:
                del buf[seq]

    # -- cache push relay -------------------------------------------------------------

    def on_push(self, delta: IndexDelta):
        if self.cache is not None:
            self.cache.push(delta, self.net.binner)
        if self.parent is not None:
            self.sim.send(self.actor, self.parent, "index.push", delta)

    # -- gossip ---------------------------------------------------------------------

    def _mark_dirty(self):
        if self._gossip_armed or self.parent is None:
            return
        self._gossip_armed = True
        self.sim.after(self.net.cfg.gossip_every, self._flush_gossip)

    def _flush_gossip(self):
        self._gossip_armed = False
        if self.kind == "retired" or self.parent is None:
            return
        clock = self.index.clock.copy() if self.kind == "hist" else self._stable()
        if self._gossip_sent is not None and clock == self._gossip_sent:
            return
        self._gossip_sent = clock
        size = self.index.visible_count() if self.kind == "hist" else sum(
            self.child_sizes.values())
        self.sim.send(self.actor, self.parent, "clock.gossip", (clock, size))

    def on_gossip(self, src: str, payload):
        clock, size = payload
        cur = self.child_clocks.get(src, VectorClock())
        self.child_clocks[src] = cur.merge(clock)  # duplicates cannot regress
        self.child_sizes[src] = size
        self._mark_dirty()

    def _stable(self) -> VectorClock:
        """Clock every covered subtree has durably indexed: the floor over the
        last gossiped child clocks. Live children derive their coverage from
        the history boundary, so they stay out of the floor."""
        out: VectorClock | None = None
        for c in self.children:
            if c.kind == "live":
                continue
            cl = self.child_clocks.get(c.actor, VectorClock())
            out = cl if out is None else out.floor(cl)
        return out if out is not None else VectorClock()


# -- coordinators -------------------------------------------------------------------


@dataclass
class _Pending:
    query: Query
    cb: object
    rects: tuple
    submitted: int


class Coordinator:
    """Per-DC entry point. Snapshots origin heads at submit, routes through
    the tree, then squares the response with the origin replica: a rescan of
    the log past the claimed coverage picks up anything newer, and a candidate
    check against current state drops every false positive."""

    def __init__(self, net: "QpuNetwork", dc: str):
        self.net = net
        self.dc = dc
        self.actor = f"coord/{dc}"
        self.pending: dict[str, _Pending] = {}
        net.sim.add_actor(self.actor, dc, self.handle)

    def submit(self, q: Query, cb):
        net = self.net
        qid = net._next_qid()
        pairs = to_rectangles(q, net.schema)
        rects = tuple(r for r, _ in pairs)
        net.inflight += 1
        if not rects:  # contradictory bounds: a valid, empty plan
            heads = self.replica.heads
            info = _Pending(q, cb, rects, net.sim.now)
            net.sim.after(0, lambda: self._complete(
                qid,
                info,
                Resp(qid, {}, heads, frozenset(), 0,
                     (f"{self.actor} [coord] empty plan",), target=None)))
            return qid
        self.pending[qid] = _Pending(q, cb, rects, net.sim.now)
        residual = " OR ".join(res for _, res in pairs)
        probe = Probe(qid, rects, residual, origin_dc=self.dc, reply_to=self.actor,
                      level=q.staleness, origin_heads=self.replica.heads)
        net.sim.send(self.actor, net.root.actor, "query.route", probe, note=qid)
        return qid

    @property
    def replica(self):
        return self.net.store.replicas[self.dc]

    def handle(self, env: Envelope):
        if env.kind != "query.resp":
            raise ValueError(f"{self.actor}: unexpected message kind {env.kind}")
        resp: Resp = env.payload
        info = self.pending.pop(resp.qid, None)
        if info is None:  # duplicated delivery
            return
        self._complete(resp.qid, info, resp)

    def _complete(self, qid: str, info: _Pending, resp: Resp):
        net = self.net
        q = info.query
        if resp.error is not None:
            result = QueryResult(
                query_id=qid, keys=frozenset(), clock=None, target=resp.target,
                stats=self._stats(resp, info, 0, 0, 0),
                trace="\n".join(resp.trace), error=resp.error,
                response_tick=net.sim.now, staleness=q.staleness.render(),
                origin_dc=self.dc)
        else:
            raw = dict(resp.hits)
            for entry in self.replica.entries_after(resp.clock):
                if entry.attrs is not None and rect_match(info.rects, entry.attrs):
                    raw[entry.stamp] = (entry.key, entry.attrs)
            keys_raw = {kv[0] for kv in raw.values()}
            kept, removed = candidate_check(keys_raw, q, net.store, self.dc)
            achieved = resp.clock.merge(self.replica.heads)
            result = QueryResult(
                query_id=qid, keys=frozenset(kept), clock=achieved,
                target=resp.target,
                stats=self._stats(resp, info, len(keys_raw), removed, len(kept)),
                trace="\n".join(resp.trace), error=None,
                response_tick=net.sim.now, staleness=q.staleness.render(),
                origin_dc=self.dc)
        net.inflight -= 1
        net._record_metrics(result)
        info.cb(result)

    def _stats(self, resp: Resp, info: _Pending, checked, removed, size) -> dict:
        return {
            "qpus_visited": len(resp.visited),
            "cache_hits": resp.cache_hits,
            "candidate_checked": checked,
            "false_positives_removed": removed,
            "result_size": size,
            "ticks_elapsed": self.net.sim.now - info.submitted,
        }


# -- the tree -----------------------------------------------------------------------


class QpuNetwork:
    """Builds the tree over a store, owns the registries, and performs the
    structural operations (split, merge, mode rewires, scrub)."""

    def __init__(self, sim: Simulation, store: GeoStore, binner: Binner,
                 cfg: TreeConfig):
        if cfg.root_dc not in store.dcs:
            raise ValueError(f"root DC {cfg.root_dc!r} is not in the store")
        self.sim = sim
        self.store = store
        self.binner = binner
        self.cfg = cfg
        self.schema = store.schema
        self.nodes: dict[str, Qpu] = {}
        self.coordinators: dict[str, Coordinator] = {}
        self.metrics: list[dict] = []
        self.verify_errors: list[str] = []
        self.inflight = 0
        self._qn = 0
        self._ids: dict[str, int] = {}
        self._maint: list[tuple] = []
        self._maint_set: set = set()
        self._maint_armed = False

        whole = Region.whole(self.schema)
        self.root = self._new_node("qpu/root", "dc", cfg.root_dc, whole,
                                   frozenset(store.dcs))
        initial = DELTA if cfg.repl_mode == DELTA else LOG
        for dc in store.dcs:
            scope = frozenset(store.dcs) if cfg.replicated else frozenset([dc])
            fresh = self._new_node(f"qpu/{dc}", "freshness", dc, whole, scope,
                                   parent=self.root.actor)
            self.root.children.append(
                ChildRef(fresh.actor, "freshness", whole, dc, scope))
            hist_ref = self._build_history(cfg.history_tree, whole, dc, scope,
                                           fresh.actor, initial)
            live = self._new_node(f"qpu/{dc}/live", "live", dc, whole, scope,
                                  parent=fresh.actor)
            fresh.children = [hist_ref, ChildRef(live.actor, "live", whole, dc, scope)]
        for dc in store.dcs:
            self.coordinators[dc] = Coordinator(self, dc)
        self._rewire_peers()

    # -- construction ------------------------------------------------------------

    def _new_node(self, actor, kind, dc, region, scope, parent=None) -> Qpu:
        q = Qpu(self, actor, kind, dc, region, scope, parent)
        self.sim.add_actor(actor, dc, q.handle)
        self.nodes[actor] = q
        return q

    def _next_leaf_actor(self, dc: str) -> str:
        n = self._ids.get(dc, 0)
        self._ids[dc] = n + 1
        return f"qpu/{dc}/h{n}"

    def _build_history(self, spec, region, dc, scope, parent, mode) -> ChildRef:
        actor = self._next_leaf_actor(dc)
        if spec == "leaf" or spec is None:
            leaf = self._new_node(actor, "hist", dc, region, scope, parent)
            leaf.repl_mode = mode
            self.store.replicas[dc].subscribe(leaf._on_feed)
            return ChildRef(actor, "hist", region, dc, scope)
        attr, at = spec["attr"], spec["at"]
        iv = region.ivs[attr]
        lo_part = region.narrowed(attr, Interval(iv.lo, at, iv.lo_open, True))
        hi_part = region.narrowed(attr, Interval(at, iv.hi, False, iv.hi_open))
        if lo_part is None or hi_part is None:
            raise ValueError(f"history tree cut {attr}@{at!r} leaves an empty side")
        node = self._new_node(actor, "value", dc, region, scope, parent)
        node.children = [
            self._build_history(spec["lo"], lo_part, dc, scope, actor, mode),
            self._build_history(spec["hi"], hi_part, dc, scope, actor, mode),
        ]
        return ChildRef(actor, "value", region, dc, scope)

    # -- query API -----------------------------------------------------------------

    def submit(self, q: Query, cb) -> str:
        if q.origin_dc not in self.coordinators:
            raise ValueError(f"no coordinator for origin DC {q.origin_dc!r}")
        return self.coordinators[q.origin_dc].submit(q, cb)

    def _next_qid(self) -> str:
        self._qn += 1
        return f"q{self._qn}"

    def _record_metrics(self, result: QueryResult):
        glob = self.store.max_heads()
        local = self.store.replicas[result.origin_dc].heads
        self.metrics.append({
            "tick": result.response_tick,
            "query_id": result.query_id,
            "staleness": result.staleness,
            "qpus_visited": result.stats["qpus_visited"],
            "cache_hits": result.stats["cache_hits"],
            "candidate_checked": result.stats["candidate_checked"],
            "false_positives_removed": result.stats["false_positives_removed"],
            "result_size": result.stats["result_size"],
            "lag_per_dc": {d: glob.get(d) - local.get(d) for d in self.store.dcs},
        })

    # -- registries ---------------------------------------------------------------

    def hist_leaves(self) -> list[Qpu]:
        return [n for a, n in sorted(self.nodes.items()) if n.kind == "hist"]

    # -- peer wiring -------------------------------------------------------------

    def _rewire_peers(self):
        """Subscription management is control-plane: applied directly, while
        the deltas themselves stay network messages."""
        groups: dict[tuple, dict[str, str]] = {}
        for leaf in self.hist_leaves():
            groups.setdefault(leaf.region.key(), {})[leaf.dc] = leaf.actor
        for leaf in self.hist_leaves():
            group = groups[leaf.region.key()]
            leaf.peers = {dc: a for dc, a in sorted(group.items()) if dc != leaf.dc}
            if leaf.repl_mode == DELTA:
                self._subscribe_peers(leaf)
            else:
                self._unsubscribe_peers(leaf)

    def _subscribe_peers(self, leaf: Qpu):
        want = set(leaf.peers.values())
        for actor in sorted(leaf.subscribed_to - want):
            self.nodes[actor].subscribers.discard(leaf.actor)
        for actor in sorted(want - leaf.subscribed_to):
            self.nodes[actor].subscribers.add(leaf.actor)
        leaf.subscribed_to = want

    def _unsubscribe_peers(self, leaf: Qpu):
        for actor in sorted(leaf.subscribed_to):
            self.nodes[actor].subscribers.discard(leaf.actor)
        leaf.subscribed_to = set()

    # -- split / merge ------------------------------------------------------------

    def force_split(self, actor: str) -> tuple[str, str]:
        leaf = self.nodes.get(actor)
        if leaf is None or leaf.kind != "hist":
            raise ValueError(f"{actor} is not a history leaf")
        attr, at = self._split_point(leaf)
        iv = leaf.region.ivs[attr]
        region_a = leaf.region.narrowed(attr, Interval(iv.lo, at, iv.lo_open, True))
        region_b = leaf.region.narrowed(attr, Interval(at, iv.hi, False, iv.hi_open))
        kids = []
        for suffix, region in (("a", region_a), ("b", region_b)):
            child = self._new_node(f"{actor}.{suffix}", "hist", leaf.dc, region,
                                   leaf.scope, parent=actor)
            child.repl_mode = leaf.repl_mode
            child.index.clock = leaf.index.clock.copy()
            child.index.removed = set(leaf.index.removed)
            self.store.replicas[leaf.dc].subscribe(child._on_feed)
            kids.append(child)
        for tag, (key, attrs) in leaf.index.tag_info.items():
            child = kids[0] if region_a.contains_point(attrs) else kids[1]
            child.index.tag_info[tag] = (key, attrs)
            for term in self.binner.terms_for(attrs):
                child.index.terms[term.attr].setdefault(term.bin, set()).add(tag)
        self.store.replicas[leaf.dc].unsubscribe(leaf._on_feed)
        self._unsubscribe_peers(leaf)
        refs = [ChildRef(k.actor, "hist", k.region, k.dc, k.scope) for k in kids]
        if self.cfg.split.mode == "internal":
            leaf.kind = "value"
            leaf.index = None
            leaf.children = refs
            leaf.child_clocks = {k.actor: k.index.clock.copy() for k in kids}
            leaf.child_sizes = {k.actor: k.index.visible_count() for k in kids}
        else:
            parent = self.nodes[leaf.parent]
            i = next(j for j, c in enumerate(parent.children) if c.actor == actor)
            parent.children[i:i + 1] = refs
            parent.child_clocks.pop(actor, None)
            parent.child_sizes.pop(actor, None)
            for k in kids:
                k.parent = parent.actor
                parent.child_clocks[k.actor] = k.index.clock.copy()
                parent.child_sizes[k.actor] = k.index.visible_count()
            leaf.kind = "retired"
            leaf.index = None
        for k in kids:
            k._mark_dirty()
        self._rewire_peers()
        return kids[0].actor, kids[1].actor

    def _split_point(self, leaf: Qpu) -> tuple[str, object]:
        """Median of the widest normalized axis; an axis where the median
        cannot cut off two non-empty sides is degenerate and the next widest
        is tried instead."""
        axes = sorted(
            (a for a in leaf.region.ivs if self.schema[a].kind != "text"),
            key=lambda a: (-self.schema[a].norm_length(leaf.region.ivs[a]), a))
        for attr in axes:
            vals = sorted({attrs[attr] for _, attrs in leaf.index.tag_info.values()})
            if len(vals) < 2:
                continue
            at = vals[len(vals) // 2]
            iv = leaf.region.ivs[attr]
            lo_side = Interval(iv.lo, at, iv.lo_open, True)
            hi_side = Interval(at, iv.hi, False, iv.hi_open)
            if lo_side.is_empty() or hi_side.is_empty():
                continue
            return attr, at
        raise SplitRefused(f"{leaf.actor}: no axis offers a non-degenerate median")

    def merge_siblings(self, a_actor: str, b_actor: str, *,
                       respect_thresholds: bool = False) -> str:
        a = self.nodes.get(a_actor)
        b = self.nodes.get(b_actor)
        if a is None or b is None or a.kind != "hist" or b.kind != "hist":
            raise ValueError("merge needs two history leaves")
        if a.parent != b.parent or a.parent is None:
            raise MergeRefused("leaves are not siblings")
        axis = self._union_axis(a.region, b.region)
        if axis is None:
            raise MergeRefused("regions do not union to a rectangle")
        if a.region.ivs[axis].lo > b.region.ivs[axis].lo:
            a, b = b, a
        combined = a.index.visible_count() + b.index.visible_count()
        pol = self.cfg.split
        if respect_thresholds:
            if combined >= pol.t_split / 2:
                raise MergeRefused(f"combined size {combined} too close to t_split")
            if min(a.index.visible_count(), b.index.visible_count()) >= pol.t_merge:
                raise MergeRefused("neither leaf is under t_merge")
        attr_iv_a, attr_iv_b = a.region.ivs[axis], b.region.ivs[axis]
        union_iv = Interval(attr_iv_a.lo, attr_iv_b.hi,
                            attr_iv_a.lo_open, attr_iv_b.hi_open)
        # narrowed() intersects, which would keep a's side; widen explicitly
        region = Region({**a.region.ivs, axis: union_iv})
        parent = self.nodes[a.parent]
        actor = self._next_leaf_actor(a.dc)
        merged = self._new_node(actor, "hist", a.dc, region, a.scope, parent.actor)
        merged.repl_mode = a.repl_mode if a.repl_mode == b.repl_mode else LOG
        merged.index.merge(a.index)
        merged.index.merge(b.index)
        # the cohort clock must under-claim: components the two leaves do not
        # agree on are only safe at the lower of the two
        merged.index.clock = a.index.clock.floor(b.index.clock)
        self.store.replicas[a.dc].subscribe(merged._on_feed)
        for old in (a, b):
            self.store.replicas[old.dc].unsubscribe(old._on_feed)
            self._unsubscribe_peers(old)
            old.kind = "retired"
            old.index = None
            parent.child_clocks.pop(old.actor, None)
            parent.child_sizes.pop(old.actor, None)
        i = next(j for j, c in enumerate(parent.children) if c.actor == a.actor)
        parent.children = [c for c in parent.children if c.actor != b.actor]
        parent.children[i] = ChildRef(actor, "hist", region, merged.dc, merged.scope)
        parent.child_clocks[actor] = merged.index.clock.copy()
        parent.child_sizes[actor] = merged.index.visible_count()
        merged._mark_dirty()
        self._rewire_peers()
        return actor

    @staticmethod
    def _union_axis(ra: Region, rb: Region) -> str | None:
        diff = [a for a in ra.ivs if ra.ivs[a].key() != rb.ivs[a].key()]
        if len(diff) != 1:
            return None
        axis = diff[0]
        lo, hi = sorted((ra.ivs[axis], rb.ivs[axis]), key=lambda iv: (iv.lo, iv.lo_open))
        if lo.hi != hi.lo or (lo.hi_open and hi.lo_open):
            return None  # a gap at the seam; a shared closed endpoint is fine
        return axis

    # -- background maintenance -----------------------------------------------------

    def _request_maintenance(self, op: str, actor: str):
        key = (op, actor)
        if key in self._maint_set:
            return
        self._maint_set.add(key)
        self._maint.append(key)
        if not self._maint_armed:
            self._maint_armed = True
            self.sim.after(1, self._run_maintenance)

    def _run_maintenance(self):
        self._maint_armed = False
        if self.inflight:  # structure must not change under a live query
            self._maint_armed = True
            self.sim.after(5, self._run_maintenance)
            return
        queue, self._maint = self._maint, []
        self._maint_set.clear()
        pol = self.cfg.split
        for op, actor in queue:
            leaf = self.nodes.get(actor)
            if leaf is None or leaf.kind != "hist":
                continue
            if op == "split" and leaf.index.visible_count() > pol.t_split:
                try:
                    self.force_split(actor)
                except SplitRefused:
                    pass
            elif op == "merge" and leaf.index.visible_count() < pol.t_merge:
                sib = self._merge_candidate(leaf)
                if sib is not None:
                    try:
                        self.merge_siblings(actor, sib, respect_thresholds=True)
                    except MergeRefused:
                        pass

    def _merge_candidate(self, leaf: Qpu) -> str | None:
        if leaf.parent is None:
            return None
        parent = self.nodes[leaf.parent]
        for c in parent.children:
            if c.actor == leaf.actor or c.kind != "hist":
                continue
            sib = self.nodes[c.actor]
            if sib.kind == "hist" and self._union_axis(leaf.region, sib.region):
                return c.actor
        return None

    # -- convergence maintenance ------------------------------------------------------

    def sync_leaves(self) -> int:
        """Close any delta-mode gaps from the colocated logs. Cheap because
        every leaf tracks a contiguous prefix per origin."""
        applied = 0
        for leaf in self.hist_leaves():
            for entry in leaf.replica.entries_after(leaf.index.clock):
                if entry.origin_dc in leaf.scope:
                    if entry.seq == leaf.index.clock.get(entry.origin_dc) + 1:
                        leaf._apply_entry(entry)
                        applied += 1
        return applied

    def scrub_all(self) -> int:
        """One scrub pass: sync leaves up to their local logs, then drop every
        posting whose tag lost to the current winner, pushing the removals
        through the caches."""
        self.sync_leaves()
        total = 0
        for leaf in self.hist_leaves():
            pairs = leaf.index.stale_postings(leaf.replica)
            if not pairs:
                continue
            total += leaf.index.cull_many(pairs)
            ghost = IndexDelta(leaf.dc, -1, (), tuple(pairs), None)
            if leaf.cache is not None:
                leaf.cache.push(ghost, self.binner)
            if leaf.parent is not None:
                self.sim.send(leaf.actor, leaf.parent, "index.push", ghost)
        return total
