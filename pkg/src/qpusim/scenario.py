"""Scenario files: load, validate, run, and write the run's outputs.

A scenario is one JSON document holding the schema, the network parameters,
the tree layout, and a timed workload. Loading validates everything it can
statically (unknown attributes, uncovered regions, malformed actions) and
reports failures with the line in the file they came from; running is fully
deterministic for a given file, so reports can be compared byte for byte.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path

from .crdt_index import Binner
from .geostore import GeoStore
from .oracle import rebuild_index, replay_matches, scan
from .qpu import (
    MergeRefused,
    QpuNetwork,
    SelectivityConfig,
    SplitPolicy,
    SplitRefused,
    TreeConfig,
)
from .regions import AttributeSchema, Interval, Region, subtract_all
from .router import Query, QueryError, QueryResult, parse
from .simcore import NetConfig, Simulation
from .staleness import Level
from .workload import WorkloadSpec, gen_phases


class ScenarioError(Exception):
    def __init__(self, msg: str, line: int = 0):
        self.line = line
        where = f" (line {line})" if line else ""
        super().__init__(f"{msg}{where}")


@dataclass
class Scenario:
    name: str
    seed: int
    dcs: list[str]
    schema: dict[str, AttributeSchema]
    binning: dict
    net: NetConfig
    tree: TreeConfig
    workload: list[dict]
    verify_caches: bool = False
    oracle: bool = False
    scrub_at_end: bool = True
    max_ticks: int = 1_000_000
    max_events: int = 5_000_000
    raw: dict = field(default_factory=dict)
    path: str = ""


# -- loading ------------------------------------------------------------------------


def _line_of(text: str, needle: str, occurrence: int = 0) -> int:
    pos = -1
    for _ in range(occurrence + 1):
        pos = text.find(needle, pos + 1)
        if pos < 0:
            return 0
    return text.count("\n", 0, pos) + 1


def load_scenario(path: str | Path) -> Scenario:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ScenarioError(f"cannot read {path}: {exc.strerror}") from None
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"not valid JSON: {exc.msg}", exc.lineno) from None
    return parse_scenario(raw, text, str(path))


def parse_scenario(raw: dict, text: str = "", path: str = "") -> Scenario:
    def fail(msg: str, needle: str | None = None, occurrence: int = 0):
        line = _line_of(text, needle, occurrence) if needle and text else 0
        raise ScenarioError(msg, line)

    if not isinstance(raw, dict):
        fail("scenario document must be a JSON object")
    for req in ("dcs", "schema"):
        if req not in raw:
            fail(f"missing required field {req!r}")
    dcs = raw["dcs"]
    if (not isinstance(dcs, list) or not dcs
            or len(set(dcs)) != len(dcs)
            or not all(isinstance(d, str) for d in dcs)):
        fail("dcs must be a list of unique datacenter names", '"dcs"')

    schema: dict[str, AttributeSchema] = {}
    for attr, spec in raw["schema"].items():
        try:
            schema[attr] = AttributeSchema(
                attr, spec.get("kind", ""), spec.get("lo"), spec.get("hi"),
                spec.get("alphabet"))
        except (ValueError, AttributeError) as exc:
            fail(f"schema attribute {attr!r}: {exc}", f'"{attr}"')

    binning = raw.get("binning", {})
    for attr in binning:
        if attr not in schema:
            fail(f"binning names unknown attribute {attr!r}", f'"{attr}"')
    try:
        binner = Binner(schema, binning)
    except ValueError as exc:
        fail(f"binning: {exc}", '"binning"')

    try:
        net = NetConfig(**raw.get("net", {}))
    except (TypeError, ValueError) as exc:
        fail(f"net: {exc}", '"net"')

    tree_raw = dict(raw.get("tree", {}))
    if "root_dc" not in tree_raw:
        tree_raw["root_dc"] = dcs[0]
    history = tree_raw.pop("history", "leaf")
    try:
        split = SplitPolicy(**tree_raw.pop("split", {}))
        sel = SelectivityConfig(**tree_raw.pop("selectivity", {}))
        tree = TreeConfig(split=split, selectivity=sel, history_tree=history,
                          **tree_raw)
    except (TypeError, ValueError) as exc:
        fail(f"tree: {exc}", '"tree"')
    if tree.root_dc not in dcs:
        fail(f"tree.root_dc {tree.root_dc!r} is not a declared DC", '"root_dc"')
    _validate_history(history, dcs, schema, fail)

    workload = raw.get("workload", [])
    if "generate" in raw:
        if workload:
            fail("give either workload or generate, not both", '"generate"')
        gen = raw["generate"]
        phases = gen["phases"] if isinstance(gen, dict) and "phases" in gen \
            else [gen]
        try:
            specs = [WorkloadSpec(**{k: tuple(v) if k == "staleness_mix"
                                     else v for k, v in p.items()})
                     for p in phases]
        except (TypeError, ValueError) as exc:
            fail(f"generate: {exc}", '"generate"')
        workload = gen_phases(schema, dcs, specs, raw.get("seed", 0))
    _validate_workload(workload, dcs, schema, fail)

    verify = raw.get("verify", {})
    limits = raw.get("limits", {})
    return Scenario(
        name=raw.get("name", path or "scenario"),
        seed=raw.get("seed", 0),
        dcs=list(dcs),
        schema=schema,
        binning=binning,
        net=net,
        tree=tree,
        workload=workload,
        verify_caches=bool(verify.get("caches", False)),
        oracle=bool(verify.get("oracle", False)),
        scrub_at_end=bool(raw.get("scrub_at_end", True)),
        max_ticks=int(limits.get("max_ticks", 1_000_000)),
        max_events=int(limits.get("max_events", 5_000_000)),
        raw=raw,
        path=path,
    )


def _validate_history(spec, dcs, schema, fail):
    if isinstance(spec, dict) and not ("attr" in spec or "leaves" in spec):
        extra = [d for d in spec if d not in dcs]
        if extra:
            fail(f"tree.history names unknown DC {extra[0]!r}", f'"{extra[0]}"')
        for dc in spec:
            _validate_history_one(spec[dc], schema, fail)
        return
    _validate_history_one(spec, schema, fail)


def _validate_history_one(spec, schema, fail):
    whole = Region.whole(schema)
    leaves = _history_leaf_regions(spec, whole, schema, fail)
    rest = [whole]
    for region in leaves:
        rest = subtract_all(rest, region)
    if rest:
        point = _witness_point(rest[0], schema)
        fail(f"history leaves do not cover the value space: point {point} "
             f"in {rest[0].render()} is unassigned", '"history"')


def _history_leaf_regions(spec, region, schema, fail) -> list[Region]:
    if spec == "leaf" or spec is None:
        return [region]
    if not isinstance(spec, dict):
        fail(f"history node must be \"leaf\" or an object, got {spec!r}")
    if "leaves" in spec:
        out = []
        for i, leaf in enumerate(spec["leaves"]):
            out.append(_region_from_bounds(leaf.get("region", {}), schema, fail))
        return out
    if "attr" not in spec or "at" not in spec:
        fail("history cut needs attr and at")
    attr, at = spec["attr"], spec["at"]
    if attr not in schema:
        fail(f"history cut names unknown attribute {attr!r}", f'"{attr}"')
    iv = region.ivs[attr]
    lo_part = region.narrowed(attr, Interval(iv.lo, at, iv.lo_open, True))
    hi_part = region.narrowed(attr, Interval(at, iv.hi, False, iv.hi_open))
    if lo_part is None or hi_part is None:
        fail(f"history cut {attr}@{at!r} leaves an empty side", '"at"')
    return (_history_leaf_regions(spec["lo"], lo_part, schema, fail)
            + _history_leaf_regions(spec["hi"], hi_part, schema, fail))


def _region_from_bounds(bounds: dict, schema, fail) -> Region:
    region = Region.whole(schema)
    for attr, b in bounds.items():
        if attr not in schema:
            fail(f"leaf region names unknown attribute {attr!r}", f'"{attr}"')
        if not isinstance(b, list) or len(b) not in (2, 4):
            fail(f"leaf region bound for {attr!r} must be [lo, hi] or "
                 f"[lo, hi, lo_open, hi_open]")
        lo, hi = b[0], b[1]
        lo_open = bool(b[2]) if len(b) == 4 else False
        hi_open = bool(b[3]) if len(b) == 4 else False
        narrowed = region.narrowed(attr, Interval(lo, hi, lo_open, hi_open))
        if narrowed is None:
            fail(f"leaf region bound for {attr!r} is empty")
        region = narrowed
    return region


def _witness_point(region: Region, schema) -> dict:
    point = {}
    for attr, iv in region.ivs.items():
        sch = schema[attr]
        if sch.kind == "text":
            v = iv.lo if iv.contains(iv.lo) else iv.lo + sch.alphabet[0]
        elif sch.kind == "int":
            v = iv.lo if iv.contains(iv.lo) else iv.lo + 1
        else:
            if iv.contains(iv.lo):
                v = iv.lo
            else:
                hi = iv.hi if iv.hi is not None else iv.lo + 2.0
                v = (iv.lo + hi) / 2
        point[attr] = v
    return point


_OPS = {"put", "delete", "query", "force-split", "force-merge", "partition",
        "scrub"}


def _validate_workload(workload, dcs, schema, fail):
    if not isinstance(workload, list):
        fail("workload must be a list", '"workload"')
    for i, act in enumerate(workload):
        def bad(msg):
            fail(f"workload action {i}: {msg}", '"op"', i)

        if not isinstance(act, dict) or "op" not in act:
            fail(f"workload action {i} needs an op", '"workload"')
        op = act["op"]
        if op not in _OPS:
            bad(f"unknown op {op!r}")
        t = act.get("t")
        if not isinstance(t, int) or t < 0:
            bad("t must be a non-negative integer tick")
        if op in ("put", "delete", "query") and act.get("dc") not in dcs:
            bad(f"dc {act.get('dc')!r} is not declared")
        if op == "put":
            attrs = act.get("attrs")
            if not isinstance(attrs, dict) or set(attrs) != set(schema):
                bad(f"attrs must give every schema attribute exactly once, "
                    f"got {sorted(attrs or {})}")
            for a, v in attrs.items():
                if isinstance(v, float) and schema[a].kind == "int":
                    bad(f"attribute {a!r} takes int values")
                if not schema[a].validate(v):
                    bad(f"value {v!r} is outside the domain of {a!r}")
        if op == "delete" and not isinstance(act.get("key"), str):
            bad("delete needs a key")
        if op == "query":
            try:
                parse(act.get("text", ""), schema)
            except QueryError as exc:
                bad(f"query does not parse: {exc}")
        if op == "force-split" and not isinstance(act.get("qpu"), str):
            bad("force-split needs a qpu actor name")
        if op == "force-merge" and not (
                isinstance(act.get("a"), str) and isinstance(act.get("b"), str)):
            bad("force-merge needs actor names a and b")
        if op == "partition":
            if act.get("a") not in dcs or act.get("b") not in dcs:
                bad("partition needs two declared DCs")
            if not isinstance(act.get("until"), int) or act["until"] <= t:
                bad("partition needs until > t")


# -- running ------------------------------------------------------------------------


@dataclass
class RunReport:
    scenario: Scenario
    sim: Simulation
    store: GeoStore
    net: QpuNetwork
    results: list[QueryResult]
    verify_lines: list[str]
    runtime_errors: list[str]
    scrubbed: int

    @property
    def verify_ok(self) -> bool:
        return not any(ln.startswith("FAIL") for ln in self.verify_lines)


def build_scenario(sc: Scenario, trace: bool = False):
    sim = Simulation(sc.net, seed=sc.seed, trace=trace)
    store = GeoStore(sim, sc.dcs, sc.schema)
    binner = Binner(sc.schema, sc.binning)
    net = QpuNetwork(sim, store, binner, sc.tree)
    return sim, store, net


def run_scenario(sc: Scenario, trace: bool = False,
                 oracle: bool | None = None) -> RunReport:
    oracle = sc.oracle if oracle is None else oracle
    if sc.verify_caches or oracle:
        sc.tree.verify = True
    sim, store, net = build_scenario(sc, trace=trace)
    results: list[QueryResult] = []
    verify_lines: list[str] = []
    runtime_errors: list[str] = []

    def on_result(query: Query):
        def cb(res: QueryResult):
            results.append(res)
            if not oracle:
                return
            if res.error is not None:
                verify_lines.append(
                    f"FAIL query {res.query_id}: routed with error {res.error}")
                return
            replica = store.replicas[query.origin_dc]
            want = scan(replica, query)
            if res.keys != want:
                verify_lines.append(
                    f"FAIL query {res.query_id}: keys diverge from full scan "
                    f"(extra {sorted(res.keys - want)}, "
                    f"missing {sorted(want - res.keys)})")
            if res.target is not None and query.staleness.level is Level.BOUNDED:
                need = replay_matches(replica, res.target, query) & want
                if not need <= res.keys:
                    verify_lines.append(
                        f"FAIL query {res.query_id}: bounded-staleness misses "
                        f"{sorted(need - res.keys)}")
        return cb

    for act in sc.workload:
        op, t = act["op"], act["t"]
        if op == "put":
            sim.at(t, lambda a=act: store.put(a["dc"], a["key"], a["attrs"]))
        elif op == "delete":
            sim.at(t, lambda a=act: store.delete(a["dc"], a["key"]))
        elif op == "query":
            q = parse(act["text"], sc.schema).at(act["dc"])
            sim.at(t, lambda q=q: net.submit(q, on_result(q)))
        elif op == "force-split":
            sim.at(t, lambda a=act: _forced(
                net.force_split, (a["qpu"],), runtime_errors))
        elif op == "force-merge":
            sim.at(t, lambda a=act: _forced(
                net.merge_siblings, (a["a"], a["b"]), runtime_errors))
        elif op == "partition":
            sim.partition(act["a"], act["b"], t, act["until"])
        elif op == "scrub":
            sim.at(t, net.scrub_all)
    sim.run_until_quiescent(max_ticks=sc.max_ticks, max_events=sc.max_events)
    scrubbed = 0
    if sc.scrub_at_end:
        scrubbed = net.scrub_all()
        sim.run_until_quiescent(max_ticks=sc.max_ticks, max_events=sc.max_events)
    if oracle:
        verify_lines.extend(_verify_end_state(sc, store, net, scrubbed))
    for msg in net.verify_errors:
        verify_lines.append(f"FAIL cache: {msg}")
    if oracle and not net.verify_errors:
        verify_lines.append("PASS cache: no hit diverged from a fresh lookup")
    return RunReport(sc, sim, store, net, results, verify_lines,
                     runtime_errors, scrubbed)


def _forced(fn, args, errors: list[str]):
    try:
        fn(*args)
    except (SplitRefused, MergeRefused, ValueError) as exc:
        errors.append(str(exc))


def _verify_end_state(sc: Scenario, store, net, scrubbed: int) -> list[str]:
    lines = [f"PASS run: quiesced at tick {net.sim.now}, scrubbed {scrubbed}"]
    if not sc.scrub_at_end:
        return lines
    binner = net.binner
    by_region: dict[tuple, dict[str, bytes]] = {}
    bad = 0
    for leaf in net.hist_leaves():
        origins = None if sc.tree.replicated else leaf.scope
        want = rebuild_index(leaf.replica, binner, leaf.region,
                             origins=origins).canonical()
        got = leaf.index.canonical()
        if want != got:
            bad += 1
            lines.append(f"FAIL index {leaf.actor}: diverges from a rebuild "
                         f"of its replica")
        by_region.setdefault(leaf.region.key(), {})[leaf.dc] = got
    if not bad:
        lines.append(f"PASS index: {len(net.hist_leaves())} leaves equal "
                     f"their replica rebuilds")
    if sc.tree.replicated:
        mismatched = [
            key for key, per_dc in by_region.items()
            if len(set(per_dc.values())) > 1]
        if mismatched:
            lines.append(f"FAIL convergence: {len(mismatched)} regions differ "
                         f"across DCs")
        else:
            lines.append("PASS convergence: replicated leaves byte-identical "
                         "across DCs")
    return lines


# -- outputs ------------------------------------------------------------------------

METRICS_COLUMNS = [
    "tick", "query_id", "staleness", "qpus_visited", "cache_hits",
    "candidate_checked", "false_positives_removed", "result_size", "lag_per_dc",
]


def metrics_csv(net: QpuNetwork) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRICS_COLUMNS)
    for row in net.metrics:
        lag = "|".join(f"{d}:{row['lag_per_dc'][d]}" for d in sorted(row["lag_per_dc"]))
        w.writerow([row[c] for c in METRICS_COLUMNS[:-1]] + [lag])
    return buf.getvalue()


def traces_text(results: list[QueryResult]) -> str:
    out = []
    for res in results:
        out.append(f"=== {res.query_id} tick={res.response_tick} "
                   f"dc={res.origin_dc} staleness={res.staleness} "
                   f"error={res.error or '-'}")
        out.append(res.trace)
        out.append("")
    return "\n".join(out) + ("\n" if out else "")


def write_outputs(report: RunReport, out_dir: str | Path) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "metrics": out / "metrics.csv",
        "traces": out / "traces.txt",
        "verify": out / "verify.txt",
        "manifest": out / "manifest.json",
    }
    paths["metrics"].write_text(metrics_csv(report.net))
    paths["traces"].write_text(traces_text(report.results))
    status = "OK" if report.verify_ok else "FAILED"
    body = "\n".join(report.verify_lines + report.runtime_errors + [status, ""])
    paths["verify"].write_text(body)
    manifest = {
        "scenario": report.scenario.raw,
        "source": report.scenario.path,
        "seed": report.scenario.seed,
        "finished_tick": report.sim.now,
        "delivered": report.sim.delivered,
        "queries": len(report.results),
    }
    paths["manifest"].write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return paths
