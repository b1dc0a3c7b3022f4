"""Command line front end.

Exit codes: 0 on success, 1 when a run finished but verification failed,
2 when inputs did not validate.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .router import QueryError, parse, route
from .scenario import (
    ScenarioError,
    load_scenario,
    parse_scenario,
    run_scenario,
    write_outputs,
)
from .workload import WorkloadSpec, gen_workload


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="qpusim",
        description="Deterministic simulator for a geo-distributed "
                    "secondary-index tree over a weakly consistent store.")
    sub = p.add_subparsers(dest="cmd", required=True)

    run_p = sub.add_parser("run", help="run a scenario and write its outputs")
    run_p.add_argument("scenario", help="scenario JSON file")
    run_p.add_argument("--out-dir", help="output directory "
                                         "(default: <scenario name>.out)")
    run_p.add_argument("--seed", type=int, help="override the scenario seed")
    run_p.add_argument("--trace", action="store_true",
                       help="record per-message network traces")
    run_p.add_argument("--oracle", action="store_true",
                       help="check every query against a full scan as it "
                            "completes, plus end-state index rebuilds")

    gen_p = sub.add_parser("gen-workload",
                           help="synthesize a workload into a scenario file")
    gen_p.add_argument("--base", required=True,
                       help="scenario file supplying schema, DCs and tree")
    gen_p.add_argument("--out", required=True, help="scenario file to write")
    gen_p.add_argument("--objects", type=int, default=200)
    gen_p.add_argument("--actions", type=int, default=1000)
    gen_p.add_argument("--key-dist", choices=["uniform", "zipf"], default="zipf")
    gen_p.add_argument("--theta", type=float, default=0.99)
    gen_p.add_argument("--query-frac", type=float, default=0.2)
    gen_p.add_argument("--delete-frac", type=float, default=0.05)
    gen_p.add_argument("--gap", type=int, default=2,
                       help="ticks between consecutive actions")
    gen_p.add_argument("--seed", type=int, default=0)

    ver_p = sub.add_parser("verify",
                           help="run a scenario with every oracle check on")
    ver_p.add_argument("scenario")
    ver_p.add_argument("--out-dir")
    ver_p.add_argument("--seed", type=int)

    q_p = sub.add_parser("query",
                         help="replay a run deterministically, then answer "
                              "one query against its final state")
    q_p.add_argument("source",
                     help="scenario file, or an output directory holding "
                          "manifest.json")
    q_p.add_argument("text", help="query text, e.g. 'gpa > 2.0 FRESHNESS strong'")
    q_p.add_argument("--dc", help="origin datacenter (default: first declared)")
    q_p.add_argument("--trace", action="store_true",
                     help="print the routing trace")
    return p


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    handlers = {"run": _cmd_run, "gen-workload": _cmd_gen,
                "verify": _cmd_verify, "query": _cmd_query}
    try:
        return handlers[args.cmd](args)
    except ScenarioError as exc:
        print(f"scenario error: {exc}", file=sys.stderr)
        return 2
    except QueryError as exc:
        print(f"query error: {exc}", file=sys.stderr)
        return 2


def _load_with_seed(path: str, seed: int | None):
    sc = load_scenario(path)
    if seed is not None and seed != sc.seed:
        # reparse so a generated workload is drawn from the new seed too
        raw = dict(sc.raw)
        raw["seed"] = seed
        sc = parse_scenario(raw, "", sc.path)
    return sc


def _cmd_run(args) -> int:
    sc = _load_with_seed(args.scenario, args.seed)
    report = run_scenario(sc, trace=args.trace, oracle=args.oracle or sc.oracle)
    out_dir = args.out_dir or f"{Path(args.scenario).stem}.out"
    paths = write_outputs(report, out_dir)
    print(f"{sc.name}: {len(report.results)} queries, "
          f"{report.sim.delivered} messages, finished at tick {report.sim.now}")
    for name in ("metrics", "traces", "verify"):
        print(f"  {name}: {paths[name]}")
    if report.runtime_errors:
        print(f"  {len(report.runtime_errors)} structural ops refused "
              f"(see verify report)")
    if not report.verify_ok:
        print("verification FAILED", file=sys.stderr)
        return 1
    return 0


def _cmd_verify(args) -> int:
    sc = _load_with_seed(args.scenario, args.seed)
    report = run_scenario(sc, oracle=True)
    if args.out_dir:
        write_outputs(report, args.out_dir)
    for line in report.verify_lines:
        print(line)
    if not report.verify_ok:
        return 1
    return 0


def _cmd_gen(args) -> int:
    base = load_scenario(args.base)
    spec = WorkloadSpec(
        objects=args.objects, actions=args.actions, key_dist=args.key_dist,
        theta=args.theta, query_frac=args.query_frac,
        delete_frac=args.delete_frac, gap=args.gap)
    actions = gen_workload(base.schema, base.dcs, spec, args.seed)
    doc = dict(base.raw)
    doc.pop("generate", None)
    doc["workload"] = actions
    doc["seed"] = args.seed
    parse_scenario(doc, "", args.out)  # reject anything the run would reject
    Path(args.out).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    puts = sum(1 for a in actions if a["op"] == "put")
    queries = sum(1 for a in actions if a["op"] == "query")
    print(f"{args.out}: {len(actions)} actions "
          f"({puts} puts, {queries} queries), seed {args.seed}")
    return 0


def _cmd_query(args) -> int:
    path = Path(args.source)
    if path.is_dir():
        try:
            manifest = json.loads((path / "manifest.json").read_text())
        except OSError as exc:
            raise ScenarioError(
                f"{path} has no readable manifest.json: {exc.strerror}") from None
        except json.JSONDecodeError as exc:
            raise ScenarioError(f"manifest.json is not valid JSON: {exc.msg}",
                                exc.lineno) from None
        sc = parse_scenario(manifest["scenario"], "", str(path))
    else:
        sc = load_scenario(path)
    dc = args.dc or sc.dcs[0]
    if dc not in sc.dcs:
        raise ScenarioError(f"dc {dc!r} is not part of this scenario")
    q = parse(args.text, sc.schema).at(dc)
    report = run_scenario(sc, oracle=False)
    res = route(q, report.net)
    if res.error is not None:
        print(f"error: {res.error}", file=sys.stderr)
        return 1
    print(f"{len(res.keys)} keys at {res.staleness} from {dc} "
          f"(coverage {res.clock!r})")
    for key in sorted(res.keys):
        print(key)
    if args.trace:
        print(res.trace)
    return 0


if __name__ == "__main__":
    sys.exit(main())
