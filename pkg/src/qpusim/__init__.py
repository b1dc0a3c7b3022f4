"""Deterministic simulator and library for a geo-distributed secondary-index
tree over a weakly consistent, multi-datacenter object store."""

from .crdt_index import Binner, CrdtIndex, IndexDelta, Term
from .geostore import DcReplica, GeoStore, LogEntry, ObjectVersion, SchemaError, Stamp
from .oracle import rebuild_index, replay_matches, replay_to, scan
from .qpu import (
    Coordinator,
    MergeRefused,
    Probe,
    Qpu,
    QpuNetwork,
    Resp,
    ResultCache,
    SelectivityConfig,
    SplitPolicy,
    SplitRefused,
    TreeConfig,
)
from .regions import (AttributeSchema, Interval, Region, covers, greedy_cover,
                      subtract_all, text_embed)
from .router import (
    And,
    Or,
    Pred,
    Query,
    QueryError,
    QueryResult,
    candidate_check,
    eval_expr,
    parse,
    render,
    route,
    to_rectangles,
)
from .scenario import (
    RunReport,
    Scenario,
    ScenarioError,
    load_scenario,
    metrics_csv,
    parse_scenario,
    run_scenario,
    traces_text,
    write_outputs,
)
from .simcore import Envelope, LivelockError, NetConfig, Simulation
from .staleness import (
    Level,
    SnapshotReport,
    StalenessLevel,
    UnsatisfiableStaleness,
    VectorClock,
    catch_up,
    resolve_target,
    stable_snapshot,
)
from .workload import (KeySampler, WorkloadSpec, gen_phases, gen_workload,
                       random_query_text)

__version__ = "0.1.0"
