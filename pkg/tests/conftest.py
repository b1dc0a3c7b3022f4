"""Shared builders for the test suite.

Everything here is plain construction helpers; no fixtures with hidden
state. Tests that need a network build one, run it, and throw it away.
"""

import random

from qpusim import (
    AttributeSchema,
    Binner,
    GeoStore,
    Interval,
    NetConfig,
    QpuNetwork,
    Region,
    SelectivityConfig,
    Simulation,
    SplitPolicy,
    TreeConfig,
    parse,
    route,
)

LOWER = "abcdefghijklmnopqrstuvwxyz"


def student_schema():
    return {
        "gpa": AttributeSchema("gpa", "float", 0.0, 4.0),
        "dept": AttributeSchema("dept", "text", alphabet=LOWER),
    }


def wide_schema():
    return {
        "price": AttributeSchema("price", "float", 0.0, 1000.0),
        "stock": AttributeSchema("stock", "int", 0, 500),
        "rating": AttributeSchema("rating", "float", 0.0, 5.0),
        "vendor": AttributeSchema("vendor", "text", alphabet=LOWER),
    }


def numeric_schema(n=3):
    return {
        f"a{i}": AttributeSchema(f"a{i}", "float", 0.0, 100.0) for i in range(n)
    }


def build(dcs=("dc1", "dc2", "dc3"), schema=None, binning=None, history="leaf",
          replicated=True, repl_mode="log", seed=0, intra=1, inter=5,
          jitter=0, dup=0.0, gossip_every=10, cache_capacity=256,
          verify=False, split=None, selectivity=None, root_dc=None,
          trace=False):
    schema = schema or student_schema()
    sim = Simulation(NetConfig(intra, inter, jitter, dup), seed=seed, trace=trace)
    store = GeoStore(sim, list(dcs), schema)
    binner = Binner(schema, binning or {})
    cfg = TreeConfig(
        root_dc or dcs[0], replicated=replicated, repl_mode=repl_mode,
        gossip_every=gossip_every, cache_capacity=cache_capacity,
        split=split or SplitPolicy(), selectivity=selectivity or SelectivityConfig(),
        history_tree=history, verify=verify)
    net = QpuNetwork(sim, store, binner, cfg)
    return sim, store, net


def random_student(rng):
    return {"gpa": round(rng.uniform(0.0, 4.0), 3),
            "dept": rng.choice(["math", "physics", "cs", "bio", "art"])}


def fill(store, rng, n, dcs=None, prefix="k"):
    """n random puts round-robined over the DCs; returns the written keys."""
    dcs = dcs or store.dcs
    keys = []
    for i in range(n):
        key = f"{prefix}{rng.randrange(max(2, n // 2))}"
        store.put(dcs[i % len(dcs)], key, random_student(rng))
        keys.append(key)
    return keys


def ask(net, text, dc):
    return route(parse(text, net.schema).at(dc), net)


def clear_caches(net):
    for node in net.nodes.values():
        if node.cache is not None:
            node.cache.entries.clear()


def random_partition(rng, schema, depth=3):
    """Recursive random axis cuts; returns leaf regions tiling the space."""
    def cut(region, d):
        if d == 0 or rng.random() < 0.3:
            return [region]
        attr = rng.choice(sorted(a for a in region.ivs
                                 if schema[a].kind != "text"))
        iv = region.ivs[attr]
        span = iv.hi - iv.lo
        if span <= 1e-6:
            return [region]
        at = round(rng.uniform(iv.lo + 0.1 * span, iv.hi - 0.1 * span), 3)
        lo = region.narrowed(attr, Interval(iv.lo, at, iv.lo_open, True))
        hi = region.narrowed(attr, Interval(at, iv.hi, False, iv.hi_open))
        if lo is None or hi is None:
            return [region]
        return cut(lo, d - 1) + cut(hi, d - 1)

    return cut(Region.whole(schema), depth)


def random_rect(rng, schema):
    """Random axis-aligned box; some axes are left at full domain."""
    ivs = {}
    for attr, sch in schema.items():
        iv = sch.domain()
        if sch.kind != "text" and rng.random() < 0.75:
            a = round(rng.uniform(sch.lo, sch.hi), 3)
            b = round(rng.uniform(sch.lo, sch.hi), 3)
            if a > b:
                a, b = b, a
            iv = Interval(a, b, rng.random() < 0.5 and a < b,
                          rng.random() < 0.5 and a < b)
        ivs[attr] = iv
    return Region(ivs)
