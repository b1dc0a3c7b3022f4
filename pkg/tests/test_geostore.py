import random

from qpusim import LogEntry, ObjectVersion, Stamp, VectorClock

from conftest import build, fill, random_student


def test_first_write_gets_seq_one_and_origin_stamp():
    sim, store, net = build(dcs=("dc1", "dc2"))
    sim.at(4, lambda: store.put("dc1", "k1", {"gpa": 3.5, "dept": "cs"}))
    sim.run_until_quiescent()
    entry = store.replicas["dc1"].log["dc1"][0]
    assert (entry.origin_dc, entry.seq) == ("dc1", 1)
    assert entry.stamp == Stamp(4, "dc1", 1)
    assert entry.prev_tag is None


def test_second_local_put_wins_by_higher_timestamp():
    sim, store, net = build(dcs=("dc1", "dc2"))
    sim.at(1, lambda: store.put("dc1", "k", {"gpa": 1.0, "dept": "cs"}))
    sim.at(2, lambda: store.put("dc1", "k", {"gpa": 2.0, "dept": "cs"}))
    sim.run_until_quiescent()
    assert store.replicas["dc1"].get("k")["gpa"] == 2.0
    # the second entry records which version it superseded
    assert store.replicas["dc1"].log["dc1"][1].prev_tag == Stamp(1, "dc1", 1)


def test_concurrent_writes_pick_one_winner_everywhere():
    sim, store, net = build(dcs=("dc1", "dc2"), jitter=6, seed=5)
    sim.at(3, lambda: store.put("dc1", "obj", {"gpa": 1.0, "dept": "aaa"}))
    sim.at(3, lambda: store.put("dc2", "obj", {"gpa": 1.0, "dept": "bbb"}))
    sim.run_until_quiescent()
    v1 = store.replicas["dc1"].version("obj")
    v2 = store.replicas["dc2"].version("obj")
    assert v1 == v2
    # equal timestamps fall back to the larger datacenter name
    assert v1.stamp.dc == "dc2" and v1.attrs["dept"] == "bbb"


def test_tie_break_is_argument_order_independent():
    a = ObjectVersion(Stamp(5, "dc1", 2), {"v": 1})
    b = ObjectVersion(Stamp(5, "dc2", 1), {"v": 2})
    assert max(a, b, key=lambda v: v.stamp) == max(b, a, key=lambda v: v.stamp)
    assert max(a, b, key=lambda v: v.stamp) is b


def test_get_unknown_key_is_absent():
    sim, store, net = build(dcs=("dc1",))
    assert store.replicas["dc1"].get("nope") is None


def test_get_before_propagation_sees_stale_value():
    sim, store, net = build(dcs=("dc1", "dc2"), inter=50)
    sim.at(1, lambda: store.put("dc2", "k", {"gpa": 0.5, "dept": "old"}))
    sim.at(2, lambda: store.put("dc1", "k", {"gpa": 3.0, "dept": "cs"}))
    sim.run_until(10)
    # dc2 has not yet received dc1's later write
    assert store.replicas["dc2"].get("k")["dept"] == "old"
    sim.run_until_quiescent()
    assert store.replicas["dc2"].get("k")["dept"] == "cs"


def test_delete_leaves_a_tombstone_version():
    sim, store, net = build(dcs=("dc1", "dc2"))
    sim.at(1, lambda: store.put("dc1", "k", {"gpa": 3.0, "dept": "cs"}))
    sim.at(5, lambda: store.delete("dc2", "k"))
    sim.run_until_quiescent()
    for dc in ("dc1", "dc2"):
        replica = store.replicas[dc]
        assert replica.get("k") is None
        assert replica.version("k").attrs is None


def test_subscribe_on_empty_log_feeds_only_new_entries():
    sim, store, net = build(dcs=("dc1",))
    seen = []
    store.replicas["dc1"].subscribe(seen.append)
    assert seen == []
    sim.at(1, lambda: store.put("dc1", "k", {"gpa": 1.0, "dept": "cs"}))
    sim.run_until_quiescent()
    assert [e.key for e in seen] == ["k"]


def test_entries_after_zero_replays_in_seq_order():
    sim, store, net = build(dcs=("dc1",))
    for i in range(3):
        sim.at(i + 1, lambda i=i: store.put("dc1", f"k{i}",
                                            {"gpa": 1.0, "dept": "cs"}))
    sim.run_until_quiescent()
    entries = list(store.replicas["dc1"].entries_after(VectorClock()))
    assert [e.seq for e in entries] == [1, 2, 3]
    assert [e.key for e in entries] == ["k0", "k1", "k2"]


def test_subscriber_sees_remote_entries_with_origin_preserved():
    sim, store, net = build(dcs=("dc1", "dc2"), jitter=4, seed=2)
    seen = []
    store.replicas["dc1"].subscribe(seen.append)
    sim.at(1, lambda: store.put("dc2", "k", {"gpa": 2.0, "dept": "cs"}))
    sim.run_until_quiescent()
    remote = [e for e in seen if e.origin_dc == "dc2"]
    assert len(remote) == 1 and remote[0].seq == 1


def test_duplicate_delivery_is_idempotent():
    sim, store, net = build(dcs=("dc1", "dc2"), dup=1.0, seed=3)
    sim.at(1, lambda: store.put("dc1", "k", {"gpa": 2.0, "dept": "cs"}))
    sim.run_until_quiescent()
    replica = store.replicas["dc2"]
    assert len(replica.log["dc1"]) == 1
    assert replica.heads == VectorClock({"dc1": 1})


def test_reordered_entries_apply_in_origin_sequence():
    sim, store, net = build(dcs=("dc1", "dc2"), jitter=30, seed=11)
    order = []
    store.replicas["dc2"].subscribe(
        lambda e: order.append(e.seq) if e.origin_dc == "dc1" else None)
    for i in range(10):
        sim.at(i + 1, lambda i=i: store.put("dc1", f"k{i}",
                                            {"gpa": 1.0, "dept": "cs"}))
    sim.run_until_quiescent()
    assert order == list(range(1, 11))


def test_three_dc_random_churn_converges_to_lww_fold():
    sim, store, net = build(jitter=12, dup=0.25, seed=13)
    rng = random.Random(4)
    for i in range(1000):
        dc = store.dcs[rng.randrange(3)]
        key = f"k{rng.randrange(120)}"
        if rng.random() < 0.08:
            sim.at(i + 1, lambda dc=dc, key=key: store.delete(dc, key))
        else:
            attrs = random_student(rng)
            sim.at(i + 1, lambda dc=dc, key=key, attrs=attrs:
                   store.put(dc, key, attrs))
    sim.run_until_quiescent()

    # oracle: fold every log entry in arbitrary order via max-stamp
    folded: dict[str, ObjectVersion] = {}
    for entries in store.replicas["dc1"].log.values():
        for e in entries:
            cur = folded.get(e.key)
            if cur is None or e.stamp > cur.stamp:
                folded[e.key] = ObjectVersion(e.stamp, e.attrs)

    for dc in store.dcs:
        replica = store.replicas[dc]
        assert replica.objects == folded
    assert store.replicas["dc1"].heads == store.max_heads()


def test_entries_after_respects_upto_bound():
    sim, store, net = build(dcs=("dc1", "dc2"))
    fill(store, random.Random(5), 20, dcs=["dc1", "dc2"])
    sim.run_until_quiescent()
    replica = store.replicas["dc1"]
    upto = VectorClock({"dc1": 3, "dc2": 2})
    got = list(replica.entries_after(VectorClock(), upto=upto))
    assert {(e.origin_dc, e.seq) for e in got} == {
        ("dc1", 1), ("dc1", 2), ("dc1", 3), ("dc2", 1), ("dc2", 2)}
