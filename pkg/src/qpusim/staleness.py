"""Vector clocks and the client-bounded staleness protocol.

Clocks are keyed by origin datacenter and count contiguously applied log
entries per origin. A query's staleness level resolves against a snapshot
report into a target clock that every contributing index view must cover.
"""

from dataclasses import dataclass, field
from enum import Enum


class Level(Enum):
    STRONG = "strong"
    BOUNDED = "bounded"
    SNAPSHOT = "snapshot"
    ANY = "any"


@dataclass(frozen=True)
class StalenessLevel:
    level: Level
    k: int = 0

    def __post_init__(self):
        if self.level is Level.BOUNDED and self.k < 0:
            raise ValueError("bounded staleness requires k >= 0")

    @classmethod
    def strong(cls):
        return cls(Level.STRONG)

    @classmethod
    def bounded(cls, k: int):
        return cls(Level.BOUNDED, k)

    @classmethod
    def snapshot(cls):
        return cls(Level.SNAPSHOT)

    @classmethod
    def any(cls):
        return cls(Level.ANY)

    def render(self) -> str:
        if self.level is Level.BOUNDED:
            return f"bounded:{self.k}"
        return self.level.value


class VectorClock:
    """Map of origin DC -> highest contiguous applied sequence (absent = 0)."""

    __slots__ = ("entries",)

    def __init__(self, entries: dict[str, int] | None = None):
        # zero components are dropped so equal clocks compare equal
        self.entries = {d: s for d, s in (entries or {}).items() if s > 0}

    def get(self, dc: str) -> int:
        return self.entries.get(dc, 0)

    def merge(self, other: "VectorClock") -> "VectorClock":
        out = dict(self.entries)
        for d, s in other.entries.items():
            if s > out.get(d, 0):
                out[d] = s
        return VectorClock(out)

    def dominates(self, other: "VectorClock") -> bool:
        return all(self.get(d) >= s for d, s in other.entries.items())

    def with_entry(self, dc: str, seq: int) -> "VectorClock":
        out = dict(self.entries)
        out[dc] = seq
        return VectorClock(out)

    def restrict(self, dcs) -> "VectorClock":
        return VectorClock({d: s for d, s in self.entries.items() if d in dcs})

    def floor(self, other: "VectorClock") -> "VectorClock":
        """Pointwise minimum (absent components count as 0)."""
        dcs = set(self.entries) | set(other.entries)
        return VectorClock({d: min(self.get(d), other.get(d)) for d in dcs})

    def lag_behind(self, heads: "VectorClock") -> dict[str, int]:
        return {d: heads.get(d) - self.get(d) for d in heads.entries}

    def copy(self) -> "VectorClock":
        return VectorClock(dict(self.entries))

    def __eq__(self, other):
        return isinstance(other, VectorClock) and self.entries == other.entries

    def __hash__(self):
        return hash(tuple(sorted(self.entries.items())))

    def __repr__(self):
        inner = ",".join(f"{d}:{s}" for d, s in sorted(self.entries.items()))
        return "{" + inner + "}"


ZERO = VectorClock()


def merge_clock(a: VectorClock, b: VectorClock) -> VectorClock:
    """Pointwise maximum of two clocks."""
    return a.merge(b)


def stable_snapshot(clocks: list[VectorClock]) -> VectorClock:
    """Componentwise minimum over the union of DC keys (absent = 0).

    This is the prefix every clock in the set has applied.
    """
    if not clocks:
        raise ValueError("stable_snapshot of empty clock list")
    dcs = set()
    for c in clocks:
        dcs.update(c.entries)
    return VectorClock({d: min(c.get(d) for c in clocks) for d in dcs})


@dataclass
class SnapshotReport:
    """Stable subtree clock, origin replica heads, and the per-DC lag."""

    stable: VectorClock
    heads: VectorClock
    lag: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        if not self.lag:
            self.lag = self.stable.lag_behind(self.heads)


def resolve_target(level: StalenessLevel, report: SnapshotReport) -> VectorClock:
    """Turn a staleness level into the clock results must cover."""
    if level.level is Level.STRONG:
        return report.heads.copy()
    if level.level is Level.BOUNDED:
        return VectorClock(
            {d: max(s - level.k, 0) for d, s in report.heads.entries.items()}
        )
    if level.level is Level.SNAPSHOT:
        return report.stable.copy()
    return VectorClock()


class UnsatisfiableStaleness(Exception):
    """Raised when a target clock exceeds what the local replica has received."""

    def __init__(self, lagging_dcs: list[str]):
        self.lagging_dcs = sorted(lagging_dcs)
        super().__init__(f"target ahead of local replica for {self.lagging_dcs}")


def catch_up(view, replica, target: VectorClock) -> int:
    """Synchronously apply, from the local replica log, every entry <= target
    that `view` has not seen. `view` needs .clock and .apply_entry(entry).

    Returns the number of entries applied; raises UnsatisfiableStaleness when
    the replica itself has not received the part of the target prefix that the
    view still misses. A view already past the target (e.g. fed by peer
    deltas ahead of local replication) needs nothing.
    """
    if view.clock.dominates(target):
        return 0
    lagging = [
        d for d, s in target.entries.items()
        if view.clock.get(d) < s and replica.heads.get(d) < s
    ]
    if lagging:
        raise UnsatisfiableStaleness(lagging)
    applied = 0
    for entry in replica.entries_after(view.clock):
        if entry.seq <= target.get(entry.origin_dc):
            view.apply_entry(entry)
            applied += 1
    if not view.clock.dominates(target):
        raise AssertionError("catch_up did not reach target")
    return applied
