"""Deterministic discrete-event kernel.

Time is an integer tick counter. Every message and timer lives in one heap
ordered by (deliver_at, insertion seq), so two runs with the same seed and
the same call sequence replay identically. Cross-datacenter sends get random
jitter and may be duplicated; sends inside one datacenter take a fixed delay
and therefore stay FIFO per sender.
"""

import csv
import heapq
import random
from dataclasses import dataclass, field
from typing import Any, Callable


class LivelockError(Exception):
    def __init__(self, pending: int, now: int):
        self.pending = pending
        self.now = now
        super().__init__(f"no quiescence by tick {now}, {pending} events pending")


@dataclass
class Envelope:
    src: str
    dst: str
    kind: str
    payload: Any
    sent_at: int = 0
    deliver_at: int = 0
    note: str = ""


@dataclass
class NetConfig:
    intra_dc_delay: int = 1
    inter_dc_delay: int = 5
    jitter: int = 4  # max extra cross-DC ticks, drawn uniformly
    dup_prob: float = 0.0

    def __post_init__(self):
        if self.intra_dc_delay < 0 or self.inter_dc_delay < 0:
            raise ValueError("delays must be >= 0 ticks")
        if self.jitter < 0 or not 0.0 <= self.dup_prob <= 1.0:
            raise ValueError("bad jitter or duplication probability")


@dataclass
class _Partition:
    end: int
    held: list = field(default_factory=list)


class Simulation:
    def __init__(self, net: NetConfig | None = None, seed: int = 0, trace: bool = False):
        self.net = net or NetConfig()
        self.rng = random.Random(seed)
        self.now = 0
        self._heap: list[tuple[int, int, Any]] = []
        self._seq = 0
        self._actors: dict[str, Callable[[Envelope], None]] = {}
        self.dc_of: dict[str, str] = {}
        self._partitions: dict[tuple[str, str], _Partition] = {}
        self.trace_rows: list[tuple] | None = [] if trace else None
        self.delivered = 0

    # -- wiring ------------------------------------------------------------

    def add_actor(self, name: str, dc: str, handler: Callable[[Envelope], None]):
        if name in self._actors:
            raise ValueError(f"duplicate actor {name}")
        self._actors[name] = handler
        self.dc_of[name] = dc

    # -- scheduling --------------------------------------------------------

    def _push(self, tick: int, item):
        if tick < self.now:
            raise ValueError("cannot schedule in the past")
        heapq.heappush(self._heap, (tick, self._seq, item))
        self._seq += 1

    def at(self, tick: int, fn: Callable[[], None]):
        self._push(tick, fn)

    def after(self, delay: int, fn: Callable[[], None]):
        self._push(self.now + delay, fn)

    def send(self, src: str, dst: str, kind: str, payload, note: str = ""):
        if dst not in self._actors:
            raise ValueError(f"unknown actor {dst!r}")
        env = Envelope(src, dst, kind, payload, sent_at=self.now, note=note)
        pair = self._pair(self.dc_of[src], self.dc_of[dst])
        if pair in self._partitions:
            self._partitions[pair].held.append(env)
            return
        self._dispatch(env, cross=pair is not None)

    def _pair(self, a: str, b: str):
        # None marks an intra-DC hop; partitions only key cross-DC pairs
        if a == b:
            return None
        return (a, b) if a < b else (b, a)

    def _dispatch(self, env: Envelope, cross: bool):
        if cross:
            delay = self.net.inter_dc_delay + self.rng.randint(0, self.net.jitter)
            if self.net.dup_prob > 0 and self.rng.random() < self.net.dup_prob:
                dup = Envelope(env.src, env.dst, env.kind, env.payload,
                               sent_at=env.sent_at, note=env.note)
                extra = self.net.inter_dc_delay + self.rng.randint(0, self.net.jitter)
                self._push(self.now + extra, dup)
        else:
            delay = self.net.intra_dc_delay
        env.deliver_at = self.now + delay
        self._push(env.deliver_at, env)

    # -- partitions ----------------------------------------------------------

    def partition(self, dc_a: str, dc_b: str, start: int, end: int):
        """Hold every message sent between the pair during [start, end); the
        backlog is released, with fresh network delays, at end."""
        if not start < end:
            raise ValueError("partition window needs start < end")
        pair = self._pair(dc_a, dc_b)
        if pair is None:
            raise ValueError("cannot partition a datacenter from itself")
        self.at(start, lambda: self._open_partition(pair, end))

    def _open_partition(self, pair, end: int):
        if pair in self._partitions:
            raise ValueError(f"overlapping partition windows for {pair}")
        self._partitions[pair] = _Partition(end)
        self.at(end, lambda: self._close_partition(pair))

    def _close_partition(self, pair):
        part = self._partitions.pop(pair)
        for env in part.held:
            self._dispatch(env, cross=True)

    # -- execution -----------------------------------------------------------

    def step(self) -> bool:
        if not self._heap:
            return False
        tick, _, item = heapq.heappop(self._heap)
        self.now = tick
        if isinstance(item, Envelope):
            self.delivered += 1
            if self.trace_rows is not None:
                self.trace_rows.append(
                    (tick, item.src, item.dst, item.kind, item.note))
            self._actors[item.dst](item)
        else:
            item()
        return True

    def run_until(self, tick: int):
        while self._heap and self._heap[0][0] <= tick:
            self.step()
        self.now = max(self.now, tick)

    def run_until_quiescent(self, max_ticks: int = 1_000_000,
                            max_events: int = 5_000_000) -> int:
        """Drain the queue; open partition windows keep it non-empty until
        their release event fires, so quiescence implies full delivery."""
        events = 0
        while self._heap:
            if self._heap[0][0] > max_ticks or events >= max_events:
                raise LivelockError(len(self._heap), self.now)
            self.step()
            events += 1
        return self.now

    def pending(self) -> int:
        return len(self._heap)

    # -- trace -----------------------------------------------------------------

    def trace_event(self, src: str, dst: str, kind: str, detail: str):
        if self.trace_rows is not None:
            self.trace_rows.append((self.now, src, dst, kind, detail))

    def dump_trace(self, path: str):
        if self.trace_rows is None:
            raise ValueError("simulation was built without trace=True")
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["tick", "src", "dst", "kind", "detail"])
            w.writerows(self.trace_rows)
