"""Global passive-observer capture.

The transports tee every mixnet frame into an append-only log.  Each event
carries the wire-visible tuple (timestamp, link, length, digest) plus
ground-truth annotations (origin kind, trace id) that only the measurement
harness sees; ``adversary_view`` strips the annotations.
"""

from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass, field


def packet_digest(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()[:16]


@dataclass
class LinkEvent:
    t: float
    src: bytes
    dst: bytes
    length: int
    digest: str
    trace_id: int = -1
    kind: str = ""  # ground truth: fragment|ack|cover|join (instrumentation only)


@dataclass
class PacketTrace:
    trace_id: int
    kind: str
    origin: bytes
    dest: bytes
    created_t: float


@dataclass
class RttSample:
    fragment_key: int
    origin: bytes
    dest: bytes
    sent_t: float
    acked_t: float

    @property
    def rtt(self) -> float:
        return self.acked_t - self.sent_t


class Observer:
    """Append-only view of everything the network-level adversary can see,
    plus the instrumentation side channel used by the metrics."""

    def __init__(self):
        self.events: list[LinkEvent] = []
        self.traces: dict[int, PacketTrace] = {}
        self.rtt_samples: list[RttSample] = []
        self.heartbeat_count = 0
        self._next_trace = 0

    def new_trace(self, kind: str, origin: bytes, dest: bytes, t: float) -> int:
        tid = self._next_trace
        self._next_trace += 1
        self.traces[tid] = PacketTrace(tid, kind, origin, dest, t)
        return tid

    def record_link(self, t: float, src: bytes, dst: bytes, data: bytes, trace_id: int) -> None:
        kind = self.traces[trace_id].kind if trace_id in self.traces else ""
        self.events.append(
            LinkEvent(t, src, dst, len(data), packet_digest(data), trace_id, kind)
        )

    def record_heartbeat(self) -> None:
        self.heartbeat_count += 1

    def record_rtt(self, sample: RttSample) -> None:
        self.rtt_samples.append(sample)

    def adversary_view(self) -> list[tuple[float, bytes, bytes, int, str]]:
        return [(e.t, e.src, e.dst, e.length, e.digest) for e in self.events]

    def duration(self) -> float:
        if not self.events:
            return 0.0
        return self.events[-1].t - self.events[0].t

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t_ns", "from", "to", "len", "digest"])
            for e in self.events:
                w.writerow([int(e.t * 1e9), e.src.hex(), e.dst.hex(), e.length, e.digest])
