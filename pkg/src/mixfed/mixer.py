"""Per-node temporal mixing.

Outgoing items (own fragments, relayed packets, reply packets) wait in a
FIFO queue that does no mixing.  When the outbox runs dry it is refilled
with exactly O items: queued items first, cover packets for the rest, then
the whole outbox is reshuffled with a fresh uniform permutation.  One item
leaves per sampled interval (truncated normal, mean mu), so the wire rate
is 1/mu whether or not the node has anything real to say.
"""

from __future__ import annotations

import math
import random
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Callable

from .onion import L_PKT


class ItemKind(IntEnum):
    REAL = 1
    RELAY = 2
    SURB_REPLY = 3
    COVER = 4


@dataclass
class MixConfig:
    outbox_size: int = 10
    mu_s: float = 0.005
    sigma_s: float = 0.001

    def validate(self) -> list[str]:
        problems = []
        if self.outbox_size < 1:
            problems.append("mix.outbox_size must be >= 1")
        if self.mu_s <= 0:
            problems.append("mix.mu_s must be > 0")
        if self.sigma_s < 0:
            problems.append("mix.sigma_s must be >= 0")
        return problems


@dataclass
class QueueItem:
    kind: ItemKind
    packet: bytes
    first_hop: bytes
    item_id: int = -1
    trace_id_tag: int = -1  # measurement-harness passthrough, opaque to nodes


@dataclass
class MixArrival:
    t: float
    item_id: int
    kind: ItemKind


@dataclass
class MixEmission:
    t: float
    item_id: int
    kind: ItemKind
    occupancy: int
    batch_seq: int


def sample_interval(config: MixConfig, rng: random.Random) -> float:
    """Strictly positive draw from the truncated normal (mu, sigma).

    Resamples non-positive draws (up to 100 times, then clamps to mu); for
    sigma << mu the truncation bias is negligible.
    """
    if config.sigma_s == 0:
        return config.mu_s
    for _ in range(100):
        d = rng.gauss(config.mu_s, config.sigma_s)
        if d > 0:
            return d
    return config.mu_s


class Mixer:
    def __init__(
        self,
        config: MixConfig,
        rng: random.Random,
        cover_factory: Callable[[int], list[QueueItem]],
        record: bool = False,
        shuffle: bool = True,
    ):
        self.config = config
        self.rng = rng
        self.cover_factory = cover_factory
        self.shuffle = shuffle  # ablation hook for the relay-match experiments
        self.pending: list[QueueItem] = []
        self.slots: list[QueueItem] = []
        self.deadline: float | None = None
        self.record = record
        self.arrivals: list[MixArrival] = []
        self.emissions: list[MixEmission] = []
        self.batch_bounds: list[tuple[float, int]] = []  # (t, first emission index)
        self._batch_seq = -1
        self._next_id = 0
        self._now = 0.0
        self.emitted_count = 0

    # -- producers ---------------------------------------------------------

    def enqueue(self, item: QueueItem, now: float | None = None) -> None:
        """Append to the FIFO queue; no mixing happens here."""
        if now is not None:
            self._now = now
        if item.item_id < 0:
            item.item_id = self._alloc_id()
        if self.record:
            self.arrivals.append(MixArrival(self._now, item.item_id, item.kind))
        self.pending.append(item)

    def queue_len(self) -> int:
        return len(self.pending)

    def outbox_len(self) -> int:
        return len(self.slots)

    def _alloc_id(self) -> int:
        i = self._next_id
        self._next_id += 1
        return i

    # -- scheduler side ------------------------------------------------------

    def start(self, now: float) -> float:
        """Arm the first emission deadline."""
        self._now = now
        self.deadline = now + sample_interval(self.config, self.rng)
        return self.deadline

    def refill_outbox(self) -> None:
        """Move min(O, queued) items FIFO into the empty outbox, top up with
        fresh cover to exactly O, and apply a fresh uniform permutation."""
        assert not self.slots, "refill requires an empty outbox"
        o = self.config.outbox_size
        take = min(o, len(self.pending))
        batch = self.pending[:take]
        del self.pending[:take]
        covers = self.cover_factory(o - take)
        for c in covers:
            if c.item_id < 0:
                c.item_id = self._alloc_id()
        batch.extend(covers)
        if self.shuffle:
            self.rng.shuffle(batch)
        self.slots = batch
        self._batch_seq += 1
        if self.record:
            self.batch_bounds.append((self._now, self.emitted_count))

    def next_emission(self, now: float) -> tuple[QueueItem, float] | None:
        """Emit the front outbox slot if the sampled interval has elapsed.

        Returns (item, next deadline) or None when the deadline is still in
        the future.  Refills (and reshuffles) whenever the outbox is empty,
        so an idle node emits cover instead of going quiet.
        """
        self._now = now
        if self.deadline is None:
            self.start(now)
        if now + 1e-12 < self.deadline:
            return None
        if not self.slots:
            self.refill_outbox()
        if not self.slots:  # cover factory had nothing to route to
            self.deadline = now + sample_interval(self.config, self.rng)
            return None
        occupancy = len(self.slots)
        item = self.slots.pop(0)
        if self.record:
            self.emissions.append(
                MixEmission(now, item.item_id, item.kind, occupancy, self._batch_seq)
            )
        self.emitted_count += 1
        self.deadline = now + sample_interval(self.config, self.rng)
        return item, self.deadline


def occupancy_entropy_bits(emissions: list[MixEmission]) -> float:
    """Mean Shannon entropy of the observer's posterior over which outbox
    occupant each emission was; uniform shuffling makes the posterior uniform
    over the occupants present, so this is mean log2(occupancy)."""
    if not emissions:
        return 0.0
    return sum(math.log2(e.occupancy) for e in emissions) / len(emissions)
