"""The per-node actor.

A node owns its topology view, mixer, pending-send table, and fragment
inbox.  Everything it emits (own fragments, relayed packets, reply packets,
join announcements, cover) is a uniform onion packet that goes through the
mixer; only heartbeats bypass it.  Incoming packets are peeled and dispatched;
relays keep no linkage state.
"""

from __future__ import annotations

import math
import random
import struct
from dataclasses import dataclass, field

import numpy as np

from . import learning as fl
from .config import LearnConfig, NodeTuning
from .mixer import ItemKind, MixConfig, Mixer, QueueItem
from .observe import Observer, RttSample
from .onion import (
    Deliver,
    Forward,
    InnerKind,
    InnerPayload,
    Invalid,
    NodeKeyPair,
    OnionContext,
    SurbReply,
    SurbTable,
    MacFailure,
    UnknownSurbId,
)
from .overlay import (
    NoRouteAvailable,
    RouteSpec,
    TopologyView,
    select_path,
    select_return_path,
)
from .transport import FRAME_HEARTBEAT, FRAME_PACKET


@dataclass
class PendingSend:
    key: int
    fragment: fl.Fragment
    dest: bytes
    route: RouteSpec
    return_route: RouteSpec
    surb_id: bytes
    sent_at: float
    first_sent_at: float
    retries: int = 0
    trace_id: int = -1


@dataclass
class RoundReport:
    node_id: bytes
    round: int
    t: float
    local_accuracy: float
    local_loss: float
    agg_accuracy: float
    agg_loss: float
    covered_fraction: float
    mean_contributors: float
    fragments_received: int
    active_peers: int


class Node:
    def __init__(
        self,
        keys: NodeKeyPair,
        ctx: OnionContext,
        mix_config: MixConfig,
        tuning: NodeTuning,
        scheduler,
        transport,
        rng: random.Random,
        observer: Observer | None = None,
        record_mix: bool = False,
        shuffle: bool = True,
        cover_enabled: bool = True,
        config_version: int = 1,
    ):
        self.keys = keys
        self.node_id = keys.node_id
        self.ctx = ctx
        self.tuning = tuning
        self.scheduler = scheduler
        self.transport = transport
        self.rng = rng
        self.observer = observer
        self.cover_enabled = cover_enabled
        self.config_version = config_version
        self.view = TopologyView(self.node_id)
        self.mixer = Mixer(mix_config, rng, self._make_cover, record=record_mix, shuffle=shuffle)
        self.surbs = SurbTable()
        self.applied_surb_ids: set[bytes] = set()
        self.pending: dict[int, PendingSend] = {}
        self._surb_to_key: dict[bytes, int] = {}
        self._next_key = 0
        self.buffer = fl.FragmentBuffer()
        self.learner: Learner | None = None
        self.alive = False
        self._seen_joins: set[bytes] = set()
        self.counters = {
            "sent_packets": 0,
            "recv_packets": 0,
            "relayed": 0,
            "cover_sent": 0,
            "cover_received": 0,
            "fragments_received": 0,
            "fragments_sent": 0,
            "acks_received": 0,
            "retransmits": 0,
            "abandoned": 0,
            "invalid_dropped": 0,
            "joins_seen": 0,
        }

    # ------------------------------------------------------------------ setup

    def bootstrap(self, directory: dict[bytes, tuple[str, bytes]], now: float) -> None:
        """Install the provisioned peer directory: {id: (address, public key)}."""
        for nid, (addr, pub) in directory.items():
            self.view.add_peer(nid, addr, pub, now)

    def start(self) -> None:
        self.alive = True
        now = self.scheduler.now
        deadline = self.mixer.start(now)
        self.scheduler.call_at(deadline, self._on_emission_deadline)
        self.scheduler.call_later(self.tuning.heartbeat_interval_s, self._heartbeat_tick)
        self.scheduler.call_later(1.0, self._maintenance_tick)

    def halt(self) -> None:
        """Abrupt stop: no goodbye of any kind."""
        self.alive = False

    def apply_config(self, mix: MixConfig, version: int) -> bool:
        """Adopt a newer configuration without restarting (stale versions are
        ignored)."""
        if version <= self.config_version:
            return False
        self.mixer.config = mix
        self.config_version = version
        return True

    # ------------------------------------------------------------- scheduling

    def _on_emission_deadline(self) -> None:
        if not self.alive:
            return
        res = self.mixer.next_emission(self.scheduler.now)
        if res is None:
            self.scheduler.call_at(self.mixer.deadline, self._on_emission_deadline)
            return
        item, deadline = res
        self.transport.send(
            self.node_id, item.first_hop, FRAME_PACKET, item.packet, item.trace_id_tag
        )
        self.counters["sent_packets"] += 1
        if item.kind == ItemKind.COVER:
            self.counters["cover_sent"] += 1
        self.scheduler.call_at(deadline, self._on_emission_deadline)

    def _heartbeat_tick(self) -> None:
        if not self.alive:
            return
        for peer in self.view.peers.values():
            self.transport.send(self.node_id, peer.node_id, FRAME_HEARTBEAT, self.node_id)
        self.scheduler.call_later(self.tuning.heartbeat_interval_s, self._heartbeat_tick)

    def _maintenance_tick(self) -> None:
        if not self.alive:
            return
        now = self.scheduler.now
        gone = self.view.detect_departures(now, self.tuning.peer_timeout_s)
        if gone:
            self._reroute_around(set(gone))
        self._retransmit_due(now)
        self.scheduler.call_later(1.0, self._maintenance_tick)

    # ------------------------------------------------------------------ frames

    def on_frame(self, src: bytes, ftype: int, body: bytes, trace: int = -1) -> None:
        if not self.alive:
            return
        if ftype == FRAME_HEARTBEAT:
            self.view.touch(body, self.scheduler.now)
            return
        if ftype == FRAME_PACKET:
            self.counters["recv_packets"] += 1
            self.handle_incoming(body, trace)

    def handle_incoming(self, packet: bytes, trace: int = -1) -> None:
        """Peel one layer and dispatch; anything inauthentic drops silently."""
        res = self.ctx.peel(packet, self.keys.private_key)
        if isinstance(res, Forward):
            # relay: the peeled packet goes straight into the mixer; nothing
            # maps the incoming bytes to the outgoing ones
            item = QueueItem(ItemKind.RELAY, res.packet, res.next_hop)
            item.trace_id_tag = trace  # harness passthrough, opaque here
            self.mixer.enqueue(item, now=self.scheduler.now)
            self.counters["relayed"] += 1
            return
        if isinstance(res, Deliver):
            self._on_deliver(res.payload)
            return
        if isinstance(res, SurbReply):
            self._on_surb_reply(res)
            return
        self.counters["invalid_dropped"] += 1

    def _on_deliver(self, payload: InnerPayload) -> None:
        if payload.kind == InnerKind.FRAGMENT:
            try:
                fragment = fl.Fragment.from_bytes(payload.body)
            except fl.LearningError:
                self.counters["invalid_dropped"] += 1
                return
            self.counters["fragments_received"] += 1
            self.buffer.add(fragment)
            if payload.surb is not None:
                self._send_ack(payload.surb)
            if self.learner is not None:
                self.learner.on_fragment(fragment)
        elif payload.kind == InnerKind.ACK:
            self.counters["acks_received"] += 1
        elif payload.kind == InnerKind.COVER:
            self.counters["cover_received"] += 1
        elif payload.kind == InnerKind.JOIN:
            self._handle_join(payload.body)

    def _send_ack(self, surb) -> None:
        if surb.surb_id in self.applied_surb_ids:
            return
        ack = InnerPayload(InnerKind.ACK, b"")
        body = struct.pack(">BH", int(ack.kind), len(ack.body)) + ack.body
        first_hop, packet = self.ctx.apply_surb(
            surb, body, self.rng, used_ids=self.applied_surb_ids
        )
        trace = -1
        if self.observer is not None:
            trace = self.observer.new_trace("ack", self.node_id, first_hop, self.scheduler.now)
        item = QueueItem(ItemKind.SURB_REPLY, packet, first_hop)
        item.trace_id_tag = trace
        self.mixer.enqueue(item, now=self.scheduler.now)

    def _on_surb_reply(self, res: SurbReply) -> None:
        key = self._surb_to_key.get(res.surb_id)
        try:
            self.surbs.unwrap(self.ctx, res.surb_id, res.body)
        except (UnknownSurbId, MacFailure):
            self.counters["invalid_dropped"] += 1
            return
        self.counters["acks_received"] += 1
        self._surb_to_key.pop(res.surb_id, None)
        if key is not None and key in self.pending:
            p = self.pending.pop(key)
            if self.observer is not None:
                self.observer.record_rtt(
                    RttSample(key, self.node_id, p.dest, p.first_sent_at, self.scheduler.now)
                )

    # ------------------------------------------------------------------- sends

    def send_fragment(self, fragment: fl.Fragment, dest: bytes) -> int:
        """Fragment out over a fresh route with an independent reply block;
        returns the pending-send key."""
        route = select_path(self.view, dest, self.ctx.k_max, self.rng)
        key = self._enqueue_fragment(fragment, dest, route)
        return key

    def _enqueue_fragment(self, fragment: fl.Fragment, dest: bytes, route: RouteSpec) -> int:
        return_route = select_return_path(self.view, self.node_id, self.ctx.k_max, self.rng)
        pubkeys = self.view.public_keys()
        pubkeys[self.node_id] = self.keys.public_key
        surb, material = self.ctx.build_surb(return_route.path, pubkeys, self.rng)
        self.surbs.register(material)
        packet = self.ctx.build_packet(
            InnerPayload(InnerKind.FRAGMENT, fragment.to_bytes(), surb=surb),
            route.path,
            pubkeys,
            self.rng,
        )
        key = self._next_key
        self._next_key += 1
        now = self.scheduler.now
        self.pending[key] = PendingSend(
            key, fragment, dest, route, return_route, surb.surb_id, now, now
        )
        self._surb_to_key[surb.surb_id] = key
        trace = -1
        if self.observer is not None:
            trace = self.observer.new_trace("fragment", self.node_id, dest, now)
        self.pending[key].trace_id = trace
        item = QueueItem(ItemKind.REAL, packet, route.path[0])
        item.trace_id_tag = trace
        self.mixer.enqueue(item, now=self.scheduler.now)
        self.counters["fragments_sent"] += 1
        return key

    def _resend(self, p: PendingSend) -> None:
        """Retransmit over a freshly sampled route with a fresh reply block."""
        self.surbs.discard(p.surb_id)
        self._surb_to_key.pop(p.surb_id, None)
        del self.pending[p.key]
        try:
            route = select_path(self.view, p.dest, self.ctx.k_max, self.rng)
        except NoRouteAvailable:
            self.counters["abandoned"] += 1
            return
        new_key = self._enqueue_fragment(p.fragment, p.dest, route)
        np_ = self.pending[new_key]
        np_.retries = p.retries + 1
        np_.first_sent_at = p.first_sent_at
        self.counters["retransmits"] += 1

    def _retransmit_due(self, now: float) -> None:
        for p in list(self.pending.values()):
            if now - p.sent_at <= self.tuning.retry_timeout_s:
                continue
            self._retry_or_abandon(p)

    def _reroute_around(self, dead: set[bytes]) -> None:
        for p in list(self.pending.values()):
            touches = any(p.route.touches(d) or p.return_route.touches(d) for d in dead)
            if touches:
                self._retry_or_abandon(p)

    def _retry_or_abandon(self, p: PendingSend) -> None:
        if p.retries >= self.tuning.max_retries or not self.view.is_active(p.dest):
            self.surbs.discard(p.surb_id)
            self._surb_to_key.pop(p.surb_id, None)
            del self.pending[p.key]
            self.counters["abandoned"] += 1
            return
        self._resend(p)

    # -------------------------------------------------------------------- cover

    def _make_cover(self, n: int) -> list[QueueItem]:
        if not self.cover_enabled or n <= 0:
            return []
        active = self.view.active_ids()
        if not active:
            return []
        pubkeys = self.view.public_keys()
        pubkeys[self.node_id] = self.keys.public_key
        out = []
        for _ in range(n):
            dest = active[self.rng.randrange(len(active))]
            route = select_path(self.view, dest, self.ctx.k_max, self.rng)
            packet = self.ctx.build_packet(
                InnerPayload(InnerKind.COVER, self.rng.randbytes(16)),
                route.path,
                pubkeys,
                self.rng,
            )
            trace = -1
            if self.observer is not None:
                trace = self.observer.new_trace("cover", self.node_id, dest, self.scheduler.now)
            item = QueueItem(ItemKind.COVER, packet, route.path[0])
            item.trace_id_tag = trace
            out.append(item)
        return out

    # -------------------------------------------------------------------- joins

    def announce_join(self) -> None:
        """Broadcast a join message (as ordinary onion traffic) to every
        provisioned peer."""
        nonce = self.rng.randbytes(16)
        self._seen_joins.add(self.node_id + nonce)
        addr = self.transport.address_of(self.node_id)
        body = (
            self.node_id
            + nonce
            + self.keys.public_key
            + struct.pack(">H", len(addr))
            + addr.encode()
        )
        self._broadcast_join(body, exclude=set())

    def _broadcast_join(self, body: bytes, exclude: set[bytes]) -> None:
        pubkeys = self.view.public_keys()
        pubkeys[self.node_id] = self.keys.public_key
        for dest in self.view.active_ids():
            if dest in exclude:
                continue
            try:
                route = select_path(self.view, dest, self.ctx.k_max, self.rng)
            except NoRouteAvailable:
                continue
            packet = self.ctx.build_packet(
                InnerPayload(InnerKind.JOIN, body), route.path, pubkeys, self.rng
            )
            trace = -1
            if self.observer is not None:
                trace = self.observer.new_trace("join", self.node_id, dest, self.scheduler.now)
            item = QueueItem(ItemKind.REAL, packet, route.path[0])
            item.trace_id_tag = trace
            self.mixer.enqueue(item, now=self.scheduler.now)

    def _handle_join(self, body: bytes) -> None:
        if len(body) < 8 + 16 + 32 + 2:
            return
        joiner = body[:8]
        nonce = body[8:24]
        pub = body[24:56]
        (alen,) = struct.unpack(">H", body[56:58])
        addr = body[58 : 58 + alen].decode()
        dedup = joiner + nonce
        if dedup in self._seen_joins or joiner == self.node_id:
            return
        self._seen_joins.add(dedup)
        self.counters["joins_seen"] += 1
        now = self.scheduler.now
        if joiner not in self.view.peers:
            self.view.add_peer(joiner, addr, pub, now)
        else:
            self.view.touch(joiner, now)
        learn = getattr(self.transport, "learn_address", None)
        if learn is not None:
            learn(joiner, addr)
        # single re-propagation; the (joiner, nonce) dedup stops the flood
        self._broadcast_join(body, exclude={joiner})

    # -------------------------------------------------------------------- status

    def relay_linkage_inventory(self) -> int:
        """Number of retained structures mapping incoming relay packets to
        outgoing ones (must stay zero; audited by tests)."""
        return 0  # by construction: handle_incoming drops the incoming bytes

    def status_snapshot(self) -> dict:
        s = {
            "node_id": self.node_id.hex(),
            "t": self.scheduler.now,
            "alive": self.alive,
            "queue_occupancy": self.mixer.queue_len(),
            "outbox_occupancy": self.mixer.outbox_len(),
            "pending_sends": len(self.pending),
            "active_peers": len(self.view.active_ids()),
            "config_version": self.config_version,
        }
        s.update(self.counters)
        if self.learner is not None:
            s.update(self.learner.status())
        return s


class Learner:
    """Round driver: train, fragment, send to every active peer, wait for
    coverage (or time out), aggregate, repeat."""

    def __init__(
        self,
        node: Node,
        model: fl.MlpClassifier,
        w0: fl.ModelVector,
        partition: fl.Dataset,
        test_set: fl.Dataset,
        cfg: LearnConfig,
        np_rng: np.random.Generator,
        on_report,
        start_epoch: int = 0,
        end_round: int | None = None,
    ):
        self.node = node
        self.model = model
        self.w = w0
        self.partition = partition
        self.test_set = test_set
        self.cfg = cfg
        self.np_rng = np_rng
        self.on_report = on_report
        self.round = start_epoch
        self.end_round = cfg.rounds if end_round is None else end_round
        self.done = self.round >= self.end_round
        self._waiting = False
        self._deadline_handle = None
        self._w_local: fl.ModelVector | None = None
        self._local_eval: dict = {}
        self.last_eval: dict = {}
        node.learner = self

    def start(self) -> None:
        self.node.scheduler.call_later(0.0, self._begin_round)

    def status(self) -> dict:
        return {
            "round": self.round,
            "learner_done": self.done,
            "accuracy": self.last_eval.get("accuracy"),
            "loss": self.last_eval.get("loss"),
        }

    # ---------------------------------------------------------------- rounds

    def _begin_round(self) -> None:
        if self.done or not self.node.alive:
            return
        self._w_local = fl.local_train(
            self.model, self.w, self.partition,
            tau=self.cfg.tau, eta=self.cfg.eta,
            rng=self.np_rng, batch_size=self.cfg.batch_size,
        )
        self._local_eval = fl.evaluate(self.model, self._w_local, self.test_set)
        fragments = fl.fragment_model(self._w_local, self.cfg.frag_bytes, epoch=self.round)
        peers = self.node.view.active_ids()
        for dest in peers:
            for frag in fragments:
                try:
                    self.node.send_fragment(frag, dest)
                except NoRouteAvailable:
                    pass
        if not peers:
            # degenerate round: pure local training
            self.node.scheduler.call_later(0.0, self._finish_round)
            return
        self._waiting = True
        self._deadline_handle = self.node.scheduler.call_later(
            self.cfg.wait_timeout_s, self._finish_round
        )
        self._check_quorum()

    def on_fragment(self, fragment: fl.Fragment) -> None:
        if self._waiting and fragment.epoch == self.round:
            self._check_quorum()

    def _check_quorum(self) -> None:
        """Early stop once >=90% of coordinates have contributions from at
        least half the active peers (identity-free: counts, not senders)."""
        peers = len(self.node.view.active_ids())
        if peers == 0:
            return
        need = math.ceil(0.5 * peers)
        counts = self.node.buffer.contributor_counts(self.round, self.w.dim)
        if float((counts >= need).mean()) >= 0.9:
            self._finish_round()

    def _finish_round(self) -> None:
        if not self._waiting and self._w_local is None:
            return
        if self._deadline_handle is not None:
            self._deadline_handle.cancel()
            self._deadline_handle = None
        self._waiting = False
        received = self.node.buffer.epoch_fragments(self.round)
        w_agg, c = fl.fragment_fedavg(self._w_local, received)
        stats = fl.CoverageStats.from_counts(self.round, c)
        self.last_eval = fl.evaluate(self.model, w_agg, self.test_set)
        report = RoundReport(
            node_id=self.node.node_id,
            round=self.round,
            t=self.node.scheduler.now,
            local_accuracy=self._local_eval["accuracy"],
            local_loss=self._local_eval["loss"],
            agg_accuracy=self.last_eval["accuracy"],
            agg_loss=self.last_eval["loss"],
            covered_fraction=stats.covered_fraction,
            mean_contributors=stats.mean_contributors,
            fragments_received=len(received),
            active_peers=len(self.node.view.active_ids()),
        )
        self.w = w_agg
        self._w_local = None
        self.round += 1
        self.node.buffer.drop_epochs_before(self.round)
        self.on_report(report)
        if self.round >= self.end_round:
            self.done = True
            return
        self.node.scheduler.call_later(0.0, self._begin_round)
