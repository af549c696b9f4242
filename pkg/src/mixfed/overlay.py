"""Peer topology view and route selection.

Each node keeps its own view of who is alive (driven by heartbeats and a
configurable timeout) and samples routes from it: hop count uniform over
{1..K_max}, relays drawn uniformly without replacement from the active
peers, forward and return paths sampled independently.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field
from enum import Enum


class PeerState(Enum):
    ACTIVE = "active"
    INACTIVE = "inactive"


class NoRouteAvailable(Exception):
    pass


@dataclass
class PeerInfo:
    node_id: bytes
    address: str
    public_key: bytes
    last_seen: float
    state: PeerState = PeerState.ACTIVE


class TopologyView:
    def __init__(self, self_id: bytes):
        self.self_id = self_id
        self.peers: dict[bytes, PeerInfo] = {}

    def add_peer(self, node_id: bytes, address: str, public_key: bytes, now: float) -> None:
        if node_id == self.self_id:
            return
        self.peers[node_id] = PeerInfo(node_id, address, public_key, now)

    def touch(self, node_id: bytes, now: float) -> None:
        info = self.peers.get(node_id)
        if info is None:
            return
        info.last_seen = now
        info.state = PeerState.ACTIVE  # reappearing peers come back

    def active_ids(self) -> list[bytes]:
        return [p.node_id for p in self.peers.values() if p.state == PeerState.ACTIVE]

    def is_active(self, node_id: bytes) -> bool:
        info = self.peers.get(node_id)
        return info is not None and info.state == PeerState.ACTIVE

    def detect_departures(self, now: float, timeout_s: float) -> list[bytes]:
        """Mark peers silent for longer than timeout_s INACTIVE."""
        gone = []
        for info in self.peers.values():
            if info.state == PeerState.ACTIVE and now - info.last_seen > timeout_s:
                info.state = PeerState.INACTIVE
                gone.append(info.node_id)
        return gone

    def public_keys(self) -> dict[bytes, bytes]:
        return {p.node_id: p.public_key for p in self.peers.values()}


@dataclass(frozen=True)
class RouteSpec:
    relays: tuple[bytes, ...]
    destination: bytes
    k: int

    @property
    def path(self) -> list[bytes]:
        return list(self.relays) + [self.destination]

    def touches(self, node_id: bytes) -> bool:
        return node_id in self.relays or node_id == self.destination


def select_path(
    view: TopologyView, dest: bytes, k_max: int, rng: random.Random
) -> RouteSpec:
    """Sample a route to dest: k ~ U{1..K_max}, relays uniform without
    replacement from the active peers excluding self and dest.  Falls back
    to a direct route when too few relays are available."""
    if not view.is_active(dest):
        raise NoRouteAvailable(f"destination {dest.hex()} not active")
    k = rng.randint(1, k_max)
    candidates = [p for p in view.active_ids() if p != dest]
    if len(candidates) < k - 1:
        k = 1
    relays = tuple(rng.sample(candidates, k - 1)) if k > 1 else ()
    return RouteSpec(relays, dest, k)


def select_return_path(
    view: TopologyView, self_id: bytes, k_max: int, rng: random.Random
) -> RouteSpec:
    """Sample an independent return route terminating at self."""
    k = rng.randint(1, k_max)
    candidates = view.active_ids()
    if len(candidates) < k - 1:
        k = 1
    relays = tuple(rng.sample(candidates, k - 1)) if k > 1 else ()
    return RouteSpec(relays, self_id, k)
