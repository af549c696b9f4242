"""Scenario configuration: versioned, validated, JSON round-trippable."""

from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field

from .mixer import MixConfig


class InvalidConfig(Exception):
    """Carries field-level diagnostics."""

    def __init__(self, problems: list[str]):
        super().__init__("; ".join(problems))
        self.problems = problems


@dataclass
class RouteConfig:
    k_max: int = 2

    def validate(self) -> list[str]:
        return [] if self.k_max >= 1 else ["route.k_max must be >= 1"]


@dataclass
class LearnConfig:
    frag_bytes: int = 512
    eta: float = 0.1
    tau: int = 40
    alpha_dirichlet: float = 10.0
    wait_timeout_s: float = 15.0
    rounds: int = 10
    batch_size: int = 32
    hidden: int = 32
    n_classes: int = 4
    dim: int = 16
    n_train: int = 6000
    n_test: int = 2000
    reserve_partitions: int = 2

    def validate(self) -> list[str]:
        problems = []
        if self.frag_bytes < 4:
            problems.append("learn.frag_bytes must be >= 4")
        if self.eta <= 0:
            problems.append("learn.eta must be > 0")
        if self.tau < 1:
            problems.append("learn.tau must be >= 1")
        if self.alpha_dirichlet <= 0:
            problems.append("learn.alpha_dirichlet must be > 0")
        if self.wait_timeout_s <= 0:
            problems.append("learn.wait_timeout_s must be > 0")
        if self.rounds < 0:
            problems.append("learn.rounds must be >= 0")
        return problems


@dataclass
class TransportConfig:
    kind: str = "sim"
    seed: int | None = 42
    latency_s: float = 0.005
    loss_rate: float = 0.0
    pace: float = 0.0  # sim only: 0 = free-running, 1 = real time

    def validate(self) -> list[str]:
        problems = []
        if self.kind not in ("sim", "tcp"):
            problems.append("transport.kind must be 'sim' or 'tcp'")
        if not 0 <= self.loss_rate < 1:
            problems.append("transport.loss_rate must be in [0, 1)")
        if self.latency_s < 0:
            problems.append("transport.latency_s must be >= 0")
        return problems


@dataclass
class AdversaryConfig:
    enabled: bool = True
    record_mix_events: bool = True

    def validate(self) -> list[str]:
        return []


@dataclass
class NodeTuning:
    heartbeat_interval_s: float = 1.0
    peer_timeout_s: float = 5.0
    retry_timeout_s: float = 10.0
    max_retries: int = 3
    cover_when_alone: bool = False  # a node with no peers cannot route cover

    def validate(self) -> list[str]:
        problems = []
        if self.peer_timeout_s <= 0:
            problems.append("node.peer_timeout_s must be > 0")
        if self.retry_timeout_s <= 0:
            problems.append("node.retry_timeout_s must be > 0")
        if self.max_retries < 0:
            problems.append("node.max_retries must be >= 0")
        return problems


@dataclass
class TrafficConfig:
    """Steady synthetic workload used instead of learning rounds by the
    measurement harnesses (game trials, communication sweeps)."""

    enabled: bool = False
    fragment_rate_per_s: float = 20.0
    duration_s: float = 10.0

    def validate(self) -> list[str]:
        if self.enabled and self.fragment_rate_per_s <= 0:
            return ["traffic.fragment_rate_per_s must be > 0"]
        return []


@dataclass
class ChurnAction:
    action: str  # "kill" | "add"
    after_round: int
    node: str | None = None  # node id hex, for kill

    def validate(self) -> list[str]:
        if self.action not in ("kill", "add"):
            return [f"churn.action '{self.action}' unknown"]
        return []


@dataclass
class ScenarioConfig:
    n_nodes: int = 6
    mix: MixConfig = field(default_factory=MixConfig)
    route: RouteConfig = field(default_factory=RouteConfig)
    learn: LearnConfig = field(default_factory=LearnConfig)
    transport: TransportConfig = field(default_factory=TransportConfig)
    adversary: AdversaryConfig = field(default_factory=AdversaryConfig)
    node: NodeTuning = field(default_factory=NodeTuning)
    traffic: TrafficConfig = field(default_factory=TrafficConfig)
    churn: list[ChurnAction] = field(default_factory=list)
    version: int = 1
    cover_enabled: bool = True
    mix_shuffle: bool = True  # ablation hook

    def validate(self) -> list[str]:
        problems = []
        if self.n_nodes < 1:
            problems.append("n_nodes must be >= 1")
        for section in (self.mix, self.route, self.learn, self.transport,
                        self.adversary, self.node, self.traffic):
            problems.extend(section.validate())
        for c in self.churn:
            problems.extend(c.validate())
        if self.version < 1:
            problems.append("version must be >= 1")
        return problems

    def check(self) -> "ScenarioConfig":
        problems = self.validate()
        if problems:
            raise InvalidConfig(problems)
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, raw: dict) -> "ScenarioConfig":
        raw = copy.deepcopy(raw)
        known = {}
        sections = {
            "mix": MixConfig,
            "route": RouteConfig,
            "learn": LearnConfig,
            "transport": TransportConfig,
            "adversary": AdversaryConfig,
            "node": NodeTuning,
            "traffic": TrafficConfig,
        }
        problems = []
        for key, value in raw.items():
            if key in sections:
                try:
                    known[key] = sections[key](**value)
                except TypeError as e:
                    problems.append(f"{key}: {e}")
            elif key == "churn":
                try:
                    known[key] = [ChurnAction(**c) for c in value]
                except TypeError as e:
                    problems.append(f"churn: {e}")
            elif key in ("n_nodes", "version", "cover_enabled", "mix_shuffle"):
                known[key] = value
            else:
                problems.append(f"unknown config key '{key}'")
        if problems:
            raise InvalidConfig(problems)
        return cls(**known)

    @classmethod
    def load(cls, path) -> "ScenarioConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def apply_override(self, dotted: str, value: str) -> None:
        """Apply a `--set section.key=value` override (values parsed as JSON
        when possible, else kept as strings)."""
        try:
            parsed = json.loads(value)
        except json.JSONDecodeError:
            parsed = value
        parts = dotted.split(".")
        target = self
        for p in parts[:-1]:
            if not hasattr(target, p):
                raise InvalidConfig([f"unknown config section '{p}'"])
            target = getattr(target, p)
        leaf = parts[-1]
        if not hasattr(target, leaf):
            raise InvalidConfig([f"unknown config key '{dotted}'"])
        setattr(target, leaf, parsed)
