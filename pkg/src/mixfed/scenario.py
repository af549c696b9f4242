"""Scenario coordinator.

Builds a whole deployment from a ScenarioConfig (keys, data partitions,
transports, nodes, learners), drives it on the simulation or TCP scheduler,
applies churn, and collects reports and artifacts.  The coordinator only
observes and provisions: aggregation decisions stay inside the nodes, and a
run produces bitwise-identical learning output with or without anyone
watching.
"""

from __future__ import annotations

import csv
import json
import math
import random
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import learning as fl
from .config import InvalidConfig, ScenarioConfig
from .mixer import MixConfig
from .node import Learner, Node, RoundReport
from .observe import Observer
from .onion import NodeKeyPair, OnionContext
from .overlay import NoRouteAvailable, select_path
from .transport import RealScheduler, SimScheduler, SimTransport, TcpTransport


class UnknownNode(Exception):
    pass


def node_id_for(index: int) -> bytes:
    return b"n%07d" % index


# numpy stream tags (third element of the seed sequence)
_STREAM_DATA = 0
_STREAM_PARTITION = 1
_STREAM_TRAIN = 2
_STREAM_INIT = 3


def _np_rng(seed: int | None, node_index: int, stream: int) -> np.random.Generator:
    if seed is None:
        return np.random.default_rng()
    return np.random.default_rng([seed, node_index, stream])


def _py_rng(seed: int | None, tag: str) -> random.Random:
    if seed is None:
        return random.SystemRandom()
    return random.Random(f"{seed}/{tag}")


@dataclass
class ScenarioResult:
    config: ScenarioConfig
    reports: list[RoundReport]
    status_history: list[dict]
    observer: Observer | None
    mix_records: dict[bytes, object]  # node id -> Mixer (with recorded events)
    sim_duration: float

    def accuracy_rows(self) -> list[dict]:
        rows = []
        for r in sorted(self.reports, key=lambda r: (r.round, r.node_id)):
            rows.append({
                "round": r.round,
                "node": r.node_id.hex(),
                "t": r.t,
                "local_accuracy": r.local_accuracy,
                "local_loss": r.local_loss,
                "agg_accuracy": r.agg_accuracy,
                "agg_loss": r.agg_loss,
                "covered_fraction": r.covered_fraction,
                "mean_contributors": r.mean_contributors,
                "fragments_received": r.fragments_received,
                "active_peers": r.active_peers,
            })
        return rows

    def aggregated_accuracy_by_round(self) -> dict[int, float]:
        per_round: dict[int, list[float]] = {}
        for r in self.reports:
            per_round.setdefault(r.round, []).append(r.agg_accuracy)
        return {k: sum(v) / len(v) for k, v in sorted(per_round.items())}


class Scenario:
    def __init__(self, config: ScenarioConfig, on_event=None):
        config.check()
        self.config = config
        self.on_event = on_event or (lambda kind, payload: None)
        seed = config.transport.seed
        self.seed = seed
        self.ctx = OnionContext(config.route.k_max)
        self.observer = Observer() if config.adversary.enabled else None

        if config.transport.kind == "sim":
            self.scheduler = SimScheduler()
            self.scheduler.pace = config.transport.pace
            self.transport = SimTransport(
                self.scheduler,
                _py_rng(seed, "net"),
                latency_s=config.transport.latency_s,
                loss_rate=config.transport.loss_rate,
                observer=self.observer,
            )
        else:
            self.scheduler = RealScheduler()
            self.transport = TcpTransport(self.scheduler, observer=self.observer)

        # data is built once so every mode (mixnet, plain, churned) sees the
        # same task and the same per-node partitions; traffic-only scenarios
        # (game trials, comm sweeps) skip it entirely
        lc = config.learn
        self._learning_enabled = not config.traffic.enabled and lc.rounds > 0
        self.model = fl.MlpClassifier(lc.dim, lc.hidden, lc.n_classes)
        if self._learning_enabled:
            self.train_set, self.test_set = fl.make_mixture_task(
                _np_rng(seed, 0, _STREAM_DATA),
                n_classes=lc.n_classes, dim=lc.dim,
                n_train=lc.n_train, n_test=lc.n_test,
            )
            total_parts = config.n_nodes + lc.reserve_partitions
            self.partitions = fl.dirichlet_partition(
                self.train_set, total_parts, lc.alpha_dirichlet,
                _np_rng(seed, 0, _STREAM_PARTITION),
            )
            self.w0 = self.model.init(_np_rng(seed, 0, _STREAM_INIT))
        else:
            self.train_set = self.test_set = fl.Dataset(np.zeros((0, lc.dim)), np.zeros(0, dtype=int))
            self.partitions = []
            self.w0 = None

        self.nodes: dict[bytes, Node] = {}
        self.learners: dict[bytes, Learner] = {}
        self.reports: list[RoundReport] = []
        self.status_history: list[dict] = []
        self._next_index = 0
        self._churn_fired: set[int] = set()
        self.challenge_trace_id: int | None = None
        self._round_started: set[int] = set()

        for _ in range(config.n_nodes):
            self._provision_node(start_epoch=0, announce=False)
        # every starting node knows the full initial directory
        directory = self._directory()
        for node in self.nodes.values():
            node.bootstrap({k: v for k, v in directory.items() if k != node.node_id}, 0.0)

    # ---------------------------------------------------------------- plumbing

    def _directory(self) -> dict[bytes, tuple[str, bytes]]:
        return {
            nid: (self.transport.address_of(nid), node.keys.public_key)
            for nid, node in self.nodes.items()
        }

    def _provision_node(self, start_epoch: int, announce: bool) -> Node:
        index = self._next_index
        self._next_index += 1
        if self._learning_enabled and index >= len(self.partitions):
            raise InvalidConfig(["no reserve partition left for added node"])
        nid = node_id_for(index)
        keys = NodeKeyPair.generate(nid)
        node = Node(
            keys=keys,
            ctx=self.ctx,
            mix_config=MixConfig(**vars(self.config.mix)),
            tuning=self.config.node,
            scheduler=self.scheduler,
            transport=self.transport,
            rng=_py_rng(self.seed, f"node/{index}"),
            observer=self.observer,
            record_mix=self.config.adversary.enabled and self.config.adversary.record_mix_events,
            shuffle=self.config.mix_shuffle,
            cover_enabled=self.config_cover(),
            config_version=self.config.version,
        )
        self.transport.register(nid, node.on_frame)
        self.nodes[nid] = node
        if self._learning_enabled:
            w_init = self.w0.copy() if index < self.config.n_nodes else (
                self.model.init(_np_rng(self.seed, index, _STREAM_INIT))
            )
            self.learners[nid] = Learner(
                node=node,
                model=self.model,
                w0=w_init,
                partition=self.partitions[index],
                test_set=self.test_set,
                cfg=self.config.learn,
                np_rng=_np_rng(self.seed, index, _STREAM_TRAIN),
                on_report=self._on_report,
                start_epoch=start_epoch,
            )
        if announce:
            node.bootstrap(
                {k: v for k, v in self._directory().items() if k != nid},
                self.scheduler.now,
            )
            node.start()
            node.announce_join()
            if nid in self.learners:
                self.learners[nid].start()
        return node

    def config_cover(self) -> bool:
        return self.config.cover_enabled

    # ------------------------------------------------------------------ events

    def _on_report(self, report: RoundReport) -> None:
        self.reports.append(report)
        self.on_event("round", {
            "node": report.node_id.hex(),
            "round": report.round,
            "agg_accuracy": report.agg_accuracy,
            "local_accuracy": report.local_accuracy,
            "covered_fraction": report.covered_fraction,
            "t": report.t,
        })
        if report.round not in self._round_started:
            self._round_started.add(report.round)
            self._fire_churn(report.round)

    def _fire_churn(self, completed_round: int) -> None:
        for i, action in enumerate(self.config.churn):
            if i in self._churn_fired or action.after_round != completed_round:
                continue
            self._churn_fired.add(i)
            if action.action == "kill":
                target = self._resolve_node(action.node)
                self.scheduler.call_later(0.0, lambda t=target: self.kill(t))
            else:
                self.scheduler.call_later(0.0, self.add_node)

    def _resolve_node(self, spec: str | None) -> bytes:
        if spec is None:
            raise UnknownNode("kill requires a node")
        try:
            return node_id_for(int(spec))
        except ValueError:
            pass
        nid = bytes.fromhex(spec)
        if nid not in self.nodes:
            raise UnknownNode(spec)
        return nid

    # ------------------------------------------------------------- public ops

    def kill(self, node_id: bytes) -> None:
        """Abrupt termination: no goodbye, peers find out via timeouts."""
        node = self.nodes.get(node_id)
        if node is None:
            raise UnknownNode(node_id.hex())
        node.halt()
        self.transport.kill(node_id)
        self.on_event("churn", {"action": "kill", "node": node_id.hex(), "t": self.scheduler.now})

    def add_node(self) -> bytes:
        """Provision keys, a reserve partition, and the current directory for
        a fresh node; it announces itself and joins the current epoch."""
        start_epoch = max(
            (ln.round for nid, ln in self.learners.items() if self.nodes[nid].alive),
            default=0,
        )
        node = self._provision_node(start_epoch=start_epoch, announce=True)
        self.on_event("churn", {"action": "add", "node": node.node_id.hex(), "t": self.scheduler.now})
        return node.node_id

    def apply_mix_config(self, mix: MixConfig, version: int) -> None:
        """Roll out a new mixing configuration without pausing anything."""
        problems = mix.validate()
        if problems:
            raise InvalidConfig(problems)
        self.config.mix = mix
        self.config.version = version
        for node in self.nodes.values():
            if node.alive:
                node.apply_config(MixConfig(**vars(mix)), version)

    # --------------------------------------------------------------- traffic

    def _start_traffic(self) -> None:
        cfg = self.config.traffic
        for i, (nid, node) in enumerate(self.nodes.items()):
            rng = _py_rng(self.seed, f"traffic/{i}")
            self._schedule_traffic_send(node, rng, cfg.fragment_rate_per_s)

    def _schedule_traffic_send(self, node: Node, rng: random.Random, rate: float) -> None:
        def fire():
            if not node.alive:
                return
            peers = node.view.active_ids()
            if peers:
                dest = peers[rng.randrange(len(peers))]
                frag = fl.Fragment(0, 0, 128, rng.randbytes(512))
                try:
                    node.send_fragment(frag, dest)
                except NoRouteAvailable:
                    pass
            self._schedule_traffic_send(node, rng, rate)

        self.scheduler.call_later(rng.expovariate(rate), fire)

    def send_challenge(self, sender: bytes, recipient: bytes, at: float) -> None:
        """Inject one fragment send for the unlinkability game; its trace id
        identifies the target message in the observation log."""
        rng = _py_rng(self.seed, "challenge")
        frag = fl.Fragment(0, 0, 128, rng.randbytes(512))

        def fire():
            node = self.nodes[sender]
            if node.alive:
                key = node.send_fragment(frag, recipient)
                self.challenge_trace_id = node.pending[key].trace_id

        self.scheduler.call_at(at, fire)

    # ------------------------------------------------------------------- run

    def _status_tick(self) -> None:
        snap = [n.status_snapshot() for n in self.nodes.values()]
        self.status_history.extend(snap)
        self.on_event("node_status", {"t": self.scheduler.now, "nodes": snap})
        self.scheduler.call_later(1.0, self._status_tick)

    def start(self) -> None:
        for node in self.nodes.values():
            node.start()
        for learner in self.learners.values():
            learner.start()
        if self.config.traffic.enabled:
            self._start_traffic()
        self.scheduler.call_later(1.0, self._status_tick)

    def _learning_done(self) -> bool:
        active = [
            ln for nid, ln in self.learners.items() if self.nodes[nid].alive
        ]
        return all(ln.done for ln in active)

    def run(self, horizon_s: float | None = None) -> ScenarioResult:
        """Run to completion on the sim scheduler (TCP scenarios are driven
        externally via start/stop)."""
        assert isinstance(self.scheduler, SimScheduler), "run() is for sim transport"
        self.start()
        if self.config.traffic.enabled:
            self.scheduler.run_until(self.config.traffic.duration_s)
        elif self.learners:
            lc = self.config.learn
            horizon = horizon_s or (lc.rounds * (lc.wait_timeout_s + 5.0) + 60.0)
            self.scheduler.run_while(lambda: not self._learning_done(), horizon)
            self.scheduler.run_until(self.scheduler.now + 0.5)  # drain acks
        else:
            self.scheduler.run_until(horizon_s or 1.0)
        return self.result()

    def result(self) -> ScenarioResult:
        return ScenarioResult(
            config=self.config,
            reports=self.reports,
            status_history=self.status_history,
            observer=self.observer,
            mix_records={nid: n.mixer for nid, n in self.nodes.items()},
            sim_duration=self.scheduler.now,
        )


# ---------------------------------------------------------------------------
# plain FedAvg baseline (no mixing, direct full-model exchange)

def run_plain_fedavg(config: ScenarioConfig) -> list[dict]:
    """Same task, same partitions, same training streams, but aggregation is
    a direct coordinatewise mean of all models each round (values passed
    through the float32 wire encoding for parity)."""
    config.check()
    seed = config.transport.seed
    lc = config.learn
    model = fl.MlpClassifier(lc.dim, lc.hidden, lc.n_classes)
    train, test = fl.make_mixture_task(
        _np_rng(seed, 0, _STREAM_DATA),
        n_classes=lc.n_classes, dim=lc.dim, n_train=lc.n_train, n_test=lc.n_test,
    )
    parts = fl.dirichlet_partition(
        train, config.n_nodes + lc.reserve_partitions, lc.alpha_dirichlet,
        _np_rng(seed, 0, _STREAM_PARTITION),
    )
    w0 = model.init(_np_rng(seed, 0, _STREAM_INIT))
    ws = [w0.copy() for _ in range(config.n_nodes)]
    rngs = [_np_rng(seed, i, _STREAM_TRAIN) for i in range(config.n_nodes)]
    rows = []
    for rnd in range(lc.rounds):
        locals_ = [
            fl.local_train(model, ws[i], parts[i], lc.tau, lc.eta, rngs[i], lc.batch_size)
            for i in range(config.n_nodes)
        ]
        quantized = [w.values.astype("<f4").astype(np.float64) for w in locals_]
        mean = np.mean(np.stack(quantized), axis=0)
        for i in range(config.n_nodes):
            local_eval = fl.evaluate(model, locals_[i], test)
            ws[i] = fl.ModelVector(mean.copy(), list(w0.shapes))
            agg_eval = fl.evaluate(model, ws[i], test)
            rows.append({
                "round": rnd,
                "node": node_id_for(i).hex(),
                "local_accuracy": local_eval["accuracy"],
                "agg_accuracy": agg_eval["accuracy"],
            })
    return rows


# ---------------------------------------------------------------------------
# artifacts

ACCURACY_COLUMNS = [
    "round", "node", "t", "local_accuracy", "local_loss", "agg_accuracy",
    "agg_loss", "covered_fraction", "mean_contributors", "fragments_received",
    "active_peers",
]

METRICS_COLUMNS = [
    "t", "node_id", "alive", "queue_occupancy", "outbox_occupancy",
    "pending_sends", "active_peers", "sent_packets", "recv_packets", "relayed",
    "cover_sent", "cover_received", "fragments_sent", "fragments_received",
    "acks_received", "retransmits", "abandoned", "invalid_dropped",
]


def write_artifacts(result: ScenarioResult, out_dir: Path, entropy: dict | None = None) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "accuracy.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=ACCURACY_COLUMNS)
        w.writeheader()
        for row in result.accuracy_rows():
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
    with open(out_dir / "metrics.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=METRICS_COLUMNS, extrasaction="ignore")
        w.writeheader()
        for row in result.status_history:
            w.writerow(row)
    if result.observer is not None:
        result.observer.write_csv(out_dir / "observation_log.csv")
    with open(out_dir / "entropy.json", "w") as fh:
        json.dump(entropy or {}, fh, indent=2, sort_keys=True)
