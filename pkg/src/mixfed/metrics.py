"""Passive-observer analyses.

Closed-form unlinkability quantities (per-relay match bound, path entropy),
their empirical counterparts measured from instrumented runs, the
sender-message distinguishing game, and communication metrics.  Analyses are
pure functions over immutable snapshots; the measurement harness may grant
the test adversary instrumentation (batch boundaries, terminal flags) that a
real passive observer lacks, which only makes the bounds it must respect
harder to satisfy.
"""

from __future__ import annotations

import bisect
import math
import random
from dataclasses import dataclass, field

from .config import ScenarioConfig
from .mixer import ItemKind, MixConfig, MixEmission, Mixer, QueueItem, occupancy_entropy_bits
from .observe import Observer
from .onion import L_PKT


class InsufficientEvents(Exception):
    pass


REAL_TRAFFIC_KINDS = {"fragment", "ack", "join"}


# ---------------------------------------------------------------------------
# closed forms

def relay_match_bound(outbox_size: int, k_max: int) -> float:
    """Best per-relay probability of linking one incoming packet to one
    outgoing packet: (K-1)/K * 1/O (the 1/K share of paths ends at the
    relay; uniform mixing spreads the rest over O candidates)."""
    if outbox_size < 1 or k_max < 1:
        raise ValueError("outbox_size and k_max must be >= 1")
    return (k_max - 1) / k_max / outbox_size


def path_entropy_bits(outbox_size: int, k_max: int) -> float:
    """log2 of the feasible end-to-end trajectory count, sum_{k=1..K} O^k.
    Exact integer sum; the single float rounding is ~1e-16 relative."""
    if outbox_size < 1 or k_max < 1:
        raise ValueError("outbox_size and k_max must be >= 1")
    total = sum(outbox_size**k for k in range(1, k_max + 1))
    return math.log2(total)


# ---------------------------------------------------------------------------
# relay entropy (measured)

def relay_entropy_bits(emissions: list[MixEmission], min_events: int = 100) -> float:
    """Mean posterior entropy over outbox occupants at emission time; equals
    log2(O) exactly when the outbox is always full."""
    if len(emissions) < min_events:
        raise InsufficientEvents(f"{len(emissions)} emissions < {min_events}")
    return occupancy_entropy_bits(emissions)


@dataclass
class EntropyReport:
    outbox_size: int
    k_max: int
    relay_entropy_by_node: dict[str, float]
    relay_entropy_mean: float
    path_entropy: float

    def to_dict(self) -> dict:
        return {
            "O": self.outbox_size,
            "K": self.k_max,
            "relay_entropy_bits": self.relay_entropy_by_node,
            "relay_entropy_mean_bits": self.relay_entropy_mean,
            "path_entropy_bits": self.path_entropy,
            "relay_match_bound": relay_match_bound(self.outbox_size, self.k_max),
        }


def scenario_entropy_report(result) -> EntropyReport:
    """EntropyReport from a finished scenario with mix recording enabled."""
    o = result.config.mix.outbox_size
    k = result.config.route.k_max
    by_node = {}
    for nid, mixer in result.mix_records.items():
        if len(mixer.emissions) >= 100:
            by_node[nid.hex()] = relay_entropy_bits(mixer.emissions)
    mean = sum(by_node.values()) / len(by_node) if by_node else 0.0
    return EntropyReport(o, k, by_node, mean, path_entropy_bits(o, k))


# ---------------------------------------------------------------------------
# empirical relay match

@dataclass
class RelayTrafficLog:
    """Ground truth from one instrumented relay: what arrived (item id, or
    None when the path terminated there), what was emitted, and when each
    refill happened."""
    arrivals: list[tuple[float, int | None]]
    emissions: list[MixEmission]
    batch_bounds: list[tuple[float, int]]
    outbox_size: int


def empirical_relay_match(log: RelayTrafficLog, min_events: int = 100) -> float:
    """Match rate of an order-correlation adversary at one relay.

    The adversary sees arrival and emission times, and is additionally
    granted the refill boundaries and each arrival's position among the
    non-terminal arrivals of its batch (pure instrumentation: a passive
    observer has strictly less).  It names, for every incoming packet, the
    outgoing emission at that position.  Without the shuffle this is exact;
    with it, the position carries no information.
    """
    if len(log.emissions) < min_events:
        raise InsufficientEvents(f"{len(log.emissions)} emissions < {min_events}")
    refill_times = [t for t, _ in log.batch_bounds]
    hits = 0
    scored = 0
    per_batch_position: dict[int, int] = {}
    for t_arr, item_id in log.arrivals:
        batch = bisect.bisect_right(refill_times, t_arr)  # joins the next refill
        if batch >= len(log.batch_bounds):
            continue  # batch never formed before the log ended
        start = log.batch_bounds[batch][1]
        end = (
            log.batch_bounds[batch + 1][1]
            if batch + 1 < len(log.batch_bounds)
            else len(log.emissions)
        )
        if end - start < log.outbox_size:
            continue  # incomplete batch at the tail
        pos = per_batch_position.get(batch, 0)
        if item_id is not None:
            per_batch_position[batch] = pos + 1
        scored += 1
        if item_id is None:
            continue  # terminated at the relay: any named emission is wrong
        guess = log.emissions[start + pos]
        if guess.item_id == item_id:
            hits += 1
    if scored == 0:
        raise InsufficientEvents("no scorable arrivals")
    return hits / scored


def run_relay_match_experiment(
    outbox_size: int,
    k_max: int,
    n_emissions: int = 10_000,
    seed: int = 42,
    shuffle: bool = True,
    mu_s: float = 0.005,
    sigma_s: float = 0.001,
    load: float = 0.5,
) -> RelayTrafficLog:
    """Drive a single instrumented mixer as the relay under test.

    Packets arrive Poisson at ``load``/mu; each terminates at the relay with
    probability 1/K (it is the path's last hop), otherwise it is enqueued
    for forwarding.
    """
    rng = random.Random(seed)
    mixer = Mixer(
        MixConfig(outbox_size, mu_s, sigma_s),
        rng,
        cover_factory=lambda n: [
            QueueItem(ItemKind.COVER, b"", b"") for _ in range(n)
        ],
        record=True,
        shuffle=shuffle,
    )
    arrivals: list[tuple[float, int | None]] = []
    rate = load / mu_s
    t = 0.0
    next_arrival = rng.expovariate(rate)
    deadline = mixer.start(0.0)
    next_item = 1_000_000  # distinct from mixer-assigned cover ids
    while len(mixer.emissions) < n_emissions:
        if next_arrival <= deadline:
            t = next_arrival
            if rng.random() < 1.0 / k_max:
                arrivals.append((t, None))  # delivered here, never forwarded
            else:
                item = QueueItem(ItemKind.RELAY, b"", b"", item_id=next_item)
                arrivals.append((t, next_item))
                next_item += 1
                mixer.enqueue(item, now=t)
            next_arrival = t + rng.expovariate(rate)
        else:
            t = deadline
            res = mixer.next_emission(t)
            deadline = res[1] if res else mixer.deadline
    return RelayTrafficLog(arrivals, mixer.emissions, mixer.batch_bounds, outbox_size)


# ---------------------------------------------------------------------------
# the distinguishing game

@dataclass
class GameResult:
    trials: int
    correct: int
    advantage: float
    ci95: float

    @property
    def p_correct(self) -> float:
        return self.correct / self.trials

    @property
    def advantage_upper(self) -> float:
        return self.advantage + self.ci95

    def contains_zero(self) -> bool:
        return self.advantage <= self.ci95

    def to_dict(self) -> dict:
        return {
            "trials": self.trials,
            "correct": self.correct,
            "p_correct": self.p_correct,
            "advantage": self.advantage,
            "ci95_half_width": self.ci95,
            "advantage_ci_upper": self.advantage_upper,
            "ci_contains_zero": self.contains_zero(),
        }


@dataclass
class ChallengeView:
    """What the adversary gets per trial: the wire-level observation, the two
    candidate senders, and the identified target delivery."""
    events: list[tuple[float, bytes, bytes, int, str]]
    n_a: bytes
    n_b: bytes
    recipient: bytes
    arrival_t: float


def timing_correlation_adversary(view: ChallengeView, rng: random.Random) -> int:
    """Scores each candidate by its emission activity inside the plausible
    transit window before the target arrived; guesses the busier one."""
    window = 0.3
    lo, hi = view.arrival_t - window, view.arrival_t
    score_a = score_b = 0
    for t, src, _dst, _len, _dig in view.events:
        if lo <= t <= hi:
            if src == view.n_a:
                score_a += 1
            elif src == view.n_b:
                score_b += 1
    if score_a > score_b:
        return 0
    if score_b > score_a:
        return 1
    return rng.randrange(2)


def coin_flip_adversary(view: ChallengeView, rng: random.Random) -> int:
    return rng.randrange(2)


def run_unlinkability_game(
    config: ScenarioConfig,
    n_a: bytes,
    n_b: bytes,
    trials: int,
    adversary=timing_correlation_adversary,
    recipient: bytes | None = None,
    seed: int = 42,
    challenge_t: float = 0.25,
    settle_t: float = 0.3,
) -> GameResult:
    """Per trial: sample b, run the scenario world where n_b-or-n_a sends the
    challenge fragment to the recipient, hand the observation to the
    adversary, score b' == b."""
    from .scenario import Scenario, node_id_for  # deferred: scenario imports metrics users

    if trials < 100:
        raise ValueError("trials must be >= 100")
    if n_a == n_b:
        raise ValueError("candidate senders must differ")
    recipient = recipient or next(
        node_id_for(i) for i in range(config.n_nodes)
        if node_id_for(i) not in (n_a, n_b)
    )
    game_rng = random.Random(seed)
    correct = 0
    for trial in range(trials):
        b = game_rng.randrange(2)
        sender = n_b if b else n_a
        cfg = ScenarioConfig.from_dict(config.to_dict())
        cfg.learn.rounds = 0
        cfg.traffic.enabled = True
        cfg.traffic.fragment_rate_per_s = 0.0001  # background load off; cover carries the trial
        cfg.adversary.enabled = True
        cfg.adversary.record_mix_events = False
        cfg.transport.seed = game_rng.randrange(2**31)
        sc = Scenario(cfg)
        sc.send_challenge(sender, recipient, at=challenge_t)
        sc.start()
        sc.scheduler.run_until(challenge_t + settle_t)
        arrival_t = _challenge_arrival(sc, recipient)
        if arrival_t is None:
            # undelivered challenge: score a coin flip, the adversary saw nothing
            guess = game_rng.randrange(2)
        else:
            view = ChallengeView(
                events=sc.observer.adversary_view(),
                n_a=n_a, n_b=n_b, recipient=recipient, arrival_t=arrival_t,
            )
            guess = adversary(view, random.Random(game_rng.randrange(2**31)))
        if guess == b:
            correct += 1
    p = correct / trials
    advantage = abs(p - 0.5)
    ci95 = 1.96 * math.sqrt(max(p * (1 - p), 1e-12) / trials)
    return GameResult(trials, correct, advantage, ci95)


def _challenge_arrival(sc, recipient: bytes) -> float | None:
    tid = sc.challenge_trace_id
    if tid is None or sc.observer is None:
        return None
    for e in sc.observer.events:
        if e.trace_id == tid and e.dst == recipient:
            return e.t
    return None


# ---------------------------------------------------------------------------
# communication metrics

@dataclass
class CommMetrics:
    rtt_stats: dict
    output_rate_bytes_s: dict  # node hex -> bytes/s, plus "mean"
    total_bytes_s: float  # real-traffic link volume (cover excluded)

    def to_dict(self) -> dict:
        return {
            "rtt_stats": self.rtt_stats,
            "output_rate_bytes_s": self.output_rate_bytes_s,
            "total_bytes_s": self.total_bytes_s,
        }


def comm_metrics(observer: Observer, min_span_s: float = 10.0) -> CommMetrics:
    """RTT (fragment send to ack unwrap), per-node wire output rate, and the
    aggregate real-traffic volume per second."""
    span = observer.duration()
    if span < min_span_s:
        raise InsufficientEvents(f"log spans {span:.1f}s < {min_span_s}s")
    per_node_bytes: dict[bytes, int] = {}
    real_bytes = 0
    for e in observer.events:
        per_node_bytes[e.src] = per_node_bytes.get(e.src, 0) + e.length
        if e.kind in REAL_TRAFFIC_KINDS:
            real_bytes += e.length
    rates = {nid.hex(): b / span for nid, b in sorted(per_node_bytes.items())}
    rates["mean"] = sum(rates.values()) / max(len(rates), 1)
    rtts = sorted(s.rtt for s in observer.rtt_samples)
    if rtts:
        rtt_stats = {
            "n": len(rtts),
            "mean_s": sum(rtts) / len(rtts),
            "p50_s": rtts[len(rtts) // 2],
            "max_s": rtts[-1],
        }
    else:
        rtt_stats = {"n": 0}
    return CommMetrics(rtt_stats, rates, real_bytes / span)


# ---------------------------------------------------------------------------
# classifier-at-chance check

def rank_auc(positive: list[float], negative: list[float]) -> float:
    """Mann-Whitney AUC of a single score feature."""
    if not positive or not negative:
        return 0.5
    values = [(v, 1) for v in positive] + [(v, 0) for v in negative]
    values.sort(key=lambda x: x[0])
    # average ranks for ties
    ranks: list[float] = [0.0] * len(values)
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and values[j + 1][0] == values[i][0]:
            j += 1
        avg = (i + j) / 2 + 1
        for k in range(i, j + 1):
            ranks[k] = avg
        i = j + 1
    rank_sum_pos = sum(r for r, (_, lbl) in zip(ranks, values) if lbl == 1)
    n_pos, n_neg = len(positive), len(negative)
    u = rank_sum_pos - n_pos * (n_pos + 1) / 2
    return u / (n_pos * n_neg)


def cover_vs_real_auc(result) -> float:
    """AUC of the best timing feature (inter-emission gap at the sender) for
    distinguishing cover from real emissions; chance = 0.5."""
    gaps_real: list[float] = []
    gaps_cover: list[float] = []
    for nid, mixer in result.mix_records.items():
        prev_t = None
        for e in mixer.emissions:
            if prev_t is not None:
                gap = e.t - prev_t
                if e.kind == ItemKind.COVER:
                    gaps_cover.append(gap)
                else:
                    gaps_real.append(gap)
            prev_t = e.t
    return rank_auc(gaps_real, gaps_cover)
