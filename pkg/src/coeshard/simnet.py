"""Deterministic discrete-event substrate: clock, delays, faults, bootstrap.

The scheduler is the only mutator.  A run is a pure function of
(configuration, seed): message delays come from a namespaced RNG consumed
in event order, node hashes come from SHA-256 over the seed, and every
collection that influences behaviour is iterated in insertion or sorted
order, never by hash-table order.
"""

from __future__ import annotations

import hashlib
import heapq
import random
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional

from coeshard import codec
from coeshard.messages import BOTH_MSGS, ORDERING_MSGS, PROCESSING_MSGS, TimerTick
from coeshard.sizing import ShardPlan, plan_shards
from coeshard.types import NodeId, ShardConfig


@dataclass(frozen=True)
class NetConfig:
    """Partial-synchrony delay model.

    Before ``gst`` messages take up to ``pre_gst_max_delay`` ticks and may
    drop; from ``gst`` on, honest-to-honest delivery happens within
    ``delta`` ticks and nothing drops.
    """

    gst: int = 0
    delta: int = 100
    pre_gst_max_delay: int = 1000
    drop_rate_pre_gst: float = 0.0

    def __post_init__(self):
        if self.delta < 1 or self.pre_gst_max_delay < 1:
            raise ValueError("delays must be >= 1 tick")
        if not (0.0 <= self.drop_rate_pre_gst < 1.0):
            raise ValueError("drop rate must be in [0, 1)")


WITHHOLD = "withhold_certificates"
INVALID_ATTEST = "invalid_attestations"
EQUIVOCATE = "equivocate_proposals"
FALSE_VOTES = "false_votes"
SILENT = "silent"

BEHAVIORS = (WITHHOLD, INVALID_ATTEST, EQUIVOCATE, FALSE_VOTES, SILENT)


@dataclass
class FaultPlan:
    """Crash schedule and Byzantine behaviour assignment."""

    crashed: dict = field(default_factory=dict)  # node id -> crash tick
    byzantine: dict = field(default_factory=dict)  # node id -> behaviour
    allow_threshold_breach: bool = False

    def __post_init__(self):
        for node, behaviour in self.byzantine.items():
            if behaviour not in BEHAVIORS:
                raise ValueError(f"unknown Byzantine behaviour {behaviour!r} for node {node}")

    def faulty_nodes(self) -> frozenset[NodeId]:
        return frozenset(self.crashed) | frozenset(self.byzantine)

    def validate_ceilings(self, shards: Iterable[ShardConfig]) -> None:
        """Reject plans that corrupt more than f_S of any shard, unless the
        scenario explicitly tests threshold breaches."""
        if self.allow_threshold_breach:
            return
        faulty = self.faulty_nodes()
        for cfg in shards:
            limit = cfg.f_s * cfg.size
            hit = len(faulty.intersection(cfg.members))
            if hit > limit:
                raise ValueError(
                    f"fault plan corrupts {hit}/{cfg.size} of shard {cfg.shard_id} "
                    f"(ceiling f_s*m = {float(limit):.2f})"
                )


def _sub_rng(seed: int, label: str) -> random.Random:
    raw = hashlib.sha256(f"{seed}/{label}".encode()).digest()
    return random.Random(int.from_bytes(raw[:8], "little"))


def node_hash(seed: int, label: str, node: NodeId) -> int:
    """Adversary-oblivious ranking hash: identity concatenated with the
    public randomness."""
    raw = hashlib.sha256(
        f"{seed}/{label}".encode() + node.to_bytes(8, "little")
    ).digest()
    return int.from_bytes(raw, "big")


@dataclass
class BootstrapResult:
    plan: ShardPlan
    ordering: ShardConfig
    processing: tuple[ShardConfig, ...]
    reserve: tuple[NodeId, ...]

    def all_shards(self) -> tuple[ShardConfig, ...]:
        return (self.ordering, *self.processing)

    def shard_of(self, node: NodeId) -> Optional[int]:
        for cfg in self.processing:
            if node in cfg.members:
                return cfg.shard_id
        return None


def bootstrap(
    n: int,
    s,
    lambda_bits: int,
    f_l_target,
    *,
    seed: int = 0,
    epoch_length: int = 20,
    epsilon="0.01",
) -> BootstrapResult:
    """Form one ordering shard and k processing shards by hash ranking.

    The ordering shard takes the top ``m#`` nodes of one ranking; a second,
    independent ranking maps every node into k equal regions, and each
    region's best-ranked ``m*`` nodes form a processing shard.  The two
    formations are independent, so a node may serve in both an ordering and
    a processing role.  Nodes left out of every processing shard form the
    reserve pool used by recovery.
    """
    plan = plan_shards(n, s, lambda_bits, f_l_target, epsilon=epsilon)
    nodes = list(range(n))

    by_order_rank = sorted(nodes, key=lambda v: node_hash(seed, "ordering", v), reverse=True)
    ordering_members = tuple(sorted(by_order_rank[: plan.ordering_size]))
    ordering_cfg = ShardConfig(
        shard_id=0,
        members=ordering_members,
        f_s="1/3",
        f_l="1/3",
        role="ordering",
        epoch_length=epoch_length,
    )

    by_proc_rank = sorted(nodes, key=lambda v: node_hash(seed, "processing", v), reverse=True)
    k = plan.shard_count
    shards = []
    reserve: list[NodeId] = []
    for j in range(k):
        lo = (j * n) // k
        hi = ((j + 1) * n) // k
        region = by_proc_rank[lo:hi]
        members = tuple(sorted(region[: plan.processing_size]))
        reserve.extend(region[plan.processing_size :])
        shards.append(
            ShardConfig(
                shard_id=j + 1,
                members=members,
                f_s=plan.f_s,
                f_l=plan.f_l,
                role="processing",
                epoch_length=epoch_length,
            )
        )
    reserve.sort(key=lambda v: node_hash(seed, "processing", v), reverse=True)
    return BootstrapResult(plan, ordering_cfg, tuple(shards), tuple(reserve))


def draw_byzantine(n: int, count: int, seed: int) -> tuple[NodeId, ...]:
    """Pick Byzantine identities by an independent hash order."""
    ranked = sorted(range(n), key=lambda v: node_hash(seed, "byzantine", v), reverse=True)
    return tuple(sorted(ranked[:count]))


class NodeHost:
    """One physical node, possibly serving a processing role and an
    ordering role at once.  Routes messages by class."""

    __slots__ = ("node_id", "processing", "ordering", "behaviour")

    def __init__(self, node_id: NodeId):
        self.node_id = node_id
        self.processing = None
        self.ordering = None
        self.behaviour: Optional[str] = None

    def handle(self, sim: "Simulation", msg, sender: NodeId) -> None:
        if isinstance(msg, TimerTick):
            if msg.kind.startswith("ord_") and self.ordering is not None:
                self.ordering.on_timer(msg)
            elif self.processing is not None and not msg.kind.startswith("ord_"):
                self.processing.on_timer(msg)
            return
        if isinstance(msg, BOTH_MSGS):
            if self.ordering is not None:
                self.ordering.on_message(msg, sender)
            if self.processing is not None:
                self.processing.on_message(msg, sender)
            return
        if isinstance(msg, ORDERING_MSGS):
            if self.ordering is not None:
                self.ordering.on_message(msg, sender)
            return
        if isinstance(msg, PROCESSING_MSGS):
            if self.processing is not None:
                self.processing.on_message(msg, sender)
            return
        raise TypeError(f"unroutable message {type(msg).__name__}")


class PropertyViolation(AssertionError):
    """A live safety monitor tripped mid-run."""


class Simulation:
    """Event loop with seeded delays, crash/Byzantine faults and built-in
    safety monitors.  Single-threaded; parallel runs mean parallel
    instances."""

    def __init__(
        self,
        net: NetConfig,
        faults: Optional[FaultPlan] = None,
        seed: int = 0,
        collect_trace: bool = True,
        strict_monitors: bool = True,
    ):
        self.net = net
        self.faults = faults or FaultPlan()
        self.seed = seed
        self.now = 0
        self.hosts: dict[NodeId, NodeHost] = {}
        self._queue: list = []
        self._seq = 0
        self._delay_rng = _sub_rng(seed, "net")
        self.trace: Optional[list] = [] if collect_trace else None
        self.strict_monitors = strict_monitors
        self.violations: list[dict] = []
        self.registry = codec.DigestRegistry()
        self._ledger_roots: dict = {}
        self._finalized_obs: dict = {}
        self.delivered = 0
        self.dropped = 0

    # -- topology -----------------------------------------------------

    def add_host(self, host: NodeHost) -> None:
        self.hosts[host.node_id] = host

    def host(self, node: NodeId) -> NodeHost:
        return self.hosts[node]

    def crash_time(self, node: NodeId) -> Optional[int]:
        return self.faults.crashed.get(node)

    def is_crashed(self, node: NodeId, at: Optional[int] = None) -> bool:
        t = self.faults.crashed.get(node)
        return t is not None and (at if at is not None else self.now) >= t

    def behaviour_of(self, node: NodeId) -> Optional[str]:
        return self.faults.byzantine.get(node)

    # -- sending ------------------------------------------------------

    def send(self, sender: NodeId, dest: NodeId, msg) -> None:
        """Queue a message with a delay sampled from the regime at send
        time.  Crashed senders cannot send; crashed recipients drop."""
        if self.is_crashed(sender):
            return
        if self.now < self.net.gst:
            if (
                self.net.drop_rate_pre_gst > 0.0
                and self._delay_rng.random() < self.net.drop_rate_pre_gst
            ):
                self.dropped += 1
                self._trace("drop", sender, dest, msg)
                return
            delay = self._delay_rng.randint(1, self.net.pre_gst_max_delay)
        else:
            delay = self._delay_rng.randint(1, self.net.delta)
        self._push(self.now + delay, dest, msg, sender)

    def broadcast(self, sender: NodeId, dests: Iterable[NodeId], msg) -> None:
        for dest in dests:
            self.send(sender, dest, msg)

    def schedule(self, node: NodeId, at: int, tick: TimerTick) -> None:
        """Self-addressed timer; no delay sampling."""
        self._push(max(at, self.now), node, tick, node)

    def inject(self, at: int, dest: NodeId, payload) -> None:
        """Client-side submission at an exact tick (clients are adjacent
        to their node; network delays start inside the system)."""
        self._push(at, dest, payload, -1)

    def _push(self, at: int, dest: NodeId, msg, sender: NodeId) -> None:
        self._seq += 1
        heapq.heappush(self._queue, (at, self._seq, dest, sender, msg))

    # -- event loop ---------------------------------------------------

    def step(self) -> bool:
        """Deliver the next event; False when the queue is empty."""
        while self._queue:
            at, _seq, dest, sender, msg = heapq.heappop(self._queue)
            self.now = max(self.now, at)
            if self.is_crashed(dest, at):
                self.dropped += 1
                continue
            host = self.hosts.get(dest)
            if host is None:
                continue
            self._trace("deliver", sender, dest, msg)
            self.delivered += 1
            host.handle(self, msg, sender)
            return True
        return False

    def run(
        self,
        max_ticks: int,
        stop: Optional[Callable[[], bool]] = None,
        check_every: int = 256,
    ) -> None:
        """Drain events until the stop predicate holds, the clock passes
        ``max_ticks`` or the queue empties."""
        delivered = 0
        while self._queue:
            if self._queue[0][0] > max_ticks:
                break
            if not self.step():
                break
            delivered += 1
            if stop is not None and delivered % check_every == 0 and stop():
                break

    # -- tracing and monitors ------------------------------------------

    def _trace(self, kind: str, sender: NodeId, dest: NodeId, msg) -> None:
        if self.trace is None:
            return
        self.trace.append(
            {
                "t": self.now,
                "kind": kind,
                "from": sender,
                "to": dest,
                "type": type(msg).__name__,
                "bytes": msg.wire_size(),
            }
        )

    def record_violation(self, prop: str, detail: dict) -> None:
        self.violations.append({"property": prop, **detail})
        if self.strict_monitors:
            raise PropertyViolation(f"{prop}: {detail}")

    def monitor_ledger_append(self, sid: int, node: NodeId, entry) -> None:
        """Prefix-safety monitor: first writer of (shard, round) pins the
        entry digest; any later divergence is a violation."""
        key = (sid, entry.round)
        d = codec.digest(entry)
        prior = self._ledger_roots.get(key)
        if prior is None:
            self._ledger_roots[key] = d
        elif prior != d:
            self.record_violation(
                "prefix_safety",
                {"shard": sid, "round": entry.round, "node": node},
            )

    def monitor_finalized_ob(self, ob) -> None:
        """One finalized ordering block per round, system-wide."""
        d = ob.content_digest()
        prior = self._finalized_obs.get(ob.round)
        if prior is None:
            self._finalized_obs[ob.round] = d
        elif prior != d:
            self.record_violation("one_ob_per_round", {"round": ob.round})

    @property
    def finalized_round_watermark(self) -> int:
        return max(self._finalized_obs, default=0)
