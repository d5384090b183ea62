"""Ordering-shard node: certificate intake, vote aggregation, round-based
quorum consensus, liveness monitoring and epoch reconfiguration.

Consensus is a rotating-proposer, single-shot quorum finalization with a
view timeout.  Honest members attest at most once per round, so two
conflicting proposals can never both collect a quorum (any two quorums of
``floor(2f*m)+1`` intersect in an honest member).  Byzantine members can
only delay rounds by refusing attestations; an equivocating proposer is
modelled explicitly and tolerated.

Cross-shard commitment is asynchronous: consensus never waits on votes.
An aggregator for round r becomes eligible for inclusion from round r+2
on, so in a synchronous fault-free run every cross-shard transaction
settles exactly two rounds after the round that ordered it.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from typing import Optional

from coeshard import messages as msg
from coeshard.simnet import (
    EQUIVOCATE,
    INVALID_ATTEST,
    SILENT,
    WITHHOLD,
    Simulation,
    node_hash,
)
from coeshard.sizing import InfeasibleSizeError, SizingParams, min_shard_size
from coeshard.types import (
    Aggregator,
    Attestation,
    OrderingBlock,
    QuorumAttestation,
    RecoveryPlan,
    ShardConfig,
    TrimPlan,
    VoteResult,
    fold_vote_bits,
    verify_quorum,
)

F_L_RECOVERY_STEP = Fraction(5, 100)
RECOVERY_EPSILON = Fraction(1, 100)


@dataclass
class SizingContext:
    """Population parameters the recovery planner needs."""

    n: int
    s: Fraction
    lambda_bits: int
    base_f_s: Fraction
    base_f_l: Fraction
    optimal_size: int


class OrderingNode:
    def __init__(
        self,
        sim: Simulation,
        node_id: int,
        config: ShardConfig,
        directory: dict,
        sizing: SizingContext,
        reserve: tuple,
        *,
        round_interval: int = 200,
        view_timeout: int = 1200,
        max_cbs_per_block: int = 256,
        metrics=None,
    ):
        self.sim = sim
        self.node_id = node_id
        self.config = config
        self.directory = directory
        self.sizing = sizing
        self.reserve = list(reserve)
        self.round_interval = round_interval
        self.view_timeout = view_timeout
        self.max_cbs_per_block = max_cbs_per_block
        self.metrics = metrics

        self.cbpool: dict[bytes, object] = {}  # eb digest -> CertificateBlock
        self.seen_cbs: set[bytes] = set()
        self.open_votes: dict[int, dict] = {}  # round -> {"vote":, "voted": set}
        self.argpool: dict[int, Aggregator] = {}
        self.vote_rounds: dict[int, int] = {}  # sid -> last incorporated round
        self.vote_buffer: dict[tuple, VoteResult] = {}  # (sid, round) -> vote
        self.involved_rounds: dict[int, list] = {}  # sid -> pending rounds queue
        self.vote_sync_outstanding: set[tuple] = set()
        self.finalized_obs: dict[int, OrderingBlock] = {}
        self.arg_emit_queue: list[int] = []  # rounds with batches, in order
        self.participation: dict[int, set] = {}
        self.recovered_shards: dict[int, int] = {}  # sid -> epoch recovered
        self._flagged_for_recovery: Optional[tuple] = None
        self.unrecoverable: list[int] = []
        self.rejected = 0

        self.next_round = 1
        self.view = 0
        self.attested: dict[int, bytes] = {}  # round -> proposal digest (sticky)
        self.my_proposals: dict[tuple, OrderingBlock] = {}
        self.collected: dict[tuple, dict] = {}  # (round, digest) -> signer -> att
        self.round_started_at = 0

    # ------------------------------------------------------------------

    def _behaviour(self) -> Optional[str]:
        return self.sim.behaviour_of(self.node_id)

    def _members(self) -> tuple:
        return self.config.members

    def _proposer_for(self, round_no: int, view: int) -> int:
        members = sorted(self._members())
        return members[(round_no + view) % len(members)]

    def start(self) -> None:
        self.round_started_at = self.sim.now
        if self._proposer_for(1, 0) == self.node_id:
            self.sim.schedule(
                self.node_id,
                self.sim.now + self.round_interval,
                msg.TimerTick("ord_propose", (1, 0)),
            )
        self.sim.schedule(
            self.node_id,
            self.sim.now + self.round_interval + self.view_timeout,
            msg.TimerTick("ord_view", (1, 0)),
        )

    def on_timer(self, tick: msg.TimerTick) -> None:
        if tick.kind == "ord_propose":
            round_no, view = tick.data
            if round_no == self.next_round and view == self.view:
                self._propose(round_no, view)
        elif tick.kind == "ord_view":
            round_no, view = tick.data
            if round_no == self.next_round and view == self.view:
                self.view += 1
                if self._proposer_for(round_no, self.view) == self.node_id:
                    self._propose(round_no, self.view)
                self.sim.schedule(
                    self.node_id,
                    self.sim.now + self.view_timeout,
                    msg.TimerTick("ord_view", (round_no, self.view)),
                )

    def on_message(self, m, sender: int) -> None:
        handler = {
            msg.MsgCertBlock: self._on_cert_block,
            msg.MsgVote: self._on_vote,
            msg.MsgPropose: self._on_propose,
            msg.MsgAttestBlock: self._on_attest,
            msg.MsgFinalOb: self._on_final_ob,
            msg.MsgObSyncReq: self._on_ob_sync_req,
            msg.MsgObSyncResp: self._on_ob_sync_resp,
        }.get(type(m))
        if handler is not None:
            handler(m, sender)

    # ------------------------------------------------------------------
    # intake

    def _on_cert_block(self, m: msg.MsgCertBlock, sender: int) -> None:
        cb = m.cb
        cfg = self.directory.get(cb.sid)
        if cfg is None or cfg.role != "processing":
            self.rejected += 1
            return
        if cb.eb_digest in self.seen_cbs:
            return
        if not verify_quorum(cb.quorum, cfg, "processing", subject=cb.content_digest()):
            self.rejected += 1
            return
        self.seen_cbs.add(cb.eb_digest)
        self.cbpool[cb.eb_digest] = cb
        self.participation.setdefault(cb.sid, set()).add(cb.creator)

    def _on_vote(self, m: msg.MsgVote, sender: int) -> None:
        vote = m.vote
        cfg = self.directory.get(vote.sid)
        if cfg is None:
            self.rejected += 1
            return
        if not verify_quorum(vote.quorum, cfg, "processing", subject=vote.content_digest()):
            self.rejected += 1
            return
        key = (vote.sid, vote.round)
        pending = self.involved_rounds.get(vote.sid, [])
        if not pending or vote.round < pending[0]:
            return  # already incorporated or unknown
        if vote.round > pending[0]:
            if key not in self.vote_buffer:
                self.vote_buffer[key] = vote
                self._request_missing_votes(vote.sid, pending[0])
            return
        self._incorporate_vote(vote)
        # contiguously drain anything buffered behind it
        while True:
            pending = self.involved_rounds.get(vote.sid, [])
            if not pending:
                break
            nxt = self.vote_buffer.pop((vote.sid, pending[0]), None)
            if nxt is None:
                break
            self._incorporate_vote(nxt)

    def _incorporate_vote(self, vote: VoteResult) -> None:
        pending = self.involved_rounds.get(vote.sid)
        if not pending or pending[0] != vote.round:
            return
        pending.pop(0)
        self.vote_rounds[vote.sid] = vote.round
        slot = self.open_votes.setdefault(
            vote.round, {"vote": {}, "voted": set()}
        )
        slot["vote"] = fold_vote_bits(slot["vote"], vote.vote)
        slot["voted"].add(vote.sid)
        ob = self.finalized_obs.get(vote.round)
        if ob is None:
            return
        needed = ob.involved_shards()
        if needed.issubset(slot["voted"]):
            self.argpool[vote.round] = Aggregator(vote.round, slot["vote"], frozenset())
            del self.open_votes[vote.round]

    def _request_missing_votes(self, sid: int, round_no: int) -> None:
        key = (sid, round_no)
        if key in self.vote_sync_outstanding:
            return
        self.vote_sync_outstanding.add(key)
        cfg = self.directory.get(sid)
        if cfg is None:
            return
        quorum = cfg.certify_quorum()
        targets = sorted(cfg.members)[:quorum]
        self.sim.broadcast(self.node_id, targets, msg.MsgVoteSyncReq(sid, round_no))

    # ------------------------------------------------------------------
    # consensus

    def _eligible_args(self, round_no: int) -> tuple:
        """Ready aggregators, gap-free ascending, each at least two rounds
        old so settlement always lands two rounds after ordering."""
        out = []
        for r in list(self.arg_emit_queue):
            if r + 2 > round_no:
                break
            arg = self.argpool.get(r)
            if arg is None:
                break  # hold later rounds back: settlement order is global
            out.append(arg)
        return tuple(out)

    def _build_block(self, round_no: int, drop_last: bool = False) -> OrderingBlock:
        args = self._eligible_args(round_no)
        cbs = sorted(
            self.cbpool.values(), key=lambda cb: (cb.sid, cb.creator, cb.eb_digest)
        )[: self.max_cbs_per_block]
        if drop_last and cbs:
            cbs = cbs[:-1]
        eb_digests = tuple((cb.sid, cb.eb_digest, cb.creator) for cb in cbs)
        ctx_meta = tuple(rec for cb in cbs for rec in cb.ctx_batches)
        reconfig = self._plan_reconfig(round_no)
        if drop_last and not cbs and not args:
            # nothing to equivocate over; emit a marker difference
            reconfig = reconfig + tuple()
        return OrderingBlock(
            args=args,
            eb_digests=eb_digests,
            ctx_meta=ctx_meta,
            round=round_no,
            reconfig=reconfig,
        )

    def _propose(self, round_no: int, view: int) -> None:
        behaviour = self._behaviour()
        if behaviour in (WITHHOLD, SILENT):
            return
        ob = self._build_block(round_no)
        self.my_proposals[(round_no, view)] = ob
        subject = ob.content_digest()
        self.collected.setdefault((round_no, subject), {})
        if behaviour == EQUIVOCATE:
            # split attempt: one victim sees a conflicting twin; the sticky
            # once-per-round rule at honest attesters keeps the round safe
            self._record_attestation(
                round_no, subject, Attestation(self.node_id, subject, True)
            )
            twin = self._build_block(round_no, drop_last=True)
            if twin.content_digest() != subject:
                victims = [m for m in sorted(self._members()) if m != self.node_id][:1]
                others = [m for m in self._members() if m not in victims and m != self.node_id]
                self.sim.broadcast(self.node_id, victims, msg.MsgPropose(twin, self.node_id, view))
                self.sim.broadcast(self.node_id, others, msg.MsgPropose(ob, self.node_id, view))
                return
        else:
            # honest proposers attest their own proposal, still at most
            # once per round even across views
            sticky = self.attested.get(round_no)
            if sticky is None:
                self.attested[round_no] = subject
                sticky = subject
            if sticky == subject and behaviour != INVALID_ATTEST:
                self._record_attestation(
                    round_no, subject, Attestation(self.node_id, subject, True)
                )
        peers = [m for m in self._members() if m != self.node_id]
        self.sim.broadcast(self.node_id, peers, msg.MsgPropose(ob, self.node_id, view))

    def _on_propose(self, m: msg.MsgPropose, sender: int) -> None:
        ob, view = m.ob, m.view
        if ob.round != self.next_round:
            return
        if self._proposer_for(ob.round, view) != m.proposer or m.proposer != sender:
            return
        if self._behaviour() in (WITHHOLD, SILENT):
            return
        subject = ob.content_digest()
        sticky = self.attested.get(ob.round)
        if sticky is not None and sticky != subject:
            return  # attest at most once per round
        if sticky is None:
            if not self._validate_proposal(ob):
                return
            self.attested[ob.round] = subject
        valid = self._behaviour() != INVALID_ATTEST
        att = Attestation(self.node_id, subject, valid)
        self.sim.send(self.node_id, sender, msg.MsgAttestBlock(att, ob.round, view))

    def _validate_proposal(self, ob: OrderingBlock) -> bool:
        for arg in ob.args:
            if arg.round + 2 > ob.round:
                return False
        for sid, digest, creator in ob.eb_digests:
            cb = self.cbpool.get(digest)
            if cb is not None and (cb.sid != sid or cb.creator != creator):
                return False
        return True

    def _record_attestation(self, round_no: int, subject: bytes, att: Attestation) -> bool:
        slot = self.collected.setdefault((round_no, subject), {})
        if att.valid and att.signer in self._members():
            slot[att.signer] = att
        return len(slot) >= self.config.consensus_quorum()

    def _on_attest(self, m: msg.MsgAttestBlock, sender: int) -> None:
        if m.att.signer != sender:
            return
        round_no = m.round
        proposal = self.my_proposals.get((round_no, m.view))
        if proposal is None or round_no in self.finalized_obs:
            return
        subject = proposal.content_digest()
        if m.att.subject != subject:
            return
        if self._record_attestation(round_no, subject, m.att):
            atts = self.collected[(round_no, subject)]
            final = OrderingBlock(
                args=proposal.args,
                eb_digests=proposal.eb_digests,
                ctx_meta=proposal.ctx_meta,
                round=proposal.round,
                quorum=QuorumAttestation(tuple(atts[s] for s in sorted(atts))),
                reconfig=proposal.reconfig,
            )
            self._finalize(final, broadcast=True)

    def _on_final_ob(self, m: msg.MsgFinalOb, sender: int) -> None:
        ob = m.ob
        if ob.round in self.finalized_obs:
            return
        if not verify_quorum(ob.quorum, self.config, "ordering", subject=ob.content_digest()):
            return
        self._finalize(ob, broadcast=False)

    def _finalize(self, ob: OrderingBlock, broadcast: bool) -> None:
        if ob.round in self.finalized_obs:
            return
        self.sim.monitor_finalized_ob(ob)
        self.finalized_obs[ob.round] = ob
        if broadcast:
            targets = [h for h in sorted(self.sim.hosts) if h != self.node_id]
            self.sim.broadcast(self.node_id, targets, msg.MsgFinalOb(ob))
        self._prune_after(ob)
        self._apply_reconfig(ob)
        involved = ob.involved_shards()
        if involved:
            self.arg_emit_queue.append(ob.round)
            for sid in sorted(involved):
                self.involved_rounds.setdefault(sid, []).append(ob.round)
                # a buffered early vote may now be incorporable
                buffered = self.vote_buffer.pop((sid, ob.round), None)
                if buffered is not None:
                    self._incorporate_vote(buffered)
        if self.metrics is not None:
            self.metrics.on_ob_finalized(ob, self.sim.now, len(self.cbpool))
        if ob.round % self.config.epoch_length == 0:
            self._epoch_boundary(ob.round)
        self.next_round = max(self.next_round, ob.round + 1)
        self.view = 0
        self.round_started_at = self.sim.now
        if self._proposer_for(self.next_round, 0) == self.node_id:
            self.sim.schedule(
                self.node_id,
                self.sim.now + self.round_interval,
                msg.TimerTick("ord_propose", (self.next_round, 0)),
            )
        self.sim.schedule(
            self.node_id,
            self.sim.now + self.round_interval + self.view_timeout,
            msg.TimerTick("ord_view", (self.next_round, 0)),
        )

    def _prune_after(self, ob: OrderingBlock) -> None:
        """Aggregators and certificate metadata ride exactly one finalized
        block; drop them once it lands, keeping pools window-bounded."""
        for _sid, digest, _creator in ob.eb_digests:
            self.cbpool.pop(digest, None)
        for arg in ob.args:
            self.argpool.pop(arg.round, None)
            if arg.round in self.arg_emit_queue:
                self.arg_emit_queue.remove(arg.round)

    # ------------------------------------------------------------------
    # epochs, liveness monitoring, recovery

    def _epoch_boundary(self, round_no: int) -> None:
        epoch = round_no // self.config.epoch_length
        flagged = []
        for cfg in self._processing_configs():
            seen = len(self.participation.get(cfg.shard_id, set()))
            if seen < cfg.certify_quorum():
                flagged.append(cfg.shard_id)
        self._flagged_for_recovery = (epoch, tuple(flagged))
        self.participation = {}

    def _processing_configs(self):
        return [c for c in self.directory.values() if c.role == "processing"]

    def _plan_reconfig(self, round_no: int) -> tuple:
        """Reconfiguration rides the first block of a new epoch: recovery
        expansions for stalled shards, trims for shards recovered in an
        earlier epoch.  Only the finalized block mutates shared state; a
        failed proposal leaves no residue."""
        if round_no % self.config.epoch_length != 1 or round_no == 1:
            return ()
        epoch_ended = (round_no - 1) // self.config.epoch_length
        flagged = ()
        if self._flagged_for_recovery is not None:
            when, shards = self._flagged_for_recovery
            if when == epoch_ended:
                flagged = shards
        plans: list = []
        drafted: set = set()
        for sid in flagged:
            plan = self._recovery_plan(sid, round_no, drafted)
            if plan is not None:
                plans.append(plan)
                drafted.update(plan.added_nodes)
        for sid, when in sorted(self.recovered_shards.items()):
            if when <= epoch_ended and sid not in flagged:
                plans.append(self._trim_plan(sid, round_no, epoch_ended))
        return tuple(plans)

    def _recovery_plan(
        self, sid: int, round_no: int, drafted: set
    ) -> Optional[RecoveryPlan]:
        """Raise the liveness threshold one step, lower safety to match,
        and bring the shard up to the size that keeps the failure bound at
        the new safety threshold."""
        cfg = self.directory.get(sid)
        if cfg is None:
            return None
        f_l = cfg.f_l + F_L_RECOVERY_STEP
        f_s = Fraction(1) - f_l - RECOVERY_EPSILON
        if f_s <= 0:
            self.unrecoverable.append(sid)
            return None
        try:
            target = min_shard_size(
                SizingParams(self.sizing.n, self.sizing.s, f_s, self.sizing.lambda_bits)
            ).m_star
        except InfeasibleSizeError:
            self.unrecoverable.append(sid)
            return None
        needed = max(target, cfg.size + 1) - cfg.size
        assigned = {v for c in self._processing_configs() for v in c.members}
        available = [
            v for v in self.reserve
            if v not in assigned and v not in drafted
        ]
        if len(available) < needed:
            self.unrecoverable.append(sid)
            return None
        return RecoveryPlan(sid, tuple(available[:needed]), f_s, f_l, round_no)

    def _trim_plan(self, sid: int, round_no: int, epoch: int) -> TrimPlan:
        """Re-randomise the recovered shard back to the optimal size with a
        public epoch-salted ranking; released members rejoin the reserve."""
        cfg = self.directory[sid]
        ranked = sorted(
            cfg.members,
            key=lambda v: node_hash(0, f"trim/{epoch}/{sid}", v),
            reverse=True,
        )
        keep = tuple(sorted(ranked[: self.sizing.optimal_size]))
        return TrimPlan(sid, keep, self.sizing.base_f_s, self.sizing.base_f_l, round_no)

    def _apply_reconfig(self, ob: OrderingBlock) -> None:
        for plan in ob.reconfig:
            cfg = self.directory.get(plan.shard_id)
            if cfg is None:
                continue
            if isinstance(plan, RecoveryPlan):
                members = tuple(sorted(set(cfg.members) | set(plan.added_nodes)))
                new = ShardConfig(
                    cfg.shard_id, members, plan.new_f_s, plan.new_f_l,
                    cfg.role, cfg.epoch_length,
                )
                self.reserve = [v for v in self.reserve if v not in plan.added_nodes]
                epoch = (plan.effective_round - 1) // self.config.epoch_length + 1
                self.recovered_shards[plan.shard_id] = epoch
            else:
                new = ShardConfig(
                    cfg.shard_id, plan.new_members, plan.new_f_s, plan.new_f_l,
                    cfg.role, cfg.epoch_length,
                )
                released = [v for v in cfg.members if v not in plan.new_members]
                self.reserve.extend(v for v in released if v not in self.reserve)
                self.recovered_shards.pop(plan.shard_id, None)
            self.directory[plan.shard_id] = new

    # ------------------------------------------------------------------
    # sync serving

    def _on_ob_sync_req(self, m: msg.MsgObSyncReq, sender: int) -> None:
        if self._behaviour() in (WITHHOLD, SILENT):
            return
        obs = tuple(
            self.finalized_obs[r]
            for r in range(m.from_round, min(m.to_round, max(self.finalized_obs, default=0)) + 1)
            if r in self.finalized_obs
        )
        if obs:
            self.sim.send(self.node_id, sender, msg.MsgObSyncResp(obs))

    def _on_ob_sync_resp(self, m: msg.MsgObSyncResp, sender: int) -> None:
        for ob in m.obs:
            if ob.round not in self.finalized_obs and verify_quorum(
                ob.quorum, self.config, "ordering", subject=ob.content_digest()
            ):
                self._finalize(ob, broadcast=False)

    def debug_snapshot(self) -> dict:
        return {
            "node": self.node_id,
            "next_round": self.next_round,
            "finalized": max(self.finalized_obs, default=0),
            "cbpool": len(self.cbpool),
            "argpool": sorted(self.argpool),
            "vote_rounds": dict(sorted(self.vote_rounds.items())),
            "rejected": self.rejected,
            "unrecoverable": list(self.unrecoverable),
        }
