"""Processing-shard node: certify, execute, commit.

Each node runs three interleaved duties, all driven by delivered messages:

* block certification: create execution blocks leaderlessly, attest other
  members' blocks, assemble certificate blocks at quorum and forward them
  to the ordering shard, pushing cross-shard batches to their destination
  shards for prompt execution;
* ordered execution: apply finalized ordering blocks in round order --
  settle previous rounds' cross-shard transactions from the aggregators,
  execute this round's intra-shard transactions, tentatively execute and
  vote on this round's cross-shard transactions;
* commitment: append a ledger entry per round and broadcast the state root
  for external verifiability.

The executor is lock-free by default: cross-shard transactions execute
optimistically against pending state, aborts cascade by state-key taint.
The two-phase-lock baseline replaces exactly the cross-shard path with
lock acquisition at vote time and queueing of conflicting transactions.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

from coeshard import codec, messages as msg
from coeshard.locks import LockTable, QueuedTx
from coeshard.simnet import (
    FALSE_VOTES,
    INVALID_ATTEST,
    SILENT,
    WITHHOLD,
    Simulation,
)
from coeshard.types import (
    Attestation,
    BatchRecord,
    CertificateBlock,
    ExecutionBlock,
    LedgerEntry,
    OrderingBlock,
    QuorumAttestation,
    ShardConfig,
    SubOperation,
    Transaction,
    TxKind,
    TxMeta,
    VoteResult,
    batch_digest_of,
    state_root_of,
    verify_quorum,
)

LOCK_FREE = "coe_lockfree"
TWO_PHASE = "two_phase_lock"


@dataclass
class PendingCtx:
    """A cross-shard transaction executed locally but not yet settled."""

    tx: Transaction
    writes: dict  # key -> post value
    round: int
    succ: bool


@dataclass
class DeferredItx:
    """An ordered intra-shard transaction parked on pending state."""

    tx: Transaction
    writes: dict
    round: int
    succ: bool


@dataclass
class InFlightBlock:
    eb: ExecutionBlock
    eb_digest: bytes
    subject: bytes
    batches: tuple  # BatchRecord tuple
    batch_txs: dict  # digest -> tuple[Transaction]
    attestations: dict  # signer -> Attestation
    created_at: int


def split_cross_tx(tx: Transaction):
    """A one-shot cross-shard transaction is just its two per-shard
    sub-operations; nothing is exchanged between shards."""
    return {op.shard_id: op for op in tx.sub_ops}


class ProcessingNode:
    """Single-threaded state machine; all interaction is via messages."""

    def __init__(
        self,
        sim: Simulation,
        node_id: int,
        config: ShardConfig,
        directory: dict,
        genesis: dict,
        *,
        executor: str = LOCK_FREE,
        block_capacity: int = 500,
        block_interval: int = 400,
        heartbeat_interval: int = 1600,
        metrics=None,
        joining: bool = False,
    ):
        self.sim = sim
        self.node_id = node_id
        self.config = config
        self.directory = directory  # shard id -> ShardConfig, shared per node
        self.executor = executor
        self.block_capacity = block_capacity
        self.block_interval = block_interval
        self.heartbeat_interval = heartbeat_interval
        self.metrics = metrics
        self.active = True

        # certification
        self.mempool: list[Transaction] = []
        self.mempool_ids: set[str] = set()
        self.eb_store: dict[bytes, ExecutionBlock] = {}
        self.batch_store: dict[bytes, tuple] = {}
        self.in_flight: Optional[InFlightBlock] = None
        self.last_block_created = -(10**9)
        self.eb_height = 0
        self.emitted_cbs: set[bytes] = set()

        # vote certification
        self.own_votes: dict[int, dict] = {}
        self.vote_atts: dict[int, dict] = {}
        self.certified_votes: dict[int, VoteResult] = {}
        self.vote_emitted: set[int] = set()
        self.cvote_buffer: dict[int, list] = {}

        # execution state
        self.balances: dict = dict(genesis)
        self.committed: dict = dict(genesis)
        self.pending_refcount: dict = {}
        self.pending_ctxs: dict[str, PendingCtx] = {}
        self.aborted_local: dict = {}  # key -> tag round (vote-time failures)
        self.aborted_global: dict = {}  # key -> tag round (settled aborts)
        self.deferred: list[DeferredItx] = []
        self.deferred_writers: dict = {}  # key -> deferred writers (dirty values)
        self.deferred_touched: dict = {}  # key -> deferred touchers (order holds)
        self.finalized_ids: set[str] = set()
        self.outcomes: dict[str, str] = {}
        self.ledger: list[LedgerEntry] = []
        self.order_round = 0
        self.ctx_meta_by_round: dict[int, tuple] = {}
        self.commit_msgs: dict[int, dict] = {}

        # ordering-block intake
        self.ob_buffer: dict[int, OrderingBlock] = {}
        self.ob_sync_requested: set[int] = set()
        self.waiting_fetch: dict[bytes, dict] = {}  # digest -> {kind, peers left}

        # two-phase-lock state
        self.lock_table = LockTable()
        self.open_vote_rounds: dict[int, dict] = {}  # round -> {digest: bits list}

        self.joining = joining
        self.serve_from_round = 0
        if joining:
            self._request_ob_sync(1, 64)

    # ------------------------------------------------------------------
    # plumbing

    def _behaviour(self) -> Optional[str]:
        return self.sim.behaviour_of(self.node_id)

    def _members(self) -> tuple:
        return self.config.members

    def _ordering_members(self) -> tuple:
        return self.directory[0].members

    def _peers(self):
        return [m for m in self._members() if m != self.node_id]

    def _attest(self, subject: bytes) -> Attestation:
        valid = self._behaviour() != INVALID_ATTEST
        return Attestation(self.node_id, subject, valid)

    def start_timers(self) -> None:
        jitter = 1 + (self.node_id % 7)
        self.sim.schedule(
            self.node_id, self.sim.now + jitter, msg.TimerTick("block")
        )

    # ------------------------------------------------------------------
    # message dispatch

    def on_timer(self, tick: msg.TimerTick) -> None:
        if not self.active:
            return
        if tick.kind == "block":
            self._maybe_create_block()
            if self.joining or self.ob_buffer:
                # periodic re-sync covers dropped gap requests and catch-up
                self.ob_sync_requested.clear()
                self._request_ob_sync(self.order_round + 1, self.order_round + 64)
            self.sim.schedule(
                self.node_id,
                self.sim.now + self.block_interval,
                msg.TimerTick("block"),
            )

    def on_message(self, m, sender: int) -> None:
        if not self.active:
            return
        handler = {
            msg.MsgClientTx: self._on_client_tx,
            msg.MsgCertify: self._on_certify,
            msg.MsgCertified: self._on_certified,
            msg.MsgBatchPush: self._on_batch_push,
            msg.MsgCVote: self._on_cvote,
            msg.MsgCVoted: self._on_cvoted,
            msg.MsgFinalOb: self._on_final_ob,
            msg.MsgObSyncResp: self._on_ob_sync_resp,
            msg.MsgBlockSyncReq: self._on_block_sync_req,
            msg.MsgBlockSyncResp: self._on_block_sync_resp,
            msg.MsgVoteSyncReq: self._on_vote_sync_req,
            msg.MsgCommitRoot: self._on_commit_root,
            msg.MsgSnapshotReq: self._on_snapshot_req,
        }.get(type(m))
        if handler is not None:
            handler(m, sender)

    # ------------------------------------------------------------------
    # certification path

    def _on_client_tx(self, m: msg.MsgClientTx, sender: int) -> None:
        tx = m.tx
        if tx.tx_id in self.finalized_ids or tx.tx_id in self.mempool_ids:
            return
        self.mempool.append(tx)
        self.mempool_ids.add(tx.tx_id)

    def _maybe_create_block(self) -> None:
        if self._behaviour() in (WITHHOLD, SILENT):
            return
        if self.in_flight is not None:
            # re-disseminate so a pre-GST drop cannot wedge certification
            self.sim.broadcast(
                self.node_id, self._peers(), msg.MsgCertify(self.in_flight.eb)
            )
            return
        heartbeat_due = (
            self.sim.now - self.last_block_created >= self.heartbeat_interval
        )
        if not self.mempool and not heartbeat_due:
            return
        take = self.mempool[: self.block_capacity]
        self.mempool = self.mempool[self.block_capacity :]
        for tx in take:
            self.mempool_ids.discard(tx.tx_id)
        itxs = tuple(tx for tx in take if tx.kind is TxKind.INTRA)
        ctxs = tuple(tx for tx in take if tx.kind is TxKind.CROSS)
        self.eb_height += 1
        eb = ExecutionBlock(
            itxs=itxs,
            ctxs=ctxs,
            sid=self.config.shard_id,
            creator=self.node_id,
            height=self.eb_height,
        )
        eb_digest = self.sim.registry.record(eb)
        self.eb_store[eb_digest] = eb
        batches, batch_txs = self._derive_batches(eb)
        self.batch_store.update(batch_txs)
        cb_stub = CertificateBlock(eb_digest, batches, self.config.shard_id, self.node_id)
        subject = cb_stub.content_digest()
        self.in_flight = InFlightBlock(
            eb=eb,
            eb_digest=eb_digest,
            subject=subject,
            batches=batches,
            batch_txs=batch_txs,
            attestations={self.node_id: self._attest(subject)},
            created_at=self.sim.now,
        )
        self.last_block_created = self.sim.now
        self.sim.broadcast(self.node_id, self._peers(), msg.MsgCertify(eb))
        self._maybe_emit_cb()

    def _derive_batches(self, eb: ExecutionBlock):
        """Group the block's cross-shard transactions by their other shard;
        one digest per destination, at most k-1 of them."""
        by_dest: dict[int, list[Transaction]] = {}
        for tx in eb.ctxs:
            dest = next(s for s in tx.shard_ids() if s != eb.sid)
            by_dest.setdefault(dest, []).append(tx)
        records = []
        batch_txs = {}
        for dest in sorted(by_dest):
            txs = tuple(by_dest[dest])
            digest = batch_digest_of(txs)
            members = tuple(TxMeta(t.tx_id, t.state_keys()) for t in txs)
            records.append(BatchRecord(digest, eb.sid, dest, members))
            batch_txs[digest] = txs
        return tuple(records), batch_txs

    def _on_certify(self, m: msg.MsgCertify, sender: int) -> None:
        eb = m.eb
        if eb.sid != self.config.shard_id:
            return
        try:
            eb_digest = self.sim.registry.record(eb)
        except Exception:
            return
        if eb_digest not in self.eb_store:
            self.eb_store[eb_digest] = eb
            _, batch_txs = self._derive_batches(eb)
            self.batch_store.update(batch_txs)
            self._retry_waiting_fetches(set(batch_txs) | {eb_digest})
        if self._behaviour() in (WITHHOLD, SILENT):
            return
        batches, _ = self._derive_batches(eb)
        subject = CertificateBlock(
            eb_digest, batches, eb.sid, eb.creator
        ).content_digest()
        self.sim.send(
            self.node_id, sender, msg.MsgCertified(self._attest(subject), eb_digest)
        )

    def _on_certified(self, m: msg.MsgCertified, sender: int) -> None:
        flight = self.in_flight
        if flight is None or m.eb_digest != flight.eb_digest:
            return
        att = m.att
        if att.subject != flight.subject or not att.valid:
            return
        if att.signer not in self._members() or att.signer != sender:
            return
        flight.attestations[att.signer] = att
        self._maybe_emit_cb()

    def _maybe_emit_cb(self) -> None:
        flight = self.in_flight
        if flight is None or flight.eb_digest in self.emitted_cbs:
            return
        if len(flight.attestations) < self.config.certify_quorum():
            return
        quorum = QuorumAttestation(
            tuple(flight.attestations[s] for s in sorted(flight.attestations))
        )
        cb = CertificateBlock(
            flight.eb_digest,
            flight.batches,
            self.config.shard_id,
            self.node_id,
            quorum,
        )
        self.emitted_cbs.add(flight.eb_digest)
        self.sim.broadcast(self.node_id, self._ordering_members(), msg.MsgCertBlock(cb))
        for rec in flight.batches:
            push = msg.MsgBatchPush(
                rec.batch_digest, self.config.shard_id, flight.batch_txs[rec.batch_digest]
            )
            dest_cfg = self.directory.get(rec.dest_sid)
            if dest_cfg is not None:
                self.sim.broadcast(self.node_id, dest_cfg.members, push)
        self.in_flight = None

    def _on_batch_push(self, m: msg.MsgBatchPush, sender: int) -> None:
        if m.batch_digest in self.batch_store:
            return
        if batch_digest_of(m.txs) != m.batch_digest:
            return
        self.batch_store[m.batch_digest] = tuple(m.txs)
        self._retry_waiting_fetches({m.batch_digest})

    # ------------------------------------------------------------------
    # ordering-block intake

    def _on_final_ob(self, m: msg.MsgFinalOb, sender: int) -> None:
        ob = m.ob
        if ob.round <= self.order_round or ob.round in self.ob_buffer:
            return
        ocfg = self.directory[0]
        if not verify_quorum(ob.quorum, ocfg, "ordering", subject=ob.content_digest()):
            return
        self.ob_buffer[ob.round] = ob
        if ob.round > self.order_round + 1:
            self._request_ob_sync(self.order_round + 1, ob.round - 1)
        self._drain_obs()

    def _on_ob_sync_resp(self, m: msg.MsgObSyncResp, sender: int) -> None:
        for ob in m.obs:
            if ob.round > self.order_round and ob.round not in self.ob_buffer:
                ocfg = self.directory[0]
                if verify_quorum(ob.quorum, ocfg, "ordering", subject=ob.content_digest()):
                    self.ob_buffer[ob.round] = ob
        self._drain_obs()

    def _request_ob_sync(self, lo: int, hi: int) -> None:
        if lo in self.ob_sync_requested:
            return
        self.ob_sync_requested.add(lo)
        members = self._ordering_members()
        target = members[(lo + self.node_id) % len(members)]
        self.sim.send(self.node_id, target, msg.MsgObSyncReq(lo, hi))

    def _drain_obs(self) -> None:
        while not self.waiting_fetch and self.order_round + 1 in self.ob_buffer:
            ob = self.ob_buffer[self.order_round + 1]
            if not self._ensure_data(ob):
                return
            del self.ob_buffer[self.order_round + 1]
            self._apply_ob(ob)

    # ------------------------------------------------------------------
    # data availability

    def _ensure_data(self, ob: OrderingBlock) -> bool:
        """Start retrievals for any execution block or batch this round
        needs but the node does not hold.  True when everything is local."""
        needed = []
        for sid, digest, _creator in ob.eb_digests:
            if sid == self.config.shard_id and digest not in self.eb_store:
                needed.append((digest, "eb", self._peers()))
        for rec in ob.ctx_meta:
            if self.config.shard_id in rec.involved() and rec.batch_digest not in self.batch_store:
                home_cfg = self.directory.get(rec.home_sid)
                peers = [p for p in (home_cfg.members if home_cfg else ()) if p != self.node_id]
                needed.append((rec.batch_digest, "batch", peers))
        for digest, kind, peers in needed:
            if digest in self.waiting_fetch:
                continue
            self.waiting_fetch[digest] = {
                "kind": kind,
                "peers": list(peers),
                "source": tuple(peers),
            }
            self._fire_fetch(digest)
        return not needed

    def _fire_fetch(self, digest: bytes) -> None:
        state = self.waiting_fetch.get(digest)
        if not state:
            return
        if not state["peers"]:
            # ran out of peers; start over (a certify quorum guarantees an
            # honest holder exists, it may simply have been slow)
            state["peers"] = list(state["source"])
        peer = state["peers"].pop(0)
        self.sim.send(self.node_id, peer, msg.MsgBlockSyncReq(digest))

    def _on_block_sync_req(self, m: msg.MsgBlockSyncReq, sender: int) -> None:
        if self._behaviour() in (WITHHOLD, SILENT):
            return
        eb = self.eb_store.get(m.digest)
        txs = self.batch_store.get(m.digest)
        if eb is not None:
            self.sim.send(self.node_id, sender, msg.MsgBlockSyncResp(m.digest, eb=eb))
        elif txs is not None:
            self.sim.send(self.node_id, sender, msg.MsgBlockSyncResp(m.digest, txs=txs))

    def _on_block_sync_resp(self, m: msg.MsgBlockSyncResp, sender: int) -> None:
        state = self.waiting_fetch.get(m.digest)
        if state is None:
            return
        if m.eb is not None:
            try:
                if self.sim.registry.record(m.eb) != m.digest:
                    raise ValueError("content does not match digest")
            except Exception:
                self._fire_fetch(m.digest)
                return
            self.eb_store[m.digest] = m.eb
            _, batch_txs = self._derive_batches(m.eb)
            self.batch_store.update(batch_txs)
        elif m.txs:
            if batch_digest_of(m.txs) != m.digest:
                self._fire_fetch(m.digest)
                return
            self.batch_store[m.digest] = tuple(m.txs)
        else:
            self._fire_fetch(m.digest)
            return
        del self.waiting_fetch[m.digest]
        self._drain_obs()

    def _retry_waiting_fetches(self, digests) -> None:
        resolved = [d for d in digests if d in self.waiting_fetch]
        for d in resolved:
            del self.waiting_fetch[d]
        if resolved:
            self._drain_obs()

    # ------------------------------------------------------------------
    # EXECUTE stage

    def _apply_ob(self, ob: OrderingBlock) -> None:
        self._apply_reconfig(ob)
        outcomes: list[tuple] = []
        # Step 1: settle previous rounds from the aggregators
        for arg in ob.args:
            self._process_aggregator(arg, ob.round, outcomes)
        # Step 2: execute this round's intra-shard transactions
        for sid, digest, _creator in ob.eb_digests:
            if sid != self.config.shard_id:
                continue
            eb = self.eb_store[digest]
            for tx in eb.itxs:
                self._execute_ordered_itx(tx, ob.round, outcomes)
        # Step 3: execute and vote on this round's cross-shard transactions
        self._vote_round(ob, outcomes)
        # Step 4: ledger entry + commit broadcast
        root = state_root_of(self.committed)
        entry = LedgerEntry(ob.round, tuple(outcomes), root)
        self.ledger.append(entry)
        self.order_round = ob.round
        self.ctx_meta_by_round[ob.round] = ob.ctx_meta
        self.sim.monitor_ledger_append(self.config.shard_id, self.node_id, entry)
        if ob.round >= self.serve_from_round and self._behaviour() not in (WITHHOLD, SILENT):
            att = self._attest(codec.digest(("commit", root, ob.round, self.config.shard_id)))
            commit = msg.MsgCommitRoot(att, root, ob.round, self.config.shard_id)
            self._store_commit(commit)
            self.sim.broadcast(self.node_id, self._peers(), commit)
        if self.metrics is not None:
            self.metrics.on_round_applied(self.config.shard_id, self.node_id, ob.round)
        self._drain_cvote_buffer(ob.round)

    def _apply_reconfig(self, ob: OrderingBlock) -> None:
        for plan in ob.reconfig:
            cfg = self.directory.get(plan.shard_id)
            if cfg is None:
                continue
            if hasattr(plan, "added_nodes"):
                members = tuple(sorted(set(cfg.members) | set(plan.added_nodes)))
                new = ShardConfig(
                    cfg.shard_id, members, plan.new_f_s, plan.new_f_l,
                    cfg.role, cfg.epoch_length,
                )
            else:
                new = ShardConfig(
                    cfg.shard_id, plan.new_members, plan.new_f_s, plan.new_f_l,
                    cfg.role, cfg.epoch_length,
                )
            self.directory[plan.shard_id] = new
            if plan.shard_id == self.config.shard_id:
                self.config = new
                if self.node_id not in new.members:
                    self._hand_off_mempool()
                    self.active = False

    def _hand_off_mempool(self) -> None:
        keep = [m for m in self.config.members if m != self.node_id]
        if not keep:
            return
        for i, tx in enumerate(self.mempool):
            self.sim.send(self.node_id, keep[i % len(keep)], msg.MsgClientTx(tx))
        self.mempool = []
        self.mempool_ids = set()

    # -- step 1 ---------------------------------------------------------

    def _process_aggregator(self, arg, applying_round: int, outcomes: list) -> None:
        meta = self.ctx_meta_by_round.get(arg.round, ())
        for rec in meta:
            bits = arg.vote.get(rec.batch_digest)
            for pos, tx_meta in enumerate(rec.members):
                bit = bits[pos] if bits is not None and pos < len(bits) else "0"
                self._settle_ctx(tx_meta, rec, bit, arg.round, applying_round, outcomes)
            self._release_deferred(applying_round, outcomes)
        # drop taint tagged before this aggregator's round
        self.aborted_global = {
            k: r for k, r in self.aborted_global.items() if r >= arg.round
        }
        self.aborted_local = {
            k: r for k, r in self.aborted_local.items() if r >= arg.round
        }

    def _settle_ctx(
        self, tx_meta: TxMeta, rec: BatchRecord, bit: str,
        arg_round: int, applying_round: int, outcomes: list,
    ) -> None:
        keys = tuple(tuple(k) for k in tx_meta.state_keys)
        clean = all(k not in self.aborted_global for k in keys)
        commit = bit == "1" and clean
        involved = self.config.shard_id in rec.involved()
        if not commit:
            for k in keys:
                self.aborted_global[k] = arg_round
        if not involved:
            return
        pend = self.pending_ctxs.pop(tx_meta.tx_id, None)
        if tx_meta.tx_id in self.finalized_ids:
            return
        if commit:
            if pend is None:
                # our shard voted 1 inside the aggregate, so a pending entry
                # must exist; treat its absence as divergence
                self.sim.record_violation(
                    "missing_pending", {"tx": tx_meta.tx_id, "node": self.node_id}
                )
                return
            for k, v in pend.writes.items():
                self.committed[k] = v
            self._decref(pend.writes.keys())
            if self.executor == TWO_PHASE:
                self.lock_table.release(tx_meta.tx_id)
            outcome = "committed"
        else:
            if pend is not None:
                if pend.succ:
                    for k in pend.writes:
                        self.balances[k] = self.committed.get(k, 0)
                self._decref(pend.writes.keys())
            if self.executor == TWO_PHASE:
                self.lock_table.release(tx_meta.tx_id)
            outcome = "aborted"
        self.finalized_ids.add(tx_meta.tx_id)
        self.outcomes[tx_meta.tx_id] = outcome
        outcomes.append((tx_meta.tx_id, outcome))
        if self.metrics is not None:
            # bit-level aborts carry their vote-time cause (execution vs
            # cascading); a clean bit overturned by taint is a cascade
            cause = "cascading" if (outcome == "aborted" and bit == "1") else None
            self.metrics.on_finalized(
                tx_meta.tx_id, self.config.shard_id, applying_round,
                self.sim.now, outcome, cause, ordered_round=arg_round,
            )
        if self.executor == TWO_PHASE:
            self._drain_lock_queue(applying_round, outcomes)

    def _decref(self, keys) -> None:
        for k in keys:
            c = self.pending_refcount.get(k, 0) - 1
            if c <= 0:
                self.pending_refcount.pop(k, None)
            else:
                self.pending_refcount[k] = c

    # -- step 2 ---------------------------------------------------------

    def _execute_ordered_itx(self, tx: Transaction, round_no: int, outcomes: list) -> None:
        if tx.tx_id in self.finalized_ids:
            return
        op = tx.sub_op_for(self.config.shard_id)
        keys = tx.state_keys()
        if self.executor == TWO_PHASE:
            # an intra-shard transaction may not read any tentative state:
            # it queues behind every lock holder
            if self.lock_table.blocked(keys, round_no, include_same_round=True):
                self.lock_table.enqueue(QueuedTx(tx.tx_id, keys, round_no, "itx", tx))
                if self.metrics is not None:
                    self.metrics.on_deferred(tx.tx_id)
                return
            self._finalize_itx(tx, op, round_no, outcomes, waited=0)
            return
        if any(
            k in self.pending_refcount or k in self.deferred_touched for k in keys
        ):
            succ, writes = self._tentative_exec(op)
            if succ:
                for k, v in writes.items():
                    self.balances[k] = v
                for k in writes:
                    self.deferred_writers[k] = self.deferred_writers.get(k, 0) + 1
            for k in keys:
                self.deferred_touched[k] = self.deferred_touched.get(k, 0) + 1
            self.deferred.append(DeferredItx(tx, writes, round_no, succ))
            if self.metrics is not None:
                self.metrics.on_deferred(tx.tx_id)
            return
        self._finalize_itx(tx, op, round_no, outcomes, waited=0)

    def _finalize_itx(
        self, tx, op, round_no: int, outcomes: list, waited: int,
        lock_wait: bool = False,
    ) -> None:
        succ, writes = self._tentative_exec(op)
        if succ:
            for k, v in writes.items():
                self.balances[k] = v
                self.committed[k] = v
            outcome = "committed"
        else:
            outcome = "aborted"
        self.finalized_ids.add(tx.tx_id)
        self.outcomes[tx.tx_id] = outcome
        outcomes.append((tx.tx_id, outcome))
        if self.metrics is not None:
            self.metrics.on_finalized(
                tx.tx_id, self.config.shard_id, round_no, self.sim.now,
                outcome, None if succ else "execution",
                ordered_round=round_no - waited,
                lock_wait=waited if lock_wait else 0,
            )

    def _tentative_exec(self, op: Optional[SubOperation]):
        """Balance-transfer semantics: debit must be covered; failure
        writes nothing."""
        if op is None:
            return False, {}
        debit_key = (op.contract_id, op.debit_account)
        credit_key = (op.contract_id, op.credit_account)
        have = self.balances.get(debit_key, 0)
        if have < op.debit_amount:
            return False, {}
        writes = {debit_key: have - op.debit_amount}
        writes[credit_key] = writes.get(
            credit_key, self.balances.get(credit_key, 0)
        ) + op.credit_amount
        return True, writes

    def _release_deferred(self, applying_round: int, outcomes: list) -> None:
        """Finalize deferred intra-shard transactions whose blocking state
        has fully settled, re-executing each against current state.  FIFO:
        an item sharing keys with an earlier still-deferred one waits for
        it, so same-key ordering survives the deferral."""
        while True:
            released = None
            blocked_keys: set = set()
            for item in self.deferred:
                keys = tuple(item.tx.state_keys())
                if any(k in self.pending_refcount for k in keys) or any(
                    k in blocked_keys for k in keys
                ):
                    blocked_keys.update(keys)
                    continue
                released = item
                break
            if released is None:
                return
            self.deferred.remove(released)
            keys = tuple(released.tx.state_keys())
            if released.succ:
                for k in released.writes:
                    self.balances[k] = self.committed.get(k, 0)
                for k in released.writes:
                    c = self.deferred_writers.get(k, 0) - 1
                    if c <= 0:
                        self.deferred_writers.pop(k, None)
                    else:
                        self.deferred_writers[k] = c
            for k in keys:
                c = self.deferred_touched.get(k, 0) - 1
                if c <= 0:
                    self.deferred_touched.pop(k, None)
                else:
                    self.deferred_touched[k] = c
            op = released.tx.sub_op_for(self.config.shard_id)
            self._finalize_itx(
                released.tx, op, applying_round, outcomes,
                waited=applying_round - released.round,
            )

    # -- step 3 ---------------------------------------------------------

    def _vote_round(self, ob: OrderingBlock, outcomes: list) -> None:
        my_sid = self.config.shard_id
        vote_map: dict = {}
        for rec in ob.ctx_meta:
            if my_sid not in rec.involved():
                continue
            txs = self.batch_store[rec.batch_digest]
            vote_map[rec.batch_digest] = [self._vote_one_ctx(tx, ob.round) for tx in txs]
        if not vote_map:
            return
        if any(None in bits for bits in vote_map.values()):
            # two-phase lock: the round's vote leaves once every member
            # transaction has resolved its locks
            self.open_vote_rounds[ob.round] = vote_map
            return
        self._emit_vote(ob.round, {d: "".join(b) for d, b in vote_map.items()})

    def _vote_one_ctx(self, tx: Transaction, round_no: int):
        """Tentatively execute one newly ordered cross-shard transaction
        and return its vote bit ('1'/'0'), or None when it must wait for
        locks under the two-phase baseline."""
        if tx.tx_id in self.finalized_ids:
            return "0"
        keys = tuple(tx.state_keys())
        if self.executor == TWO_PHASE:
            if self.lock_table.blocked(keys, round_no):
                self.lock_table.enqueue(QueuedTx(tx.tx_id, keys, round_no, "ctx", tx))
                return None
            self.lock_table.acquire(tx.tx_id, keys, round_no)
        return self._vote_ctx_now(tx, round_no, waited=0)

    def _vote_ctx_now(self, tx: Transaction, round_no: int, waited: int) -> str:
        op = tx.sub_op_for(self.config.shard_id)
        keys = tuple(tx.state_keys())
        succ, writes = self._tentative_exec(op)
        tainted = any(
            k in self.aborted_local or k in self.aborted_global for k in keys
        )
        provisional = any(k in self.deferred_writers for k in keys)
        if self.metrics is not None and waited:
            self.metrics.on_lock_wait(tx.tx_id, waited)
        if succ and not tainted and not provisional:
            for k, v in writes.items():
                self.balances[k] = v
            for k in writes:
                self.pending_refcount[k] = self.pending_refcount.get(k, 0) + 1
            self.pending_ctxs[tx.tx_id] = PendingCtx(tx, writes, round_no, True)
            return "1"
        for k in keys:
            self.aborted_local[k] = round_no
        if self.metrics is not None:
            cause = "execution" if not succ else "cascading"
            self.metrics.on_vote_abort(tx.tx_id, cause)
        return "0"

    def _drain_lock_queue(self, applying_round: int, outcomes: list) -> None:
        if self.executor != TWO_PHASE:
            return
        for item in self.lock_table.drain_ready():
            waited = applying_round - item.enqueue_round
            if item.kind == "itx":
                op = item.payload.sub_op_for(self.config.shard_id)
                self._finalize_itx(
                    item.payload, op, applying_round, outcomes,
                    waited=waited, lock_wait=True,
                )
            else:
                self.lock_table.acquire(item.tx_id, item.keys, item.enqueue_round)
                bit = self._vote_ctx_now(item.payload, item.enqueue_round, waited=waited)
                self._fill_vote_bit(item.enqueue_round, item.payload.tx_id, bit)

    def _fill_vote_bit(self, round_no: int, tx_id: str, bit: str) -> None:
        batches = self.open_vote_rounds.get(round_no)
        if not batches:
            return
        meta = self.ctx_meta_by_round.get(round_no, ())
        for rec in meta:
            if rec.batch_digest not in batches:
                continue
            for pos, tx_meta in enumerate(rec.members):
                if tx_meta.tx_id == tx_id:
                    batches[rec.batch_digest][pos] = bit
        if all(all(b is not None for b in bits) for bits in batches.values()):
            vote = {d: "".join(bits) for d, bits in batches.items()}
            del self.open_vote_rounds[round_no]
            self._emit_vote(round_no, vote)

    def _emit_vote(self, round_no: int, vote_map: dict) -> None:
        self.own_votes[round_no] = vote_map
        behaviour = self._behaviour()
        if behaviour in (WITHHOLD, SILENT) or round_no < self.serve_from_round:
            return
        broadcast_map = vote_map
        if behaviour == FALSE_VOTES:
            broadcast_map = {
                d: "".join("0" if b == "1" else "1" for b in bits)
                for d, bits in vote_map.items()
            }
        vr_subject = VoteResult(broadcast_map, round_no, self.config.shard_id).content_digest()
        self.vote_atts.setdefault(round_no, {})[self.node_id] = self._attest(vr_subject)
        self.sim.broadcast(
            self.node_id,
            self._peers(),
            msg.MsgCVote(broadcast_map, round_no, self.config.shard_id, self.node_id),
        )
        self._maybe_send_vote(round_no)

    def _on_cvote(self, m: msg.MsgCVote, sender: int) -> None:
        if m.sid != self.config.shard_id:
            return
        if m.round > self.order_round:
            self.cvote_buffer.setdefault(m.round, []).append((sender, m.vote))
            return
        self._co_sign(m.round, m.vote, sender)

    def _co_sign(self, round_no: int, vote_map: dict, sender: int) -> None:
        if self._behaviour() in (WITHHOLD, SILENT, FALSE_VOTES):
            return
        own = self.own_votes.get(round_no)
        if own is None or own != vote_map:
            return
        subject = VoteResult(vote_map, round_no, self.config.shard_id).content_digest()
        self.sim.send(
            self.node_id, sender, msg.MsgCVoted(self._attest(subject), round_no)
        )

    def _drain_cvote_buffer(self, round_no: int) -> None:
        for sender, vote_map in self.cvote_buffer.pop(round_no, []):
            self._co_sign(round_no, vote_map, sender)

    def _on_cvoted(self, m: msg.MsgCVoted, sender: int) -> None:
        own = self.own_votes.get(m.round)
        if own is None or m.round in self.vote_emitted:
            return
        subject = VoteResult(own, m.round, self.config.shard_id).content_digest()
        if m.att.subject != subject or not m.att.valid or m.att.signer != sender:
            return
        if sender not in self._members():
            return
        self.vote_atts.setdefault(m.round, {})[sender] = m.att
        self._maybe_send_vote(m.round)

    def _maybe_send_vote(self, round_no: int) -> None:
        atts = self.vote_atts.get(round_no, {})
        if len(atts) < self.config.certify_quorum() or round_no in self.vote_emitted:
            return
        self.vote_emitted.add(round_no)
        vr = VoteResult(
            self.own_votes[round_no],
            round_no,
            self.config.shard_id,
            QuorumAttestation(tuple(atts[s] for s in sorted(atts))),
        )
        self.certified_votes[round_no] = vr
        self.sim.broadcast(self.node_id, self._ordering_members(), msg.MsgVote(vr))

    def _on_vote_sync_req(self, m: msg.MsgVoteSyncReq, sender: int) -> None:
        vr = self.certified_votes.get(m.round)
        if vr is not None and self._behaviour() not in (WITHHOLD, SILENT):
            self.sim.send(self.node_id, sender, msg.MsgVote(vr))

    # ------------------------------------------------------------------
    # commitment / verifiability

    def _store_commit(self, commit: msg.MsgCommitRoot) -> None:
        self.commit_msgs.setdefault(commit.round, {})[commit.att.signer] = commit

    def _on_commit_root(self, m: msg.MsgCommitRoot, sender: int) -> None:
        if m.sid != self.config.shard_id or m.att.signer != sender:
            return
        self._store_commit(m)

    def ledger_verifiable(self, entry: LedgerEntry) -> bool:
        """External verifiability: a certify quorum of distinct COMMIT
        attestations on (state_root, round)."""
        commits = self.commit_msgs.get(entry.round, {})
        subject = codec.digest(("commit", entry.state_root, entry.round, self.config.shard_id))
        good = {
            s
            for s, c in commits.items()
            if c.state_root == entry.state_root and c.att.valid
            and c.att.subject == subject and s in self._members()
        }
        return len(good) >= self.config.certify_quorum()

    def _on_snapshot_req(self, m: msg.MsgSnapshotReq, sender: int) -> None:
        if self._behaviour() in (WITHHOLD, SILENT):
            return
        balances = tuple(sorted((k[0], k[1], v) for k, v in self.committed.items()))
        self.sim.send(
            self.node_id,
            sender,
            msg.MsgSnapshotResp(
                self.config.shard_id, self.order_round, balances, tuple(self.ledger)
            ),
        )

    # ------------------------------------------------------------------

    def debug_snapshot(self) -> dict:
        """JSON-able dump consumed by the property checker."""
        return {
            "node": self.node_id,
            "shard": self.config.shard_id,
            "order_round": self.order_round,
            "ledger": [codec.to_jsonable(e) for e in self.ledger],
            "balances": {f"{k[0]}/{k[1]}": v for k, v in sorted(self.committed.items())},
            "cur_pending": sorted(f"{k[0]}/{k[1]}" for k in self.pending_refcount),
            "cur_aborted": sorted(f"{k[0]}/{k[1]}" for k in self.aborted_global),
            "outcomes": dict(sorted(self.outcomes.items())),
            "mempool": len(self.mempool),
        }
