"""Canonical protocol data model.

Value types shared by the processing shards, the ordering shard, the
simulator and the checker.  Everything is an immutable dataclass with a
canonical byte encoding (see :mod:`coeshard.codec`), so content digests and
cross-node equality are well defined.

Attestations stand in for signatures: a Byzantine node may withhold one or
emit one with ``valid=False``, but the simulator is the only attestation
factory, so nobody can mint an attestation naming an honest signer.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Literal, Optional

from coeshard import codec
from coeshard.sizing import as_fraction

NodeId = int
ShardId = int
StateKey = tuple  # (contract_id, account_id)


class TxKind(str, enum.Enum):
    INTRA = "intra"
    CROSS = "cross"


@codec.wire_type
@dataclass(frozen=True)
class SubOperation:
    """One shard's slice of a transfer: debit one account, credit another
    inside a single contract homed on ``shard_id``."""

    shard_id: ShardId
    contract_id: str
    debit_account: str
    debit_amount: int
    credit_account: str
    credit_amount: int

    def __post_init__(self):
        if self.debit_amount < 0 or self.credit_amount < 0:
            raise ValueError("amounts must be non-negative")

    def state_keys(self) -> tuple[StateKey, ...]:
        return (
            (self.contract_id, self.debit_account),
            (self.contract_id, self.credit_account),
        )


@codec.wire_type
@dataclass(frozen=True)
class Transaction:
    """Account-model transfer (one sub-operation) or one-shot atomic swap
    (two sub-operations on two distinct shards)."""

    tx_id: str
    kind: TxKind
    sub_ops: tuple[SubOperation, ...]
    submit_time: int = 0

    def __post_init__(self):
        object.__setattr__(self, "kind", TxKind(self.kind))
        object.__setattr__(self, "sub_ops", tuple(self.sub_ops))
        shards = {op.shard_id for op in self.sub_ops}
        if self.kind is TxKind.INTRA:
            if len(shards) != 1:
                raise ValueError(f"intra-shard tx {self.tx_id} spans shards {shards}")
        else:
            if len(self.sub_ops) != 2 or len(shards) != 2:
                raise ValueError(
                    f"cross-shard tx {self.tx_id} must carry exactly two "
                    f"sub-operations on two distinct shards"
                )

    def shard_ids(self) -> tuple[ShardId, ...]:
        return tuple(sorted({op.shard_id for op in self.sub_ops}))

    def state_keys(self) -> tuple[StateKey, ...]:
        keys: list[StateKey] = []
        for op in self.sub_ops:
            keys.extend(op.state_keys())
        return tuple(keys)

    def sub_op_for(self, shard_id: ShardId) -> Optional[SubOperation]:
        for op in self.sub_ops:
            if op.shard_id == shard_id:
                return op
        return None


@codec.wire_type
@dataclass(frozen=True)
class ExecutionBlock:
    """Intact transaction batch created leaderlessly by one shard member.

    ``height`` is the creator's own block counter; it keeps successive
    (possibly empty) blocks content-distinct."""

    itxs: tuple[Transaction, ...]
    ctxs: tuple[Transaction, ...]
    sid: ShardId
    creator: NodeId
    height: int = 0

    def __post_init__(self):
        object.__setattr__(self, "itxs", tuple(self.itxs))
        object.__setattr__(self, "ctxs", tuple(self.ctxs))
        seen = set()
        for tx in self.itxs:
            if tx.kind is not TxKind.INTRA or tx.shard_ids() != (self.sid,):
                raise ValueError(f"{tx.tx_id} is not intra-shard for shard {self.sid}")
            seen.add(tx.tx_id)
        for tx in self.ctxs:
            if tx.kind is not TxKind.CROSS or self.sid not in tx.shard_ids():
                raise ValueError(f"{tx.tx_id} does not involve shard {self.sid}")
            if tx.tx_id in seen:
                raise ValueError(f"duplicate tx id {tx.tx_id} in block")
            seen.add(tx.tx_id)


@codec.wire_type
@dataclass(frozen=True)
class Attestation:
    """Simulated signature of one node over one subject digest."""

    signer: NodeId
    subject: bytes
    valid: bool = True


@codec.wire_type
@dataclass(frozen=True)
class QuorumAttestation:
    attestations: tuple[Attestation, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "attestations", tuple(self.attestations))

    def distinct_valid_signers(self, subject: Optional[bytes] = None) -> frozenset[NodeId]:
        out = set()
        for att in self.attestations:
            if not att.valid:
                continue
            if subject is not None and att.subject != subject:
                continue
            out.add(att.signer)
        return frozenset(out)


ShardRole = Literal["ordering", "processing"]


@codec.wire_type
@dataclass(frozen=True)
class ShardConfig:
    """Membership and thresholds of one shard.

    Ordering shards run quorum consensus and need f_S == f_L < 1/3;
    processing shards only disseminate and execute, so f_S + f_L < 1.
    """

    shard_id: ShardId
    members: tuple[NodeId, ...]
    f_s: Fraction
    f_l: Fraction
    role: str
    epoch_length: int = 20

    def __post_init__(self):
        object.__setattr__(self, "members", tuple(self.members))
        object.__setattr__(self, "f_s", as_fraction(self.f_s))
        object.__setattr__(self, "f_l", as_fraction(self.f_l))
        if self.role == "ordering":
            # the quorum coefficient is allowed to be exactly 1/3; the
            # tolerated fault count m - floor(2fm) - 1 then stays < m/3
            if self.f_s != self.f_l or self.f_s > Fraction(1, 3):
                raise ValueError("ordering shard needs f_s == f_l <= 1/3")
        elif self.role == "processing":
            if self.f_s + self.f_l >= 1:
                raise ValueError("processing shard needs f_s + f_l < 1")
        else:
            raise ValueError(f"unknown shard role {self.role!r}")

    @property
    def size(self) -> int:
        return len(self.members)

    def certify_quorum(self) -> int:
        """Distinct signers needed on certificates, votes and commits."""
        return math.floor(self.f_s * self.size) + 1

    def consensus_quorum(self) -> int:
        """Distinct attesters needed to finalize an ordering block."""
        return math.floor(2 * self.f_s * self.size) + 1

    def stall_tolerance(self) -> int:
        """Most faulty members the shard can carry and still certify."""
        return self.size - self.certify_quorum()


@codec.wire_type
@dataclass(frozen=True)
class TxMeta:
    """Routing metadata of one cross-shard transaction: enough for any
    shard to track abort dependencies without holding the payload."""

    tx_id: str
    state_keys: tuple[StateKey, ...]

    def __post_init__(self):
        object.__setattr__(
            self, "state_keys", tuple(tuple(k) for k in self.state_keys)
        )


@codec.wire_type
@dataclass(frozen=True)
class BatchRecord:
    """One home-shard's batch of cross-shard transactions toward one
    destination shard, as carried inside certificate and ordering blocks."""

    batch_digest: bytes
    home_sid: ShardId
    dest_sid: ShardId
    members: tuple[TxMeta, ...]

    def __post_init__(self):
        object.__setattr__(self, "members", tuple(self.members))

    def involved(self) -> tuple[ShardId, ShardId]:
        return (self.home_sid, self.dest_sid)


@codec.wire_type
@dataclass(frozen=True)
class CertificateBlock:
    """Digest-level record of one execution block plus its cross-shard
    batches; valid once a certify quorum of the home shard attests it."""

    eb_digest: bytes
    ctx_batches: tuple[BatchRecord, ...]
    sid: ShardId
    creator: NodeId
    quorum: QuorumAttestation = field(default_factory=QuorumAttestation)

    def __post_init__(self):
        object.__setattr__(self, "ctx_batches", tuple(self.ctx_batches))

    def content_digest(self) -> bytes:
        """Attestation subject: everything except the attestations."""
        return codec.digest(
            ("cb", self.eb_digest, self.ctx_batches, self.sid, self.creator)
        )


@codec.wire_type
@dataclass(frozen=True)
class VoteResult:
    """Per-batch execution outcome bits for one ordered round, certified by
    a quorum of the voting shard.  Bit strings are positional over the
    batch's member transactions; '1' means locally successful."""

    vote: dict
    round: int
    sid: ShardId
    quorum: QuorumAttestation = field(default_factory=QuorumAttestation)

    def __post_init__(self):
        object.__setattr__(self, "vote", dict(self.vote))

    def content_digest(self) -> bytes:
        return codec.digest(("vote", self.vote, self.round, self.sid))


@codec.wire_type
@dataclass(frozen=True)
class Aggregator:
    """AND-fold of shard votes for one round's cross-shard batches."""

    round: int
    vote: dict
    pending_shards: frozenset = frozenset()

    def __post_init__(self):
        object.__setattr__(self, "vote", dict(self.vote))
        object.__setattr__(self, "pending_shards", frozenset(self.pending_shards))

    @property
    def ready(self) -> bool:
        return not self.pending_shards


def fold_vote_bits(existing: dict, incoming: dict) -> dict:
    """Merge one shard's vote map into an aggregate: known keys AND
    position-wise, unknown keys insert as-is.  Commutative and
    order-independent over any set of contributions."""
    out = dict(existing)
    for key, bits in incoming.items():
        if key in out:
            prior = out[key]
            if len(prior) != len(bits):
                raise ValueError(f"vote length mismatch on {key!r}")
            out[key] = "".join(
                "1" if a == "1" and b == "1" else "0" for a, b in zip(prior, bits)
            )
        else:
            out[key] = bits
    return out


@codec.wire_type
@dataclass(frozen=True)
class RecoveryPlan:
    """Mid-epoch expansion of a liveness-dead processing shard."""

    shard_id: ShardId
    added_nodes: tuple[NodeId, ...]
    new_f_s: Fraction
    new_f_l: Fraction
    effective_round: int

    def __post_init__(self):
        object.__setattr__(self, "added_nodes", tuple(self.added_nodes))
        object.__setattr__(self, "new_f_s", as_fraction(self.new_f_s))
        object.__setattr__(self, "new_f_l", as_fraction(self.new_f_l))
        if self.new_f_s + self.new_f_l >= 1:
            raise ValueError("recovery thresholds must keep f_s + f_l < 1")


@codec.wire_type
@dataclass(frozen=True)
class TrimPlan:
    """Epoch-boundary re-randomisation of a recovered shard back to its
    optimal size."""

    shard_id: ShardId
    new_members: tuple[NodeId, ...]
    new_f_s: Fraction
    new_f_l: Fraction
    effective_round: int

    def __post_init__(self):
        object.__setattr__(self, "new_members", tuple(self.new_members))
        object.__setattr__(self, "new_f_s", as_fraction(self.new_f_s))
        object.__setattr__(self, "new_f_l", as_fraction(self.new_f_l))


@codec.wire_type
@dataclass(frozen=True)
class OrderingBlock:
    """Per-round consensus output: finalized aggregators, ordered execution
    block digests, cross-shard batch metadata and any reconfiguration."""

    args: tuple[Aggregator, ...]
    eb_digests: tuple[tuple, ...]  # (sid, digest, creator)
    ctx_meta: tuple[BatchRecord, ...]
    round: int
    quorum: QuorumAttestation = field(default_factory=QuorumAttestation)
    reconfig: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "args", tuple(self.args))
        object.__setattr__(
            self, "eb_digests", tuple(tuple(e) for e in self.eb_digests)
        )
        object.__setattr__(self, "ctx_meta", tuple(self.ctx_meta))
        object.__setattr__(self, "reconfig", tuple(self.reconfig))

    def content_digest(self) -> bytes:
        return codec.digest(
            ("ob", self.args, self.eb_digests, self.ctx_meta, self.round, self.reconfig)
        )

    def involved_shards(self) -> frozenset[ShardId]:
        """Shards expected to vote on this round's cross-shard batches."""
        out: set[ShardId] = set()
        for rec in self.ctx_meta:
            out.update(rec.involved())
        return frozenset(out)

    def encoded_size(self) -> int:
        """Byte size under the digest/bit-string compression scheme."""
        size = 8  # round number
        for arg in self.args:
            bits = sum(len(v) for v in arg.vote.values())
            size += 8 + (bits + 7) // 8
        size += len(self.eb_digests) * (codec.DIGEST_BYTES + 4)
        for rec in self.ctx_meta:
            size += codec.DIGEST_BYTES + 4 + 8 * len(rec.members)
        size += 96  # aggregate signature stand-in
        return size


@codec.wire_type
@dataclass(frozen=True)
class LedgerEntry:
    """One round's finalized outcomes and the post-round state root."""

    round: int
    outcomes: tuple[tuple, ...]  # (tx_id, "committed" | "aborted")
    state_root: bytes

    def __post_init__(self):
        object.__setattr__(self, "outcomes", tuple(tuple(o) for o in self.outcomes))


def verify_quorum(
    att: QuorumAttestation,
    shard: ShardConfig,
    threshold_kind: Literal["processing", "ordering"],
    subject: Optional[bytes] = None,
) -> bool:
    """True iff enough distinct shard members attest validly.

    Unknown signers make an attestation not count, never an error.  With a
    subject given, attestations over other subjects are ignored too.
    """
    members = set(shard.members)
    signers = {s for s in att.distinct_valid_signers(subject) if s in members}
    if threshold_kind == "processing":
        needed = shard.certify_quorum()
    elif threshold_kind == "ordering":
        needed = shard.consensus_quorum()
    else:
        raise ValueError(f"unknown threshold kind {threshold_kind!r}")
    return len(signers) >= needed


def state_root_of(balances: dict) -> bytes:
    """Ledger root: digest of the sorted committed state snapshot."""
    items = sorted(balances.items())
    return codec.digest(("state", tuple((k[0], k[1], v) for k, v in items)))


def batch_digest_of(txs: Iterable[Transaction]) -> bytes:
    return codec.digest(("batch", tuple(txs)))
