"""Wire messages exchanged between simulated nodes.

Message class determines routing inside a host: certification and
execution traffic goes to the processing machine, consensus traffic to the
ordering machine, finalized ordering blocks to both.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from coeshard import codec
from coeshard.types import (
    Attestation,
    CertificateBlock,
    ExecutionBlock,
    LedgerEntry,
    OrderingBlock,
    Transaction,
    VoteResult,
)


@dataclass(frozen=True)
class MsgClientTx:
    tx: Transaction

    def wire_size(self) -> int:
        return 512


@dataclass(frozen=True)
class MsgCertify:
    """Execution-block dissemination within the home shard."""

    eb: ExecutionBlock

    def wire_size(self) -> int:
        return 8 + 512 * (len(self.eb.itxs) + len(self.eb.ctxs))


@dataclass(frozen=True)
class MsgCertified:
    """Reply attestation over the certificate content digest."""

    att: Attestation
    eb_digest: bytes

    def wire_size(self) -> int:
        return 2 * codec.DIGEST_BYTES + 8


@dataclass(frozen=True)
class MsgCertBlock:
    cb: CertificateBlock

    def wire_size(self) -> int:
        return codec.DIGEST_BYTES * (1 + len(self.cb.ctx_batches)) + 98


@dataclass(frozen=True)
class MsgBatchPush:
    """Full cross-shard batch pushed to the destination shard members so
    execution does not wait on retrieval in the fault-free path."""

    batch_digest: bytes
    home_sid: int
    txs: tuple[Transaction, ...]

    def wire_size(self) -> int:
        return codec.DIGEST_BYTES + 512 * len(self.txs)


@dataclass(frozen=True)
class MsgCVote:
    """A node's own execution vote, disseminated for co-signing."""

    vote: dict
    round: int
    sid: int
    sender: int

    def wire_size(self) -> int:
        bits = sum(len(v) for v in self.vote.values())
        return 16 + (bits + 7) // 8 + codec.DIGEST_BYTES * len(self.vote)


@dataclass(frozen=True)
class MsgCVoted:
    att: Attestation
    round: int

    def wire_size(self) -> int:
        return codec.DIGEST_BYTES + 40


@dataclass(frozen=True)
class MsgVote:
    vote: VoteResult

    def wire_size(self) -> int:
        bits = sum(len(v) for v in self.vote.vote.values())
        return 16 + (bits + 7) // 8 + 96


@dataclass(frozen=True)
class MsgPropose:
    ob: OrderingBlock
    proposer: int
    view: int

    def wire_size(self) -> int:
        return self.ob.encoded_size()


@dataclass(frozen=True)
class MsgAttestBlock:
    att: Attestation
    round: int
    view: int

    def wire_size(self) -> int:
        return codec.DIGEST_BYTES + 48


@dataclass(frozen=True)
class MsgFinalOb:
    ob: OrderingBlock

    def wire_size(self) -> int:
        return self.ob.encoded_size()


@dataclass(frozen=True)
class MsgObSyncReq:
    from_round: int
    to_round: int

    def wire_size(self) -> int:
        return 24


@dataclass(frozen=True)
class MsgObSyncResp:
    obs: tuple[OrderingBlock, ...]

    def wire_size(self) -> int:
        return sum(ob.encoded_size() for ob in self.obs) or 8


@dataclass(frozen=True)
class MsgBlockSyncReq:
    """Retrieval of an intact execution block or batch by digest."""

    digest: bytes

    def wire_size(self) -> int:
        return codec.DIGEST_BYTES + 8


@dataclass(frozen=True)
class MsgBlockSyncResp:
    digest: bytes
    eb: object = None
    txs: tuple = ()

    def wire_size(self) -> int:
        n = len(self.txs) + (len(self.eb.itxs) + len(self.eb.ctxs) if self.eb else 0)
        return codec.DIGEST_BYTES + 512 * n


@dataclass(frozen=True)
class MsgVoteSyncReq:
    sid: int
    round: int

    def wire_size(self) -> int:
        return 16


@dataclass(frozen=True)
class MsgCommitRoot:
    att: Attestation
    state_root: bytes
    round: int
    sid: int

    def wire_size(self) -> int:
        return 2 * codec.DIGEST_BYTES + 24


@dataclass(frozen=True)
class MsgSnapshotReq:
    sid: int

    def wire_size(self) -> int:
        return 16


@dataclass(frozen=True)
class MsgSnapshotResp:
    sid: int
    order_round: int
    balances: tuple
    ledger: tuple[LedgerEntry, ...]
    commits: tuple[MsgCommitRoot, ...] = ()

    def wire_size(self) -> int:
        return 64 + 16 * len(self.balances) + 40 * len(self.ledger)


@dataclass(frozen=True)
class TimerTick:
    """Self-addressed timer; carries no network payload."""

    kind: str
    data: tuple = field(default_factory=tuple)

    def wire_size(self) -> int:
        return 0


PROCESSING_MSGS = (
    MsgClientTx,
    MsgCertify,
    MsgCertified,
    MsgBatchPush,
    MsgCVote,
    MsgCVoted,
    MsgBlockSyncReq,
    MsgBlockSyncResp,
    MsgCommitRoot,
    MsgSnapshotReq,
    MsgSnapshotResp,
)

ORDERING_MSGS = (
    MsgCertBlock,
    MsgVote,
    MsgPropose,
    MsgAttestBlock,
    MsgObSyncReq,
    MsgVoteSyncReq,
)

BOTH_MSGS = (MsgFinalOb, MsgObSyncResp)
