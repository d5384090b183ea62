"""Protocol data model: canonical encoding, digests, quorum arithmetic."""

from fractions import Fraction

import pytest
from hypothesis import given, settings, strategies as st

from coeshard import codec
from coeshard.types import (
    Aggregator,
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
    fold_vote_bits,
    state_root_of,
    verify_quorum,
)

# Snapshot of the empty execution block's digest, recorded at first build.
# Any change here is a wire-format break.
EMPTY_EB_DIGEST = "1a3dd72c224762d9e742a87299a094951aeb0b9e414fbde520d044a6aa924ed3"


def intra_tx(tx_id="t1", sid=1, contract="tok1", a="alice", b="bob", amt=5):
    return Transaction(
        tx_id=tx_id,
        kind=TxKind.INTRA,
        sub_ops=(SubOperation(sid, contract, a, amt, b, amt),),
        submit_time=0,
    )


def cross_tx(tx_id="c1", s1=1, s2=2, amt1=10, amt2=7):
    return Transaction(
        tx_id=tx_id,
        kind=TxKind.CROSS,
        sub_ops=(
            SubOperation(s1, f"tok{s1}", "alice", amt1, "bob", amt1),
            SubOperation(s2, f"tok{s2}", "bob", amt2, "alice", amt2),
        ),
        submit_time=0,
    )


sub_ops = st.builds(
    SubOperation,
    shard_id=st.integers(0, 5),
    contract_id=st.sampled_from(["tok0", "tok1", "tok2"]),
    debit_account=st.sampled_from(["a", "b", "c"]),
    debit_amount=st.integers(0, 10**6),
    credit_account=st.sampled_from(["a", "b", "c"]),
    credit_amount=st.integers(0, 10**6),
)


@st.composite
def transactions(draw):
    if draw(st.booleans()):
        op = draw(sub_ops)
        return Transaction(draw(st.uuids()).hex, TxKind.INTRA, (op,), draw(st.integers(0, 100)))
    s1, s2 = draw(st.sampled_from([(0, 1), (1, 2), (0, 2), (3, 4)]))
    o1 = draw(sub_ops.map(lambda o: SubOperation(s1, o.contract_id, o.debit_account, o.debit_amount, o.credit_account, o.credit_amount)))
    o2 = draw(sub_ops.map(lambda o: SubOperation(s2, o.contract_id, o.debit_account, o.debit_amount, o.credit_account, o.credit_amount)))
    return Transaction(draw(st.uuids()).hex, TxKind.CROSS, (o1, o2), draw(st.integers(0, 100)))


attestations = st.builds(
    Attestation,
    signer=st.integers(0, 40),
    subject=st.binary(min_size=32, max_size=32),
    valid=st.booleans(),
)


class TestCodecRoundtrip:
    @settings(max_examples=100, deadline=None)
    @given(transactions())
    def test_transaction(self, tx):
        assert codec.decode(codec.encode(tx)) == tx

    @settings(max_examples=50, deadline=None)
    @given(st.lists(transactions(), max_size=4), st.integers(0, 5), st.integers(0, 30))
    def test_execution_block(self, txs, sid, creator):
        itxs = tuple(
            Transaction(t.tx_id, TxKind.INTRA, tuple(SubOperation(sid, o.contract_id, o.debit_account, o.debit_amount, o.credit_account, o.credit_amount) for o in t.sub_ops[:1]), t.submit_time)
            for t in txs
        )
        eb = ExecutionBlock(itxs=itxs, ctxs=(), sid=sid, creator=creator)
        assert codec.decode(codec.encode(eb)) == eb

    @settings(max_examples=50, deadline=None)
    @given(st.lists(attestations, max_size=6))
    def test_quorum_attestation(self, atts):
        qa = QuorumAttestation(tuple(atts))
        assert codec.decode(codec.encode(qa)) == qa

    @settings(max_examples=50, deadline=None)
    @given(
        st.dictionaries(st.binary(min_size=4, max_size=8), st.sampled_from(["0", "1", "10", "011"]), max_size=4),
        st.integers(0, 50),
        st.integers(0, 5),
    )
    def test_vote_result(self, vote, rnd, sid):
        vr = VoteResult(vote=vote, round=rnd, sid=sid)
        assert codec.decode(codec.encode(vr)) == vr

    def test_ordering_block(self):
        rec = BatchRecord(b"\x01" * 32, 1, 2, (TxMeta("c1", (("tok1", "a"), ("tok2", "b"))),))
        ob = OrderingBlock(
            args=(Aggregator(3, {b"\x01" * 32: "10"}),),
            eb_digests=((1, b"\x02" * 32, 7),),
            ctx_meta=(rec,),
            round=5,
        )
        assert codec.decode(codec.encode(ob)) == ob

    def test_ledger_entry(self):
        entry = LedgerEntry(4, (("t1", "committed"), ("t2", "aborted")), b"\x03" * 32)
        assert codec.decode(codec.encode(entry)) == entry

    def test_shard_config(self):
        cfg = ShardConfig(2, (1, 5, 9), Fraction(57, 100), Fraction(42, 100), "processing")
        assert codec.decode(codec.encode(cfg)) == cfg


class TestDigests:
    def test_determinism(self):
        eb = ExecutionBlock((intra_tx(),), (), 1, 3)
        again = ExecutionBlock((intra_tx(),), (), 1, 3)
        assert codec.digest(eb) == codec.digest(again)

    def test_creator_changes_digest(self):
        a = ExecutionBlock((intra_tx(),), (), 1, 3)
        b = ExecutionBlock((intra_tx(),), (), 1, 4)
        assert codec.digest(a) != codec.digest(b)

    def test_empty_block_golden(self):
        eb = ExecutionBlock(itxs=(), ctxs=(), sid=0, creator=0)
        assert codec.digest(eb).hex() == EMPTY_EB_DIGEST

    def test_registry_accepts_duplicates_and_counts(self):
        reg = codec.DigestRegistry()
        eb = ExecutionBlock((), (), 0, 0)
        d1 = reg.record(eb)
        d2 = reg.record(ExecutionBlock((), (), 0, 0))
        assert d1 == d2
        assert len(reg) == 1

    @settings(max_examples=60, deadline=None)
    @given(st.lists(transactions(), min_size=2, max_size=6, unique_by=lambda t: t.tx_id))
    def test_injective_on_corpus(self, txs):
        digests = {codec.digest(tx) for tx in txs}
        assert len(digests) == len(txs)

    def test_batch_digest_depends_on_order(self):
        a, b = cross_tx("c1"), cross_tx("c2")
        assert batch_digest_of([a, b]) != batch_digest_of([b, a])


class TestTransactionInvariants:
    def test_intra_must_be_single_shard(self):
        with pytest.raises(ValueError):
            Transaction(
                "bad",
                TxKind.INTRA,
                (
                    SubOperation(1, "tok1", "a", 1, "b", 1),
                    SubOperation(2, "tok2", "a", 1, "b", 1),
                ),
            )

    def test_cross_needs_two_distinct_shards(self):
        with pytest.raises(ValueError):
            Transaction("bad", TxKind.CROSS, (SubOperation(1, "tok1", "a", 1, "b", 1),))
        with pytest.raises(ValueError):
            Transaction(
                "bad",
                TxKind.CROSS,
                (
                    SubOperation(1, "tok1", "a", 1, "b", 1),
                    SubOperation(1, "tok1", "c", 1, "d", 1),
                ),
            )

    def test_block_rejects_foreign_and_duplicate_txs(self):
        with pytest.raises(ValueError):
            ExecutionBlock((intra_tx(sid=2),), (), 1, 0)
        tx = cross_tx("dup")
        with pytest.raises(ValueError):
            ExecutionBlock((), (tx, tx), 1, 0)

    def test_negative_amount_rejected(self):
        with pytest.raises(ValueError):
            SubOperation(1, "tok1", "a", -4, "b", 4)


class TestShardConfig:
    def test_processing_threshold_sum(self):
        with pytest.raises(ValueError):
            ShardConfig(1, (1, 2, 3), "0.6", "0.4", "processing")
        ShardConfig(1, (1, 2, 3), "0.57", "0.42", "processing")

    def test_ordering_thresholds(self):
        with pytest.raises(ValueError):
            ShardConfig(0, (1, 2, 3), "0.4", "0.4", "ordering")
        with pytest.raises(ValueError):
            ShardConfig(0, (1, 2, 3), Fraction(1, 3), Fraction(1, 4), "ordering")
        ShardConfig(0, (1, 2, 3), Fraction(33, 100), Fraction(33, 100), "ordering")

    def test_quorum_arithmetic(self):
        cfg = ShardConfig(1, tuple(range(13)), "0.57", "0.42", "processing")
        assert cfg.certify_quorum() == 8  # floor(0.57 * 13) + 1
        ocfg = ShardConfig(0, tuple(range(21)), Fraction(1, 3), Fraction(1, 3), "ordering")
        assert ocfg.consensus_quorum() == 15  # floor(2/3 * 21) + 1

    def test_exact_integer_product(self):
        # floor(0.55 * 20) must be 11, not a float artefact
        cfg = ShardConfig(1, tuple(range(20)), 0.55, 0.40, "processing")
        assert cfg.certify_quorum() == 12


class TestVerifyQuorum:
    def make(self, signers, subject=b"\x07" * 32, valid=True):
        return QuorumAttestation(tuple(Attestation(s, subject, valid) for s in signers))

    def test_threshold_met(self):
        shard = ShardConfig(1, tuple(range(20)), "0.55", "0.40", "processing")
        assert verify_quorum(self.make(range(12)), shard, "processing")

    def test_threshold_missed(self):
        shard = ShardConfig(1, tuple(range(20)), "0.55", "0.40", "processing")
        assert not verify_quorum(self.make(range(11)), shard, "processing")

    def test_all_invalid_flags(self):
        shard = ShardConfig(1, tuple(range(20)), "0.55", "0.40", "processing")
        assert not verify_quorum(self.make(range(20), valid=False), shard, "processing")

    def test_unknown_signers_do_not_count(self):
        shard = ShardConfig(1, tuple(range(10)), "0.55", "0.40", "processing")
        atts = self.make(range(100, 120))
        assert not verify_quorum(atts, shard, "processing")

    def test_duplicate_signers_count_once(self):
        shard = ShardConfig(1, tuple(range(20)), "0.55", "0.40", "processing")
        atts = QuorumAttestation(
            tuple(Attestation(3, b"\x07" * 32, True) for _ in range(15))
        )
        assert not verify_quorum(atts, shard, "processing")

    def test_subject_binding(self):
        shard = ShardConfig(1, tuple(range(20)), "0.55", "0.40", "processing")
        atts = self.make(range(12), subject=b"\x09" * 32)
        assert not verify_quorum(atts, shard, "processing", subject=b"\x07" * 32)

    def test_ordering_threshold(self):
        shard = ShardConfig(0, tuple(range(21)), Fraction(1, 3), Fraction(1, 3), "ordering")
        assert verify_quorum(self.make(range(15)), shard, "ordering")
        assert not verify_quorum(self.make(range(14)), shard, "ordering")


class TestVoteFolding:
    def test_and_table(self):
        assert fold_vote_bits({b"k": "11"}, {b"k": "10"}) == {b"k": "10"}
        assert fold_vote_bits({b"k": "0"}, {b"k": "1"}) == {b"k": "0"}

    def test_identity(self):
        v = {b"k": "101"}
        assert fold_vote_bits({}, v) == v

    def test_three_shard_fold_matches_truth_table(self):
        for a in "01":
            for b in "01":
                for c in "01":
                    out = {}
                    for bits in (a, b, c):
                        out = fold_vote_bits(out, {b"k": bits})
                    expected = "1" if a == b == c == "1" else "0"
                    assert out == {b"k": expected}

    @settings(max_examples=60, deadline=None)
    @given(
        st.lists(
            st.dictionaries(
                st.sampled_from([b"k1", b"k2", b"k3"]),
                st.sampled_from(["0", "1"]),
                min_size=1,
                max_size=3,
            ),
            min_size=2,
            max_size=5,
        )
    )
    def test_commutative_order_independent(self, votes):
        import itertools

        results = set()
        for perm in itertools.permutations(votes):
            acc = {}
            for v in perm:
                acc = fold_vote_bits(acc, v)
            results.add(tuple(sorted(acc.items())))
        assert len(results) == 1

    def test_length_mismatch_rejected(self):
        with pytest.raises(ValueError):
            fold_vote_bits({b"k": "11"}, {b"k": "1"})


def test_state_root_is_order_insensitive():
    a = state_root_of({("tok1", "a"): 5, ("tok2", "b"): 9})
    b = state_root_of({("tok2", "b"): 9, ("tok1", "a"): 5})
    assert a == b
