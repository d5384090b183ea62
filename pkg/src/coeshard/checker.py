"""Global property checker: the protocol's guarantees as assertions.

Works on the post-run artifacts (node snapshots, workload, optional
trace); every verdict carries a counterexample slice when it fails.
Safety properties are asserted on every run; the liveness verdict is only
claimed when the caller vouches the fault plan stayed within the liveness
thresholds and the run had a drain horizon.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional


@dataclass
class Verdict:
    prop: str
    ok: bool
    detail: dict = field(default_factory=dict)

    def __bool__(self) -> bool:
        return self.ok


def _honest_processing(snapshots: dict):
    byz = {int(k) for k in snapshots.get("faults", {}).get("byzantine", {})}
    return [s for s in snapshots["processing"] if s["node"] not in byz]


def check(
    snapshots: dict,
    txs: Optional[list] = None,
    trace: Optional[list] = None,
    *,
    assert_liveness: bool = False,
    submitted_ids: Optional[set] = None,
) -> list[Verdict]:
    verdicts = [
        check_prefix_safety(snapshots),
        check_atomicity(snapshots),
        check_consistency(snapshots),
        check_one_ob_per_round(snapshots),
        check_token_conservation(snapshots),
    ]
    if txs is not None:
        verdicts.append(check_replay(snapshots, txs))
    if assert_liveness:
        verdicts.append(check_liveness(snapshots, submitted_ids or set()))
    if trace is not None:
        for v in verdicts:
            if not v.ok:
                v.detail["trace_slice"] = trace[-20:]
    return verdicts


def check_prefix_safety(snapshots: dict) -> Verdict:
    """Within a shard, any two honest ledgers agree entry-by-entry on
    their common prefix (one is a prefix of the other, since entries are
    dense in rounds)."""
    by_shard: dict = {}
    for snap in _honest_processing(snapshots):
        by_shard.setdefault(snap["shard"], []).append(snap)
    for sid, snaps in sorted(by_shard.items()):
        seen: dict = {}
        for snap in snaps:
            for entry in snap["ledger"]:
                key = entry["round"]
                prior = seen.get(key)
                if prior is None:
                    seen[key] = (entry, snap["node"])
                elif prior[0] != entry:
                    return Verdict(
                        "prefix_safety",
                        False,
                        {
                            "shard": sid,
                            "round": key,
                            "nodes": [prior[1], snap["node"]],
                            "entries": [prior[0], entry],
                        },
                    )
    return Verdict("prefix_safety", True)


def _shard_outcomes(snapshots: dict) -> dict:
    """Per shard: the longest honest ledger's outcome map and order."""
    out: dict = {}
    for snap in _honest_processing(snapshots):
        sid = snap["shard"]
        if sid not in out or snap["order_round"] > out[sid]["order_round"]:
            order = []
            outcomes = {}
            for entry in snap["ledger"]:
                for tx_id, res in entry["outcomes"]:
                    order.append(tx_id)
                    outcomes[tx_id] = (res, entry["round"])
            out[sid] = {
                "order_round": snap["order_round"],
                "order": order,
                "outcomes": outcomes,
            }
    return out


def check_atomicity(snapshots: dict) -> Verdict:
    """Every finalized cross-shard transaction carries the same outcome on
    all shards that finalized it."""
    per_shard = _shard_outcomes(snapshots)
    seen: dict = {}
    for sid, data in sorted(per_shard.items()):
        for tx_id, (res, rnd) in data["outcomes"].items():
            if tx_id in seen and seen[tx_id][0] != res:
                return Verdict(
                    "cross_shard_atomicity",
                    False,
                    {
                        "tx": tx_id,
                        "outcomes": {seen[tx_id][1]: seen[tx_id][0], sid: res},
                        "round": rnd,
                    },
                )
            seen.setdefault(tx_id, (res, sid))
    return Verdict("cross_shard_atomicity", True)


def check_consistency(snapshots: dict) -> Verdict:
    """Any two shards finalize their shared cross-shard transactions in
    the same relative order."""
    per_shard = _shard_outcomes(snapshots)
    sids = sorted(per_shard)
    for i, a in enumerate(sids):
        for b in sids[i + 1 :]:
            common = set(per_shard[a]["outcomes"]) & set(per_shard[b]["outcomes"])
            if not common:
                continue
            seq_a = [t for t in per_shard[a]["order"] if t in common]
            seq_b = [t for t in per_shard[b]["order"] if t in common]
            if seq_a != seq_b:
                diverge = next(
                    (idx for idx, (x, y) in enumerate(zip(seq_a, seq_b)) if x != y),
                    min(len(seq_a), len(seq_b)),
                )
                return Verdict(
                    "cross_shard_consistency",
                    False,
                    {
                        "shards": [a, b],
                        "diverge_at": diverge,
                        "a": seq_a[max(0, diverge - 2) : diverge + 3],
                        "b": seq_b[max(0, diverge - 2) : diverge + 3],
                    },
                )
    return Verdict("cross_shard_consistency", True)


def check_one_ob_per_round(snapshots: dict) -> Verdict:
    seen: dict = {}
    for snap in snapshots.get("ordering", []):
        for round_str, digest in snap.get("ob_digests", {}).items():
            prior = seen.get(round_str)
            if prior is None:
                seen[round_str] = (digest, snap["node"])
            elif prior[0] != digest:
                return Verdict(
                    "one_ob_per_round",
                    False,
                    {"round": int(round_str), "nodes": [prior[1], snap["node"]]},
                )
    return Verdict("one_ob_per_round", True)


def check_token_conservation(snapshots: dict) -> Verdict:
    """Transfer-only workloads keep each shard's total supply constant."""
    genesis = snapshots.get("genesis", {})
    for snap in _honest_processing(snapshots):
        sid = str(snap["shard"])
        expected = sum(genesis.get(sid, {}).values())
        got = sum(snap["balances"].values())
        if expected and got != expected:
            return Verdict(
                "token_conservation",
                False,
                {"shard": snap["shard"], "node": snap["node"], "expected": expected, "got": got},
            )
    return Verdict("token_conservation", True)


def check_replay(snapshots: dict, txs: list) -> Verdict:
    """Data-availability replay: re-executing each shard's finalized
    sequence from genesis reproduces every recorded state root.  Works on
    the longest honest ledger per shard."""
    from coeshard.types import state_root_of

    tx_by_id = {}
    for tx in txs:
        tx_id = tx["tx_id"] if isinstance(tx, dict) else tx.tx_id
        tx_by_id[tx_id] = tx

    def sub_ops_of(tx, sid):
        if isinstance(tx, dict):
            for op in tx["sub_ops"]:
                if op["shard_id"] == sid:
                    yield (
                        op["contract_id"],
                        op["debit_account"],
                        op["debit_amount"],
                        op["credit_account"],
                        op["credit_amount"],
                    )
        else:
            for op in tx.sub_ops:
                if op.shard_id == sid:
                    yield (
                        op.contract_id,
                        op.debit_account,
                        op.debit_amount,
                        op.credit_account,
                        op.credit_amount,
                    )

    genesis = snapshots.get("genesis", {})
    best: dict = {}
    for snap in _honest_processing(snapshots):
        sid = snap["shard"]
        if sid not in best or snap["order_round"] > best[sid]["order_round"]:
            best[sid] = snap
    for sid, snap in sorted(best.items()):
        state = {}
        for key, value in genesis.get(str(sid), {}).items():
            contract, account = key.split("/")
            state[(contract, account)] = value
        for entry in snap["ledger"]:
            for tx_id, outcome in entry["outcomes"]:
                if outcome != "committed":
                    continue
                tx = tx_by_id.get(tx_id)
                if tx is None:
                    return Verdict(
                        "replay_determinism",
                        False,
                        {"shard": sid, "tx": tx_id, "reason": "unknown tx in ledger"},
                    )
                for contract, debit, damt, credit, camt in sub_ops_of(tx, sid):
                    dk, ck = (contract, debit), (contract, credit)
                    if state.get(dk, 0) < damt:
                        return Verdict(
                            "replay_determinism",
                            False,
                            {
                                "shard": sid,
                                "tx": tx_id,
                                "round": entry["round"],
                                "reason": "committed debit uncovered on replay",
                            },
                        )
                    state[dk] = state.get(dk, 0) - damt
                    state[ck] = state.get(ck, 0) + camt
            root = state_root_of(state)
            if root.hex() != entry["state_root"]:
                return Verdict(
                    "replay_determinism",
                    False,
                    {"shard": sid, "round": entry["round"], "reason": "state root mismatch"},
                )
    return Verdict("replay_determinism", True)


def check_liveness(snapshots: dict, submitted_ids: set) -> Verdict:
    """Every submitted transaction finalized by run end (claimed only for
    fault plans within the liveness thresholds)."""
    per_shard = _shard_outcomes(snapshots)
    finalized = set()
    for data in per_shard.values():
        finalized.update(data["outcomes"])
    missing = sorted(submitted_ids - finalized)
    if missing:
        return Verdict(
            "sharding_liveness",
            False,
            {"missing": missing[:10], "missing_count": len(missing)},
        )
    return Verdict("sharding_liveness", True)
