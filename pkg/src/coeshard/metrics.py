"""Run metrics: per-transaction lifecycle events folded into a report.

Events arrive from every node; the collector keeps the first sighting per
transaction (event order is deterministic, and finalization rounds agree
across honest nodes by construction), so finalized transactions are
counted once no matter how many shards touched them.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from typing import Optional


def _dist(values: list) -> dict:
    if not values:
        return {"count": 0, "mean": 0.0, "p50": 0, "p95": 0, "max": 0}
    ordered = sorted(values)
    n = len(ordered)
    return {
        "count": n,
        "mean": sum(ordered) / n,
        "p50": ordered[n // 2],
        "p95": ordered[min(n - 1, (n * 95) // 100)],
        "max": ordered[-1],
    }


@dataclass
class TxRecord:
    tx_id: str
    kind: str
    submit_time: int
    ordered_round: Optional[int] = None
    finalized_round: Optional[int] = None
    finalized_time: Optional[int] = None
    outcome: Optional[str] = None
    cause: Optional[str] = None
    lock_wait: int = 0
    deferred: bool = False


class MetricsCollector:
    def __init__(self):
        self.txs: dict[str, TxRecord] = {}
        self.involved: dict[str, tuple] = {}
        self.shard_seen: dict[str, set] = {}
        self.vote_aborts: dict[str, str] = {}
        self.ob_rounds: dict[int, dict] = {}
        self.recovery_events: list[dict] = []
        self.last_submit_time = 0

    # -- lifecycle hooks -------------------------------------------------

    def on_submitted(self, tx) -> None:
        self.txs[tx.tx_id] = TxRecord(
            tx.tx_id,
            tx.kind.value,
            tx.submit_time,
        )
        self.involved[tx.tx_id] = tx.shard_ids()
        self.last_submit_time = max(self.last_submit_time, tx.submit_time)

    def on_finalized(
        self,
        tx_id: str,
        shard: int,
        finalized_round: int,
        time: int,
        outcome: str,
        cause: Optional[str],
        *,
        ordered_round: Optional[int] = None,
        lock_wait: int = 0,
    ) -> None:
        self.shard_seen.setdefault(tx_id, set()).add(shard)
        rec = self.txs.get(tx_id)
        if rec is None or rec.outcome is not None:
            return
        rec.outcome = outcome
        rec.cause = cause if cause else self.vote_aborts.get(tx_id)
        rec.finalized_round = finalized_round
        rec.finalized_time = time
        rec.ordered_round = ordered_round if ordered_round is not None else finalized_round
        rec.lock_wait = max(rec.lock_wait, lock_wait)

    def on_vote_abort(self, tx_id: str, cause: str) -> None:
        self.vote_aborts.setdefault(tx_id, cause)

    def on_lock_wait(self, tx_id: str, rounds: int) -> None:
        rec = self.txs.get(tx_id)
        if rec is not None:
            rec.lock_wait = max(rec.lock_wait, rounds)

    def on_deferred(self, tx_id: str) -> None:
        rec = self.txs.get(tx_id)
        if rec is not None:
            rec.deferred = True

    def on_ob_finalized(self, ob, time: int, cbpool_depth: int) -> None:
        if ob.round in self.ob_rounds:
            return
        self.ob_rounds[ob.round] = {
            "round": ob.round,
            "bytes": ob.encoded_size(),
            "n_cbs": len(ob.eb_digests),
            "n_args": len(ob.args),
            "time": time,
        }
        for plan in ob.reconfig:
            self.recovery_events.append(
                {
                    "round": ob.round,
                    "shard": plan.shard_id,
                    "kind": type(plan).__name__,
                }
            )

    def on_round_applied(self, shard: int, node: int, round_no: int) -> None:
        pass  # per-node application is visible in snapshots; nothing to keep

    # -- reporting --------------------------------------------------------

    def report(self, duration_ticks: int) -> dict:
        finalized = [r for r in self.txs.values() if r.outcome is not None]
        committed = [r for r in finalized if r.outcome == "committed"]
        aborted = [r for r in finalized if r.outcome == "aborted"]
        intra = [r for r in finalized if r.kind == "intra"]
        cross = [r for r in finalized if r.kind == "cross"]
        abort_causes: dict[str, int] = {}
        for r in aborted:
            abort_causes[r.cause or "execution"] = abort_causes.get(r.cause or "execution", 0) + 1
        lock_waits = [r.lock_wait for r in finalized if r.lock_wait > 0]
        report = {
            "submitted": len(self.txs),
            "finalized": len(finalized),
            "committed": len(committed),
            "aborted": len(aborted),
            "abort_causes": dict(sorted(abort_causes.items())),
            "throughput_per_1000_ticks": (
                1000.0 * len(finalized) / duration_ticks if duration_ticks else 0.0
            ),
            "intra_latency_rounds": _dist(
                [r.finalized_round - r.ordered_round for r in intra]
            ),
            "intra_latency_ticks": _dist(
                [r.finalized_time - r.submit_time for r in intra]
            ),
            "cross_latency_rounds": _dist(
                [r.finalized_round - r.ordered_round for r in cross]
            ),
            "cross_latency_ticks": _dist(
                [r.finalized_time - r.submit_time for r in cross]
            ),
            "deferred_txs": sum(1 for r in finalized if r.deferred),
            "lock_waits": _dist(lock_waits),
            "lock_wait_txs": len(lock_waits),
            "recovery_events": list(self.recovery_events),
            "ob_rounds": [self.ob_rounds[r] for r in sorted(self.ob_rounds)],
            "duration_ticks": duration_ticks,
        }
        return report

    def unfinalized(self) -> list[str]:
        return sorted(t for t, r in self.txs.items() if r.outcome is None)

    def all_shards_done(self) -> bool:
        """Every submitted transaction finalized on every involved shard."""
        for tx_id, shards in self.involved.items():
            seen = self.shard_seen.get(tx_id, ())
            if any(s not in seen for s in shards):
                return False
        return True


def write_report(report: dict, json_path, csv_path) -> None:
    with open(json_path, "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["metric", "value"])
        for key in sorted(report):
            value = report[key]
            if isinstance(value, (int, float, str)):
                writer.writerow([key, value])
            elif isinstance(value, dict):
                for sub in sorted(value):
                    writer.writerow([f"{key}.{sub}", value[sub]])
        for row in report.get("ob_rounds", []):
            writer.writerow(
                [f"ob_round.{row['round']}", f"{row['bytes']}B cbs={row['n_cbs']} args={row['n_args']}"]
            )
