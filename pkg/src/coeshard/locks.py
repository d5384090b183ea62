"""State-key lock table for the two-phase-lock baseline executor.

A cross-shard transaction locks its state keys at vote time and holds them
until the coordinator's aggregate decides commit or abort.  Transactions
ordered in a *later* round than a lock holder must wait; transactions of
the same round execute serially in the global order instead (a round is
applied atomically, so within-round conflicts cannot be interleaved).
Queued items never overtake an earlier queued item that shares a key, and
waits-for edges only point at strictly earlier positions in the global
order, so the table is deadlock-free.
"""

from __future__ import annotations

from dataclasses import dataclass, field


@dataclass
class QueuedTx:
    tx_id: str
    keys: tuple
    enqueue_round: int
    kind: str  # "ctx" | "itx"
    payload: object = None


@dataclass
class LockTable:
    holders: dict = field(default_factory=dict)  # key -> {tx_id: round}
    queue: list = field(default_factory=list)  # QueuedTx in global order

    def blocked(self, keys, round_no: int, include_same_round: bool = False) -> bool:
        """True when any key is held by an earlier-round transaction (or by
        anyone, for intra-shard reads) or an earlier queued item shares a
        key."""
        queued_keys = {k for item in self.queue for k in item.keys}
        for key in keys:
            if key in queued_keys:
                return True
            for _tx, held_round in self.holders.get(key, {}).items():
                if include_same_round or held_round < round_no:
                    return True
        return False

    def acquire(self, tx_id: str, keys, round_no: int) -> None:
        for key in keys:
            self.holders.setdefault(key, {})[tx_id] = round_no

    def release(self, tx_id: str) -> None:
        for key in [k for k, hs in self.holders.items() if tx_id in hs]:
            del self.holders[key][tx_id]
            if not self.holders[key]:
                del self.holders[key]

    def enqueue(self, item: QueuedTx) -> None:
        self.queue.append(item)

    def drain_ready(self):
        """Yield queued items in order whose blockers are gone.  The head
        of the queue only waits on holders; later items also wait on
        earlier queued items sharing keys."""
        progressed = True
        while progressed:
            progressed = False
            taken_keys: set = set()
            for item in list(self.queue):
                if any(k in taken_keys for k in item.keys):
                    taken_keys.update(item.keys)
                    continue
                held = False
                for key in item.keys:
                    hs = self.holders.get(key, {})
                    if item.kind == "itx" and hs:
                        held = True
                        break
                    if any(r < item.enqueue_round for r in hs.values()):
                        held = True
                        break
                if held:
                    taken_keys.update(item.keys)
                    continue
                self.queue.remove(item)
                progressed = True
                yield item
                break
