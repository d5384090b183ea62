"""Certify/order/execute sharded-ledger toolkit.

Three things live here:

* shard-sizing math (hypergeometric committee sampling, bottleneck
  estimates, recovery cost arithmetic) in :mod:`coeshard.sizing`;
* a deterministic discrete-event simulator of the full protocol
  (processing shards, one ordering shard, lock-free cross-shard
  commitment, fault injection) in :mod:`coeshard.simnet`,
  :mod:`coeshard.processing` and :mod:`coeshard.ordering`;
* a scenario harness with a global property checker and a two-phase-lock
  baseline executor in :mod:`coeshard.runner` / :mod:`coeshard.checker`.
"""

from coeshard.sizing import (
    SizingParams,
    SizingResult,
    pr_fau,
    pr_liveness,
    min_shard_size,
    bottleneck_shards,
    availability_from_liveness,
    recovery_cost_expectation,
)

__all__ = [
    "SizingParams",
    "SizingResult",
    "pr_fau",
    "pr_liveness",
    "min_shard_size",
    "bottleneck_shards",
    "availability_from_liveness",
    "recovery_cost_expectation",
]

__version__ = "0.1.0"
