"""Scenario configuration, seeded workload generation and fault drawing.

A scenario is everything a run depends on; together with the seed it
determines the run byte-for-byte.  Config files may be TOML or JSON with
the same field names; ``COESHARD_SEED`` and ``COESHARD_OUT`` override the
seed and output directory from the environment.
"""

from __future__ import annotations

import dataclasses
import json
import os
import random
from dataclasses import dataclass, field
from typing import Optional

try:
    import tomllib
except ModuleNotFoundError:  # pragma: no cover - 3.10 fallback
    import tomli as tomllib

from coeshard.simnet import (
    BEHAVIORS,
    EQUIVOCATE,
    FaultPlan,
    INVALID_ATTEST,
    WITHHOLD,
    BootstrapResult,
    _sub_rng,
)
from coeshard.sizing import SizingError, plan_shards
from coeshard.types import SubOperation, Transaction, TxKind

LOCK_FREE = "coe_lockfree"
TWO_PHASE = "two_phase_lock"


@dataclass
class ScenarioConfig:
    n: int = 50
    s: str = "0.15"
    lambda_bits: int = 20
    f_l_target: str = "0.41"
    ctx_ratio: float = 0.20
    tx_rate: float = 200.0  # expected submissions per 1000 ticks
    total_txs: int = 400
    duration_rounds: int = 30
    drain_rounds: int = 10
    epoch_length: int = 20
    gst: int = 0
    delta: int = 100
    pre_gst_max_delay: int = 1000
    drop_rate_pre_gst: float = 0.0
    seed: int = 1
    executor: str = LOCK_FREE
    block_capacity: int = 500
    accounts_per_shard: int = 32
    genesis_balance: int = 1_000_000
    amount_min: int = 1
    amount_max: int = 50
    hotspot_fraction: float = 0.0
    submit_to: str = "honest"  # "honest" | "any"
    crashed: dict = field(default_factory=dict)  # node -> tick
    byzantine: dict = field(default_factory=dict)  # node -> behaviour
    allow_threshold_breach: bool = False
    collect_trace: bool = True
    strict_monitors: bool = False
    early_stop: bool = True
    max_ticks: int = 0  # 0 -> derived from duration_rounds

    def __post_init__(self):
        if self.executor not in (LOCK_FREE, TWO_PHASE):
            raise ValueError(f"unknown executor {self.executor!r}")
        if not (0.0 <= self.ctx_ratio <= 1.0):
            raise ValueError("ctx_ratio must be in [0, 1]")
        if self.submit_to not in ("honest", "any"):
            raise ValueError("submit_to must be 'honest' or 'any'")
        for behaviour in self.byzantine.values():
            if behaviour not in BEHAVIORS:
                raise ValueError(f"unknown behaviour {behaviour!r}")
        # must be sizeable at all, or the run can never bootstrap
        plan_shards(self.n, self.s, self.lambda_bits, self.f_l_target)

    # -- derived knobs --------------------------------------------------

    @property
    def round_interval(self) -> int:
        return 2 * self.delta

    @property
    def view_timeout(self) -> int:
        return 12 * self.delta

    @property
    def block_interval(self) -> int:
        return 2 * self.delta

    @property
    def heartbeat_interval(self) -> int:
        return 16 * self.delta

    def tick_budget(self) -> int:
        if self.max_ticks:
            return self.max_ticks
        # a round takes at most interval + consensus round trip; leave slack
        # for view changes and pre-GST turbulence
        per_round = self.round_interval + 4 * self.delta + 2 * self.view_timeout
        return self.gst + self.duration_rounds * per_round + 20 * self.delta

    def fault_plan(self) -> FaultPlan:
        return FaultPlan(
            crashed={int(k): v for k, v in self.crashed.items()},
            byzantine={int(k): v for k, v in self.byzantine.items()},
            allow_threshold_breach=self.allow_threshold_breach,
        )

    def to_json(self) -> dict:
        return dataclasses.asdict(self)


def load_config(path: str) -> ScenarioConfig:
    if str(path).endswith(".toml"):
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    else:
        with open(path) as fh:
            raw = json.load(fh)
    known = {f.name for f in dataclasses.fields(ScenarioConfig)}
    unknown = set(raw) - known
    if unknown:
        raise SizingError(f"unknown config fields: {sorted(unknown)}")
    cfg = ScenarioConfig(**raw)
    env_seed = os.environ.get("COESHARD_SEED")
    if env_seed is not None:
        cfg = dataclasses.replace(cfg, seed=int(env_seed))
    return cfg


# ---------------------------------------------------------------------------
# workload


def _account(sid: int, idx: int) -> str:
    return f"a{sid}_{idx}"


def contract_of(sid: int) -> str:
    return f"tok{sid}"


def genesis_state(shard_ids, accounts_per_shard: int, balance: int) -> dict:
    state = {}
    for sid in shard_ids:
        for i in range(accounts_per_shard):
            state[(contract_of(sid), _account(sid, i))] = balance
    return state


def generate_workload(config: ScenarioConfig, shard_ids) -> list[Transaction]:
    """Seeded Poisson arrivals.  Cross-shard transactions are one-shot
    atomic swaps across two shards; the optional hotspot funnels a fraction
    of them through one account of the first shard's contract."""
    rng = _sub_rng(config.seed, "workload")
    shard_ids = sorted(shard_ids)
    txs = []
    t = float(config.gst)
    rate_per_tick = config.tx_rate / 1000.0
    for i in range(config.total_txs):
        t += rng.expovariate(rate_per_tick)
        at = int(t) + 1
        amount = rng.randint(config.amount_min, config.amount_max)
        if len(shard_ids) >= 2 and rng.random() < config.ctx_ratio:
            s1, s2 = rng.sample(shard_ids, 2)
            hot = config.hotspot_fraction > 0 and rng.random() < config.hotspot_fraction
            if hot:
                s1 = shard_ids[0]
                if s2 == s1:
                    s2 = shard_ids[1]
                a1 = _account(s1, 0)
            else:
                a1 = _account(s1, rng.randrange(config.accounts_per_shard))
            b1 = _account(s1, rng.randrange(config.accounts_per_shard))
            a2 = _account(s2, rng.randrange(config.accounts_per_shard))
            b2 = _account(s2, rng.randrange(config.accounts_per_shard))
            amount2 = rng.randint(config.amount_min, config.amount_max)
            tx = Transaction(
                tx_id=f"c{i:06d}",
                kind=TxKind.CROSS,
                sub_ops=(
                    SubOperation(s1, contract_of(s1), a1, amount, b1, amount),
                    SubOperation(s2, contract_of(s2), a2, amount2, b2, amount2),
                ),
                submit_time=at,
            )
        else:
            sid = rng.choice(shard_ids)
            a = _account(sid, rng.randrange(config.accounts_per_shard))
            b = _account(sid, rng.randrange(config.accounts_per_shard))
            tx = Transaction(
                tx_id=f"i{i:06d}",
                kind=TxKind.INTRA,
                sub_ops=(SubOperation(sid, contract_of(sid), a, amount, b, amount),),
                submit_time=at,
            )
        txs.append(tx)
    return txs


def submission_targets(
    config: ScenarioConfig, boot: BootstrapResult, txs, faulty: frozenset
) -> list[tuple]:
    """Pick the member each transaction is submitted to.  The liveness
    definition covers transactions sent to honest nodes, so the default
    targets honest members; 'any' removes that guarantee."""
    rng = _sub_rng(config.seed, "submit")
    by_sid = {cfg.shard_id: cfg for cfg in boot.processing}
    out = []
    for tx in txs:
        home = tx.sub_ops[0].shard_id
        members = list(by_sid[home].members)
        if config.submit_to == "honest":
            candidates = [m for m in members if m not in faulty] or members
        else:
            candidates = members
        out.append((tx, rng.choice(candidates)))
    return out


# ---------------------------------------------------------------------------
# fault drawing


def draw_fault_plan(
    boot: BootstrapResult,
    seed: int,
    *,
    processing_limit: str = "f_s",  # "f_s" | "f_l" | "none"
    behaviours: tuple = (WITHHOLD, INVALID_ATTEST),
    ordering_faults: int = 0,
    equivocator: bool = False,
    crash_instead: float = 0.0,
    allow_threshold_breach: bool = False,
) -> FaultPlan:
    """Draw per-shard Byzantine sets up to the requested threshold.

    ``f_s`` draws up to the stall-capable safety ceiling; ``f_l`` stays
    within the liveness threshold so every shard keeps certifying.
    """
    rng = random.Random(_sub_rng(seed, "faults").randrange(2**63))
    byz: dict[int, str] = {}
    crashed: dict[int, int] = {}
    ordering_members = set(boot.ordering.members)
    for cfg in boot.processing:
        m = cfg.size
        if processing_limit == "f_s":
            cap = int(cfg.f_s * m)
        elif processing_limit == "f_l":
            cap = int(cfg.f_l * m)
        else:
            cap = 0
        # nodes serving double duty stay honest so the ordering ceiling
        # cannot be breached through a processing draw
        eligible = [v for v in cfg.members if v not in ordering_members]
        count = rng.randint(0, min(cap, len(eligible)))
        picked = rng.sample(sorted(eligible), count)
        for v in picked:
            if crash_instead > 0 and rng.random() < crash_instead:
                crashed[v] = rng.randint(1, 2000)
            else:
                byz[v] = behaviours[rng.randrange(len(behaviours))]
    if ordering_faults > 0:
        picked = rng.sample(sorted(ordering_members), ordering_faults)
        for i, v in enumerate(picked):
            if equivocator and i == 0:
                byz[v] = EQUIVOCATE
            else:
                byz[v] = behaviours[rng.randrange(len(behaviours))]
    elif equivocator:
        v = rng.choice(sorted(ordering_members))
        byz[v] = EQUIVOCATE
    return FaultPlan(
        crashed=crashed, byzantine=byz, allow_threshold_breach=allow_threshold_breach
    )
