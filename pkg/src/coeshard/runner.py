"""Scenario runner: bootstrap, node wiring, drive, artifact emission."""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

from coeshard import codec, messages as msg
from coeshard.metrics import MetricsCollector, write_report
from coeshard.ordering import OrderingNode, SizingContext
from coeshard.processing import ProcessingNode
from coeshard.scenario import (
    ScenarioConfig,
    contract_of,
    generate_workload,
    genesis_state,
    submission_targets,
)
from coeshard.simnet import (
    BootstrapResult,
    NetConfig,
    NodeHost,
    Simulation,
    bootstrap,
)
from coeshard.sizing import as_fraction
from coeshard.types import OrderingBlock, RecoveryPlan, verify_quorum


class StandbyWatcher:
    """Reserve node: watches finalized ordering blocks for a recovery plan
    that drafts it into a shard, then hands the host a joining node."""

    def __init__(self, sim: Simulation, node_id: int, directory: dict, factory):
        self.sim = sim
        self.node_id = node_id
        self.directory = directory
        self.factory = factory

    def on_timer(self, tick) -> None:
        pass

    def on_message(self, m, sender: int) -> None:
        obs = ()
        if isinstance(m, msg.MsgFinalOb):
            obs = (m.ob,)
        elif isinstance(m, msg.MsgObSyncResp):
            obs = m.obs
        for ob in obs:
            self._inspect(ob)

    def _inspect(self, ob: OrderingBlock) -> None:
        ocfg = self.directory[0]
        if not verify_quorum(ob.quorum, ocfg, "ordering", subject=ob.content_digest()):
            return
        for plan in ob.reconfig:
            if isinstance(plan, RecoveryPlan) and self.node_id in plan.added_nodes:
                self.factory(self.node_id, plan.shard_id, plan.effective_round)
                return


@dataclass
class RunResult:
    config: ScenarioConfig
    boot: BootstrapResult
    report: dict
    snapshots: dict
    trace: Optional[list]
    violations: list
    txs: list
    unrecoverable: list
    final_round: int
    duration_ticks: int


def build_simulation(config: ScenarioConfig):
    boot = bootstrap(
        config.n,
        config.s,
        config.lambda_bits,
        config.f_l_target,
        seed=config.seed,
        epoch_length=config.epoch_length,
    )
    faults = config.fault_plan()
    faults.validate_ceilings(boot.all_shards())
    net = NetConfig(
        gst=config.gst,
        delta=config.delta,
        pre_gst_max_delay=config.pre_gst_max_delay,
        drop_rate_pre_gst=config.drop_rate_pre_gst,
    )
    sim = Simulation(
        net,
        faults,
        seed=config.seed,
        collect_trace=config.collect_trace,
        strict_monitors=config.strict_monitors,
    )
    collector = MetricsCollector()
    directory = {cfg.shard_id: cfg for cfg in boot.all_shards()}
    sizing_ctx = SizingContext(
        n=config.n,
        s=as_fraction(config.s),
        lambda_bits=config.lambda_bits,
        base_f_s=boot.plan.f_s,
        base_f_l=boot.plan.f_l,
        optimal_size=boot.plan.processing_size,
    )
    genesis_by_sid = {
        cfg.shard_id: genesis_state(
            [cfg.shard_id], config.accounts_per_shard, config.genesis_balance
        )
        for cfg in boot.processing
    }

    def processing_factory(node_id: int, shard_id: int, effective_round: int):
        """Called when a reserve node is drafted; it replays the ledger
        from genesis (trustless catch-up) and serves from the effective
        round on."""
        host = sim.hosts[node_id]
        genesis_cfg = next(c for c in boot.processing if c.shard_id == shard_id)
        node = ProcessingNode(
            sim,
            node_id,
            genesis_cfg,
            {sid: c for sid, c in directory.items()},
            genesis_by_sid[shard_id],
            executor=config.executor,
            block_capacity=config.block_capacity,
            block_interval=config.block_interval,
            heartbeat_interval=config.heartbeat_interval,
            metrics=collector,
            joining=True,
        )
        node.serve_from_round = effective_round
        host.processing = node
        node.start_timers()

    for node_id in range(config.n):
        host = NodeHost(node_id)
        if node_id in boot.ordering.members:
            host.ordering = OrderingNode(
                sim,
                node_id,
                boot.ordering,
                {sid: c for sid, c in directory.items()},
                sizing_ctx,
                boot.reserve,
                round_interval=config.round_interval,
                view_timeout=config.view_timeout,
                metrics=collector,
            )
        sid = boot.shard_of(node_id)
        if sid is not None:
            shard_cfg = next(c for c in boot.processing if c.shard_id == sid)
            host.processing = ProcessingNode(
                sim,
                node_id,
                shard_cfg,
                {s: c for s, c in directory.items()},
                genesis_by_sid[sid],
                executor=config.executor,
                block_capacity=config.block_capacity,
                block_interval=config.block_interval,
                heartbeat_interval=config.heartbeat_interval,
                metrics=collector,
            )
        else:
            host.processing = StandbyWatcher(
                sim, node_id, {s: c for s, c in directory.items()}, processing_factory
            )
        sim.add_host(host)
    return sim, boot, collector


def run(config: ScenarioConfig) -> RunResult:
    sim, boot, collector = build_simulation(config)
    for host in sim.hosts.values():
        if host.ordering is not None:
            host.ordering.start()
        if isinstance(host.processing, ProcessingNode):
            host.processing.start_timers()

    txs = generate_workload(config, [c.shard_id for c in boot.processing])
    targets = submission_targets(config, boot, txs, sim.faults.faulty_nodes())
    for tx, target in targets:
        collector.on_submitted(tx)
        sim.inject(tx.submit_time, target, msg.MsgClientTx(tx))

    def stop() -> bool:
        watermark = sim.finalized_round_watermark
        if watermark >= config.duration_rounds:
            return True
        if config.early_stop and collector.all_shards_done() and watermark >= 4:
            return True
        return False

    sim.run(max_ticks=config.tick_budget(), stop=stop)

    snapshots = {
        "faults": {
            "crashed": {str(k): v for k, v in sorted(sim.faults.crashed.items())},
            "byzantine": {str(k): v for k, v in sorted(sim.faults.byzantine.items())},
        },
        "genesis": {
            str(cfg.shard_id): {
                f"{contract_of(cfg.shard_id)}/{acct}": config.genesis_balance
                for acct in (f"a{cfg.shard_id}_{i}" for i in range(config.accounts_per_shard))
            }
            for cfg in boot.processing
        },
        "processing": [],
        "ordering": [],
    }
    unrecoverable: list = []
    for node_id in sorted(sim.hosts):
        host = sim.hosts[node_id]
        if isinstance(host.processing, ProcessingNode):
            snapshots["processing"].append(host.processing.debug_snapshot())
        if host.ordering is not None:
            snap = host.ordering.debug_snapshot()
            snap["ob_digests"] = {
                str(r): ob.content_digest().hex()
                for r, ob in sorted(host.ordering.finalized_obs.items())
            }
            snapshots["ordering"].append(snap)
            unrecoverable.extend(host.ordering.unrecoverable)

    duration = sim.now
    report = collector.report(duration)
    report["events_delivered"] = sim.delivered
    report["events_dropped"] = sim.dropped
    return RunResult(
        config=config,
        boot=boot,
        report=report,
        snapshots=snapshots,
        trace=sim.trace,
        violations=sim.violations,
        txs=txs,
        unrecoverable=sorted(set(unrecoverable)),
        final_round=sim.finalized_round_watermark,
        duration_ticks=duration,
    )


def write_artifacts(result: RunResult, out_dir) -> None:
    """Emit config, metrics (JSON + CSV), snapshots, workload and trace.
    Re-running the same config and seed reproduces every file byte for
    byte."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "config.json", "w") as fh:
        json.dump(result.config.to_json(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    write_report(result.report, out / "metrics.json", out / "metrics.csv")
    with open(out / "snapshots.json", "w") as fh:
        json.dump(result.snapshots, fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(out / "txs.jsonl", "w") as fh:
        for tx in result.txs:
            fh.write(json.dumps(codec.to_jsonable(tx), sort_keys=True))
            fh.write("\n")
    if result.trace is not None:
        with open(out / "trace.jsonl", "w") as fh:
            for event in result.trace:
                fh.write(json.dumps(event, sort_keys=True))
                fh.write("\n")
    with open(out / "verdict_inputs.json", "w") as fh:
        json.dump(
            {
                "violations": result.violations,
                "unrecoverable": result.unrecoverable,
                "final_round": result.final_round,
            },
            fh,
            indent=2,
            sort_keys=True,
        )
        fh.write("\n")


def load_run_dir(path) -> dict:
    """Read back the artifacts check() needs from a run directory."""
    out = Path(path)
    if out.is_file():
        out = out.parent
    with open(out / "snapshots.json") as fh:
        snapshots = json.load(fh)
    txs = []
    with open(out / "txs.jsonl") as fh:
        for line in fh:
            txs.append(json.loads(line))
    trace = None
    trace_path = out / "trace.jsonl"
    if trace_path.exists():
        trace = []
        with open(trace_path) as fh:
            for line in fh:
                trace.append(json.loads(line))
    return {"snapshots": snapshots, "txs": txs, "trace": trace}
