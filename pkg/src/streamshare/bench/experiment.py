"""Experiment orchestration: build, run, measure, export.

``run_experiment`` wires a workload and a strategy into one engine, runs
warm-up plus measurement, and produces a metrics CSV, a JSON summary and
(optionally) rendered figures.  ``sweep`` repeats a run across parameter
values and aggregates the summaries.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

from ..controller import AdaptiveSharingController
from ..engine.core import Engine
from ..errors import ConfigurationError
from ..estimation import collect_execution_metrics
from ..plans import build_group_plan
from ..tuples import QueryRegistry
from .metrics import MetricsRecorder, write_summary
from .strategies import (StrategyConfig, baseline_allocation,
                         build_strategy_grouping)
from .workload import (WorkloadConfig, WorkloadStreams, analytic_query_stats,
                       analytic_union_stats, build_query_specs,
                       plan_cost_profile)

logger = logging.getLogger(__name__)


@dataclass
class RunResult:
    workload: str
    strategy: str
    seed: int
    duration_ticks: int
    warmup_ticks: int
    recorder: MetricsRecorder
    summary: dict
    final_grouping: list[tuple[str, ...]]
    convergence_tick: int
    controller_log: list = field(default_factory=list)
    merge_changes: int = 0
    outputs: dict | None = None       # qid -> [(event_time, payload)] rows

    def query_windows(self, qid, start_tick=0):
        return [(t, v) for t, v in self.recorder.query_tput.get(qid, [])
                if t > start_tick]


def _layout_for_baseline(plan, members, workload_cfg, queries, total):
    spec_of = {q.query_id: q for q in queries}
    ranges = []
    for m in members:
        _, lo, hi = spec_of[m].predicates[0]
        ranges.append((lo, hi))
    stats = analytic_union_stats(workload_cfg, ranges)
    branch_stats = {}
    for br in plan.branches:
        br_ranges = []
        for qid in br.query_ids:
            _, lo, hi = spec_of[qid].predicates[0]
            br_ranges.append((lo, hi))
        branch_stats[br.branch_id] = analytic_union_stats(
            workload_cfg, br_ranges)
    from ..resources import layout_parallelism
    profile = plan_cost_profile(plan, workload_cfg.rate_at(0.0), stats,
                                workload_cfg.engine, branch_stats)
    return layout_parallelism(total, profile)


def _build_run(workload_cfg: WorkloadConfig, strategy_cfg: StrategyConfig,
               seed: int, record_outputs: bool):
    queries = build_query_specs(workload_cfg, seed)
    registry = QueryRegistry()
    for q in queries:
        registry.register(q.query_id)
    engine = Engine(workload_cfg.engine, registry)
    streams = WorkloadStreams(workload_cfg, seed)
    engine.set_feed(streams.feed)
    if record_outputs:
        engine.enable_output_recording()

    partitions = build_strategy_grouping(strategy_cfg, queries, workload_cfg)
    controller = None
    groups_of_query: dict[str, str] = {}
    if strategy_cfg.strategy == "funshare":
        initial_stats = {q.query_id: analytic_query_stats(workload_cfg, q)
                         for q in queries}
        controller = AdaptiveSharingController(
            engine, registry, queries, strategy_cfg.optimizer,
            workload_cfg.cost_model(), streams.offered_rate, initial_stats,
            share_downstream=strategy_cfg.share_downstream)
        controller.build_groups(partitions)
        for gid, g in controller.groups.items():
            for qid in g.members:
                groups_of_query[qid] = gid
    else:
        for i, members in enumerate(partitions):
            gid = f"g{i:04d}"
            plan = build_group_plan(
                gid, [q for q in queries if q.query_id in members],
                share_downstream=strategy_cfg.share_downstream)
            total = baseline_allocation(plan, members, workload_cfg, queries)
            layout = _layout_for_baseline(plan, members, workload_cfg,
                                          queries, total)
            engine.build_group(plan, layout)
            for qid in members:
                groups_of_query[qid] = gid
    return queries, registry, engine, streams, controller, groups_of_query


def run_experiment(workload_cfg: WorkloadConfig,
                   strategy_cfg: StrategyConfig,
                   duration_ticks: int, seed: int,
                   out_csv=None, plots_dir=None,
                   record_outputs: bool = False,
                   reference: "RunResult | None" = None,
                   sustain_search: bool = False) -> RunResult:
    """Run one experiment and export metrics (CSV), summary (JSON), plots."""
    if duration_ticks < 1:
        raise ConfigurationError("duration must be at least one tick")
    queries, registry, engine, streams, controller, groups_of_query = \
        _build_run(workload_cfg, strategy_cfg, seed, record_outputs)

    opt = strategy_cfg.optimizer
    tick_s = workload_cfg.engine.tick_seconds
    report_ticks = max(1, round(opt.report_period_s / tick_s))
    warmup_ticks = min(duration_ticks,
                       max(0, round(workload_cfg.warmup_s / tick_s)))
    recorder = MetricsRecorder(tick_s, report_ticks)

    for _ in range(duration_ticks):
        engine.tick()
        tick = engine.tick_no
        if controller is not None:
            controller.after_tick()
        if tick % report_ticks == 0:
            exec_metrics = collect_execution_metrics(
                engine, opt.backpressure_stall_fraction)
            if controller is not None:
                controller.on_window(tick, exec_metrics)
                for gid, g in controller.groups.items():
                    for qid in g.members:
                        groups_of_query[qid] = gid
            recorder.record_window(tick, engine, registry, groups_of_query,
                                   exec_metrics)
            engine.reset_window_counters()

    convergence_tick = 0
    structural = [ev for ev in engine.reconfig.events
                  if ev.kind in ("merge", "split", "parallelism_change")]
    if structural:
        convergence_tick = structural[-1].end_tick
    final_grouping = sorted(
        tuple(sorted(g.plan.member_ids)) for g in engine.groups.values())

    summary = _summarize(workload_cfg, strategy_cfg, recorder, queries,
                         duration_ticks, warmup_ticks, convergence_tick,
                         engine, reference)
    if sustain_search:
        summary["max_sustainable_rate"] = max_sustainable_rate(
            workload_cfg, strategy_cfg, seed,
            grouping=final_grouping)
        summary["resources_to_sustain"] = resources_to_sustain(
            workload_cfg, queries)

    outputs = None
    if record_outputs:
        outputs = {}
        for q in queries:
            out = engine.query_outputs.get(registry.bit(q.query_id))
            outputs[q.query_id] = list(out.records) if out and out.records \
                else []

    result = RunResult(
        workload=workload_cfg.workload,
        strategy=strategy_cfg.strategy,
        seed=seed,
        duration_ticks=duration_ticks,
        warmup_ticks=warmup_ticks,
        recorder=recorder,
        summary=summary,
        final_grouping=final_grouping,
        convergence_tick=convergence_tick,
        controller_log=list(controller.log) if controller else [],
        merge_changes=controller.merge_changes if controller else 0,
        outputs=outputs,
    )
    if out_csv:
        recorder.write_csv(out_csv)
        write_summary(str(out_csv) + ".summary.json", summary)
    if plots_dir:
        from . import plots
        plots.render_run(result, plots_dir)
    return result


def _summarize(workload_cfg, strategy_cfg, recorder, queries,
               duration_ticks, warmup_ticks, convergence_tick, engine,
               reference) -> dict:
    measure_start = max(warmup_ticks, convergence_tick)
    per_query = {}
    for q in queries:
        windows = [v for t, v in recorder.query_tput.get(q.query_id, [])
                   if t > measure_start]
        per_query[q.query_id] = (sum(windows) / len(windows)
                                 if windows else 0.0)
    res_values = [v for t, v in recorder.resources if t > warmup_ticks]
    summary = {
        "workload": workload_cfg.workload,
        "strategy": strategy_cfg.strategy,
        "duration_ticks": duration_ticks,
        "warmup_ticks": warmup_ticks,
        "convergence_tick": convergence_tick,
        "per_query_throughput": per_query,
        "resources_final": recorder.resources[-1][1]
        if recorder.resources else engine.total_resources(),
        "resources_max": max(res_values) if res_values else 0,
        "resources_min": min(res_values) if res_values else 0,
        "reconfigurations": len(engine.reconfig.events),
        "structural_reconfigurations": len(
            [ev for ev in engine.reconfig.events
             if ev.kind in ("merge", "split", "parallelism_change")]),
        "groups_final": len(engine.groups),
    }
    if reference is not None:
        ratios = {}
        for q in queries:
            qid = q.query_id
            mine = {t: v for t, v in recorder.query_tput.get(qid, [])}
            ref = reference.recorder.query_tput.get(qid, [])
            worst = None
            for t, rv in ref:
                if t <= measure_start or rv <= 0:
                    continue
                if t in mine:
                    r = mine[t] / rv
                    worst = r if worst is None else min(worst, r)
            ratios[qid] = worst if worst is not None else 1.0
        summary["penalty_ratio_vs_isolated"] = ratios
        summary["worst_penalty_ratio"] = min(ratios.values()) \
            if ratios else 1.0
    return summary


# ----------------------------------------------------------------------
# sustainability searches

def probe_sustained(workload_cfg: WorkloadConfig,
                    strategy_cfg: StrategyConfig, seed: int,
                    rate: float, probe_ticks: int = 400,
                    grouping=None, allocations=None) -> bool:
    """Short static run at a constant rate: is the backlog bounded?

    Sustained means total in-flight records (source buffers plus queue
    occupancy) grow by less than 1% of the offered volume over the second
    half of the probe.  ``grouping`` pins the partition (defaults to the
    strategy's initial grouping); probes never run the adaptive loop.
    """
    cfg = replace(workload_cfg,
                  rate_schedule=((0.0, rate),),
                  warmup_s=0.0)
    queries = build_query_specs(cfg, seed)
    registry = QueryRegistry()
    for q in queries:
        registry.register(q.query_id)
    engine = Engine(cfg.engine, registry)
    engine.set_feed(WorkloadStreams(cfg, seed).feed)
    if grouping is None:
        grouping = build_strategy_grouping(strategy_cfg, queries, cfg)
    spec_of = {q.query_id: q for q in queries}
    for i, members in enumerate(grouping):
        gid = f"p{i:04d}"
        plan = build_group_plan(
            gid, [spec_of[m] for m in members],
            share_downstream=strategy_cfg.share_downstream)
        if allocations is not None and gid in allocations:
            total = allocations[gid]
        else:
            total = baseline_allocation(plan, members, cfg, queries)
        layout = _layout_for_baseline(plan, members, cfg, queries, total)
        engine.build_group(plan, layout)

    def in_flight() -> int:
        n = sum(engine.source_buffer_lengths().values())
        for ch in engine.channels.values():
            n += len(ch.items)
        return n

    half = probe_ticks // 2
    engine.run(half)
    mid = in_flight()
    engine.run(probe_ticks - half)
    end = in_flight()
    offered = rate * (probe_ticks - half) * cfg.engine.tick_seconds \
        * len(cfg.streams)
    return (end - mid) <= max(0.01 * offered, 2.0)


def max_sustainable_rate(workload_cfg: WorkloadConfig,
                         strategy_cfg: StrategyConfig, seed: int,
                         grouping=None, rel_tol: float = 0.02,
                         probe_ticks: int = 400) -> float:
    """Binary search over the input rate for the largest sustained value."""
    base = workload_cfg.rate_at(0.0)
    lo, hi = 0.0, base
    # grow until unsustainable
    while probe_sustained(workload_cfg, strategy_cfg, seed, hi,
                          probe_ticks, grouping):
        lo = hi
        hi *= 2
        if hi > base * 64:
            return lo
    while (hi - lo) > rel_tol * hi:
        mid = (lo + hi) / 2
        if probe_sustained(workload_cfg, strategy_cfg, seed, mid,
                           probe_ticks, grouping):
            lo = mid
        else:
            hi = mid
    return lo


def resources_to_sustain(workload_cfg: WorkloadConfig, queries) -> int:
    """Minimal isolated allocation that sustains the base rate (analytic)."""
    return sum(q.isolated_resources for q in queries)


# ----------------------------------------------------------------------

SWEEPABLE = ("merge_threshold", "merge_period", "query_count", "selectivity")


def sweep(param: str, values, workload_cfg: WorkloadConfig,
          strategy_cfg: StrategyConfig, duration_ticks: int, seed: int,
          out_csv=None, plots_dir=None) -> list[dict]:
    """One run per parameter value; aggregated summary rows."""
    if param not in SWEEPABLE:
        raise ConfigurationError(
            f"sweep parameter must be one of {SWEEPABLE}, got {param!r}")
    rows = []
    for value in values:
        wcfg, scfg = workload_cfg, strategy_cfg
        if param == "merge_threshold":
            scfg = replace(strategy_cfg, optimizer=replace(
                strategy_cfg.optimizer, merge_threshold=float(value)))
        elif param == "merge_period":
            scfg = replace(strategy_cfg, optimizer=replace(
                strategy_cfg.optimizer, merge_period_s=float(value)))
        elif param == "query_count":
            wcfg = replace(workload_cfg, query_count=int(value))
        else:
            wcfg = replace(workload_cfg, selectivity=float(value))
        result = run_experiment(wcfg, scfg, duration_ticks, seed)
        row = {
            "param": param,
            "value": value,
            "strategy": scfg.strategy,
            "resources_final": result.summary["resources_final"],
            "resources_max": result.summary["resources_max"],
            "mean_throughput": _mean(
                result.summary["per_query_throughput"].values()),
            "reconfigurations": result.summary["reconfigurations"],
            "groups_final": result.summary["groups_final"],
        }
        rows.append(row)
        logger.info("sweep %s=%s: %s", param, value, row)
    if out_csv:
        import csv as _csv
        with open(out_csv, "w", newline="") as fh:
            w = _csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
            w.writeheader()
            for row in rows:
                w.writerow(row)
    if plots_dir:
        from . import plots
        plots.render_sweep(rows, param, plots_dir)
    return rows


def _mean(values):
    values = list(values)
    return sum(values) / len(values) if values else 0.0
