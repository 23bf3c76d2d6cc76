"""The adaptive sharing control loop.

Runs interleaved with engine ticks: every reporting period it snapshots
execution metrics, refreshes isolated-throughput estimates from the
continuous sample and reacts to penalties (resource increase or split);
every merge period it reconfigures the responsible groups into monitoring
mode, collects segment statistics, evaluates all candidate merges from that
single pass and applies them as one reconfiguration.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

from . import estimation, resources
from .optimizer import (GroupStatistics, OptimizerConfig,
                        detect_split_triggers, merge_step, split_step)
from .plans import (QueryGroup, build_group_plan, find_sharing_candidates,
                    merge_ranges)
from .reconfig import MonitoringEdit, ReconfigurationPlan

logger = logging.getLogger(__name__)


@dataclass
class ControllerLogEntry:
    tick: int
    action: str
    detail: str


class AdaptiveSharingController:
    """Drives merging, splitting and monitoring over a live engine."""

    def __init__(self, engine, registry, queries, config: OptimizerConfig,
                 cost_params, offered_rate_fn, initial_query_stats,
                 share_downstream: bool = True):
        self.engine = engine
        self.registry = registry
        self.queries = {q.query_id: q for q in queries}
        self.config = config
        self.cost_params = cost_params
        self.offered_rate_fn = offered_rate_fn   # tick -> records/s/stream
        self.share_downstream = share_downstream
        self.params = engine.params
        tick_s = self.params.tick_seconds
        self.report_ticks = max(1, round(config.report_period_s / tick_s))
        self.merge_ticks = max(1, round(config.merge_period_s / tick_s))
        self.groups: dict[str, QueryGroup] = {}
        self._gid = 0
        self.query_stats: dict[str, tuple[float, float]] = \
            dict(initial_query_stats)      # qid -> (sel, matches)
        self.range_stats: dict[str, list] = {}   # signature -> segment stats
        self.range_stats_epoch = -1
        self._monitoring: list = []        # active MonitoringAssignments
        self._monitor_until: int | None = None
        self._thinnest_segment_sel = 0.0
        self.log: list[ControllerLogEntry] = []
        self.merge_changes = 0             # merge cycles that changed groups
        self._last_exec_metrics = {}
        self._last_reconfig_end = -1

    # ------------------------------------------------------------------
    # construction helpers
    def new_gid(self) -> str:
        gid = f"g{self._gid:04d}"
        self._gid += 1
        return gid

    def _sig_key(self, members) -> str:
        qid = sorted(members)[0]
        return repr(self.queries[qid].subpipeline_signature())

    def query_union_stats(self, members) -> tuple[float, float]:
        """(selectivity, matches) proxy for a member set.

        Uses segment statistics when available, else composes per-query
        sample stats assuming non-overlap (selectivities capped at 1).
        """
        ranges = self.member_ranges(members)
        seg_stats = self.range_stats.get(self._sig_key(members))
        if seg_stats:
            union = merge_ranges(ranges)
            sel = 0.0
            wsum = 0.0
            for st in seg_stats:
                if any(lo <= st.range[0] and st.range[1] <= hi
                       for lo, hi in union):
                    sel += st.selectivity
                    wsum += st.selectivity * st.join_matches
            if sel > 0:
                return sel, wsum / sel
        sel = 0.0
        wsum = 0.0
        for qid in members:
            s, m = self.query_stats.get(qid, (0.0, 0.0))
            sel += s
            wsum += s * m
        sel = min(1.0, sel)
        return sel, (wsum / sel if sel > 0 else 0.0)

    def member_ranges(self, members):
        out = []
        for qid in sorted(members):
            q = self.queries[qid]
            for _, lo, hi in q.predicates:
                out.append((lo, hi))
        return out

    def build_groups(self, partitions) -> None:
        """Install the initial grouping (list of member id iterables)."""
        for members in partitions:
            gid = self.new_gid()
            group = self.make_group(gid, frozenset(members))
            layout = self.layout_for(group.plan, group.resources)
            self.engine.build_group(group.plan, layout)
            self.groups[gid] = group

    def make_group(self, gid: str, members: frozenset,
                   total: int | None = None) -> QueryGroup:
        specs = [self.queries[qid] for qid in sorted(members)]
        plan = build_group_plan(gid, specs,
                                share_downstream=self.share_downstream)
        max_res = sum(q.isolated_resources for q in specs)
        if total is None:
            if len(specs) == 1:
                total = specs[0].isolated_resources
            else:
                total = min(max_res, self.needed_allocation(plan, members))
        total = max(plan.min_resources, min(total, max_res))
        return QueryGroup(gid, tuple(sorted(members)), plan, total, max_res)

    def needed_allocation(self, plan, members) -> int:
        rate = self.offered_rate_fn(self.engine.tick_no)
        stats = self.query_union_stats(members)
        branch_stats = {
            br.branch_id: self.query_union_stats(frozenset(br.query_ids))
            for br in plan.branches}
        profile = estimation.plan_cost_profile(
            plan, rate, stats, self.params, branch_stats)
        total_cost = sum(c for _, c in profile)
        return max(plan.min_resources,
                   math.ceil(total_cost / self.params.subtask_capacity))

    def layout_for(self, plan, total: int) -> dict[str, int]:
        rate = max(self.offered_rate_fn(self.engine.tick_no), 1e-9)
        members = frozenset(plan.member_ids)
        stats = self.query_union_stats(members)
        branch_stats = {
            br.branch_id: self.query_union_stats(frozenset(br.query_ids))
            for br in plan.branches}
        profile = estimation.plan_cost_profile(
            plan, rate, stats, self.params, branch_stats)
        return resources.layout_parallelism(total, profile)

    # ------------------------------------------------------------------
    # hooks driven by the experiment loop
    def after_tick(self) -> None:
        """Call once per tick, after engine.tick()."""
        tick = self.engine.tick_no
        if self._monitor_until is not None and tick >= self._monitor_until:
            self._finish_monitoring()
        if tick % self.merge_ticks == 0 and tick > 0:
            self._start_merge_cycle(tick)

    def on_window(self, tick: int, metrics) -> None:
        """Call at reporting boundaries with the window's metric snapshot
        (before the window counters are reset)."""
        self._last_exec_metrics = metrics
        for gid in sorted(self.groups):
            group = self.groups[gid]
            rt = self.engine.groups.get(gid)
            if rt is None:
                continue
            sample = estimation.collect_query_sample_stats(self.engine, rt)
            for bit, (sel, m) in sample.items():
                qid = self.registry.names(1 << bit)[0]
                if qid in group.members:
                    self.query_stats[qid] = (sel, m)
        if self.engine.reconfig.in_flight:
            return
        if self.engine.reconfig.events:
            self._last_reconfig_end = self.engine.reconfig.events[-1].end_tick
        window_start = tick - self.report_ticks
        if self._last_reconfig_end >= window_start:
            return   # window contaminated by a reconfiguration
        self._handle_splits(tick, metrics)

    def _group_statistics(self, metrics) -> dict[str, GroupStatistics]:
        out = {}
        offered = self.offered_rate_fn(self.engine.tick_no)
        for gid in sorted(self.groups):
            group = self.groups[gid]
            m = metrics.get(gid)
            if m is None:
                continue
            members = frozenset(group.members)
            streams = len(group.plan.join.streams)
            offered_total = offered * streams
            iso = {}
            seg_stats = self.range_stats.get(self._sig_key(members))
            for qid in sorted(members):
                q = self.queries[qid]
                sel, mm = self.query_stats.get(qid, (0.0, 0.0))
                load = estimation.query_load_from_sample(
                    sel, mm, self.cost_params)
                est = (q.isolated_resources * self.params.subtask_capacity
                       / load) if load > 0 else 0.0
                if seg_stats:
                    # key-partitioned work in one hot segment cannot spread
                    est = min(est, estimation.segment_concentration_bound(
                        seg_stats, [(lo, hi) for _, lo, hi in q.predicates],
                        self.cost_params, self.params.subtask_capacity))
                # a query cannot process faster than data arrives
                iso[qid] = min(est, offered_total)
            bq = set()
            for mask, frac in m.stall_fraction_by_mask.items():
                if frac > self.config.backpressure_stall_fraction:
                    bq.update(self.registry.names(mask))
            out[gid] = GroupStatistics(
                group_id=gid,
                members=members,
                load=self._load_of_forced(members),
                resources=group.resources,
                idle_resources=m.idle_resources,
                throughput=m.throughput,
                backpressured=m.backpressured,
                backpressured_queries=frozenset(bq) & members,
                per_query_isolated_estimate=iso,
                stats_epoch=self.engine.tick_no,
            )
        return out

    def _handle_splits(self, tick: int, metrics) -> None:
        stats = self._group_statistics(metrics)
        triggers = detect_split_triggers(stats, self.config)
        if not triggers:
            return
        old_ids = []
        new_groups = []
        for trig in triggers:
            g = self.groups[trig.group_id]
            headroom = g.resources < g.max_resources
            decision = split_step(stats[trig.group_id], trig, headroom)
            if decision.kind == "request_resources":
                granted = self._grow_group(tick, g, stats[trig.group_id])
                if not granted:
                    # denial: no allocation within the cap restores
                    # isolation, so place the penalized queries on their own
                    decision = split_step(stats[trig.group_id], trig, False)
            if decision.kind == "split":
                old_ids.append(g.group_id)
                split_iso = sum(self.queries[q].isolated_resources
                                for q in decision.split_out)
                remainder = frozenset(g.members) - decision.split_out
                for part in decision.partitions:
                    gid = self.new_gid()
                    if part == remainder and len(part) > 1:
                        plan = build_group_plan(
                            gid, [self.queries[q] for q in sorted(part)],
                            share_downstream=self.share_downstream)
                        total = resources.post_split_allocation(
                            g.resources, split_iso, plan.min_resources)
                        ng = self.make_group(gid, frozenset(part),
                                             total=total)
                    else:
                        ng = self.make_group(gid, frozenset(part))
                    new_groups.append(ng)
                self.log.append(ControllerLogEntry(
                    tick, "split",
                    f"{g.group_id}: out={sorted(decision.split_out)}"))
        if old_ids:
            self._apply_structural(tick, "split", old_ids, new_groups)

    def _grow_group(self, tick: int, group: QueryGroup,
                    gstats: GroupStatistics) -> bool:
        target = max(gstats.per_query_isolated_estimate.values(),
                     default=0.0)
        rate = self.offered_rate_fn(tick)
        load = estimation.whole_plan_load(
            group.plan, max(rate, 1e-9),
            self.query_union_stats(frozenset(group.members)), self.params)
        req = resources.PenaltyRequest(
            group_id=group.group_id,
            target_throughput=target,
            load=load,
            current_resources=group.resources,
            max_resources=group.max_resources,
            min_resources=group.plan.min_resources,
            measured_throughput=gstats.throughput,
        )
        grant = resources.adjust_on_penalty(req, self.params.subtask_capacity)
        if grant is None or grant <= group.resources:
            return False
        gid = self.new_gid()
        ng = self.make_group(gid, frozenset(group.members), total=grant)
        self._apply_structural(tick, "parallelism_change",
                               [group.group_id], [ng])
        self.log.append(ControllerLogEntry(
            tick, "resource_increase",
            f"{group.group_id}: {group.resources} -> {grant}"))
        return True

    def _apply_structural(self, tick: int, kind: str, old_ids, new_groups,
                          note: str = "") -> None:
        payload = []
        for ng in new_groups:
            layout = self.layout_for(ng.plan, ng.resources)
            payload.append((ng.plan, layout))
        plan = ReconfigurationPlan(
            kind=kind, old_group_ids=tuple(sorted(old_ids)),
            new_groups=tuple(payload), note=note)
        self.engine.reconfig.submit(plan)
        for gid in old_ids:
            del self.groups[gid]
        for ng in new_groups:
            self.groups[ng.group_id] = ng

    # ------------------------------------------------------------------
    # merge cycle: monitoring pass, then the merge decisions
    def _start_merge_cycle(self, tick: int) -> None:
        if self._monitor_until is not None:
            return   # previous cycle's monitoring still running
        if self.engine.reconfig.in_flight or self.engine.reconfig.queue:
            self.log.append(ControllerLogEntry(
                tick, "merge_skipped", "reconfiguration in flight"))
            return
        candidates = find_sharing_candidates(
            [self.groups[g] for g in sorted(self.groups)])
        sel_by_group = {}
        for gid in sorted(self.groups):
            members = frozenset(self.groups[gid].members)
            sel_by_group[gid] = self.query_union_stats(members)[0]
        rate = max(self.offered_rate_fn(tick), 1e-9)
        duration_s = self.config.monitor_min_tuples / rate
        if self._thinnest_segment_sel > 0:
            # stretch the pass until the thinnest known segment reaches the
            # per-segment sample floor (bounded by twice the merge period)
            duration_s = max(duration_s,
                             self.config.min_segment_samples
                             / (self._thinnest_segment_sel * rate))
        duration = min(math.ceil(duration_s / self.params.tick_seconds),
                       2 * self.merge_ticks)
        assignments = estimation.plan_load_monitoring(
            [self.groups[g] for g in sorted(self.groups)], candidates,
            sel_by_group, duration)
        # multi-member groups without a sharing candidate still refresh
        # their own segment statistics (throughput estimation needs them)
        covered = {gid for a in assignments for gid in (a.responsible_group_id,)}
        in_candidates = set()
        for c in candidates:
            in_candidates.update((c.group_a, c.group_b))
        for gid in sorted(self.groups):
            group = self.groups[gid]
            if len(group.members) < 2 or gid in in_candidates:
                continue
            segments = estimation.decompose_ranges(
                self.member_ranges(frozenset(group.members)))
            assignments.append(estimation.MonitoringAssignment(
                gid, segments, duration))
        if not assignments:
            return
        edits = tuple(MonitoringEdit(a.responsible_group_id, True,
                                     a.monitored_ranges)
                      for a in assignments)
        self.engine.reconfig.submit(ReconfigurationPlan(
            kind="enable_monitoring", monitoring_edits=edits))
        self._monitoring = assignments
        self._monitor_until = tick + duration
        self.log.append(ControllerLogEntry(
            tick, "monitoring", f"{len(assignments)} assignment(s), "
                                f"{duration} ticks"))

    def _finish_monitoring(self) -> None:
        tick = self.engine.tick_no
        assignments, self._monitoring = self._monitoring, []
        self._monitor_until = None
        gathered = False
        edits = []
        for a in assignments:
            if a.responsible_group_id not in self.engine.groups:
                self.log.append(ControllerLogEntry(
                    tick, "merge_skipped",
                    f"responsible group {a.responsible_group_id} gone"))
                continue
            group = self.groups.get(a.responsible_group_id)
            if group is None:
                continue
            stats = estimation.gather_range_statistics(
                self.engine, a.responsible_group_id, a.monitored_ranges)
            sig = self._sig_key(group.members)
            self.range_stats[sig] = stats
            gathered = True
            positive = [st.selectivity for st in stats if st.selectivity > 0]
            if positive:
                self._thinnest_segment_sel = min(positive)
            edits.append(MonitoringEdit(a.responsible_group_id, False))
        if edits:
            self.engine.reconfig.submit(ReconfigurationPlan(
                kind="disable_monitoring", monitoring_edits=tuple(edits)))
        if not gathered:
            return
        self.range_stats_epoch = tick
        self._run_merge(tick)

    def _load_of(self, members) -> float | None:
        """Load of a hypothetical union; None when low-confidence."""
        ranges = self.member_ranges(members)
        seg_stats = self.range_stats.get(self._sig_key(members))
        if seg_stats:
            est = estimation.estimate_group_load(
                seg_stats, ranges, self.cost_params,
                min_samples=self.config.min_segment_samples)
            if est.low_confidence:
                return None
            return est.value
        sel, m = self.query_union_stats(members)
        return estimation.query_load_from_sample(sel, m, self.cost_params)

    def _load_of_forced(self, members) -> float:
        """Like _load_of but never None (sample-stat fallback)."""
        load = self._load_of(members)
        if load is not None:
            return load
        sel, m = self.query_union_stats(members)
        return estimation.query_load_from_sample(sel, m, self.cost_params)

    def _run_merge(self, tick: int) -> None:
        metrics = self._last_exec_metrics
        stats = self._group_statistics(metrics)
        if not stats:
            return
        candidates = find_sharing_candidates(
            [self.groups[g] for g in sorted(self.groups)])
        cache: dict[frozenset, float | None] = {}

        def cached_load_of(members):
            if members not in cache:
                cache[members] = self._load_of(members)
            return cache[members]

        decision = merge_step(
            stats, candidates, self.config, cached_load_of,
            now_tick=tick,
            ticks_per_second=1.0 / self.params.tick_seconds)
        if decision.skipped_stale or not decision.merge_sets:
            return
        old_ids = []
        new_groups = []
        for merge_set in decision.merge_sets:
            inputs = []
            members_all = frozenset()
            for gid in sorted(merge_set):
                g = stats[gid]
                inputs.append(resources.GroupProvisionInput(
                    gid, g.members, g.resources, 0.0, g.load))
                members_all |= g.members
            cap = sum(self.queries[q].isolated_resources
                      for q in members_all)
            provision = resources.provision_merge(
                inputs, self._load_of_forced,
                self.config.threshold(sum(i.resources for i in inputs)),
                cap)
            if provision.rejected:
                self.log.append(ControllerLogEntry(
                    tick, "merge_rejected", provision.reason))
                continue
            gid = self.new_gid()
            ng = self.make_group(gid, members_all,
                                 total=max(provision.total, 1))
            old_ids.extend(sorted(merge_set))
            new_groups.append(ng)
            self.log.append(ControllerLogEntry(
                tick, "merge",
                f"{sorted(merge_set)} -> {gid} "
                f"(resources {ng.resources})"))
        if old_ids:
            self.merge_changes += 1
            self._apply_structural(tick, "merge", old_ids, new_groups)

    # ------------------------------------------------------------------
    def grouping(self) -> list[frozenset]:
        return [frozenset(self.groups[g].members)
                for g in sorted(self.groups)]
