"""Sampling-based load estimation and execution monitoring.

Load is modeled per input record as

    load = alpha + selectivity * (pre_join_cost + beta + gamma * matches)

where alpha covers the source+filter stage, beta the join input, gamma each
join match, and selectivity/matches are tracked per non-overlapping filter
range segment.  Because the statistics are per segment, the load of any
hypothetical union of groups can be composed from one monitoring pass.
Inverting the model gives a query's throughput in isolation.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

from .errors import EstimationError
from .plans import merge_ranges

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class CostModelParams:
    """Per-tuple constants of the analytical cost model."""

    alpha: float          # source + filter cost per record
    beta: float           # join input cost per record
    gamma: float          # join output cost per match
    pre_join: float = 0.0  # pre-join pipeline cost per passed record
    downstream: tuple[tuple[str, float], ...] = ()

    def __post_init__(self):
        for v in (self.alpha, self.beta, self.gamma, self.pre_join):
            if v < 0:
                raise EstimationError("cost model constants must be >= 0")


@dataclass
class RangeStatistics:
    """Measured distribution statistics for one filter-range segment."""

    range: tuple[int, int]
    selectivity: float
    join_matches: float
    sample_count: int

    def __post_init__(self):
        if not (0.0 <= self.selectivity <= 1.0):
            raise EstimationError(
                f"selectivity {self.selectivity} outside [0, 1]")


@dataclass(frozen=True)
class MonitoringAssignment:
    """One group made responsible for measuring a set of disjoint segments."""

    responsible_group_id: str
    monitored_ranges: tuple[tuple[int, int], ...]
    duration: int          # event-time units


@dataclass
class LoadEstimate:
    value: float
    low_confidence: bool = False
    thin_segments: tuple[tuple[int, int], ...] = ()


def decompose_ranges(ranges) -> tuple[tuple[int, int], ...]:
    """Split overlapping ranges into non-overlapping segments.

    Every input range is exactly a union of returned segments, so statistics
    collected per segment compose into any union of the inputs.
    """
    points = set()
    spans = [(lo, hi) for lo, hi in ranges if hi > lo]
    for lo, hi in spans:
        points.add(lo)
        points.add(hi)
    cuts = sorted(points)
    segments = []
    for a, b in zip(cuts, cuts[1:]):
        if any(lo <= a and b <= hi for lo, hi in spans):
            segments.append((a, b))
    return tuple(segments)


def plan_load_monitoring(groups, candidates, selectivity_by_group,
                         duration: int) -> list[MonitoringAssignment]:
    """Assign one group per shared subpipeline to collect segment statistics.

    The responsible group is the one whose own filters already pass the
    largest tuple fraction, which minimizes the extra records forwarded for
    monitoring.  Ties break on group id.
    """
    by_sig: dict = {}
    group_of = {g.group_id: g for g in groups}
    for cand in candidates:
        by_sig.setdefault(cand.signature, set()).update(
            (cand.group_a, cand.group_b))
    out = []
    for sig in sorted(by_sig, key=repr):
        gids = sorted(by_sig[sig])
        ranges = []
        for gid in gids:
            plan = group_of[gid].plan
            for stream in plan.join.streams:
                ranges.extend((lo, hi) for _, lo, hi in
                              plan.predicates_for(stream))
        segments = decompose_ranges(ranges)
        responsible = sorted(
            gids, key=lambda g: (-selectivity_by_group.get(g, 0.0), g))[0]
        out.append(MonitoringAssignment(responsible, segments, duration))
    return out


def _covered_stats(range_stats, member_ranges):
    """Segments lying inside the union of the member ranges (merge sweep)."""
    union = merge_ranges(member_ranges)
    stats = sorted(range_stats, key=lambda st: st.range)
    ui = 0
    n = len(union)
    for st in stats:
        lo, hi = st.range
        while ui < n and union[ui][1] <= lo:
            ui += 1
        if ui < n and union[ui][0] <= lo and hi <= union[ui][1]:
            yield st


def estimate_group_load(range_stats, member_ranges, params: CostModelParams,
                        min_samples: int = 1000,
                        thin_mass_tolerance: float = 0.02) -> LoadEstimate:
    """Compose Load(g) from segment statistics over the group's union filter.

    ``member_ranges`` is any iterable of (lo, hi) ranges; segments that fall
    inside their union contribute selectivity * (pre + beta + gamma*matches).
    Segments with fewer than ``min_samples`` observations are thin; the
    estimate is flagged low-confidence when thin segments account for more
    than ``thin_mass_tolerance`` of the stream (an under-sampled sliver of
    mass cannot move the total by more than its mass).
    """
    load = params.alpha
    thin = []
    thin_mass = 0.0
    for st in _covered_stats(range_stats, member_ranges):
        load += st.selectivity * (
            params.pre_join + params.beta + params.gamma * st.join_matches)
        if st.sample_count < min_samples:
            thin.append(st.range)
            thin_mass += st.selectivity
    if load <= 0:
        raise EstimationError("degenerate zero load estimate")
    return LoadEstimate(load, thin_mass > thin_mass_tolerance, tuple(thin))


def segment_concentration_bound(range_stats, member_ranges,
                                params: CostModelParams,
                                subtask_capacity: float) -> float:
    """Throughput ceiling from the densest filter-range segment.

    Join work is partitioned by key; the per-record cost concentrated in one
    narrow segment (a hot key after a distribution shift) cannot spread
    across subtasks, so input records/s are capped by capacity over that
    segment's per-record cost.  Infinity when no segment dominates.
    """
    worst = 0.0
    for st in _covered_stats(range_stats, member_ranges):
        cost = st.selectivity * (
            params.pre_join + params.beta + params.gamma * st.join_matches)
        worst = max(worst, cost)
    if worst <= 0:
        return math.inf
    return subtask_capacity / worst


def estimate_isolated_throughput(query_ranges, range_stats,
                                 params: CostModelParams,
                                 isolated_resources: int,
                                 subtask_capacity: float,
                                 min_samples: int = 0) -> float:
    """Invert the cost model: records/s the query sustains on its own.

    ``subtask_capacity`` is in cost units per second; the result is in
    records/s summed over the input streams.
    """
    est = estimate_group_load(range_stats, query_ranges, params,
                              min_samples=min_samples)
    if est.value <= 0:
        raise EstimationError("zero load: isolated throughput undefined")
    return isolated_resources * subtask_capacity / est.value


def query_load_from_sample(sel: float, matches: float,
                           params: CostModelParams) -> float:
    return params.alpha + sel * (
        params.pre_join + params.beta + params.gamma * matches)


# ----------------------------------------------------------------------
# live statistics extraction from a running engine

@dataclass
class ExecutionMetrics:
    """Windowed runtime metrics of one group.

    ``backpressured`` reflects only stalls the per-query downstream branches
    impose on the shared subplan (the router blocking on a full branch
    queue).  Internal shared-stage backlog from under-provisioning is
    visible in ``shared_stall_fraction`` but is not downstream backpressure.
    """

    group_id: str
    window_seconds: float
    resources: int
    idle_resources: float
    consumed_by_stream: dict[str, int]
    throughput: float                 # records/s over all streams
    shared_stall_fraction: float
    downstream_stall_fraction: float
    stall_fraction_by_mask: dict[int, float]
    source_buffer_len: int
    backpressured: bool = False


def collect_execution_metrics(engine, stall_threshold: float = 0.1
                              ) -> dict[str, ExecutionMetrics]:
    """Snapshot per-group idle resources, consumption and stall attribution.

    Counters are windowed: callers reset them via
    ``engine.reset_window_counters()`` after reading.
    """
    out = {}
    buffers = engine.source_buffer_lengths()
    for gid in sorted(engine.groups):
        group = engine.groups[gid]
        scrap = group.retired_scrap
        idle = scrap.idle_frac_sum
        ticks = 0
        consumed: dict[str, int] = dict(scrap.emitted_by_stream)
        stall_by_mask: dict[int, int] = dict(scrap.stall_by_mask)
        shared_stalls = 0
        shared_ticks = 0
        shared_names = set(group.shared_op_names())
        for name, subs in group.subtasks_by_op.items():
            for sub in subs:
                if sub.w_ticks == 0:
                    continue
                ticks = max(ticks, sub.w_ticks)
                idle += sub.w_idle / sub.w_ticks
                if name in shared_names or name == "router":
                    shared_stalls += sub.w_stall_ticks
                    shared_ticks += sub.w_ticks
                for m, v in sub.w_stall_by_mask.items():
                    stall_by_mask[m] = stall_by_mask.get(m, 0) + v
                for s, v in sub.w_emitted_by_stream.items():
                    consumed[s] = consumed.get(s, 0) + v
        win_s = ticks * engine.params.tick_seconds
        total = sum(consumed.values())
        stall_frac = shared_stalls / shared_ticks if shared_ticks else 0.0
        frac_by_mask = {m: v / ticks for m, v in sorted(stall_by_mask.items())
                        if ticks and m}
        downstream_frac = max(frac_by_mask.values(), default=0.0)
        out[gid] = ExecutionMetrics(
            group_id=gid,
            window_seconds=win_s,
            resources=group.total_resources(),
            idle_resources=idle,
            consumed_by_stream=consumed,
            throughput=total / win_s if win_s else 0.0,
            shared_stall_fraction=stall_frac,
            downstream_stall_fraction=downstream_frac,
            stall_fraction_by_mask=frac_by_mask,
            source_buffer_len=buffers.get(gid, 0),
            backpressured=downstream_frac > stall_threshold,
        )
    return out


def collect_query_sample_stats(engine, group) -> dict[int, tuple[float, float]]:
    """Per-query (selectivity, matches-per-tuple) from the continuous sample.

    Returns a map of query bit -> (sel, matches); queries with no samples yet
    are omitted.
    """
    sample_total = 0
    in_counts: dict[int, int] = {}
    match_sums: dict[int, int] = {}
    probe_counts: dict[int, int] = {}
    seen_ops = set()
    for subs in group.subtasks_by_op.values():
        for sub in subs:
            op = sub.op
            if id(op) in seen_ops:
                continue
            seen_ops.add(id(op))
            if op.kind == "filter":
                sample_total += op.sample_total
                for bit, c in op.q_in_counts.items():
                    in_counts[bit] = in_counts.get(bit, 0) + c
            elif op.kind == "window_join":
                for bit, c in op.q_match_sums.items():
                    match_sums[bit] = match_sums.get(bit, 0) + c
                for bit, c in op.q_probe_counts.items():
                    probe_counts[bit] = probe_counts.get(bit, 0) + c
    out = {}
    if sample_total == 0:
        return out
    for bit in sorted(in_counts):
        sel = in_counts[bit] / sample_total
        probes = probe_counts.get(bit, 0)
        matches = match_sums.get(bit, 0) / probes if probes else 0.0
        out[bit] = (sel, matches)
    return out


def gather_range_statistics(engine, responsible_group_id: str,
                            segments) -> list[RangeStatistics]:
    """Read monitored segment statistics off the responsible group's plan."""
    group = engine.groups.get(responsible_group_id)
    if group is None:
        raise EstimationError(
            f"responsible group {responsible_group_id} no longer exists")
    monitor_total = 0
    seg_counts: dict[int, int] = {}
    seg_match_sums: dict[int, int] = {}
    seg_probe_counts: dict[int, int] = {}
    seen_ops = set()
    for subs in group.subtasks_by_op.values():
        for sub in subs:
            op = sub.op
            if id(op) in seen_ops:
                continue
            seen_ops.add(id(op))
            if op.kind == "filter":
                monitor_total += op.monitor_total
                for i, c in op.seg_counts.items():
                    seg_counts[i] = seg_counts.get(i, 0) + c
            elif op.kind == "window_join":
                for i, c in op.seg_match_sums.items():
                    seg_match_sums[i] = seg_match_sums.get(i, 0) + c
                for i, c in op.seg_probe_counts.items():
                    seg_probe_counts[i] = seg_probe_counts.get(i, 0) + c
    stats = []
    for i, seg in enumerate(segments):
        count = seg_counts.get(i, 0)
        sel = count / monitor_total if monitor_total else 0.0
        probes = seg_probe_counts.get(i, 0)
        matches = seg_match_sums.get(i, 0) / probes if probes else 0.0
        stats.append(RangeStatistics(seg, sel, matches, count))
    return stats


def plan_cost_profile(plan, rate_per_stream: float, union_stats,
                      eng_params, branch_stats=None) -> list[tuple[str, float]]:
    """Estimated cost rate (units/s) per operator of a plan.

    ``union_stats`` is the (selectivity, matches) pair for the plan's whole
    member set; ``branch_stats`` optionally maps branch_id to the same pair
    for the branch's query subset (falls back to the plan union).  Drives
    proportional subtask layout; only relative magnitudes matter.
    """
    sel_u, m_u = union_stats
    d = rate_per_stream
    streams = plan.join.streams
    total_in = d * len(streams)
    passed = total_in * sel_u
    production = passed * m_u     # join matches per second
    profile: list[tuple[str, float]] = []
    for s in streams:
        profile.append((f"source:{s}", d * eng_params.source_cost))
    for s in streams:
        profile.append((f"filter:{s}", d * eng_params.filter_cost))
    for i, dop in enumerate(plan.pre_join):
        profile.append((f"prejoin{i}", passed * dop.param("cost")))
    profile.append(("join", passed * eng_params.join_input_cost
                    + production * eng_params.join_output_cost))
    profile.append(("router", production * eng_params.router_cost))
    for br in plan.branches:
        if branch_stats and br.branch_id in branch_stats:
            sel_b, m_b = branch_stats[br.branch_id]
        else:
            sel_b, m_b = sel_u, m_u
        br_rate = total_in * sel_b * m_b
        for i, dop in enumerate(br.pipeline):
            if dop.kind == "udf":
                cost = br_rate * dop.param("cost")
            else:
                cost = br_rate * eng_params.aggregate_cost
            profile.append((f"{br.branch_id}:op{i}", cost))
        profile.append((f"{br.branch_id}:sink",
                        br_rate * eng_params.sink_cost))
    return profile


def whole_plan_load(plan, rate_per_stream: float, union_stats, eng_params,
                    branch_stats=None) -> float:
    """Cost units per input record across the entire plan (all operators)."""
    profile = plan_cost_profile(plan, rate_per_stream, union_stats,
                                eng_params, branch_stats)
    total_in = rate_per_stream * len(plan.join.streams)
    if total_in <= 0:
        raise EstimationError("zero input rate")
    return sum(c for _, c in profile) / total_in


def calibrate_capacity(params) -> float:
    """Measure cost units per subtask-second with a saturated micro-run.

    Drives a single-query plan far beyond one filter subtask's capacity and
    reads the sustained filter throughput back in cost units.
    """
    from .engine.core import Engine
    from .plans import JoinSpec, QuerySpec, build_group_plan
    from .tuples import QueryRegistry

    join = JoinSpec("cal", "cal2", "key", window_size=1, slide=1)
    q = QuerySpec("calq", (("cal", 0, 1), ("cal2", 0, 1)), join)
    plan = build_group_plan("calg", [q])
    reg = QueryRegistry()
    reg.register("calq")
    eng = Engine(params, reg)
    eng.build_group(plan, {n: 1 for n in plan.operator_names()})
    per_tick = max(1, int(4 * params.subtask_capacity * params.tick_seconds
                          / max(params.filter_cost, 1e-9)))

    def feed(tick):
        recs = [(tick, {"key": 5, "n": i}) for i in range(per_tick)]
        return {"cal": recs, "cal2": []}

    eng.set_feed(feed)
    warm, measure = 5, 40
    eng.run(warm)
    group = eng.groups["calg"]
    flt = group.subtasks_by_op["filter:cal"][0]
    before = flt.in_count
    eng.run(measure)
    processed = flt.in_count - before
    seconds = measure * params.tick_seconds
    return processed * params.filter_cost / seconds
