"""Adaptive sharing-group partitioning.

Two complementary mechanisms keep the grouping effective: a periodic merge
pass combines groups whenever the extra load one group imposes on another is
covered by the resources that come along with the merge, and a reactive split
pass isolates queries that a group penalizes.  The merge decision metric is

    cost(i -> j) = [ (Load(i u j) - Load(j)) / Load(i u j) ]
                 / [ (Resources(i) + IdleResources(j))
                     / (Resources(i) + Resources(j)) ]

the normalized extra processing burden on j relative to the resources
available to absorb it.  A merge is taken only when max(cost(i->j),
cost(j->i)) stays below the merge threshold; with a threshold of at most 1,
exact load statistics and linearly scaling operators, a merged group sustains
at least each constituent's pre-merge throughput.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

from .errors import EstimationError

logger = logging.getLogger(__name__)


def grouping_cost(load_union: float, load_target: float,
                  resources_other: float, resources_target: float,
                  idle_target: float) -> float:
    """Extra load imposed on the target group, relative to spare capacity.

    Asymmetric: ``resources_other`` belongs to the group being merged in,
    ``load_target``/``resources_target``/``idle_target`` to the group
    absorbing it.
    """
    if load_union <= 0:
        raise EstimationError("merged load is zero; cost undefined")
    if resources_other + resources_target <= 0:
        raise EstimationError("resources must be positive")
    numerator = (load_union - load_target) / load_union
    denominator = ((resources_other + idle_target)
                   / (resources_other + resources_target))
    if denominator <= 0:
        raise EstimationError("no resources available to absorb the merge")
    return numerator / denominator


@dataclass
class GroupStatistics:
    """Snapshot of one group's measured and estimated state."""

    group_id: str
    members: frozenset
    load: float
    resources: int
    idle_resources: float
    throughput: float                  # records/s over all streams
    backpressured: bool                # shared subplan stalled by downstream
    backpressured_queries: frozenset = frozenset()
    per_query_isolated_estimate: dict = field(default_factory=dict)
    merged_load_with: dict = field(default_factory=dict)
    stats_epoch: int = 0


@dataclass
class OptimizerConfig:
    merge_threshold: float = 1.0
    merge_threshold_fn: object = None       # optional f(total_resources)
    merge_period_s: float = 60.0
    report_period_s: float = 10.0
    penalty_tolerance: float = 0.05
    backpressure_stall_fraction: float = 0.1
    monitor_min_tuples: int = 1000
    min_segment_samples: int = 1000
    sample_period: int = 100
    stats_stale_after_s: float | None = None

    def __post_init__(self):
        if not (0 < self.merge_threshold <= 1):
            raise ValueError(
                f"merge threshold {self.merge_threshold} outside (0, 1]")

    def threshold(self, total_resources: int) -> float:
        if self.merge_threshold_fn is not None:
            return min(self.merge_threshold,
                       self.merge_threshold_fn(total_resources))
        return self.merge_threshold


@dataclass(frozen=True)
class SplitTrigger:
    group_id: str
    penalized: frozenset        # PQ: estimated isolated > observed * (1+tol)
    backpressuring: frozenset   # BQ: downstream subplan stalls the shared one

    def __bool__(self):
        return bool(self.penalized or self.backpressuring)


@dataclass
class MergeDecision:
    """Result of one merge pass: the new grouping and what was merged."""

    grouping: list[frozenset]            # all groups, merged sets folded
    merge_sets: list[frozenset]          # group ids merged together
    costs: list[tuple[str, str, float]]  # accepted (a, b, cost) in order
    skipped_stale: bool = False
    skipped_low_confidence: list = field(default_factory=list)


def merge_step(stats: dict[str, GroupStatistics], candidates, config,
               load_of, now_tick: int = 0,
               ticks_per_second: float = 10.0) -> MergeDecision:
    """One merge pass over the current grouping (greedy pairwise).

    ``candidates`` are the sharing-candidate pairs; ``load_of`` composes the
    load of any hypothetical union of member queries and returns None when a
    required segment is low-confidence (the pair is then deferred a cycle).
    Pairs whose lower-throughput group is backpressured by its own
    downstream subplan are skipped: merging would let the slow group throttle
    the other one.
    """
    if config.stats_stale_after_s is not None:
        horizon = now_tick - config.stats_stale_after_s * ticks_per_second
        stale = [g for g in stats.values() if g.stats_epoch < horizon]
        if stale:
            logger.warning(
                "merge cycle skipped: stale statistics for %s",
                sorted(g.group_id for g in stale))
            return MergeDecision(
                [g.members for _, g in sorted(stats.items())], [], [],
                skipped_stale=True)

    sig_groups: dict[str, set[str]] = {}
    for c in candidates:
        sig_groups.setdefault(repr(c.signature), set()).update(
            (c.group_a, c.group_b))
    bucket_of: dict[str, str] = {}
    for sig, gids in sorted(sig_groups.items()):
        for gid in gids:
            bucket_of[gid] = sig

    class Work:
        __slots__ = ("gid", "members", "load", "resources", "idle",
                     "throughput", "backpressured", "origin", "bucket")

    work: dict[str, Work] = {}
    for gid, g in sorted(stats.items()):
        w = Work()
        w.gid = gid
        w.members = g.members
        w.load = g.load
        w.resources = g.resources
        w.idle = g.idle_resources
        w.throughput = g.throughput
        w.backpressured = g.backpressured
        w.origin = {gid}
        w.bucket = bucket_of.get(gid)
        work[gid] = w

    def compatible(a: str, b: str) -> bool:
        ba, bb = work[a].bucket, work[b].bucket
        return ba is not None and ba == bb

    total_resources = sum(w.resources for w in work.values())
    accepted: list[tuple[str, str, float]] = []
    deferred: set = set()

    merging_possible = True
    while merging_possible:
        merging_possible = False
        best = None
        names = sorted(work)
        for i, a in enumerate(names):
            for b in names[i + 1:]:
                if not compatible(a, b):
                    continue
                wa, wb = work[a], work[b]
                slower = wa if wa.throughput <= wb.throughput else wb
                if slower.backpressured:
                    continue
                lu = load_of(wa.members | wb.members)
                if lu is None:
                    deferred.add((a, b))
                    continue
                try:
                    cost = max(
                        grouping_cost(lu, wb.load, wa.resources,
                                      wb.resources, wb.idle),
                        grouping_cost(lu, wa.load, wb.resources,
                                      wa.resources, wa.idle))
                except EstimationError:
                    continue
                mt = config.threshold(total_resources)
                if cost < mt and (best is None or cost < best[0]):
                    best = (cost, a, b, lu)
        if best is not None:
            cost, a, b, lu = best
            wa, wb = work[a], work[b]
            merged = Work()
            merged.gid = min(a, b)
            merged.members = wa.members | wb.members
            merged.load = lu
            merged.resources = wa.resources + wb.resources
            merged.idle = wa.idle + wb.idle
            merged.throughput = min(wa.throughput, wb.throughput)
            merged.backpressured = wa.backpressured or wb.backpressured
            merged.origin = wa.origin | wb.origin
            merged.bucket = wa.bucket
            del work[a], work[b]
            work[merged.gid] = merged
            accepted.append((a, b, cost))
            merging_possible = True

    grouping = [w.members for _, w in sorted(work.items())]
    merge_sets = [frozenset(w.origin) for _, w in sorted(work.items())
                  if len(w.origin) > 1]
    return MergeDecision(grouping, merge_sets, accepted,
                         skipped_low_confidence=sorted(deferred))


def detect_split_triggers(stats: dict[str, GroupStatistics],
                          config: OptimizerConfig) -> list[SplitTrigger]:
    """Find groups where a member is predicted to do better in isolation."""
    triggers = []
    for gid, g in sorted(stats.items()):
        if len(g.members) < 2 and not g.backpressured_queries:
            # a singleton cannot be penalized by sharing
            continue
        penalized = set()
        tol = 1.0 + config.penalty_tolerance
        for qid in sorted(g.members):
            est = g.per_query_isolated_estimate.get(qid)
            if est is not None and est > g.throughput * tol:
                penalized.add(qid)
        bq = frozenset(g.backpressured_queries) & g.members
        if len(g.members) < 2:
            bq = frozenset()
        penalized -= bq
        if penalized or bq:
            triggers.append(SplitTrigger(gid, frozenset(penalized), bq))
    return triggers


@dataclass
class SplitDecision:
    """What to do about one trigger.

    kind "split": replace the group by ``partitions``;
    kind "request_resources": ask the resource manager for more;
    kind "none": trigger vanished after filtering.
    """

    kind: str
    group_id: str
    partitions: list[frozenset] = field(default_factory=list)
    split_out: frozenset = frozenset()


def split_step(group: GroupStatistics, trigger: SplitTrigger,
               resource_headroom: bool) -> SplitDecision:
    """Preserve functional isolation for one triggered group.

    Backpressure response first: queries whose downstream subplan stalls the
    shared plan leave as singletons.  Otherwise more resources are requested
    while headroom exists; at the cap, penalized queries leave as singletons.
    """
    members = group.members
    if trigger.backpressuring:
        out = trigger.backpressuring & members
        rest = members - out
        parts = [frozenset((q,)) for q in sorted(out)]
        if rest:
            parts.insert(0, frozenset(rest))
        return SplitDecision("split", group.group_id, parts, frozenset(out))
    if not trigger.penalized:
        return SplitDecision("none", group.group_id)
    if resource_headroom:
        return SplitDecision("request_resources", group.group_id)
    out = trigger.penalized & members
    rest = members - out
    parts = [frozenset((q,)) for q in sorted(out)]
    if rest:
        parts.insert(0, frozenset(rest))
    return SplitDecision("split", group.group_id, parts, frozenset(out))
