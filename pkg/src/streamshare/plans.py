"""Shared global plans and sharing-candidate discovery.

A group's global plan reads the input streams once, applies one filter stage
whose predicate set is the union of the member queries' predicates, runs one
shared windowed join, and routes join results to per-query downstream
branches.  Queries with structurally identical downstream pipelines share a
branch.  Sharing candidates between groups are joins: two groups can share
when their plans contain the same source/filter/join subpipeline signature.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field, replace

from .errors import PlanError


@dataclass(frozen=True)
class JoinSpec:
    """Windowed equi-join between two streams (or a self-join on one)."""

    left_stream: str
    right_stream: str
    key_field: str
    window_size: int   # event-time units
    slide: int

    def __post_init__(self):
        if not (self.window_size >= self.slide > 0):
            raise PlanError(
                f"window size {self.window_size} must be >= slide "
                f"{self.slide} > 0")

    @property
    def streams(self) -> tuple[str, ...]:
        if self.left_stream == self.right_stream:
            return (self.left_stream,)
        return (self.left_stream, self.right_stream)

    @property
    def self_join(self) -> bool:
        return self.left_stream == self.right_stream


@dataclass(frozen=True)
class DownstreamOp:
    """One operator of a query's downstream pipeline.

    kind "udf": params = {"cost": float}
    kind "window_aggregate": params = {"key_field": str, "value_field": str}
        (windowed average, window/slide taken from the join spec)
    """

    kind: str
    params: tuple[tuple[str, object], ...]

    @staticmethod
    def udf(cost: float) -> "DownstreamOp":
        return DownstreamOp("udf", (("cost", float(cost)),))

    @staticmethod
    def window_aggregate(key_field: str, value_field: str) -> "DownstreamOp":
        return DownstreamOp("window_aggregate",
                            (("key_field", key_field),
                             ("value_field", value_field)))

    def param(self, name):
        for k, v in self.params:
            if k == name:
                return v
        raise KeyError(name)


@dataclass(frozen=True)
class QuerySpec:
    """A single continuous query: range filters, a join and a downstream."""

    query_id: str
    predicates: tuple[tuple[str, int, int], ...]  # (stream, lo, hi) ranges
    join: JoinSpec
    downstream: tuple[DownstreamOp, ...] = ()
    pre_join: tuple[DownstreamOp, ...] = ()
    filter_field: str = "key"
    isolated_resources: int = 0
    isolated_throughput_profile: float | None = None

    def predicate_for(self, stream: str) -> tuple[int, int] | None:
        for s, lo, hi in self.predicates:
            if s == stream:
                return (lo, hi)
        return None

    def subpipeline_signature(self) -> tuple:
        """Identity of the shareable source/filter[/pre-join]/join stage."""
        return (self.join, self.pre_join, self.filter_field)


@dataclass(frozen=True)
class Branch:
    """A downstream subplan serving one or more queries of a group."""

    branch_id: str
    pipeline: tuple[DownstreamOp, ...]
    query_ids: tuple[str, ...]


@dataclass(frozen=True)
class GroupPlan:
    """Compiled global plan for one sharing group."""

    group_id: str
    queries: tuple[QuerySpec, ...]
    join: JoinSpec
    pre_join: tuple[DownstreamOp, ...]
    branches: tuple[Branch, ...]

    @property
    def member_ids(self) -> tuple[str, ...]:
        return tuple(q.query_id for q in self.queries)

    def predicates_for(self, stream: str) -> tuple[tuple[str, int, int], ...]:
        """(query_id, lo, hi) predicates applying to ``stream``."""
        out = []
        for q in self.queries:
            rng = q.predicate_for(stream)
            if rng is not None:
                out.append((q.query_id, rng[0], rng[1]))
        return tuple(out)

    def union_ranges(self, stream: str) -> tuple[tuple[int, int], ...]:
        """Disjoint, sorted union of the member predicates on ``stream``."""
        return merge_ranges([(lo, hi) for _, lo, hi in
                             self.predicates_for(stream)])

    def operator_names(self) -> list[str]:
        names = [f"source:{s}" for s in self.join.streams]
        names += [f"filter:{s}" for s in self.join.streams]
        names += [f"prejoin{i}" for i in range(len(self.pre_join))]
        names += ["join", "router"]
        for br in self.branches:
            names += [f"{br.branch_id}:op{i}" for i in range(len(br.pipeline))]
            names.append(f"{br.branch_id}:sink")
        return names

    @property
    def min_resources(self) -> int:
        return len(self.operator_names())


@dataclass
class QueryGroup:
    """A disjoint set of queries, their shared plan and resource allocation."""

    group_id: str
    members: tuple[str, ...]
    plan: GroupPlan
    resources: int
    max_resources: int

    def __post_init__(self):
        if self.resources > self.max_resources:
            raise PlanError(
                f"group {self.group_id}: resources {self.resources} exceed "
                f"cap {self.max_resources}")


@dataclass(frozen=True)
class SharingCandidate:
    """An unordered pair of groups whose plans share a subpipeline."""

    group_a: str
    group_b: str
    signature: tuple


def merge_ranges(ranges) -> tuple[tuple[int, int], ...]:
    """Collapse half-open ranges into a disjoint sorted union."""
    spans = sorted((lo, hi) for lo, hi in ranges if hi > lo)
    out: list[list[int]] = []
    for lo, hi in spans:
        if out and lo <= out[-1][1]:
            out[-1][1] = max(out[-1][1], hi)
        else:
            out.append([lo, hi])
    return tuple((lo, hi) for lo, hi in out)


def build_group_plan(group_id: str, members, *,
                     share_downstream: bool = True) -> GroupPlan:
    """Construct the shared global plan for ``members``.

    All members must share the same join signature (streams, key, window)
    and pre-join pipeline; downstream subplans may differ.  Queries with
    identical downstream pipelines are served by one branch when
    ``share_downstream`` is set.
    """
    members = tuple(members)
    if not members:
        raise PlanError("a group needs at least one member query")
    sig = members[0].subpipeline_signature()
    for q in members[1:]:
        if q.subpipeline_signature() != sig:
            raise PlanError(
                f"query {q.query_id} cannot share a plan with "
                f"{members[0].query_id}: incompatible join/pre-join spec")

    branches: list[Branch] = []
    if share_downstream:
        by_pipeline: dict[tuple, list[str]] = {}
        for q in members:
            by_pipeline.setdefault(q.downstream, []).append(q.query_id)
        for i, (pipeline, qids) in enumerate(sorted(
                by_pipeline.items(),
                key=lambda kv: tuple(sorted(kv[1])))):
            branches.append(Branch(f"br{i}", pipeline, tuple(sorted(qids))))
    else:
        for i, q in enumerate(sorted(members, key=lambda q: q.query_id)):
            branches.append(Branch(f"br{i}", q.downstream, (q.query_id,)))

    return GroupPlan(
        group_id=group_id,
        queries=tuple(sorted(members, key=lambda q: q.query_id)),
        join=members[0].join,
        pre_join=members[0].pre_join,
        branches=tuple(branches),
    )


def find_sharing_candidates(groups) -> list[SharingCandidate]:
    """All unordered group pairs whose plans share a subpipeline signature."""
    by_sig: dict[tuple, list[QueryGroup]] = {}
    for g in groups:
        sig = (g.plan.join, g.plan.pre_join)
        by_sig.setdefault(sig, []).append(g)
    out = []
    for sig in sorted(by_sig, key=repr):
        bucket = sorted(by_sig[sig], key=lambda g: g.group_id)
        for a, b in itertools.combinations(bucket, 2):
            out.append(SharingCandidate(a.group_id, b.group_id, sig))
    return out


def assert_partition(groups, all_query_ids) -> None:
    """Groups must be a disjoint cover of the full query set."""
    seen: set[str] = set()
    for g in groups:
        for qid in g.members:
            if qid in seen:
                raise PlanError(f"query {qid} appears in multiple groups")
            seen.add(qid)
    missing = set(all_query_ids) - seen
    if missing:
        raise PlanError(f"queries not covered by any group: {sorted(missing)}")
    extra = seen - set(all_query_ids)
    if extra:
        raise PlanError(f"unknown queries in grouping: {sorted(extra)}")
