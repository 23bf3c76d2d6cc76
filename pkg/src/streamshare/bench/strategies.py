"""Execution strategies: the adaptive optimizer and four baselines."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from ..errors import ConfigurationError
from ..estimation import plan_cost_profile
from ..optimizer import OptimizerConfig
from ..plans import build_group_plan, merge_ranges
from .workload import WorkloadConfig, analytic_union_stats

STRATEGIES = ("isolated", "full_sharing", "overlap_sharing",
              "selectivity_sharing", "funshare")


@dataclass
class StrategyConfig:
    strategy: str = "funshare"
    selectivity_threshold: float = 0.05   # selectivity-sharing H/L split
    constrained: bool = False             # "(C)": never share downstream ops
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ConfigurationError(
                f"strategy must be one of {STRATEGIES}, got "
                f"{self.strategy!r}")

    @property
    def share_downstream(self) -> bool:
        return not self.constrained


def strategy_config_from_dict(data: dict) -> StrategyConfig:
    data = dict(data)
    if "optimizer" in data and isinstance(data["optimizer"], dict):
        try:
            data["optimizer"] = OptimizerConfig(**data["optimizer"])
        except (TypeError, ValueError) as exc:
            raise ConfigurationError(f"bad optimizer configuration: {exc}")
    try:
        return StrategyConfig(**data)
    except TypeError as exc:
        raise ConfigurationError(f"bad strategy configuration: {exc}")


def build_strategy_grouping(strategy_cfg: StrategyConfig, queries,
                            workload_cfg: WorkloadConfig
                            ) -> list[list[str]]:
    """Initial partition of the query set for the chosen strategy.

    The adaptive strategy starts from singletons and refines at runtime; the
    baselines are computed once from the initial distribution's statistics.
    """
    strategy = strategy_cfg.strategy
    qids = [q.query_id for q in queries]
    if strategy in ("isolated", "funshare"):
        return [[qid] for qid in qids]
    if strategy == "full_sharing":
        return [list(qids)]
    if strategy == "selectivity_sharing":
        by_q = {}
        for q in queries:
            sel, _ = analytic_union_stats(
                workload_cfg, [(lo, hi) for _, lo, hi in q.predicates[:1]])
            by_q[q.query_id] = sel
        low = [qid for qid in qids
               if by_q[qid] <= strategy_cfg.selectivity_threshold]
        high = [qid for qid in qids
                if by_q[qid] > strategy_cfg.selectivity_threshold]
        return [g for g in (low, high) if g]
    # overlap sharing: greedily merge whenever the joint join-stage cost is
    # lower than the groups' separate join-stage costs
    spec_of = {q.query_id: q for q in queries}

    def join_cost(members) -> float:
        ranges = []
        for qid in members:
            _, lo, hi = spec_of[qid].predicates[0]
            ranges.append((lo, hi))
        sel, m = analytic_union_stats(workload_cfg, ranges)
        eng = workload_cfg.engine
        pre = (workload_cfg.udf_cost if workload_cfg.workload == "W3"
               else 0.0)
        return sel * (pre + eng.join_input_cost + eng.join_output_cost * m)

    groups = [frozenset((qid,)) for qid in qids]
    changed = True
    while changed:
        changed = False
        best = None
        ordered = sorted(groups, key=lambda g: sorted(g))
        for i, a in enumerate(ordered):
            for b in ordered[i + 1:]:
                saving = join_cost(a) + join_cost(b) - join_cost(a | b)
                if saving > 1e-12 and (best is None or saving > best[0]):
                    best = (saving, a, b)
        if best is not None:
            _, a, b = best
            groups.remove(a)
            groups.remove(b)
            groups.append(a | b)
            changed = True
    return [sorted(g) for g in sorted(groups, key=lambda g: sorted(g))]


def baseline_allocation(plan, members, workload_cfg: WorkloadConfig,
                        queries) -> int:
    """Static allocation for a baseline group: enough for the base rate
    under the initial distribution, capped by the members' isolated sum."""
    spec_of = {q.query_id: q for q in queries}
    cap = sum(spec_of[m].isolated_resources for m in members)
    if len(members) == 1:
        return spec_of[next(iter(members))].isolated_resources
    rate = workload_cfg.rate_at(0.0)
    ranges = []
    for m in members:
        _, lo, hi = spec_of[m].predicates[0]
        ranges.append((lo, hi))
    stats = analytic_union_stats(workload_cfg, merge_ranges(ranges))
    branch_stats = {}
    for br in plan.branches:
        br_ranges = []
        for qid in br.query_ids:
            _, lo, hi = spec_of[qid].predicates[0]
            br_ranges.append((lo, hi))
        branch_stats[br.branch_id] = analytic_union_stats(
            workload_cfg, merge_ranges(br_ranges))
    profile = plan_cost_profile(plan, rate, stats, workload_cfg.engine,
                                branch_stats)
    needed = math.ceil(sum(c for _, c in profile)
                       / workload_cfg.engine.subtask_capacity)
    return max(plan.min_resources, min(cap, needed))
