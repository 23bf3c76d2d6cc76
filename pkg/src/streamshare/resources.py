"""Per-group subtask allocation decisions.

During a merge, the minimum resources are found such that the grouping cost
stays below the merge threshold for every constituent; upon a query penalty,
a group's allocation is raised, never beyond the sum of the members' isolated
requirements.  Totals are mapped onto per-operator parallelism proportionally
to each operator's cost share.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

from .errors import InfeasibleAllocation

logger = logging.getLogger(__name__)


@dataclass
class AllocationDecision:
    group_id: str
    total_subtasks: int
    per_operator_parallelism: dict[str, int]

    def __post_init__(self):
        assigned = sum(self.per_operator_parallelism.values())
        if assigned != self.total_subtasks:
            raise InfeasibleAllocation(
                f"layout sums to {assigned}, expected {self.total_subtasks}")


@dataclass(frozen=True)
class GroupProvisionInput:
    """What the provisioning math needs to know about one group."""

    group_id: str
    members: frozenset
    resources: int
    idle: float
    load: float


@dataclass
class MergeProvision:
    """Outcome of provisioning a merge set."""

    total: int
    bounding_group: str          # the i* whose complement needed the most
    complement_resources: int
    rejected: bool = False
    reason: str = ""


def _min_complement_resources(load_union: float, target: GroupProvisionInput,
                              merge_threshold: float, cap: int,
                              start: int = 1) -> int | None:
    """Smallest integer R with GroupingCost(complement@R, target) < MT.

    Linear scan from ``start``; the cost is decreasing in R so the first hit
    is minimal.  Returns None when no R within ``cap`` qualifies.
    """
    from .optimizer import grouping_cost

    for r in range(max(1, start), cap + 1):
        cost = grouping_cost(load_union, target.load, r,
                             target.resources, target.idle)
        if cost < merge_threshold:
            return r
    return None


def provision_merge(merge_set, load_of, merge_threshold: float,
                    cap: int) -> MergeProvision:
    """Minimum resources for a merged group, per the grouping-cost bound.

    For each constituent i, finds the minimum complement allocation such
    that absorbing the complement costs i less than the threshold, then
    provisions for the worst case: Resources(i*) + Resources*(M - i*),
    capped at the sum of the members' isolated requirements (``cap``).
    """
    merge_set = sorted(merge_set, key=lambda g: g.group_id)
    if len(merge_set) < 2:
        raise InfeasibleAllocation("a merge needs at least two groups")
    all_members = frozenset().union(*(g.members for g in merge_set))
    load_union = load_of(all_members)

    best: tuple[int, str, int] | None = None   # (R*, gid, resources_i)
    for g in merge_set:
        r_star = _min_complement_resources(load_union, g, merge_threshold,
                                           cap)
        if r_star is None:
            return MergeProvision(0, g.group_id, 0, rejected=True,
                                  reason=f"no complement allocation within "
                                         f"cap {cap} satisfies the threshold "
                                         f"for {g.group_id}")
        if best is None or r_star > best[0]:
            best = (r_star, g.group_id, g.resources)
    r_star, gid, res_i = best
    total = res_i + r_star
    if total > cap:
        return MergeProvision(0, gid, r_star, rejected=True,
                              reason=f"provision {total} exceeds cap {cap}")
    return MergeProvision(total, gid, r_star)


@dataclass(frozen=True)
class PenaltyRequest:
    group_id: str
    target_throughput: float     # records/s the group must reach
    load: float                  # cost units per record, whole plan
    current_resources: int
    max_resources: int
    min_resources: int
    measured_throughput: float = 0.0


def adjust_on_penalty(request: PenaltyRequest,
                      subtask_capacity: float) -> int | None:
    """Smallest allocation lifting group throughput above the target.

    Uses the throughput relation T ~ resources/load: the grant scales the
    current allocation by target/measured when a measurement exists (which
    also accounts for imbalance the load model cannot see), falling back to
    the analytic inversion.  Returns None (denial) when the group already
    runs at its maximum allocation; the grant never exceeds that cap, and a
    grant at the cap that still under-delivers leads to a denial on the
    next cycle.
    """
    if request.current_resources >= request.max_resources:
        return None
    if request.measured_throughput > 0:
        needed = (request.current_resources * request.target_throughput
                  / request.measured_throughput)
    else:
        needed = request.load * request.target_throughput / subtask_capacity
    total = max(request.min_resources, request.current_resources + 1,
                math.ceil(needed))
    if total > request.max_resources:
        # no increase within the cap is predicted to restore isolation
        return None
    return total


def post_split_allocation(old_total: int, split_isolated: int,
                          min_resources: int) -> int:
    """Remainder-group allocation after members were split out."""
    return max(min_resources, old_total - split_isolated)


def layout_parallelism(total_subtasks: int, op_costs) -> dict[str, int]:
    """Spread a subtask budget over operators proportionally to cost share.

    Every operator gets at least one subtask; the rest follow largest
    remainders of ``total * share``, ties resolved by operator order.
    """
    ops = list(op_costs)
    n = len(ops)
    if total_subtasks < n:
        raise InfeasibleAllocation(
            f"{total_subtasks} subtasks cannot cover {n} operators")
    total_cost = sum(c for _, c in ops)
    if total_cost <= 0:
        shares = [(name, 1.0 / n) for name, _ in ops]
    else:
        shares = [(name, c / total_cost) for name, c in ops]
    raw = [(name, total_subtasks * share) for name, share in shares]
    alloc = {name: max(1, int(t)) for name, t in raw}
    assigned = sum(alloc.values())
    if assigned < total_subtasks:
        remainders = sorted(
            ((t - int(t), i) for i, (name, t) in enumerate(raw)),
            key=lambda x: (-x[0], x[1]))
        i = 0
        while assigned < total_subtasks:
            _, idx = remainders[i % n]
            alloc[raw[idx][0]] += 1
            assigned += 1
            i += 1
    elif assigned > total_subtasks:
        # the >=1 clamp overshot: trim ops furthest above their target
        while assigned > total_subtasks:
            over = sorted(
                ((alloc[name] - t, i) for i, (name, t) in enumerate(raw)
                 if alloc[name] > 1),
                key=lambda x: (-x[0], x[1]))
            if not over:
                raise InfeasibleAllocation("cannot trim layout to budget")
            _, idx = over[0]
            alloc[raw[idx][0]] -= 1
            assigned -= 1
    return alloc
