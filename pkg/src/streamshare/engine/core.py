"""Deterministic discrete-time dataflow engine.

Operator DAGs run as parallel subtasks connected by bounded FIFO channels.
Each tick, every subtask consumes up to its capacity in cost units from its
input channels (round-robin by channel index), produces downstream, and
stalls when a downstream queue is full.  Source subtasks buffer what they
cannot emit in an unbounded source buffer whose length is tracked.  The whole
engine is single-threaded and bit-reproducible for a given configuration.

Time model: one tick is ``tick_seconds`` of simulated time; event time is
measured in ticks and advances with the tick counter.  Work is measured in
abstract cost units; the per-kind unit costs instantiate the analytical
cost model (per-record source/filter cost, join input cost, join output cost
per match, configured downstream costs) directly in the data plane.
"""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass

from ..errors import ConfigurationError
from ..plans import GroupPlan
from ..reconfig import EpochMarker, ReconfigurationManager, stable_hash
from ..tuples import QueryRegistry, TaggedTuple, canonical_payload

logger = logging.getLogger(__name__)


@dataclass
class EngineParams:
    """Physics of the simulated data plane."""

    tick_seconds: float = 0.1
    queue_capacity: int = 1024
    subtask_capacity: float = 100.0   # cost units per second per subtask
    source_cost: float = 0.4          # per record at a source subtask
    filter_cost: float = 0.6          # per record at a filter subtask
    join_input_cost: float = 1.0      # per record entering the join
    join_output_cost: float = 0.2     # per emitted match
    aggregate_cost: float = 0.5       # per record per accumulator update
    router_cost: float = 0.0
    sink_cost: float = 0.0
    scaling_exponent: float = 1.0     # operator capacity ~ parallelism**sigma
    sample_period: int = 100          # continuous per-query sample (1%)
    sweep_period: int = 64            # ticks between state eviction sweeps

    @property
    def alpha(self) -> float:
        return self.source_cost + self.filter_cost

    def tick_capacity(self, parallelism: int) -> float:
        scale = parallelism ** (self.scaling_exponent - 1.0)
        return self.subtask_capacity * self.tick_seconds * scale


class Channel:
    """Bounded FIFO between one producer subtask and one consumer subtask."""

    __slots__ = ("cid", "capacity", "items", "consumer_sid", "producer_sid",
                 "last_dequeued_et", "producer_et")

    def __init__(self, cid: int, capacity: int, producer_sid: int,
                 consumer_sid: int):
        self.cid = cid
        self.capacity = capacity
        self.items: deque = deque()
        self.producer_sid = producer_sid
        self.consumer_sid = consumer_sid
        self.last_dequeued_et = -1
        self.producer_et = -1

    def full(self) -> bool:
        return len(self.items) >= self.capacity

    def watermark(self) -> int:
        if self.items:
            return self.last_dequeued_et
        return max(self.last_dequeued_et, self.producer_et)


class OutEdge:
    """Producer-side fan-out to the subtasks of one downstream operator."""

    __slots__ = ("channels", "mode", "key_field", "rr", "branch_mask")

    def __init__(self, channels, mode: str, key_field: str | None = None,
                 branch_mask: int | None = None):
        self.channels = channels
        self.mode = mode            # "rr" or "hash"
        self.key_field = key_field
        self.rr = 0
        self.branch_mask = branch_mask

    def pick(self, tup: TaggedTuple) -> Channel:
        if self.mode == "hash":
            return self.channels[
                stable_hash(tup.payload[self.key_field]) % len(self.channels)]
        ch = self.channels[self.rr]
        self.rr = (self.rr + 1) % len(self.channels)
        return ch


class Operator:
    """Logical operator of one group's plan; shared by its subtasks."""

    def __init__(self, kind: str, name: str, group_id: str, depth: int,
                 parallelism: int, params: EngineParams, *,
                 role=None, stream: str | None = None,
                 predicates=None, filter_field: str = "key",
                 join_key: str | None = None, window_size: int = 0,
                 slide: int = 1, udf_cost: float = 0.0,
                 agg_key: str | None = None, agg_value: str | None = None,
                 key_scoped: bool = False, query_mask: int = 0,
                 member_mask: int = 0, join_spec=None):
        self.kind = kind
        self.name = name
        self.group_id = group_id
        self.depth = depth
        self.parallelism = parallelism
        self.role = role
        self.stream = stream
        self.predicates = predicates or {}   # stream -> [(qmask, lo, hi)]
        self.filter_field = filter_field
        self.join_key = join_key
        self.window_size = window_size
        self.slide = slide
        self.agg_key = agg_key
        self.agg_value = agg_value
        self.key_scoped = key_scoped
        self.query_mask = query_mask
        self.member_mask = member_mask
        self.join_spec = join_spec
        self.tick_capacity = params.tick_capacity(parallelism)
        if kind == "source":
            self.unit_cost = params.source_cost
        elif kind == "filter":
            self.unit_cost = params.filter_cost
        elif kind == "window_join":
            self.unit_cost = params.join_input_cost
        elif kind == "udf":
            self.unit_cost = udf_cost
        elif kind == "window_aggregate":
            self.unit_cost = params.aggregate_cost
        elif kind == "router":
            self.unit_cost = params.router_cost
        elif kind == "sink":
            self.unit_cost = params.sink_cost
        else:
            raise ConfigurationError(f"unknown operator kind {kind!r}")
        self.output_cost = params.join_output_cost
        # monitoring state (filter/join): disjoint segments over filter_field
        self.monitor_segments: tuple[tuple[int, int], ...] = ()
        self.monitor_total = 0
        self.seg_counts: dict[int, int] = {}
        self.seg_match_sums: dict[int, int] = {}
        self.seg_probe_counts: dict[int, int] = {}
        # continuous per-query sample statistics
        self.sample_total = 0
        self.q_in_counts: dict[int, int] = {}
        self.q_match_sums: dict[int, int] = {}
        self.q_probe_counts: dict[int, int] = {}

    @property
    def stateful(self) -> bool:
        return self.kind in ("window_join", "window_aggregate")

    def reset_monitor_stats(self) -> None:
        self.monitor_total = 0
        self.seg_counts = {}
        self.seg_match_sums = {}
        self.seg_probe_counts = {}

    def segment_of(self, val) -> int:
        for i, (lo, hi) in enumerate(self.monitor_segments):
            if lo <= val < hi:
                return i
        return -1

    def owners_of(self, stream: str, val) -> int:
        owners = 0
        for qmask, lo, hi in self.predicates.get(stream, ()):
            if lo <= val < hi:
                owners |= qmask
        return owners


class QueryOutput:
    """Per-query sink register; survives pipeline rebuilds."""

    __slots__ = ("total", "w_count", "w_latency_sum", "records")

    def __init__(self):
        self.total = 0
        self.w_count = 0
        self.w_latency_sum = 0
        self.records: list | None = None


class Subtask:
    """One parallel instance of an operator."""

    __slots__ = (
        "sid", "op", "index", "in_channels", "out_edges", "buffer",
        "carry", "rr_pos", "sealed", "pending_edit", "retiring",
        "awaited_tokens", "state_recipients", "monitor_active",
        "sample_counter", "last_in_et",
        # state
        "store", "panes", "last_emitted", "state_count", "evicted_count",
        # cumulative counters
        "in_count", "out_count", "drop_count", "emitted_by_stream",
        # window counters
        "w_busy", "w_idle", "w_ticks", "w_stall_ticks", "w_stall_by_mask",
        "w_emitted_by_stream", "busy_time", "idle_time",
    )

    def __init__(self, sid: int, op: Operator, index: int):
        self.sid = sid
        self.op = op
        self.index = index
        self.in_channels: list[Channel] = []
        self.out_edges: list[OutEdge] = []
        self.buffer: deque = deque()      # sources only
        self.carry = 0.0
        self.rr_pos = 0
        self.sealed: set[int] = set()
        self.pending_edit = None
        self.retiring = False
        self.awaited_tokens: set[int] = set()
        self.state_recipients: list[Subtask] = []
        self.monitor_active = False
        self.sample_counter = 0
        self.last_in_et = -1
        self.store: dict = {}             # join: (stream, key) -> [tuples]
        self.panes: dict = {}             # agg: scope -> [sum, count, mask]
        self.last_emitted: int | None = None
        self.state_count = 0
        self.evicted_count = 0
        self.in_count = 0
        self.out_count = 0
        self.drop_count = 0
        self.emitted_by_stream: dict[str, int] = {}
        self.w_busy = 0.0
        self.w_idle = 0.0
        self.w_ticks = 0
        self.w_stall_ticks = 0
        self.w_stall_by_mask: dict[int, int] = {}
        self.w_emitted_by_stream: dict[str, int] = {}
        self.busy_time = 0.0
        self.idle_time = 0.0

    # ------------------------------------------------------------------
    def begin_epoch(self, epoch_id: int) -> None:
        self.sealed = set()

    def end_epoch(self) -> None:
        self.sealed = set()

    def outputs_blocked(self) -> bool:
        for edge in self.out_edges:
            for ch in edge.channels:
                if ch.full():
                    return True
        return False

    def blocking_masks(self) -> list[int]:
        masks = []
        for edge in self.out_edges:
            for ch in edge.channels:
                if ch.full():
                    masks.append(edge.branch_mask or 0)
                    break
        return masks

    def emit(self, tup: TaggedTuple) -> None:
        if self.op.kind == "router":
            for edge in self.out_edges:
                if tup.query_set & edge.branch_mask:
                    edge.pick(tup).items.append(tup)
                    self.out_count += 1
            return
        for edge in self.out_edges:
            edge.pick(tup).items.append(tup)
            self.out_count += 1

    def forward_marker(self, marker: EpochMarker) -> None:
        for edge in self.out_edges:
            for ch in edge.channels:
                ch.items.append(marker)   # control records bypass capacity
                ch.producer_et = max(ch.producer_et, marker.event_time)

    def apply_monitoring_edit(self, edit) -> None:
        if edit.enable:
            self.op.monitor_segments = edit.segments
            if not self.monitor_active:
                self.op.reset_monitor_stats()
            self.monitor_active = True
        else:
            self.monitor_active = False
            self.op.monitor_segments = ()

    # ------------------------------------------------------------------
    # state export/import for reconfiguration
    def export_state(self):
        if self.op.kind == "window_join":
            for (stream, key), entries in sorted(self.store.items()):
                yield key, (stream, key), entries
        elif self.op.kind == "window_aggregate":
            for scope, acc in sorted(self.panes.items()):
                # scope = (qbit_or_None, key, pane_end); partition by key
                yield scope[1], scope, acc

    def import_entry(self, entry_key, payload, epoch_time) -> bool:
        op = self.op
        if op.kind == "window_join":
            stream, key = entry_key
            if entry_key in self.store:
                return False
            retagged = []
            for tup in payload:
                owners = op.owners_of(stream, tup.payload[op.filter_field])
                owners &= op.member_mask
                retagged.append(TaggedTuple(
                    tup.payload, tup.event_time, owners, tup.stream,
                    monitor=owners == 0))
            self.store[entry_key] = retagged
            self.state_count += len(retagged)
            return True
        if op.kind == "window_aggregate":
            qbit, key, pane_end = entry_key
            if qbit is not None and not ((1 << qbit) & op.query_mask):
                return False
            if entry_key in self.panes:
                existing = self.panes[entry_key]
                existing[2] |= payload[2] & op.query_mask
                return False
            acc = [payload[0], payload[1], payload[2]]
            if qbit is None:
                # re-derive ownership under the new group's predicates
                acc[2] = self._retag_key_owners(key)
            self.panes[entry_key] = acc
            self.state_count += 1
            if epoch_time is not None:
                base = (epoch_time // op.slide) * op.slide
                if self.last_emitted is None or self.last_emitted < base:
                    self.last_emitted = base
            return True
        return False

    def _retag_key_owners(self, key) -> int:
        op = self.op
        owners = 0
        for preds in op.predicates.values():
            for qmask, lo, hi in preds:
                if lo <= key < hi:
                    owners |= qmask
        return owners & op.query_mask if op.query_mask else owners

    # ------------------------------------------------------------------
    def watermark(self) -> int:
        wm = None
        for ch in self.in_channels:
            w = ch.watermark()
            if wm is None or w < wm:
                wm = w
        return -1 if wm is None else wm


class GroupRuntime:
    """Instantiated pipeline of one query group inside the engine."""

    def __init__(self, group_id: str, plan: GroupPlan, layout: dict,
                 member_mask: int):
        self.group_id = group_id
        self.plan = plan
        self.layout = dict(layout)
        self.member_mask = member_mask
        self.subscribed = True
        self.subtasks_by_op: dict[str, list[Subtask]] = {}
        self.sources_by_stream: dict[str, list[Subtask]] = {}
        self.rr_feed: dict[str, int] = {}
        self.retired_scrap = _WindowScrap()

    def total_resources(self) -> int:
        return sum(self.layout.values())

    def source_subtasks(self):
        for stream in sorted(self.sources_by_stream):
            yield from self.sources_by_stream[stream]

    def all_subtasks(self, engine: "Engine"):
        for name in self.plan.operator_names():
            yield from self.subtasks_by_op.get(name, ())

    def shared_op_names(self) -> list[str]:
        names = [f"source:{s}" for s in self.plan.join.streams]
        names += [f"filter:{s}" for s in self.plan.join.streams]
        names += [f"prejoin{i}" for i in range(len(self.plan.pre_join))]
        names.append("join")
        return names


class _WindowScrap:
    """Window-counter remainders of subtasks retired mid-window."""

    def __init__(self):
        self.reset()

    def reset(self):
        self.busy = 0.0
        self.idle_frac_sum = 0.0   # sum over subtasks of per-window fraction
        self.ticks = 0
        self.stall_ticks = 0
        self.stall_by_mask: dict[int, int] = {}
        self.emitted_by_stream: dict[str, int] = {}

    def absorb(self, sub: Subtask):
        self.busy += sub.w_busy
        if sub.w_ticks:
            self.idle_frac_sum += sub.w_idle / sub.w_ticks
        self.ticks += sub.w_ticks
        self.stall_ticks += sub.w_stall_ticks
        for m, v in sub.w_stall_by_mask.items():
            self.stall_by_mask[m] = self.stall_by_mask.get(m, 0) + v
        for s, v in sub.w_emitted_by_stream.items():
            self.emitted_by_stream[s] = self.emitted_by_stream.get(s, 0) + v


class Engine:
    """Deterministic single-threaded execution of one or more group plans."""

    def __init__(self, params: EngineParams, registry: QueryRegistry):
        self.params = params
        self.registry = registry
        self.tick_no = 0
        self.groups: dict[str, GroupRuntime] = {}
        self.subtasks: dict[int, Subtask] = {}
        self.channels: dict[int, Channel] = {}
        self._sid = 0
        self._cid = 0
        self._ordered: list[Subtask] = []
        self._order_dirty = False
        self.reconfig = ReconfigurationManager()
        self.feed_fn = None
        self.query_outputs: dict[int, QueryOutput] = {}
        self.events: list[tuple[int, str, str, str]] = []
        self.record_outputs = False

    # ------------------------------------------------------------------
    # construction
    def set_feed(self, fn) -> None:
        self.feed_fn = fn

    def enable_output_recording(self) -> None:
        self.record_outputs = True
        for out in self.query_outputs.values():
            if out.records is None:
                out.records = []

    def _query_output(self, bit: int) -> QueryOutput:
        out = self.query_outputs.get(bit)
        if out is None:
            out = QueryOutput()
            if self.record_outputs:
                out.records = []
            self.query_outputs[bit] = out
        return out

    def build_group(self, plan: GroupPlan, layout: dict[str, int]
                    ) -> GroupRuntime:
        member_mask = self.registry.mask(plan.member_ids)
        for qid in plan.member_ids:
            self._query_output(self.registry.bit(qid))
        rt = GroupRuntime(plan.group_id, plan, layout, member_mask)
        filter_field = plan.queries[0].filter_field
        join = plan.join
        predicates = {}
        for stream in join.streams:
            preds = []
            for qid, lo, hi in plan.predicates_for(stream):
                preds.append((1 << self.registry.bit(qid), lo, hi))
            predicates[stream] = preds

        depth = 0
        ops: dict[str, Operator] = {}

        def add(name, kind, **kw):
            nonlocal depth
            p = layout.get(name, 1)
            op = Operator(kind, name, plan.group_id, depth, p, self.params,
                          member_mask=member_mask, **kw)
            ops[name] = op
            depth += 1
            subs = [self._new_subtask(op, i) for i in range(p)]
            rt.subtasks_by_op[name] = subs
            return op, subs

        for stream in join.streams:
            _, subs = add(f"source:{stream}", "source", stream=stream)
            rt.sources_by_stream[stream] = subs
            rt.rr_feed[stream] = 0
        for stream in join.streams:
            add(f"filter:{stream}", "filter", stream=stream,
                predicates=predicates, filter_field=filter_field)
        for i, dop in enumerate(plan.pre_join):
            add(f"prejoin{i}", "udf", udf_cost=dop.param("cost"))
        join_role = ("join", join, plan.pre_join)
        add("join", "window_join", role=join_role, join_spec=join,
            join_key=join.key_field, window_size=join.window_size,
            slide=join.slide, predicates=predicates,
            filter_field=filter_field)
        add("router", "router")
        for br in plan.branches:
            mask = self.registry.mask(br.query_ids)
            prev = "router"
            for i, dop in enumerate(br.pipeline):
                name = f"{br.branch_id}:op{i}"
                if dop.kind == "udf":
                    add(name, "udf", udf_cost=dop.param("cost"),
                        query_mask=mask,
                        role=("branch", br.pipeline, i))
                elif dop.kind == "window_aggregate":
                    key_field = dop.param("key_field")
                    key_scoped = (key_field == join.key_field
                                  and key_field == filter_field)
                    add(name, "window_aggregate",
                        role=("branch", br.pipeline, i),
                        agg_key=key_field, agg_value=dop.param("value_field"),
                        window_size=join.window_size, slide=join.slide,
                        key_scoped=key_scoped, query_mask=mask,
                        predicates=predicates)
                else:
                    raise ConfigurationError(
                        f"unsupported downstream operator {dop.kind!r}")
                prev = name
            add(f"{br.branch_id}:sink", "sink", query_mask=mask)

        self._wire(rt, ops, plan)
        self.groups[plan.group_id] = rt
        self._order_dirty = True
        return rt

    def _new_subtask(self, op: Operator, index: int) -> Subtask:
        sub = Subtask(self._sid, op, index)
        self._sid += 1
        self.subtasks[sub.sid] = sub
        return sub

    def _connect(self, producers, consumers, mode, key_field=None,
                 branch_mask=None) -> None:
        cap = self.params.queue_capacity
        for prod in producers:
            chans = []
            for cons in consumers:
                ch = Channel(self._cid, cap, prod.sid, cons.sid)
                self._cid += 1
                self.channels[ch.cid] = ch
                cons.in_channels.append(ch)
                chans.append(ch)
            prod.out_edges.append(
                OutEdge(chans, mode, key_field, branch_mask))

    def _wire(self, rt: GroupRuntime, ops: dict[str, Operator],
              plan: GroupPlan) -> None:
        join = plan.join
        by_op = rt.subtasks_by_op
        pre_names = [f"prejoin{i}" for i in range(len(plan.pre_join))]
        for stream in join.streams:
            self._connect(by_op[f"source:{stream}"],
                          by_op[f"filter:{stream}"], "rr")
            head = pre_names[0] if pre_names else "join"
            mode = "rr" if pre_names else "hash"
            self._connect(by_op[f"filter:{stream}"], by_op[head], mode,
                          key_field=join.key_field)
        for i, name in enumerate(pre_names):
            nxt = pre_names[i + 1] if i + 1 < len(pre_names) else "join"
            mode = "rr" if i + 1 < len(pre_names) else "hash"
            self._connect(by_op[name], by_op[nxt], mode,
                          key_field=join.key_field)
        self._connect(by_op["join"], by_op["router"], "rr")
        for br in plan.branches:
            mask = self.registry.mask(br.query_ids)
            head = (f"{br.branch_id}:op0" if br.pipeline
                    else f"{br.branch_id}:sink")
            head_op = ops[head]
            mode = "hash" if head_op.kind == "window_aggregate" else "rr"
            self._connect(by_op["router"], by_op[head], mode,
                          key_field=head_op.agg_key, branch_mask=mask)
            prev = head
            for i in range(1, len(br.pipeline)):
                name = f"{br.branch_id}:op{i}"
                nop = ops[name]
                mode = "hash" if nop.kind == "window_aggregate" else "rr"
                self._connect(by_op[prev], by_op[name], mode,
                              key_field=nop.agg_key)
                prev = name
            if br.pipeline:
                self._connect(by_op[prev], by_op[f"{br.branch_id}:sink"],
                              "rr")

    def remove_group(self, group_id: str) -> None:
        self.groups.pop(group_id, None)

    def retire_subtask(self, sub: Subtask) -> None:
        for ch in sub.in_channels:
            self.channels.pop(ch.cid, None)
        group = self.groups.get(sub.op.group_id)
        if group is not None:
            group.retired_scrap.absorb(sub)
            subs = group.subtasks_by_op.get(sub.op.name)
            if subs and sub in subs:
                subs.remove(sub)
            src = group.sources_by_stream.get(sub.op.stream)
            if src and sub in src:
                src.remove(sub)
            if not any(group.subtasks_by_op.values()):
                self.remove_group(group.group_id)
        self.subtasks.pop(sub.sid, None)
        self._order_dirty = True

    # ------------------------------------------------------------------
    # execution
    def _order(self) -> list[Subtask]:
        if self._order_dirty:
            self._ordered = sorted(self.subtasks.values(),
                                   key=lambda s: (s.op.depth, s.sid))
            self._order_dirty = False
        return self._ordered

    def tick(self) -> None:
        self.reconfig.before_tick(self)
        if self.feed_fn is not None:
            feed = self.feed_fn(self.tick_no)
            for gid in sorted(self.groups):
                group = self.groups[gid]
                if not group.subscribed:
                    continue
                for stream, records in feed.items():
                    subs = group.sources_by_stream.get(stream)
                    if not subs:
                        continue
                    i = group.rr_feed[stream]
                    n = len(subs)
                    for rec in records:
                        subs[i].buffer.append(rec)
                        i = (i + 1) % n
                    group.rr_feed[stream] = i
        for sub in list(self._order()):
            if sub.sid in self.subtasks:
                self._run_subtask(sub)
        self.reconfig.end_of_tick(self)
        self.tick_no += 1

    def run(self, ticks: int) -> None:
        for _ in range(ticks):
            self.tick()

    # ------------------------------------------------------------------
    def _run_subtask(self, sub: Subtask) -> None:
        op = sub.op
        cap = op.tick_capacity
        budget = cap + sub.carry if sub.carry < 0 else cap
        sub.carry = 0.0
        stalled = False

        if op.kind == "source":
            budget, stalled = self._run_source(sub, budget)
        elif sub.awaited_tokens:
            pass  # gated on state migration; hold input until complete
        else:
            budget, stalled = self._run_data(sub, budget)
        if sub.sid not in self.subtasks:   # retired while handling a marker
            return

        if op.kind == "window_aggregate":
            self._emit_windows(sub)
        if op.kind in ("filter", "window_join", "udf") and sub.last_in_et >= 0:
            for edge in sub.out_edges:
                for ch in edge.channels:
                    if sub.last_in_et > ch.producer_et:
                        ch.producer_et = sub.last_in_et

        leftover = budget if budget > 0 else 0.0
        if budget < 0:
            sub.carry = budget
        idle_frac = leftover / cap if cap > 0 else 1.0
        sub.w_idle += idle_frac
        sub.w_busy += 1.0 - idle_frac
        sub.idle_time += idle_frac
        sub.busy_time += 1.0 - idle_frac
        sub.w_ticks += 1
        if stalled:
            sub.w_stall_ticks += 1
            for mask in sub.blocking_masks():
                sub.w_stall_by_mask[mask] = \
                    sub.w_stall_by_mask.get(mask, 0) + 1

    def _run_source(self, sub: Subtask, budget: float):
        op = sub.op
        group = self.groups.get(op.group_id)
        stalled = False
        while budget > 0 and sub.buffer:
            head = sub.buffer[0]
            if isinstance(head, EpochMarker):
                sub.buffer.popleft()
                self.reconfig.on_source_marker(self, sub, head)
                if sub.sid not in self.subtasks:
                    return budget, stalled
                continue
            if sub.outputs_blocked():
                stalled = True
                break
            entry = sub.buffer.popleft()
            if len(entry) == 3:
                # backlog handed over at an epoch, restricted to the donor
                # group's queries
                et, payload, mask = entry
                mask &= op.member_mask
                if not mask:
                    continue
            else:
                et, payload = entry
                mask = op.member_mask
            tup = TaggedTuple(payload, et, mask, op.stream)
            budget -= op.unit_cost
            sub.in_count += 1
            sub.last_in_et = et
            sub.emit(tup)
            sub.w_emitted_by_stream[op.stream] = \
                sub.w_emitted_by_stream.get(op.stream, 0) + 1
            sub.emitted_by_stream[op.stream] = \
                sub.emitted_by_stream.get(op.stream, 0) + 1
        for edge in sub.out_edges:
            for ch in edge.channels:
                if sub.last_in_et > ch.producer_et:
                    ch.producer_et = sub.last_in_et
        return budget, stalled

    def _run_data(self, sub: Subtask, budget: float):
        op = sub.op
        stalled = False
        n = len(sub.in_channels)
        if n == 0:
            return budget, stalled
        idle_scan = 0
        while budget > 0 and idle_scan < n:
            ch = sub.in_channels[sub.rr_pos % n]
            sub.rr_pos = (sub.rr_pos + 1) % n
            if ch.cid in sub.sealed or not ch.items:
                idle_scan += 1
                continue
            head = ch.items[0]
            if isinstance(head, EpochMarker):
                ch.items.popleft()
                ch.last_dequeued_et = max(ch.last_dequeued_et,
                                          head.event_time)
                self.reconfig.on_marker(self, sub, ch, head)
                if sub.sid not in self.subtasks:
                    return budget, stalled
                n = len(sub.in_channels)
                if n == 0:
                    return budget, stalled
                idle_scan = 0
                continue
            if sub.outputs_blocked():
                stalled = True
                break
            tup = ch.items.popleft()
            ch.last_dequeued_et = tup.event_time
            sub.last_in_et = max(sub.last_in_et, tup.event_time)
            budget -= self._process(sub, tup)
            idle_scan = 0
        return budget, stalled

    # ------------------------------------------------------------------
    def _process(self, sub: Subtask, tup: TaggedTuple) -> float:
        op = sub.op
        sub.in_count += 1
        kind = op.kind
        if kind == "filter":
            return self._process_filter(sub, tup)
        if kind == "window_join":
            return self._process_join(sub, tup)
        if kind == "udf":
            sub.emit(tup)
            return op.unit_cost
        if kind == "router":
            if tup.query_set & op.member_mask:
                sub.emit(tup)
            else:
                sub.drop_count += 1
            return op.unit_cost
        if kind == "window_aggregate":
            return self._process_aggregate(sub, tup)
        if kind == "sink":
            self._process_sink(sub, tup)
            return op.unit_cost
        raise ConfigurationError(f"cannot process at operator kind {kind!r}")

    def _process_filter(self, sub: Subtask, tup: TaggedTuple) -> float:
        op = sub.op
        val = tup.payload[op.filter_field]
        owners = op.owners_of(op.stream, val) & tup.query_set
        sub.sample_counter += 1
        sampled = (sub.sample_counter % self.params.sample_period) == 0
        if sampled:
            op.sample_total += 1
            owner_bits = owners
            while owner_bits:
                low = owner_bits & -owner_bits
                bit = low.bit_length() - 1
                op.q_in_counts[bit] = op.q_in_counts.get(bit, 0) + 1
                owner_bits ^= low
        seg = -1
        if sub.monitor_active and op.monitor_segments:
            op.monitor_total += 1
            seg = op.segment_of(val)
            if seg >= 0:
                op.seg_counts[seg] = op.seg_counts.get(seg, 0) + 1
        if owners == 0:
            if seg >= 0:
                out = TaggedTuple(tup.payload, tup.event_time, 0,
                                  tup.stream, monitor=True, sampled=sampled)
                sub.emit(out)
                return op.unit_cost
            sub.drop_count += 1
            return op.unit_cost
        tup.query_set = owners
        tup.sampled = sampled
        sub.emit(tup)
        return op.unit_cost

    def _process_join(self, sub: Subtask, tup: TaggedTuple) -> float:
        op = sub.op
        spec = op.join_spec
        cost = op.unit_cost
        key = tup.payload[op.join_key]
        stream = tup.stream
        if op.join_key == op.filter_field:
            val = key
        else:
            val = tup.payload.get(op.filter_field, key)
        wm = sub.watermark()
        horizon = wm - op.window_size
        if spec.self_join:
            probe_key = (stream, key)
        elif stream == spec.left_stream:
            probe_key = (spec.right_stream, key)
        else:
            probe_key = (spec.left_stream, key)
        matches = 0
        stored = sub.store.get(probe_key)
        if stored:
            lo = tup.event_time - op.window_size
            hi = tup.event_time + op.window_size
            keep = []
            for other in stored:
                if other.event_time <= horizon:
                    sub.evicted_count += 1
                    sub.state_count -= 1
                    continue
                keep.append(other)
                if lo < other.event_time < hi:
                    matches += 1
                    qs = tup.query_set & other.query_set
                    if qs:
                        payload = {**other.payload, **tup.payload}
                        out = TaggedTuple(
                            payload,
                            max(tup.event_time, other.event_time),
                            qs, "J")
                        sub.emit(out)
                        cost += op.output_cost
            if len(keep) != len(stored):
                if keep:
                    sub.store[probe_key] = keep
                else:
                    del sub.store[probe_key]
        if sub.monitor_active and op.monitor_segments:
            seg = op.segment_of(val)
            if seg >= 0:
                op.seg_match_sums[seg] = \
                    op.seg_match_sums.get(seg, 0) + matches
                op.seg_probe_counts[seg] = \
                    op.seg_probe_counts.get(seg, 0) + 1
        if tup.sampled and tup.query_set:
            owner_bits = tup.query_set
            while owner_bits:
                low = owner_bits & -owner_bits
                bit = low.bit_length() - 1
                op.q_match_sums[bit] = op.q_match_sums.get(bit, 0) + matches
                op.q_probe_counts[bit] = op.q_probe_counts.get(bit, 0) + 1
                owner_bits ^= low
        own_key = (stream, key)
        sub.store.setdefault(own_key, []).append(tup)
        sub.state_count += 1
        if self.tick_no % self.params.sweep_period == 0:
            self._sweep_join(sub, horizon)
        return cost

    def _sweep_join(self, sub: Subtask, horizon: int) -> None:
        if horizon < 0:
            return
        dead = []
        for key, entries in sub.store.items():
            keep = [t for t in entries if t.event_time > horizon]
            removed = len(entries) - len(keep)
            if removed:
                sub.evicted_count += removed
                sub.state_count -= removed
                if keep:
                    sub.store[key] = keep
                else:
                    dead.append(key)
        for key in dead:
            del sub.store[key]

    def _process_aggregate(self, sub: Subtask, tup: TaggedTuple) -> float:
        op = sub.op
        qs = tup.query_set & op.query_mask
        if not qs:
            sub.drop_count += 1
            return op.unit_cost
        key = tup.payload[op.agg_key]
        value = tup.payload[op.agg_value]
        pane_end = (tup.event_time // op.slide) * op.slide + op.slide
        if op.key_scoped:
            scope = (None, key, pane_end)
            acc = sub.panes.get(scope)
            if acc is None:
                sub.panes[scope] = [value, 1, qs]
                sub.state_count += 1
            else:
                acc[0] += value
                acc[1] += 1
                acc[2] |= qs
            return op.unit_cost
        cost = 0.0
        bits = qs
        while bits:
            low = bits & -bits
            bit = low.bit_length() - 1
            bits ^= low
            scope = (bit, key, pane_end)
            acc = sub.panes.get(scope)
            if acc is None:
                sub.panes[scope] = [value, 1, low]
                sub.state_count += 1
            else:
                acc[0] += value
                acc[1] += 1
            cost += op.unit_cost
        return cost

    def _emit_windows(self, sub: Subtask) -> None:
        op = sub.op
        if not sub.panes:
            return
        wm = sub.watermark()
        if wm < 0:
            return
        if sub.last_emitted is None:
            first = min(p[2] for p in sub.panes)
            sub.last_emitted = first - op.slide
        e = sub.last_emitted + op.slide
        while e <= wm:
            if sub.outputs_blocked():
                break
            lo = e - op.window_size
            combined: dict = {}
            for scope, acc in sub.panes.items():
                if lo < scope[2] <= e:
                    cur = combined.get(scope[:2])
                    if cur is None:
                        combined[scope[:2]] = [acc[0], acc[1], acc[2]]
                    else:
                        cur[0] += acc[0]
                        cur[1] += acc[1]
                        cur[2] |= acc[2]
            for (qbit, key), acc in sorted(
                    combined.items(),
                    key=lambda kv: (-1 if kv[0][0] is None else kv[0][0],
                                    kv[0][1])):
                qs = acc[2] & op.query_mask
                if not qs:
                    continue
                payload = {op.agg_key: key, "avg": acc[0] / acc[1],
                           "window_end": e}
                sub.emit(TaggedTuple(payload, e, qs, "G"))
            prune = e + op.slide - op.window_size
            dead = [s for s in sub.panes if s[2] <= prune]
            for s in dead:
                del sub.panes[s]
                sub.state_count -= 1
                sub.evicted_count += 1
            sub.last_emitted = e
            e += op.slide

    def _process_sink(self, sub: Subtask, tup: TaggedTuple) -> None:
        op = sub.op
        qs = tup.query_set & op.query_mask
        if not qs:
            sub.drop_count += 1
            return
        lag = self.tick_no - tup.event_time
        bits = qs
        while bits:
            low = bits & -bits
            bit = low.bit_length() - 1
            bits ^= low
            out = self._query_output(bit)
            out.total += 1
            out.w_count += 1
            out.w_latency_sum += lag
            if out.records is not None:
                out.records.append(
                    (tup.event_time, canonical_payload(tup.payload)))
        sub.out_count += 1

    # ------------------------------------------------------------------
    # metrics plumbing
    def record_event(self, kind: str, name: str, detail: str) -> None:
        self.events.append((self.tick_no, kind, name, detail))

    def reset_window_counters(self) -> None:
        for sub in self.subtasks.values():
            sub.w_busy = 0.0
            sub.w_idle = 0.0
            sub.w_ticks = 0
            sub.w_stall_ticks = 0
            sub.w_stall_by_mask = {}
            sub.w_emitted_by_stream = {}
        for group in self.groups.values():
            group.retired_scrap.reset()
        for out in self.query_outputs.values():
            out.w_count = 0
            out.w_latency_sum = 0

    def source_buffer_lengths(self) -> dict[str, int]:
        out = {}
        for gid in sorted(self.groups):
            group = self.groups[gid]
            n = 0
            for sub in group.source_subtasks():
                n += sum(1 for item in sub.buffer
                         if not isinstance(item, EpochMarker))
            out[gid] = n
        return out

    def total_resources(self) -> int:
        return sum(g.total_resources() for g in self.groups.values())
