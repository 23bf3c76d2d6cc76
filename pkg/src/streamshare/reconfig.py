"""Epoch-based on-the-fly reconfiguration.

Plan changes are delimited by in-band epoch markers.  The manager injects a
marker into every source subtask of the affected groups; each subtask seals a
channel when the marker arrives on it, waits for markers on all of its input
channels (epoch alignment), applies its edit, forwards the marker once per
output channel, and resumes.  Stateful subtasks ship their window state,
partitioned by key, to the subtasks of the replacement pipeline, which do not
process post-epoch records until every expected state shipment has arrived.
Data keeps flowing everywhere else while this happens.

Four operation kinds are supported: group merging, group splitting, changing
a group's parallelism, and toggling statistics monitoring.  The first three
are structural (affected groups are rebuilt); monitoring is an in-place edit.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Any

if TYPE_CHECKING:  # pragma: no cover - typing only
    from .engine.core import Engine, Subtask, Channel
    from .plans import GroupPlan

logger = logging.getLogger(__name__)

RECONFIG_KINDS = ("merge", "split", "parallelism_change",
                  "enable_monitoring", "disable_monitoring")


@dataclass
class EpochMarker:
    """In-band control record delimiting two configurations on a channel."""

    epoch_id: int
    event_time: int
    retire_source: bool = False


@dataclass
class MonitoringEdit:
    """Per-operator monitoring toggle carried by a marker epoch."""

    group_id: str
    enable: bool
    segments: tuple[tuple[int, int], ...] = ()


@dataclass
class ReconfigurationPlan:
    """An ordered set of plan edits applied via one marker epoch.

    For structural kinds, ``old_group_ids`` are torn down and ``new_groups``
    (compiled plans plus per-operator parallelism) are built in their place.
    Monitoring kinds carry only ``monitoring_edits``.
    """

    kind: str
    old_group_ids: tuple[str, ...] = ()
    new_groups: tuple[tuple["GroupPlan", dict[str, int]], ...] = ()
    monitoring_edits: tuple[MonitoringEdit, ...] = ()
    note: str = ""

    def __post_init__(self):
        if self.kind not in RECONFIG_KINDS:
            raise ValueError(f"unknown reconfiguration kind {self.kind!r}")


@dataclass
class ReconfigurationEvent:
    """Completion record for one executed plan (feeds the metrics stream)."""

    kind: str
    start_tick: int
    end_tick: int
    groups_before: tuple[str, ...]
    groups_after: tuple[str, ...]
    migrated_entries: int = 0
    note: str = ""

    @property
    def delay_ticks(self) -> int:
        return self.end_tick - self.start_tick


class ReconfigurationManager:
    """Orchestrates marker epochs over a running engine.

    One reconfiguration is in flight at a time; further requests queue and
    start at later tick boundaries in submission order.
    """

    def __init__(self):
        self.queue: list[tuple[ReconfigurationPlan, Any]] = []
        self.active: ReconfigurationPlan | None = None
        self.epoch_counter = 0
        self.events: list[ReconfigurationEvent] = []
        self._start_tick = 0
        self._epoch_time = 0
        self._outstanding: set[int] = set()   # subtask sids yet to finish
        self._migrated = 0
        self._new_group_ids: tuple[str, ...] = ()
        self._on_complete = None

    # ------------------------------------------------------------------
    # request side
    def submit(self, plan: ReconfigurationPlan, on_complete=None) -> None:
        self.queue.append((plan, on_complete))

    @property
    def in_flight(self) -> bool:
        return self.active is not None

    # ------------------------------------------------------------------
    # engine hooks
    def before_tick(self, engine: "Engine") -> None:
        if self.active is None and self.queue:
            plan, cb = self.queue.pop(0)
            self._start(engine, plan, cb)

    def end_of_tick(self, engine: "Engine") -> None:
        if self.active is not None and not self._outstanding:
            self._finish(engine)

    # ------------------------------------------------------------------
    def _start(self, engine: "Engine", plan: ReconfigurationPlan, cb) -> None:
        self.active = plan
        self._on_complete = cb
        self.epoch_counter += 1
        self._start_tick = engine.tick_no
        self._epoch_time = engine.tick_no  # records emitted this tick onward
        self._migrated = 0
        self._outstanding = set()

        if plan.kind in ("enable_monitoring", "disable_monitoring"):
            self._start_in_place(engine, plan)
        else:
            self._start_structural(engine, plan)
        logger.debug("reconfiguration %s started at tick %d (epoch %d)",
                     plan.kind, self._start_tick, self.epoch_counter)

    def _start_in_place(self, engine: "Engine", plan: ReconfigurationPlan) -> None:
        self._new_group_ids = tuple(sorted(engine.groups))
        edits = {e.group_id: e for e in plan.monitoring_edits}
        for gid, edit in sorted(edits.items()):
            group = engine.groups[gid]
            marker = EpochMarker(self.epoch_counter, self._epoch_time)
            for sub in group.source_subtasks():
                # ahead of any source backlog: the marker delimits what the
                # pipeline has ingested, not what has arrived
                sub.buffer.appendleft(marker)
            for sub in group.all_subtasks(engine):
                self._outstanding.add(sub.sid)
                sub.begin_epoch(self.epoch_counter)
                if sub.op.kind in ("filter", "window_join"):
                    sub.pending_edit = edit

    def _start_structural(self, engine: "Engine", plan: ReconfigurationPlan) -> None:
        old_ids = plan.old_group_ids
        # Build the replacement pipelines first so that records arriving this
        # tick flow to them; sources of the old groups stop receiving input.
        new_runtimes = []
        for gplan, layout in plan.new_groups:
            rt = engine.build_group(gplan, layout)
            new_runtimes.append(rt)
        self._new_group_ids = tuple(rt.group_id for rt in new_runtimes)

        # State recipients: stateful subtasks of the new pipelines gate on
        # tokens from every old stateful subtask with the same role.
        donors_by_role: dict[str, list] = {}
        backlog: dict[str, list] = {}    # stream -> [(et, payload, mask)]
        for gid in old_ids:
            group = engine.groups[gid]
            group.subscribed = False
            for sub in group.all_subtasks(engine):
                self._outstanding.add(sub.sid)
                sub.begin_epoch(self.epoch_counter)
                sub.retiring = True
                if sub.op.stateful:
                    donors_by_role.setdefault(sub.op.role, []).append(sub)
            marker = EpochMarker(self.epoch_counter, self._epoch_time,
                                 retire_source=True)
            for sub in group.source_subtasks():
                # hand the un-ingested backlog to the replacement pipelines,
                # restricted to the donor group's queries so records another
                # old group already processed are not replayed for it
                while sub.buffer:
                    entry = sub.buffer.popleft()
                    mask = group.member_mask
                    if len(entry) == 3:
                        mask &= entry[2]
                    backlog.setdefault(sub.op.stream, []).append(
                        (entry[0], entry[1], mask))
                sub.buffer.append(marker)
        for stream in sorted(backlog):
            entries = sorted(backlog[stream], key=lambda e: e[0])
            for rt in new_runtimes:
                subs = rt.sources_by_stream.get(stream)
                if not subs:
                    continue
                i = rt.rr_feed[stream]
                n = len(subs)
                for entry in entries:
                    if entry[2] & rt.member_mask:
                        subs[i].buffer.append(entry)
                        i = (i + 1) % n
                rt.rr_feed[stream] = i

        for rt in new_runtimes:
            for sub in rt.all_subtasks(engine):
                if sub.op.stateful:
                    donors = donors_by_role.get(sub.op.role, ())
                    if donors:
                        sub.awaited_tokens = {d.sid for d in donors}
                        self._outstanding.add(sub.sid)
        for role, donors in sorted(donors_by_role.items(),
                                   key=lambda kv: repr(kv[0])):
            recipients = [
                sub
                for rt in new_runtimes
                for sub in rt.all_subtasks(engine)
                if sub.op.stateful and sub.op.role == role
            ]
            for donor in donors:
                donor.state_recipients = recipients

    # ------------------------------------------------------------------
    # marker protocol, called from subtask processing
    def on_source_marker(self, engine: "Engine", sub: "Subtask",
                         marker: EpochMarker) -> None:
        sub.forward_marker(marker)
        self._outstanding.discard(sub.sid)
        if marker.retire_source:
            engine.retire_subtask(sub)
        else:
            sub.end_epoch()

    def on_marker(self, engine: "Engine", sub: "Subtask", ch: "Channel",
                  marker: EpochMarker) -> None:
        if ch.cid in sub.sealed:
            raise AssertionError(
                f"duplicate marker on channel {ch.cid} at subtask {sub.sid}")
        sub.sealed.add(ch.cid)
        if len(sub.sealed) >= len(sub.in_channels):
            self._aligned(engine, sub, marker)

    def _aligned(self, engine: "Engine", sub: "Subtask",
                 marker: EpochMarker) -> None:
        """All input channels sealed: apply the edit and forward the marker."""
        if sub.pending_edit is not None:
            edit = sub.pending_edit
            sub.apply_monitoring_edit(edit)
            sub.pending_edit = None
        if sub.retiring and sub.op.stateful and sub.state_recipients:
            self._migrated += migrate_state(
                sub, sub.state_recipients,
                epoch_time=marker.event_time)
            for recipient in sub.state_recipients:
                recipient.awaited_tokens.discard(sub.sid)
                if not recipient.awaited_tokens:
                    self._outstanding.discard(recipient.sid)
        sub.forward_marker(marker)
        self._outstanding.discard(sub.sid)
        if sub.retiring:
            engine.retire_subtask(sub)
        else:
            sub.end_epoch()

    def _finish(self, engine: "Engine") -> None:
        plan = self.active
        event = ReconfigurationEvent(
            kind=plan.kind,
            start_tick=self._start_tick,
            end_tick=engine.tick_no,
            groups_before=plan.old_group_ids,
            groups_after=self._new_group_ids,
            migrated_entries=self._migrated,
            note=plan.note,
        )
        self.events.append(event)
        engine.record_event("reconfiguration", plan.kind,
                            ";".join(self._new_group_ids))
        logger.debug("reconfiguration %s completed in %d ticks",
                     plan.kind, event.delay_ticks)
        self.active = None
        if self._on_complete is not None:
            cb, self._on_complete = self._on_complete, None
            cb(event)


def migrate_state(donor: "Subtask", recipients: list["Subtask"],
                  partition_map=None, epoch_time: int | None = None) -> int:
    """Redistribute a donor subtask's window state to recipient subtasks.

    ``partition_map`` maps a partition key to a recipient index; the default
    is a stable hash over the recipient list.  Recipients keep the first copy
    of an entry they see: overlapping donors hold identical entries by
    construction (both groups processed the same stream), so first-wins
    deduplication preserves exactly-once.  Returns the number of entries
    shipped.
    """
    if not recipients:
        return 0
    moved = 0
    n = len(recipients)
    if partition_map is None:
        partition_map = lambda key: stable_hash(key) % n
    for partition_key, entry_key, payload in donor.export_state():
        target = recipients[partition_map(partition_key)]
        if target is donor:
            continue
        if target.import_entry(entry_key, payload, epoch_time):
            moved += 1
    return moved


def stable_hash(value) -> int:
    """Seed-independent hash used for state partitioning."""
    if isinstance(value, int):
        return (value * 2654435761) & 0x7FFFFFFF
    h = 5381
    for ch in str(value):
        h = ((h * 33) ^ ord(ch)) & 0x7FFFFFFF
    return h
