"""Metrics recording: long-format CSV rows plus an in-memory view.

CSV header: tick,record,subject,metric,value

record kinds: "query" (per-query throughput/latency/group), "group"
(throughput, resources, idle, buffer, stall), "total" (resources, groups)
and "event" (reconfigurations).  Rows are emitted at a fixed reporting
cadence in a deterministic order, so identical runs produce byte-identical
files.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field


def fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


@dataclass
class WindowRow:
    tick: int
    kind: str
    subject: str
    metric: str
    value: object


class MetricsRecorder:
    """Accumulates report-window rows and writes the metrics CSV."""

    def __init__(self, tick_seconds: float, report_ticks: int):
        self.tick_seconds = tick_seconds
        self.report_ticks = report_ticks
        self.rows: list[WindowRow] = []
        # in-memory series used by summaries and tests
        self.query_tput: dict[str, list[tuple[int, float]]] = {}
        self.query_group: dict[str, list[tuple[int, str]]] = {}
        self.group_buffer: dict[str, list[tuple[int, int]]] = {}
        self.resources: list[tuple[int, int]] = []
        self.events: list[tuple[int, str, str]] = []
        self._event_cursor = 0

    def add(self, tick: int, kind: str, subject: str, metric: str,
            value) -> None:
        self.rows.append(WindowRow(tick, kind, subject, metric, value))

    def record_window(self, tick: int, engine, registry, groups_of_query,
                      exec_metrics) -> None:
        win_s = self.report_ticks * self.tick_seconds
        for qid in sorted(groups_of_query):
            bit = registry.bit(qid)
            out = engine.query_outputs.get(bit)
            count = out.w_count if out else 0
            tput = count / win_s
            self.add(tick, "query", qid, "throughput", tput)
            self.query_tput.setdefault(qid, []).append((tick, tput))
            if count:
                lat = (out.w_latency_sum / count) * self.tick_seconds
                self.add(tick, "query", qid, "latency", lat)
            gid = groups_of_query[qid]
            self.add(tick, "query", qid, "group", gid)
            self.query_group.setdefault(qid, []).append((tick, gid))
        for gid in sorted(exec_metrics):
            m = exec_metrics[gid]
            self.add(tick, "group", gid, "throughput", m.throughput)
            self.add(tick, "group", gid, "resources", m.resources)
            self.add(tick, "group", gid, "idle_resources", m.idle_resources)
            self.add(tick, "group", gid, "source_buffer", m.source_buffer_len)
            self.add(tick, "group", gid, "stall_fraction",
                     m.shared_stall_fraction)
            self.group_buffer.setdefault(gid, []).append(
                (tick, m.source_buffer_len))
        total = sum(m.resources for m in exec_metrics.values())
        self.add(tick, "total", "all", "resources", total)
        self.add(tick, "total", "all", "groups", len(exec_metrics))
        self.resources.append((tick, total))
        for ev in engine.reconfig.events[self._event_cursor:]:
            self.add(ev.end_tick, "event", ev.kind, "delay_ticks",
                     ev.delay_ticks)
            self.add(ev.end_tick, "event", ev.kind, "migrated_entries",
                     ev.migrated_entries)
            self.events.append((ev.end_tick, ev.kind,
                                ";".join(ev.groups_after)))
        self._event_cursor = len(engine.reconfig.events)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["tick", "record", "subject", "metric", "value"])
            for r in self.rows:
                w.writerow([r.tick, r.kind, r.subject, r.metric,
                            fmt(r.value)])


def write_summary(path, summary: dict) -> None:
    with open(path, "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
