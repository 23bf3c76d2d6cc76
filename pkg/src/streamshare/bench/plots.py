"""Figure rendering for run and sweep metrics.

Figures are rendered from the same data that goes into the CSVs and written
as PNG files next to them.  The CSV remains the canonical output; plotting
is a convenience for eyeballing throughput, resource and backlog dynamics.
"""

from __future__ import annotations

import csv
import os
from collections import defaultdict

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def _ensure_dir(path):
    os.makedirs(path, exist_ok=True)
    return path


def render_run(result, outdir) -> list[str]:
    """Render the standard figures for one run."""
    _ensure_dir(outdir)
    rec = result.recorder
    written = []

    fig, ax = plt.subplots(figsize=(7, 4))
    for qid in sorted(rec.query_tput):
        ts = rec.query_tput[qid]
        ax.plot([t * rec.tick_seconds for t, _ in ts],
                [v for _, v in ts], lw=0.8, alpha=0.7)
    ax.set_xlabel("time (s)")
    ax.set_ylabel("per-query throughput (rec/s)")
    ax.set_title(f"{result.workload} / {result.strategy}")
    path = os.path.join(outdir, "throughput.png")
    fig.savefig(path, dpi=110, bbox_inches="tight")
    plt.close(fig)
    written.append(path)

    fig, ax = plt.subplots(figsize=(7, 3))
    ts = rec.resources
    ax.step([t * rec.tick_seconds for t, _ in ts], [v for _, v in ts],
            where="post", color="tab:red")
    for tick, kind, _ in rec.events:
        ax.axvline(tick * rec.tick_seconds, color="gray", ls=":", lw=0.7)
    ax.set_xlabel("time (s)")
    ax.set_ylabel("total subtasks")
    path = os.path.join(outdir, "resources.png")
    fig.savefig(path, dpi=110, bbox_inches="tight")
    plt.close(fig)
    written.append(path)

    fig, ax = plt.subplots(figsize=(7, 3))
    for gid in sorted(rec.group_buffer):
        ts = rec.group_buffer[gid]
        ax.plot([t * rec.tick_seconds for t, _ in ts],
                [v for _, v in ts], lw=0.9, label=gid)
    ax.set_xlabel("time (s)")
    ax.set_ylabel("source buffer length")
    if len(rec.group_buffer) <= 10:
        ax.legend(fontsize=7)
    path = os.path.join(outdir, "buffers.png")
    fig.savefig(path, dpi=110, bbox_inches="tight")
    plt.close(fig)
    written.append(path)
    return written


def render_sweep(rows, param, outdir) -> list[str]:
    _ensure_dir(outdir)
    written = []
    for metric in ("resources_final", "mean_throughput"):
        fig, ax = plt.subplots(figsize=(5, 3.5))
        xs = [row["value"] for row in rows]
        ys = [row[metric] for row in rows]
        ax.plot(xs, ys, marker="o")
        ax.set_xlabel(param)
        ax.set_ylabel(metric)
        path = os.path.join(outdir, f"sweep_{metric}.png")
        fig.savefig(path, dpi=110, bbox_inches="tight")
        plt.close(fig)
        written.append(path)
    return written


def render_metrics_csv(csv_path, outdir) -> list[str]:
    """Render figures from a previously written metrics CSV."""
    _ensure_dir(outdir)
    query_tput = defaultdict(list)
    resources = []
    buffers = defaultdict(list)
    with open(csv_path, newline="") as fh:
        for row in csv.DictReader(fh):
            tick = int(row["tick"])
            kind, subject, metric = row["record"], row["subject"], \
                row["metric"]
            if kind == "query" and metric == "throughput":
                query_tput[subject].append((tick, float(row["value"])))
            elif kind == "total" and metric == "resources":
                resources.append((tick, float(row["value"])))
            elif kind == "group" and metric == "source_buffer":
                buffers[subject].append((tick, float(row["value"])))
    written = []
    fig, ax = plt.subplots(figsize=(7, 4))
    for qid in sorted(query_tput):
        ts = query_tput[qid]
        ax.plot([t for t, _ in ts], [v for _, v in ts], lw=0.8, alpha=0.7)
    ax.set_xlabel("tick")
    ax.set_ylabel("per-query throughput (rec/s)")
    path = os.path.join(outdir, "throughput.png")
    fig.savefig(path, dpi=110, bbox_inches="tight")
    plt.close(fig)
    written.append(path)

    if resources:
        fig, ax = plt.subplots(figsize=(7, 3))
        ax.step([t for t, _ in resources], [v for _, v in resources],
                where="post", color="tab:red")
        ax.set_xlabel("tick")
        ax.set_ylabel("total subtasks")
        path = os.path.join(outdir, "resources.png")
        fig.savefig(path, dpi=110, bbox_inches="tight")
        plt.close(fig)
        written.append(path)

    if buffers:
        fig, ax = plt.subplots(figsize=(7, 3))
        for gid in sorted(buffers):
            ts = buffers[gid]
            ax.plot([t for t, _ in ts], [v for _, v in ts], lw=0.9)
        ax.set_xlabel("tick")
        ax.set_ylabel("source buffer length")
        path = os.path.join(outdir, "buffers.png")
        fig.savefig(path, dpi=110, bbox_inches="tight")
        plt.close(fig)
        written.append(path)
    return written
