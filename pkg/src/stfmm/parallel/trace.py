"""Execution traces: events per rank and worker lane, JSON export and summaries.

Each event carries ``name, category, rank, worker, start_us, dur_us`` and the
equivalent Chrome trace keys (``ph, ts, dur, pid, tid``) so files load
directly in common trace viewers. Lane 0 is the scheduling flow of a rank,
lanes ``1..W`` its workers.
"""

from __future__ import annotations

import json
import threading
import time
from collections import defaultdict

CATEGORIES = ("S2M", "M2M", "M2L", "L2L", "L2T", "NF", "SEND", "RECV")


class TraceRecorder:
    def __init__(self, enabled=True):
        self.enabled = enabled
        self.events = []
        self._lock = threading.Lock()
        self.t0 = time.perf_counter()

    def now_us(self):
        return (time.perf_counter() - self.t0) * 1e6

    def add(self, name, category, rank, worker, start_us, dur_us):
        if not self.enabled:
            return
        if category not in CATEGORIES:
            raise ValueError(f"unknown trace category {category!r}")
        ev = {
            "name": name, "category": category, "rank": int(rank), "worker": int(worker),
            "start_us": float(start_us), "dur_us": float(dur_us),
        }
        with self._lock:
            self.events.append(ev)

    def span(self, name, category, rank, worker):
        return _Span(self, name, category, rank, worker)

    def to_json(self):
        out = []
        for ev in sorted(self.events, key=lambda e: (e["rank"], e["worker"], e["start_us"])):
            e = dict(ev)
            e.update(ph="X", ts=ev["start_us"], dur=ev["dur_us"], pid=ev["rank"], tid=ev["worker"],
                     cat=ev["category"])
            out.append(e)
        return out

    def write(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh)

    def summary(self):
        return summarize(self.events)


class _Span:
    def __init__(self, rec, name, category, rank, worker):
        self.rec, self.name, self.category, self.rank, self.worker = rec, name, category, rank, worker

    def __enter__(self):
        self.start = self.rec.now_us()
        return self

    def __exit__(self, *exc):
        self.rec.add(self.name, self.category, self.rank, self.worker, self.start,
                     self.rec.now_us() - self.start)
        return False


def summarize(events):
    """Per-category total time and the largest idle gap between events on a worker lane."""
    totals = defaultdict(float)
    lanes = defaultdict(list)
    for e in events:
        totals[e["category"]] += e["dur_us"]
        lanes[(e["rank"], e["worker"])].append((e["start_us"], e["start_us"] + e["dur_us"]))
    gaps = {}
    for lane, iv in lanes.items():
        iv.sort()
        g = 0.0
        end = iv[0][1]
        for s, e in iv[1:]:
            g = max(g, s - end)
            end = max(end, e)
        gaps[lane] = g
    worker_gaps = [g for (r, w), g in gaps.items() if w > 0]
    return {
        "total_us": dict(totals),
        "max_idle_gap_us": max(worker_gaps) if worker_gaps else 0.0,
        "lane_idle_gap_us": {f"{r}:{w}": g for (r, w), g in sorted(gaps.items())},
        "n_events": len(events),
    }


def lanes_overlap(events):
    """True if two events on the same (rank, worker) lane overlap in time."""
    lanes = defaultdict(list)
    for e in events:
        lanes[(e["rank"], e["worker"])].append((e["start_us"], e["start_us"] + e["dur_us"]))
    for iv in lanes.values():
        iv.sort()
        for (s0, e0), (s1, _) in zip(iv, iv[1:]):
            if s1 < e0 - 1e-6:
                return True
    return False
