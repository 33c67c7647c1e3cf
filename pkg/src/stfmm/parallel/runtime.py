"""Per-rank execution: one scheduling loop plus a pool of worker threads.

The loop polls the transport, stores received tensors, releases dependent
tasks, posts outgoing messages as soon as the producing task finishes and
issues ready tasks in the priority order M, L, M2L, N (first ready task in
list order). Each issued task expands into fine work items handed to the
pool. When more than ``threshold`` items wait unstarted, the loop runs one
of them itself before scheduling further.
"""

from __future__ import annotations

import logging
import math
import queue
import threading
import time
from dataclasses import dataclass

import numpy as np

from .trace import TraceRecorder
from .transport import (
    KIND_NAMES,
    LOCALS_TO_CHILD,
    MOMENTS_TO_INTERACTION,
    MOMENTS_TO_PARENT,
    Message,
    TransportError,
)

log = logging.getLogger(__name__)

PRIORITY = ("M", "L", "M2L", "N")


class DeadlockError(RuntimeError):
    """No progress within the watchdog interval while work remains."""


class WriteCollision(RuntimeError):
    pass


class WriteMonitor:
    """Records overlapping writes to the same tensor key (instrumented runs)."""

    def __init__(self):
        self._lock = threading.Lock()
        self._active = {}
        self.collisions = []
        self.n_writes = 0

    def enter(self, keys, who):
        with self._lock:
            self.n_writes += 1
            for k in keys:
                if k in self._active:
                    self.collisions.append((k, self._active[k], who))
                else:
                    self._active[k] = who

    def leave(self, keys, who):
        with self._lock:
            for k in keys:
                if self._active.get(k) == who:
                    del self._active[k]


@dataclass
class WorkItem:
    task: tuple  # (kind, tid); L2T items use kind "L2T"
    category: str
    name: str
    keys: tuple  # written tensors, sorted
    fn: object


@dataclass
class LogEntry:
    sender: int
    dest: int
    cluster: int
    kind: int
    size: int
    time: float


class RankRuntime:
    """Executes one rank's task lists for a single matvec at a time."""

    def __init__(self, plan, tasklists, let, endpoint, n_workers=1, threshold=None,
                 recorder=None, monitor=None, watchdog=60.0, use_locks=True, abort=None):
        if n_workers < 0:
            raise ValueError("n_workers must be >= 0")
        self.plan = plan
        self.tl = tasklists
        self.let = let
        self.rank = tasklists.rank
        self.ep = endpoint
        self.n_workers = int(n_workers)
        if threshold is None:
            threshold = 2 * self.n_workers
        if self.n_workers == 0:
            if math.isinf(threshold):
                raise ValueError("threshold=inf needs at least one worker")
            threshold = 0
        self.threshold = threshold
        self.rec = recorder or TraceRecorder(enabled=False)
        self.monitor = monitor
        self.watchdog = float(watchdog)
        self.use_locks = use_locks
        self.abort = abort or threading.Event()
        self._locks = {}
        self._lock_guard = threading.Lock()
        self.sent = []
        self.received = []

    # ---- item construction ------------------------------------------------
    def _lock_for(self, key):
        with self._lock_guard:
            lk = self._locks.get(key)
            if lk is None:
                lk = self._locks[key] = threading.Lock()
            return lk

    def _items(self, kind, tid, w, st):
        p, u, tree = self.plan, self.plan.units[tid], self.plan.tree
        out = []
        if kind == "M":
            for cids in u["m_items"]:
                cat = "S2M" if all(tree[c].is_leaf for c in cids) else "M2M"
                out.append(WorkItem((kind, tid), cat, f"M {tid}:{cids[0]}",
                                    tuple(("mu", c) for c in cids),
                                    lambda cids=cids: p.m_item(cids, w, st)))
        elif kind == "M2L":
            for slot, lo, hi in u["m2l_items"]:
                tgts = np.unique(p.tasks[(tid, slot)].pair_tgt[lo:hi])
                out.append(WorkItem((kind, tid), "M2L", f"M2L {tid}/{slot}:{lo}-{hi}",
                                    tuple(("lam_m2l", int(c), slot) for c in tgts),
                                    lambda slot=slot, lo=lo, hi=hi: p.m2l_item(tid, slot, lo, hi, st)))
        elif kind == "L":
            for cids in u["l_items"]:
                out.append(WorkItem((kind, tid), "L2L", f"L {tid}:{cids[0]}",
                                    tuple(("lam_l2l", c) for c in cids),
                                    lambda cids=cids: p.l_item(cids, st)))
        elif kind == "N":
            for cids in u["n_items"]:
                out.append(WorkItem((kind, tid), "NF", f"N {tid}:{cids[0]}",
                                    tuple(("f_near", c) for c in cids),
                                    lambda cids=cids: p.n_item(cids, w, st)))
        elif kind == "L2T":
            for cids in u["l2t_items"]:
                out.append(WorkItem((kind, tid), "L2T", f"L2T {tid}:{cids[0]}",
                                    tuple(("f_far", c) for c in cids),
                                    lambda cids=cids: p.l2t_item(cids, st)))
        for it in out:
            it.keys = tuple(sorted(it.keys))
        return out

    def _execute(self, item, lane):
        locks = [self._lock_for(k) for k in item.keys] if self.use_locks else []
        for lk in locks:  # global key order
            lk.acquire()
        try:
            if self.monitor is not None:
                self.monitor.enter(item.keys, (self.rank, lane, item.name))
            start = self.rec.now_us()
            try:
                item.fn()
            finally:
                self.rec.add(item.name, item.category, self.rank, lane, start, self.rec.now_us() - start)
                if self.monitor is not None:
                    self.monitor.leave(item.keys, (self.rank, lane, item.name))
        finally:
            for lk in reversed(locks):
                lk.release()

    # ---- worker pool ------------------------------------------------------
    def _worker(self, lane):
        while True:
            item = self._queue.get()
            if item is None:
                return
            try:
                self._execute(item, lane)
            except BaseException as exc:  # surfaced by the scheduling loop
                self._done.put((item, exc))
            else:
                self._done.put((item, None))
            self._wake.set()

    # ---- messages ---------------------------------------------------------
    def _send(self, kind, tid, dest, st):
        u = self.plan.units[tid]
        start = self.rec.now_us()
        if kind == LOCALS_TO_CHILD:
            payload = np.stack([self.plan.local_total(c, st) for c in u["lam"]]).ravel()
        else:
            payload = st["mu"][u["m"]].ravel()
        msg = Message(self.rank, dest, tid, kind, payload)
        self.ep.send(msg)
        self.sent.append(LogEntry(self.rank, dest, tid, kind, payload.size, time.perf_counter()))
        self.rec.add(f"send {KIND_NAMES[kind]} {tid}->{dest}", "SEND", self.rank, 0, start,
                     self.rec.now_us() - start)

    def _store(self, msg, st):
        start = self.rec.now_us()
        u = self.plan.units[msg.cluster]
        shape = self.plan.orders.moment_shape
        if msg.kind in (MOMENTS_TO_PARENT, MOMENTS_TO_INTERACTION):
            ids = u["m"]
            data = np.asarray(msg.payload, dtype=float).reshape((len(ids),) + shape)
            st["mu"][ids] = data
        else:
            ids = u["lam"]
            data = np.asarray(msg.payload, dtype=float).reshape((len(ids),) + shape)
            for c, lam in zip(ids, data):
                st["lam_remote"][c] = lam
        self.received.append(LogEntry(msg.sender, self.rank, msg.cluster, msg.kind, msg.payload.size,
                                      time.perf_counter()))
        self.rec.add(f"recv {KIND_NAMES[msg.kind]} {msg.cluster}<-{msg.sender}", "RECV", self.rank, 0,
                     start, self.rec.now_us() - start)

    # ---- main loop --------------------------------------------------------
    def run(self, w, st=None):
        """Execute all lists for density ``w`` (only LET DOFs are read).

        Returns the state dict; the caller extracts the owned f segment.
        """
        plan, tl = self.plan, self.tl
        st = st if st is not None else plan.new_state()
        self.sent, self.received = [], []
        self._queue = queue.Queue()
        self._done = queue.Queue()
        self._wake = threading.Event()
        if hasattr(self.ep, "hub"):
            self.ep.hub.register_wakeup(self.rank, self._wake)

        deps = {k: t.n_deps for k, t in tl.tasks.items()}
        remaining = {}
        started = set()
        finished = set()
        l2t_wait = {t: len(v) for t, v in tl.l2t_after.items()}
        l2t_of = {}
        for t, keys in tl.l2t_after.items():
            for k in keys:
                l2t_of.setdefault(k, []).append(t)
        locals_wait = {t: sum(plan.has_task(k, t) for k in ("M2L", "L")) for t in tl.locals_sends}
        n_total = len(tl.tasks) + len(tl.l2t_after)
        expected_msgs = set(tl.msg_waiters)
        ptr = {k: 0 for k in PRIORITY}

        workers = [threading.Thread(target=self._worker, args=(i + 1,), daemon=True,
                                    name=f"rank{self.rank}-w{i + 1}")
                   for i in range(self.n_workers)]
        for th in workers:
            th.start()

        def issue(key):
            items = self._items(key[0], key[1], w, st)
            started.add(key)
            if not items:
                complete(key)
                return
            remaining[key] = len(items)
            for it in items:
                self._queue.put(it)

        def complete(key):
            finished.add(key)
            kind, tid = key
            if kind == "L2T":
                return
            for mk, t, dest in tl.sends.get(key, ()):
                self._send(mk, t, dest, st)
            for dk in tl.tasks[key].dependents:
                deps[dk] -= 1
            for t in l2t_of.get(key, ()):
                l2t_wait[t] -= 1
                if l2t_wait[t] == 0:
                    issue(("L2T", t))
            if kind in ("M2L", "L") and tid in locals_wait:
                locals_wait[tid] -= 1
                if locals_wait[tid] == 0:
                    for dest in tl.locals_sends[tid]:
                        self._send(LOCALS_TO_CHILD, tid, dest, st)

        def item_done(item):
            remaining[item.task] -= 1
            if remaining[item.task] == 0:
                complete(item.task)

        def find_next():
            for kind in PRIORITY:
                lst = tl.lists[kind]
                # skip the issued prefix, then take the first ready task in list order
                while ptr[kind] < len(lst) and (kind, lst[ptr[kind]]) in started:
                    ptr[kind] += 1
                for tid in lst[ptr[kind]:]:
                    key = (kind, tid)
                    if key not in started and deps[key] == 0:
                        return key
            return None

        last_progress = time.monotonic()
        try:
            while len(finished) < n_total:
                if self.abort.is_set():
                    raise TransportError(f"rank {self.rank}: run aborted by another rank")
                progress = False
                self._wake.clear()
                for msg in self.ep.poll():
                    if msg.tag not in expected_msgs:
                        raise TransportError(
                            f"rank {self.rank}: unexpected message cluster={msg.cluster} "
                            f"kind={KIND_NAMES[msg.kind]} from rank {msg.sender}")
                    expected_msgs.discard(msg.tag)
                    self._store(msg, st)
                    for key in tl.msg_waiters[msg.tag]:
                        deps[key] -= 1
                    progress = True
                while True:
                    try:
                        item, exc = self._done.get_nowait()
                    except queue.Empty:
                        break
                    if exc is not None:
                        raise exc
                    item_done(item)
                    progress = True
                key = find_next()
                if key is not None:
                    issue(key)
                    progress = True
                # participation: run one queued item when too many wait unstarted
                if self._queue.qsize() > self.threshold:
                    try:
                        item = self._queue.get_nowait()
                    except queue.Empty:
                        item = None
                    if item is not None:
                        self._execute(item, 0)
                        item_done(item)
                        progress = True
                if progress:
                    last_progress = time.monotonic()
                    continue
                if any(remaining[k] for k in remaining if k not in finished):
                    last_progress = time.monotonic()
                if time.monotonic() - last_progress > self.watchdog:
                    pend = sorted(k for k in tl.tasks if k not in finished)
                    raise DeadlockError(
                        f"rank {self.rank}: no progress for {self.watchdog:.1f}s; "
                        f"{len(pend)} tasks pending, first {pend[:5]}, "
                        f"waiting for messages {sorted(expected_msgs)[:5]}")
                self._wake.wait(0.002)
        except BaseException:
            self.abort.set()
            raise
        finally:
            for _ in workers:
                self._queue.put(None)
            for th in workers:
                th.join()
        if expected_msgs:
            raise TransportError(f"rank {self.rank}: finished with unreceived messages {sorted(expected_msgs)}")
        return st
