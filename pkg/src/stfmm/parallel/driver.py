"""Multi-rank FMM evaluation with every rank running in its own thread.

All ranks share one read-only :class:`~stfmm.fmm.FMMPlan` (tree, basis
integrals, translation tables, nearfield blocks) but keep private μ/λ/f
state; data crosses ranks only through the transport.
"""

from __future__ import annotations

import threading
import time

import numpy as np

from .assignment import assign_clusters
from .runtime import RankRuntime, WriteMonitor
from .tasks import build_let, build_task_lists, check_acyclic, m2l_sources, static_message_counts
from .trace import TraceRecorder
from .transport import LOCALS_TO_CHILD, MOMENTS_TO_PARENT, make_endpoints


class DistributedFMM:
    """Distributed single-layer FMM matvec.

    Parameters
    ----------
    plan : FMMPlan
    n_ranks : int
    n_workers : int
        Worker threads per rank (the scheduling loop is extra).
    threshold : float, optional
        Participation threshold; default ``2 * n_workers``, ``inf`` keeps the
        scheduling loop out of the computation.
    transport : {"inproc", "tcp"}
    max_delay : float
        Upper bound of the random in-process delivery delay in seconds.
    """

    def __init__(self, plan, n_ranks=1, n_workers=1, threshold=None, transport="inproc",
                 max_delay=0.0, seed=None, trace=False, instrument=False, watchdog=60.0,
                 use_locks=True):
        self.plan = plan
        self.n_ranks = int(n_ranks)
        tt = plan.tree.temporal
        self.assignment = assign_clusters(tt, self.n_ranks, plan.tree.params.get("slice_bounds"))
        self.lets = [build_let(r, plan, self.assignment) for r in range(self.n_ranks)]
        self.tasklists = [build_task_lists(plan, self.assignment, r) for r in range(self.n_ranks)]
        check_acyclic(self.tasklists)
        self.n_workers = n_workers
        self.threshold = threshold
        self.transport = transport
        self.max_delay = max_delay
        self.seed = seed
        self.recorder = TraceRecorder(enabled=trace)
        self.monitor = WriteMonitor() if instrument else None
        self.watchdog = watchdog
        self.use_locks = use_locks
        self.endpoints = make_endpoints(transport, self.n_ranks, max_delay, seed)
        self.message_log = []
        self.last_time = None

    def close(self):
        for ep in self.endpoints:
            ep.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
        return False

    @property
    def shape(self):
        n = self.plan.tree.mesh.n_dofs
        return (n, n)

    def matvec(self, w):
        w = np.asarray(w, dtype=float)
        n = self.plan.tree.mesh.n_dofs
        if w.shape != (n,):
            raise ValueError(f"expected vector of length {n}, got shape {w.shape}")
        abort = threading.Event()
        runtimes = [
            RankRuntime(self.plan, self.tasklists[r], self.lets[r], self.endpoints[r], self.n_workers,
                        self.threshold, self.recorder, self.monitor, self.watchdog, self.use_locks, abort)
            for r in range(self.n_ranks)
        ]
        for ep in self.endpoints:
            ep.start_run()
        results = [None] * self.n_ranks
        errors = [None] * self.n_ranks

        def body(r):
            let = self.lets[r]
            halo = np.full(n, np.nan)  # anything outside the LET must never be read
            halo[let.dofs] = w[let.dofs]
            try:
                results[r] = runtimes[r].run(halo)
            except BaseException as exc:
                errors[r] = exc
                abort.set()

        t0 = time.perf_counter()
        threads = [threading.Thread(target=body, args=(r,), name=f"rank{r}") for r in range(self.n_ranks)]
        for th in threads:
            th.start()
        for th in threads:
            th.join()
        self.last_time = time.perf_counter() - t0
        # report the root cause, not the ranks that stopped because of it
        primary = [e for e in errors if e is not None and "aborted by another rank" not in str(e)]
        if primary or any(e is not None for e in errors):
            raise (primary or [e for e in errors if e is not None])[0]
        f = np.zeros(n)
        for r, st in enumerate(results):
            out = self.lets[r].out_dofs
            f[out] = st["f_far"][out] + st["f_near"][out]
        self.message_log = [e for rt in runtimes for e in rt.sent]
        self.received_log = [e for rt in runtimes for e in rt.received]
        return f

    __matmul__ = matvec

    # ---- audits -------------------------------------------------------------
    def message_counts(self):
        counts = {}
        for e in self.message_log:
            counts[(e.sender, e.dest)] = counts.get((e.sender, e.dest), 0) + 1
        return counts

    def static_message_counts(self):
        return static_message_counts(self.plan, self.assignment)

    def direction_violations(self, log=None):
        """Moment messages whose source interval ends after a receiving cluster's interval."""
        return direction_violations(self.plan, self.assignment, self.message_log if log is None else log)


def direction_violations(plan, assignment, log):
    tt = plan.tree.temporal
    bad = []
    for e in log:
        if e.kind == LOCALS_TO_CHILD:
            continue
        src = tt[e.cluster]
        if e.kind == MOMENTS_TO_PARENT:
            targets = [src.parent]
        else:
            targets = [o.id for o in tt.clusters
                       if assignment[o.id] == e.dest and e.cluster in m2l_sources(plan, o.id)]
        if not targets:
            bad.append((e, None))
        for t in targets:
            if src.interval.upper > tt[t].interval.upper:
                bad.append((e, t))
    return bad
