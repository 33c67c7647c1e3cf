"""Locally essential trees and the four per-rank task lists with dependencies."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .transport import LOCALS_TO_CHILD, MOMENTS_TO_INTERACTION, MOMENTS_TO_PARENT

KINDS = ("M", "M2L", "L", "N")


class DependencyCycleError(RuntimeError):
    pass


@dataclass
class LET:
    """A rank's owned temporal clusters plus ghost clusters it talks to.

    Ghosts carry only their owner; their tensors are filled by messages.
    ``dofs`` are the global DOFs whose density the rank reads (owned leaves
    and the sources of their nearfield blocks).
    """

    rank: int
    owned: list
    ghosts: dict  # temporal cluster id -> owner rank
    owned_st: list
    dofs: np.ndarray
    out_dofs: np.ndarray

    @property
    def clusters(self):
        return sorted(set(self.owned) | set(self.ghosts))


def m_children(plan, tid):
    """Temporal clusters whose M-tasks feed the pull-M2M of ``tid``."""
    tree = plan.tree
    out = set()
    for cid in plan.units[tid]["m"]:
        for ch in tree[cid].children:
            if plan.need_mu[ch]:
                out.add(tree[ch].temporal)
    return sorted(out)


def m2l_sources(plan, tid):
    tc = plan.tree.temporal[tid]
    return [tc.interaction[slot] for slot in range(len(tc.interaction)) if (tid, slot) in plan.tasks]


def l_parent_tasks(plan, tid):
    """Parent tasks whose results make up the locals pulled by the L-task of ``tid``."""
    p = plan.tree.temporal[tid].parent
    if p is None or not plan.has_task("L", tid):
        return []
    return [(k, p) for k in ("M2L", "L") if plan.has_task(k, p)]


def build_let(rank, plan, assignment):
    tree, tt = plan.tree, plan.tree.temporal
    owned = assignment.owned(rank)
    need = set()
    for tid in owned:
        tc = tt[tid]
        if tc.parent is not None:
            need.add(tc.parent)
        need.update(tc.children)
        need.update(m2l_sources(plan, tid))
        for other in tt.clusters:
            if tid in m2l_sources(plan, other.id):
                need.add(other.id)
        for cid in plan.units[tid]["n"]:
            for s in tree[cid].nearfield:
                need.add(tree[s].temporal)
    ghosts = {t: assignment[t] for t in sorted(need) if assignment[t] != rank}
    owned_st = sorted(c for t in owned for c in tt[t].st_clusters)
    out = [tree.element_dofs(c) for c in owned_st if tree[c].is_leaf]
    read = list(out)
    for c in owned_st:
        if tree[c].is_leaf and c in plan.nearfield.cols:
            read.append(plan.nearfield.cols[c])
    cat = lambda parts: np.unique(np.concatenate(parts)) if parts else np.zeros(0, dtype=np.int64)
    return LET(rank, owned, ghosts, owned_st, cat(read), cat(out))


@dataclass
class Task:
    kind: str
    tid: int
    local_deps: list = field(default_factory=list)  # [(kind, tid)]
    remote_deps: list = field(default_factory=list)  # [(tid, msg kind)]
    dependents: list = field(default_factory=list)

    @property
    def key(self):
        return (self.kind, self.tid)

    @property
    def n_deps(self):
        return len(self.local_deps) + len(self.remote_deps)

    @property
    def has_remote(self):
        return bool(self.remote_deps)


@dataclass
class TaskLists:
    rank: int
    lists: dict  # kind -> ordered [tid]
    tasks: dict  # (kind, tid) -> Task
    msg_waiters: dict  # (tid, msg kind) -> [(kind, tid)]
    sends: dict  # (kind, tid) -> [(msg kind, tid, dest)]
    locals_sends: dict  # tid -> [dest]
    l2t_after: dict  # tid -> [(kind, tid)] tasks that must finish before L2T of tid

    def expected_receives(self):
        return len(self.msg_waiters)

    def expected_sends(self):
        n = sum(len(v) for v in self.sends.values())
        return n + sum(len(v) for v in self.locals_sends.values())


def build_task_lists(plan, assignment, rank):
    """M-, M2L-, L- and N-lists of ``rank`` ordered by ascending (level, index)."""
    tt = plan.tree.temporal
    owner = assignment.owner
    owned = sorted(assignment.owned(rank), key=lambda j: (tt[j].level, tt[j].index))
    lists = {k: [t for t in owned if plan.has_task(k, t)] for k in KINDS}
    tasks = {}
    for k in KINDS:
        for t in lists[k]:
            tasks[(k, t)] = Task(k, t)

    def dep(task, kind, src, msg_kind):
        if owner[src] == rank:
            task.local_deps.append((kind, src))
        else:
            key = (src, msg_kind)
            if key not in task.remote_deps:
                task.remote_deps.append(key)

    for t in lists["M"]:
        for ch in m_children(plan, t):
            dep(tasks[("M", t)], "M", ch, MOMENTS_TO_PARENT)
    for t in lists["M2L"]:
        for s in m2l_sources(plan, t):
            dep(tasks[("M2L", t)], "M", s, MOMENTS_TO_INTERACTION)
    for t in lists["L"]:
        for kind, p in l_parent_tasks(plan, t):
            dep(tasks[("L", t)], kind, p, LOCALS_TO_CHILD)
    msg_waiters = {}
    for task in tasks.values():
        for d in task.local_deps:
            tasks[d].dependents.append(task.key)
        for r in task.remote_deps:
            msg_waiters.setdefault(r, []).append(task.key)

    # outgoing messages, one per (cluster, kind, destination rank)
    sends = {}
    for t in lists["M"]:
        out = []
        p = tt[t].parent
        if p is not None and owner[p] != rank and plan.has_task("M", p) and t in m_children(plan, p):
            out.append((MOMENTS_TO_PARENT, t, owner[p]))
        dests = sorted({owner[o.id] for o in tt.clusters if t in m2l_sources(plan, o.id)} - {rank})
        out.extend((MOMENTS_TO_INTERACTION, t, d) for d in dests)
        sends[("M", t)] = out
    locals_sends = {}
    for t in owned:
        dests = sorted({owner[ch] for ch in tt[t].children
                        if plan.has_task("L", ch) and l_parent_tasks(plan, ch)} - {rank})
        if dests:
            locals_sends[t] = dests
    l2t_after = {}
    for t in owned:
        if plan.units[t]["l2t"]:
            l2t_after[t] = [(k, t) for k in ("M2L", "L") if plan.has_task(k, t)]
    tl = TaskLists(rank, lists, tasks, msg_waiters, sends, locals_sends, l2t_after)
    check_acyclic([tl])
    return tl


def check_acyclic(all_lists):
    """Defensive cycle check over the union of local and cross-rank dependencies."""
    nodes = {}
    for tl in all_lists:
        for task in tl.tasks.values():
            nodes[task.key] = task
    state = {}

    def preds(task):
        out = list(task.local_deps)
        for src, mk in task.remote_deps:
            if mk == LOCALS_TO_CHILD:
                out.extend(k for k in (("M2L", src), ("L", src)) if k in nodes)
            else:
                out.append(("M", src))
        return out

    for start in nodes:
        if state.get(start) == 2:
            continue
        stack = [(start, iter(preds(nodes[start])))]
        state[start] = 1
        while stack:
            key, it = stack[-1]
            nxt = next(it, None)
            if nxt is None:
                state[key] = 2
                stack.pop()
                continue
            if nxt not in nodes:
                continue
            s = state.get(nxt)
            if s == 1:
                raise DependencyCycleError(f"dependency cycle through {nxt}")
            if s is None:
                state[nxt] = 1
                stack.append((nxt, iter(preds(nodes[nxt]))))
    return True


def static_message_counts(plan, assignment):
    """``{(sender, dest): n}`` predicted from the task lists of all ranks."""
    counts = {}
    for r in range(assignment.n_ranks):
        tl = build_task_lists(plan, assignment, r)
        for out in tl.sends.values():
            for _, _, d in out:
                counts[(r, d)] = counts.get((r, d), 0) + 1
        for dests in tl.locals_sends.values():
            for d in dests:
                counts[(r, d)] = counts.get((r, d), 0) + 1
    return counts
