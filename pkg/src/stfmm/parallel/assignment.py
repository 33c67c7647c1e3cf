"""Distribution of the temporal scheduling tree among ranks."""

from __future__ import annotations

import math
from dataclasses import dataclass

from ..kernel import Interval
from ..tree import TemporalCluster, TemporalTree, temporal_interaction, temporal_nearfield


class AssignmentError(ValueError):
    pass


@dataclass
class RankAssignment:
    """Owner rank of every temporal cluster."""

    owner: dict  # temporal cluster id -> rank
    n_ranks: int
    slice_owner: tuple = ()

    def __getitem__(self, tid):
        return self.owner[tid]

    def owned(self, rank):
        return sorted(t for t, r in self.owner.items() if r == rank)

    def counts_per_level(self, ttree):
        """``counts[rank][level]`` of owned clusters."""
        out = [[0] * (ttree.depth + 1) for _ in range(self.n_ranks)]
        for t, r in self.owner.items():
            out[r][ttree[t].level] += 1
        return out


def _first_slice(tc, slice_bounds):
    lo = tc.steps[0]
    for i in range(len(slice_bounds) - 1):
        if slice_bounds[i] <= lo < slice_bounds[i + 1]:
            return i
    raise AssignmentError(f"step {lo} outside the slice partition")


def assign_clusters(ttree, n_ranks, slice_bounds=None):
    """Owner of every temporal cluster.

    Clusters on levels ``>= ceil(log2 N)`` go to the owner of their first
    time-slice, slices being dealt out block-contiguously in ascending
    order. One level above, a cluster follows its left child. Further up the
    ranks are split into ``2^level`` ascending groups and each cluster goes
    to the group member owning the fewest clusters so far (lowest rank on
    ties). Without ``slice_bounds`` the leaves of the temporal tree are used
    as slices.
    """
    if n_ranks < 1:
        raise AssignmentError("need at least one rank")
    if slice_bounds is None:
        leaves = sorted(ttree.leaves(), key=lambda j: ttree[j].steps[0])
        slice_bounds = tuple([ttree[j].steps[0] for j in leaves] + [ttree[leaves[-1]].steps[1]])
    n_slices = len(slice_bounds) - 1
    if n_slices < n_ranks:
        raise AssignmentError(
            f"{n_slices} time-slices cannot be distributed among {n_ranks} ranks"
        )
    slice_owner = tuple(i * n_ranks // n_slices for i in range(n_slices))
    lstar = math.ceil(math.log2(n_ranks)) if n_ranks > 1 else 0
    owner = {}
    count = [0] * n_ranks

    def give(t, r):
        owner[t] = r
        count[r] += 1

    for lev in range(ttree.depth, -1, -1):
        for t in sorted(ttree.levels[lev], key=lambda j: ttree[j].index):
            tc = ttree[t]
            if lev >= lstar or tc.is_leaf:
                give(t, slice_owner[_first_slice(tc, slice_bounds)])
            elif lev == lstar - 1:
                give(t, owner[tc.children[0]])
            else:
                groups = 2**lev
                k = tc.index
                lo, hi = k * n_ranks // groups, (k + 1) * n_ranks // groups
                members = range(lo, max(hi, lo + 1))
                give(t, min(members, key=lambda r: (count[r], r)))
    return RankAssignment(owner, n_ranks, slice_owner)


def uniform_temporal_tree(depth, t_end=1.0):
    """Complete binary temporal tree with ``2**depth`` equal leaves (one step each)."""
    n = 2**depth
    h = t_end / n
    clusters = []
    parent_of = {}
    for lev in range(depth + 1):
        width = n >> lev
        for k in range(2**lev):
            tc = TemporalCluster(
                id=len(clusters), level=lev, index=k, steps=(k * width, (k + 1) * width),
                interval=Interval(k * width * h, (k + 1) * width * h),
                parent=parent_of.get((lev, k)),
            )
            if tc.parent is not None:
                clusters[tc.parent].children.append(tc.id)
            parent_of[(lev + 1, 2 * k)] = tc.id
            parent_of[(lev + 1, 2 * k + 1)] = tc.id
            clusters.append(tc)
    tt = TemporalTree(clusters)
    for tc in clusters:
        tc.nearfield = sorted(temporal_nearfield(tt, tc.id), key=lambda j: (tt[j].level, tt[j].index))
        tc.interaction = temporal_interaction(tt, tc.id)
    return tt


def m2l_effort(ttree, assignment, cost_per_level):
    """Per-rank ``sum_level (#M2L operations of owned clusters) * cost[level]``.

    ``cost_per_level`` maps level to the effort of one temporal M2L there.
    """
    work = [0] * assignment.n_ranks
    for tc in ttree.clusters:
        if tc.interaction:
            work[assignment[tc.id]] += len(tc.interaction) * cost_per_level.get(tc.level, 0)
    return work
