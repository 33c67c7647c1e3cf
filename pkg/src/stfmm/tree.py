"""4D space-time box cluster tree, temporal tree and nearfield/interaction lists."""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field

import numpy as np

from .kernel import Box4, Interval, check_box_relation

log = logging.getLogger(__name__)

TEMPORAL = "temporal"
SPACETIME = "spacetime"


@dataclass(eq=False)
class STCluster:
    id: int
    level: int
    steps: tuple  # (lo, hi): 0-based time-steps lo..hi-1, i.e. interval (t_lo, t_hi]
    triangles: np.ndarray
    corner: np.ndarray  # unpadded spatial corner
    half_size: float  # unpadded spatial half-size
    grid: tuple
    n_space_refinements: int
    parent: int | None = None
    children: list = field(default_factory=list)
    child_kind: str | None = None
    box: Box4 | None = None
    temporal: int | None = None
    nearfield: list = field(default_factory=list)
    interaction: list = field(default_factory=list)

    @property
    def n_elements(self):
        return (self.steps[1] - self.steps[0]) * len(self.triangles)

    @property
    def is_leaf(self):
        return not self.children

    @property
    def n_steps(self):
        return self.steps[1] - self.steps[0]


@dataclass(eq=False)
class TemporalCluster:
    id: int
    level: int
    index: int
    steps: tuple
    interval: Interval
    parent: int | None = None
    children: list = field(default_factory=list)
    st_clusters: list = field(default_factory=list)
    nearfield: list = field(default_factory=list)
    interaction: list = field(default_factory=list)

    @property
    def is_leaf(self):
        return not self.children


class TemporalTree:
    """Binary tree of the distinct time intervals of a cluster tree."""

    def __init__(self, clusters):
        self.clusters = clusters
        self.depth = max(c.level for c in clusters)
        self.levels = [[] for _ in range(self.depth + 1)]
        for c in clusters:
            self.levels[c.level].append(c.id)
        self._by_pos = {(c.level, c.index): c.id for c in clusters}

    def __len__(self):
        return len(self.clusters)

    def __getitem__(self, i):
        return self.clusters[i]

    def find(self, level, index):
        """Cluster id of ``I_index^(level)`` or None if missing."""
        return self._by_pos.get((level, index))

    def leaves(self):
        return [c.id for c in self.clusters if c.is_leaf]


def split_interval(lo, hi, time_nodes, slice_bounds=None):
    """Split step range ``lo..hi-1`` at the time-step closest to the interval center.

    Ties go to the earlier step. When ``slice_bounds`` is given and the range
    spans at least two slices, only slice boundaries are candidates.
    Returns ``((lo, k), (k, hi))``.
    """
    if hi - lo < 2:
        raise ValueError("interval with a single time-step cannot be split")
    time_nodes = np.asarray(time_nodes)
    candidates = list(range(lo + 1, hi))
    if slice_bounds is not None:
        inner = [b for b in slice_bounds if lo < b < hi]
        if inner:
            candidates = inner
    center = 0.5 * (time_nodes[lo] + time_nodes[hi])
    best = min(candidates, key=lambda k: (abs(time_nodes[k] - center), k))
    return (lo, best), (best, hi)


def interaction_area(grid, n_space_refinements, n_tr):
    """Grid multi-indices within Chebyshev distance ``n_tr`` of ``grid``, clipped to the level grid."""
    top = 2**n_space_refinements - 1
    ranges = [range(max(0, g - n_tr), min(top, g + n_tr) + 1) for g in grid]
    return set(itertools.product(*ranges))


def temporal_nearfield(tree, cid):
    """Temporal nearfield by the recursive case-split definition."""
    c = tree[cid]
    if c.index == 0:
        return [cid]
    out = []
    for k in (c.index - 1, c.index):
        j = tree.find(c.level, k)
        if j is not None:
            out.append(j)
    if c.parent is not None:
        for j in temporal_nearfield(tree, c.parent):
            if tree[j].is_leaf and j not in out:
                out.append(j)
    return out


def temporal_interaction(tree, cid):
    c = tree[cid]
    k = c.index
    if k < 2:
        return []
    wanted = (k - 2,) if k % 2 == 0 else (k - 3, k - 2)
    return [j for j in (tree.find(c.level, i) for i in wanted) if j is not None]


class ClusterTree:
    """Space-time cluster tree with padded boxes and precomputed lists.

    Parameters mirror the construction: ``n_max`` leaf bound, ``c_st`` size
    relation constant, ``n_tr`` interaction-area radius and ``oversize``
    factor of the early stopping rule.
    """

    def __init__(self, mesh, clusters, root_corner, root_half, params):
        self.mesh = mesh
        self.clusters = clusters
        self.params = params
        self.root_corner = root_corner
        self.root_half = root_half
        self.depth = max(c.level for c in clusters)
        self.levels = [[] for _ in range(self.depth + 1)]
        for c in clusters:
            self.levels[c.level].append(c.id)
        self.padding = np.zeros(self.depth + 1)
        self.temporal = None

    def __len__(self):
        return len(self.clusters)

    def __getitem__(self, i):
        return self.clusters[i]

    @property
    def root(self):
        return self.clusters[0]

    def leaves(self):
        return [c.id for c in self.clusters if c.is_leaf]

    def level_half_size(self, level):
        """Padded spatial half-size shared by all boxes of ``level``."""
        return self.clusters[self.levels[level][0]].box.half_size

    def element_dofs(self, cid):
        c = self.clusters[cid]
        return self.mesh.dofs(np.arange(*c.steps), c.triangles)

    def dump(self):
        """Debug text, one line per cluster: ``level k_interval grid_index n_elements is_leaf``."""
        lines = []
        for c in self.clusters:
            k = self.temporal[c.temporal].index if self.temporal is not None else -1
            g = ",".join(str(v) for v in c.grid)
            lines.append(f"{c.level} {k} {g} {c.n_elements} {int(c.is_leaf)}")
        return "\n".join(lines) + "\n"


def _root_box(centroids, diameters, h_t0, alpha, c_st):
    lo = centroids.min(axis=0)
    hi = centroids.max(axis=0)
    half = 0.5 * float((hi - lo).max())
    if half <= 0.0:
        half = float(diameters.max())
    # enlarge slightly so that minimal centroids fall inside the half-open box
    half *= 1.0 + 1e-9
    half += 1e-12
    center = 0.5 * (lo + hi)
    if not check_box_relation(half, h_t0, alpha, c_st):
        log.warning(
            "root box violates the size relation (%.3g > c_st=%.3g); relying on space-time splits",
            half * half / (4 * alpha * h_t0),
            c_st,
        )
    return center - half, half


def build_tree(
    mesh,
    n_max=80,
    c_st=0.9,
    n_tr=5,
    alpha=1.0,
    oversize=2.0,
    slice_bounds=None,
):
    """Build, pad and annotate the cluster tree of a :class:`SpaceTimeMesh`.

    A cluster is refined while it owns at least ``n_max`` elements. The split
    is purely temporal if the child temporal half-size together with the
    current spatial half-size satisfies the size relation, else it is a
    16-way space-time split. Refinement stops early if an owned element is
    longer than ``oversize`` times the cluster's temporal half-size, wider
    than ``oversize`` times its spatial half-size, or if a needed temporal
    split would cut a single time-step.
    """
    if n_max < 1:
        raise ValueError("n_max must be >= 1")
    if not c_st > 0 or not alpha > 0 or not oversize > 0:
        raise ValueError("c_st, alpha and oversize must be positive")
    if n_tr < 0:
        raise ValueError("n_tr must be >= 0")
    space = mesh.space
    nodes = mesh.time_nodes
    h_t0 = 0.5 * mesh.t_end
    diam = space.diameters()
    cent = space.centroids
    root_corner, root_half = _root_box(cent, diam, h_t0, alpha, c_st)

    root = STCluster(
        id=0,
        level=0,
        steps=(0, mesh.n_timesteps),
        triangles=np.arange(space.n_triangles),
        corner=root_corner,
        half_size=root_half,
        grid=(0, 0, 0),
        n_space_refinements=0,
    )
    clusters = [root]
    current = [root]
    level = 0
    while current:
        h_child_t = 2.0 ** (-level - 1) * h_t0
        nxt = []
        for c in current:
            if c.n_elements < n_max:
                continue
            h_t_c = 0.5 * (nodes[c.steps[1]] - nodes[c.steps[0]])
            if c.n_steps < 2:
                continue
            if mesh.h_t > oversize * h_t_c or diam[c.triangles].max() > oversize * c.half_size:
                continue
            temporal_only = check_box_relation(c.half_size, h_child_t, alpha, c_st)
            halves = split_interval(c.steps[0], c.steps[1], nodes, slice_bounds)
            if temporal_only:
                parts = [(c.corner, c.half_size, c.grid, c.triangles)]
                c.child_kind = TEMPORAL
            else:
                parts = []
                h = 0.5 * c.half_size
                mid = c.corner + c.half_size
                upper = cent[c.triangles] > mid
                for octant in itertools.product((0, 1), repeat=3):
                    mask = np.all(upper == np.array(octant, dtype=bool), axis=1)
                    corner = c.corner + h * 2.0 * np.array(octant)
                    grid = tuple(2 * g + o for g, o in zip(c.grid, octant))
                    parts.append((corner, h, grid, c.triangles[mask]))
                c.child_kind = SPACETIME
            lx = c.n_space_refinements + (0 if temporal_only else 1)
            for steps in halves:
                for corner, h, grid, tris in parts:
                    if len(tris) == 0:
                        continue
                    child = STCluster(
                        id=-1,
                        level=level + 1,
                        steps=steps,
                        triangles=tris,
                        corner=corner,
                        half_size=h,
                        grid=grid,
                        n_space_refinements=lx,
                        parent=c.id,
                    )
                    nxt.append(child)
        # deterministic numbering: by time then grid index
        nxt.sort(key=lambda z: (z.steps[0], z.grid))
        for z in nxt:
            z.id = len(clusters)
            clusters.append(z)
            clusters[z.parent].children.append(z.id)
        current = nxt
        level += 1

    tree = ClusterTree(mesh, clusters, root_corner, root_half, dict(
        n_max=n_max, c_st=c_st, n_tr=n_tr, alpha=alpha, oversize=oversize,
        slice_bounds=None if slice_bounds is None else tuple(slice_bounds),
    ))
    pad_boxes(tree)
    extract_temporal_tree(tree)
    compute_lists(tree)
    return tree


def pad_boxes(tree):
    """Uniform per-level padding so that owned triangles lie inside their boxes."""
    space = tree.mesh.space
    verts = space.vertices[space.triangles]  # [tri, 3 vertices, 3]
    need = np.zeros(tree.depth + 1)
    for c in tree.clusters:
        v = verts[c.triangles].reshape(-1, 3)
        lo = c.corner
        hi = c.corner + 2.0 * c.half_size
        excess = max(float((lo - v).max()), float((v - hi).max()), 0.0)
        need[c.level] = max(need[c.level], excess)
    pad = need.copy()
    for lev in range(tree.depth - 1, -1, -1):
        pad[lev] = max(pad[lev], pad[lev + 1])
    tree.padding = pad
    nodes = tree.mesh.time_nodes
    for c in tree.clusters:
        p = pad[c.level]
        interval = Interval(float(nodes[c.steps[0]]), float(nodes[c.steps[1]]))
        c.box = Box4(tuple(c.corner - p), c.half_size + p, interval)
    return tree


def extract_temporal_tree(tree):
    """Collect the distinct intervals per level into a binary tree and link clusters to it."""
    nodes = tree.mesh.time_nodes
    tcs = []
    by_key = {}
    for lev in range(tree.depth + 1):
        for cid in tree.levels[lev]:
            c = tree.clusters[cid]
            key = (lev, c.steps)
            if key not in by_key:
                if c.parent is None:
                    parent_t, index = None, 0
                else:
                    parent_t = tree.clusters[c.parent].temporal
                    pt = tcs[parent_t]
                    index = 2 * pt.index + (0 if c.steps[0] == pt.steps[0] else 1)
                tc = TemporalCluster(
                    id=len(tcs),
                    level=lev,
                    index=index,
                    steps=c.steps,
                    interval=Interval(float(nodes[c.steps[0]]), float(nodes[c.steps[1]])),
                    parent=parent_t,
                )
                if parent_t is not None:
                    tcs[parent_t].children.append(tc.id)
                by_key[key] = tc.id
                tcs.append(tc)
            c.temporal = by_key[key]
            tcs[c.temporal].st_clusters.append(cid)
    ttree = TemporalTree(tcs)
    for tc in tcs:
        tc.children.sort(key=lambda j: tcs[j].index)
        tc.nearfield = sorted(temporal_nearfield(ttree, tc.id), key=lambda j: (tcs[j].level, tcs[j].index))
        tc.interaction = temporal_interaction(ttree, tc.id)
    tree.temporal = ttree
    return ttree


def compute_lists(tree):
    """Space-time nearfield and interaction lists of every cluster."""
    n_tr = tree.params["n_tr"]
    tt = tree.temporal
    # clusters of each temporal cluster indexed by grid position
    by_grid = {tc.id: {tree.clusters[c].grid: c for c in tc.st_clusters} for tc in tt.clusters}
    for lev in range(tree.depth + 1):
        for cid in tree.levels[lev]:
            c = tree.clusters[cid]
            area = interaction_area(c.grid, c.n_space_refinements, n_tr)
            tc = tt[c.temporal]

            def members(tids):
                out = []
                for j in tids:
                    if tt[j].level != lev:
                        continue
                    cells = by_grid[j]
                    if len(cells) > len(area):
                        out.extend(cells[g] for g in sorted(area) if g in cells)
                    else:
                        out.extend(cells[g] for g in sorted(cells) if g in area)
                return out

            c.interaction = members(tc.interaction)
            near = members(tc.nearfield)
            if c.parent is not None:
                for j in tree.clusters[c.parent].nearfield:
                    if tree.clusters[j].is_leaf and j not in near:
                        near.append(j)
            c.nearfield = near
    return tree


def st_lists(tree, cid):
    c = tree.clusters[cid]
    return list(c.nearfield), list(c.interaction)


def coverage_audit(tree):
    """Count how often each causal (target DOF, source DOF) pair is covered.

    Returns ``(n_uncovered, n_multiple, n_acausal_admissible)``: causal pairs
    covered by no block, pairs covered more than once, and anti-causal pairs
    inside admissible blocks. For large ``n_tr`` a correct block partition
    yields ``(0, 0, 0)``. Nearfield blocks on the diagonal necessarily hold
    anti-causal pairs; their matrix entries are exact zeros.
    """
    mesh = tree.mesh
    n = mesh.n_dofs
    if n > 16384:
        raise ValueError("coverage audit limited to 16384 DOFs")
    count = np.zeros((n, n), dtype=np.int32)
    far = np.zeros((n, n), dtype=bool)
    for c in tree.clusters:
        rows = tree.element_dofs(c.id)
        if c.is_leaf:
            for s in c.nearfield:
                count[np.ix_(rows, tree.element_dofs(s))] += 1
        for s in c.interaction:
            idx = np.ix_(rows, tree.element_dofs(s))
            count[idx] += 1
            far[idx] = True
    step = np.arange(n) // mesh.n_space
    causal = step[:, None] >= step[None, :]
    uncovered = int(np.count_nonzero(causal & (count == 0)))
    multiple = int(np.count_nonzero(count > 1))
    acausal = int(np.count_nonzero(~causal & far))
    return uncovered, multiple, acausal
