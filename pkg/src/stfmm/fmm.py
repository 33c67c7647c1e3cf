"""Sequential space-time FMM matrix-vector product.

The plan precomputes every operator once; :meth:`FMMPlan.matvec` then runs
S2M, the upward M2M pass, M2L, the downward L2L pass, L2T and the nearfield.
All per-cluster work is organised in the same units the distributed runtime
uses (see :mod:`stfmm.parallel`), so both paths perform identical arithmetic.
"""

from __future__ import annotations

import logging
import threading
import time
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .assembly import assemble_nearfield
from .kernel import CoeffTensor, ExpansionOrders, multi_indices, offset_tables
from .operators import (
    _m2l_lanes,
    compute_basis_integrals,
    l2l,
    l2t,
    m2l_key,
    m2l_naive,
    m2m,
    s2m,
    spatial_m2m_tensor,
    temporal_m2m_matrix,
)

log = logging.getLogger(__name__)

GROUP_CHUNK = 64


@njit(cache=True, nogil=True)
def _m2l_pairs(pair_tgt, pair_src, pair_off, lo, hi, mu, lam, slot, pref, tab, mi, m,
               mug, ix, out, cube, ps, bs, acc, lt, tmp):
    """M2L for pairs ``lo..hi-1`` of a task, in chunks of ``mug.shape[2]`` lanes."""
    nt = mu.shape[1]
    nk = mu.shape[2]
    chunk = mug.shape[2]
    for c0 in range(lo, hi, chunk):
        n = min(hi, c0 + chunk) - c0
        for i in range(n):
            s = pair_src[c0 + i]
            for j in range(3):
                ix[i, j] = pair_off[c0 + i, j]
            for a in range(nt):
                for q in range(nk):
                    mug[a, q, i] = mu[s, a, q]
        _m2l_lanes(pref, tab, ix, mug, mi, m, n, out, cube, ps, bs, acc, lt, tmp)
        for i in range(n):
            t = pair_tgt[c0 + i]
            for b in range(nt):
                for q in range(nk):
                    lam[t, slot, b, q] += out[b, q, i]


class _Scratch(threading.local):
    """Per-thread work arrays of the M2L kernel."""

    def get(self, nt, m, chunk):
        key = (nt, m, chunk)
        if getattr(self, "key", None) != key:
            nk = (m + 1) * (m + 2) * (m + 3) // 6
            self.key = key
            self.arrays = (
                np.zeros((nt, nk, chunk)),
                np.zeros((chunk, 3), dtype=np.int64),
                np.zeros((nt, nk, chunk)),
                np.zeros((m + 1, m + 1, m + 1, chunk)),
                np.zeros((m + 1,) * 4 + (chunk,)),
                np.zeros((m + 1,) * 4 + (chunk,)),
                np.zeros((nt, m + 1, m + 1, m + 1, chunk)),
                np.zeros((3, m + 1, m + 1, chunk)),
                np.zeros(chunk),
            )
        return self.arrays


_SCRATCH = _Scratch()


@dataclass
class M2LTask:
    """M2L work of target temporal cluster ``target`` from its ``slot``-th interaction entry."""

    target: int
    source: int
    slot: int
    pair_tgt: np.ndarray
    pair_src: np.ndarray
    pair_off: np.ndarray  # [pair, axis] index into the offset axis of ``tables``
    prefactor: np.ndarray  # [a, b]
    tables: np.ndarray  # [a, b, offset, k, l]

    def coefficients(self, i, m_x):
        """:class:`CoeffTensor` of the i-th pair."""
        return CoeffTensor(self.prefactor, np.ascontiguousarray(self.tables[:, :, self.pair_off[i]]), m_x)

    @property
    def n_pairs(self):
        return len(self.pair_tgt)


@dataclass
class OpCounts:
    s2m: int = 0
    m2m: int = 0
    m2l: int = 0
    l2l: int = 0
    l2t: int = 0
    nearfield: int = 0
    extra: dict = field(default_factory=dict)

    @property
    def total(self):
        return self.s2m + self.m2m + self.m2l + self.l2l + self.l2t + self.nearfield

    def as_dict(self):
        return {
            "s2m": self.s2m, "m2m": self.m2m, "m2l": self.m2l, "l2l": self.l2l,
            "l2t": self.l2t, "nearfield": self.nearfield, "total": self.total,
        }


def _m2l_flops(m_t, m_x):
    """Multiply-adds of one separable M2L."""
    m = m_x
    stage1 = sum(1 for n1 in range(m + 1) for k2 in range(m + 1 - n1)
                 for k3 in range(m + 1 - n1 - k2) for _ in range(m + 1 - n1 - k2 - k3))
    stage2 = sum(m + 1 - n1 - n2 - k3 - e for n1 in range(m + 1) for n2 in range(m + 1 - n1)
                 for k3 in range(m + 1 - n1 - n2) for e in range(m + 1 - n1 - n2 - k3))
    return (m_t + 1) ** 2 * (2 * stage1 + stage2)


class FMMPlan:
    """Precomputed operators of the FMM for one cluster tree.

    Parameters
    ----------
    tree : ClusterTree
    orders : ExpansionOrders
    quadrature : QuadratureSpec, optional
        Nearfield quadrature orders.
    nearfield : NearfieldOperator, optional
        Reuse an already assembled nearfield.
    m2l_impl : {"separable", "naive"}
    grain : int
        Space-time clusters (M2L: target clusters) per work item.
    """

    def __init__(self, tree, orders=None, quadrature=None, nearfield=None, m2l_impl="separable",
                 nearfield_cap=None, table=None, grain=4):
        if m2l_impl not in ("separable", "naive"):
            raise ValueError(f"unknown m2l_impl {m2l_impl!r}")
        self.tree = tree
        self.orders = orders or ExpansionOrders(alpha=tree.params["alpha"])
        if abs(self.orders.alpha - tree.params["alpha"]) > 0:
            raise ValueError("expansion alpha differs from the tree's alpha")
        self.m2l_impl = m2l_impl
        if grain < 1:
            raise ValueError("grain must be >= 1")
        self.grain = int(grain)
        t0 = time.perf_counter()
        self.mi = np.ascontiguousarray(multi_indices(self.orders.m_x))
        self._needs()
        self._transfer_matrices()
        self.basis = {cid: compute_basis_integrals(tree, cid, self.orders)
                      for cid in tree.leaves() if self.need_lam[cid] or self.need_mu[cid]}
        self._m2l_tasks()
        t1 = time.perf_counter()
        kw = {} if nearfield_cap is None else {"cap": nearfield_cap}
        self.nearfield = nearfield if nearfield is not None else assemble_nearfield(
            tree, quadrature, tree.params["alpha"], table=table, **kw)
        self._work_units()
        t2 = time.perf_counter()
        self.setup_times = {"farfield": t1 - t0, "nearfield": t2 - t1}
        log.info("FMM plan: %d clusters, %d M2L pairs, %d 1D coefficient tables, %d nearfield entries",
                 len(tree), self.n_m2l_pairs, self.n_coefficient_tables, self.nearfield.n_entries)

    # ---- setup -----------------------------------------------------------
    def _needs(self):
        tree = self.tree
        n = len(tree)
        used_src = np.zeros(n, bool)
        has_int = np.zeros(n, bool)
        for c in tree.clusters:
            if c.interaction:
                has_int[c.id] = True
                used_src[c.interaction] = True
        need_lam = has_int.copy()
        for c in tree.clusters:  # parents precede children
            if c.parent is not None and need_lam[c.parent]:
                need_lam[c.id] = True
        need_mu = used_src.copy()
        # a cluster needs moments if it or an ancestor is used as a source
        for c in tree.clusters:
            if c.parent is not None and need_mu[c.parent]:
                need_mu[c.id] = True
        self.need_mu = need_mu
        self.need_lam = need_lam

    def _transfer_matrices(self):
        tree, o = self.tree, self.orders
        self.q_t, self.q_x = {}, {}
        cache_t, cache_x = {}, {}
        for c in tree.clusters:
            if c.parent is None or not (self.need_mu[c.id] or self.need_lam[c.id]):
                continue
            p = tree[c.parent]
            kt = (c.steps, p.steps)
            if kt not in cache_t:
                cache_t[kt] = temporal_m2m_matrix(c.box.interval, p.box.interval, o.m_t)
            kx = (c.level, tuple(np.round((np.subtract(c.box.corner, p.box.corner)) / c.box.half_size, 6)))
            if kx not in cache_x:
                cache_x[kx] = spatial_m2m_tensor(c.box, p.box, o.m_x)
            self.q_t[c.id] = cache_t[kt]
            self.q_x[c.id] = cache_x[kx]

    def _m2l_tasks(self):
        tree = self.tree
        tt = tree.temporal
        self.tasks = {}
        self.n_m2l_pairs = 0
        self.n_coefficient_tables = 0
        for tc in tt.clusters:
            for slot, src_tc in enumerate(tc.interaction):
                tg, sr, offs = [], [], []
                for t in tc.st_clusters:
                    for s in tree[t].interaction:
                        if tree[s].temporal != src_tc:
                            continue
                        m2l_key(tree, t, s)  # validates level and temporal separation
                        tg.append(t)
                        sr.append(s)
                        offs.append(np.subtract(tree[t].box.corner, tree[s].box.corner))
                if not tg:
                    continue
                half = tree[tg[0]].box.half_size
                r = np.asarray(offs) / half
                # distinct scaled per-axis offsets (grid differences up to rounding)
                uniq, inv = np.unique(np.round(r, 9).ravel(), return_inverse=True)
                first = np.zeros(len(uniq), dtype=np.int64)
                first[inv[::-1]] = np.arange(inv.size)[::-1]
                pref, tab = offset_tables(tree[tg[0]].box.interval, tree[sr[0]].box.interval,
                                          r.ravel()[first], half, self.orders)
                task = M2LTask(tc.id, src_tc, slot, np.array(tg, dtype=np.int64),
                               np.array(sr, dtype=np.int64), inv.reshape(-1, 3).astype(np.int64),
                               np.ascontiguousarray(pref), np.ascontiguousarray(tab))
                self.tasks[(tc.id, slot)] = task
                self.n_m2l_pairs += task.n_pairs
                self.n_coefficient_tables += tab.shape[2]
        self.n_slots = max([len(tc.interaction) for tc in tt.clusters] + [1])

    # ---- temporal-cluster work decomposition -----------------------------
    def _work_units(self):
        """Per temporal cluster: the space-time clusters each list touches and the work items."""
        tree, tt, g = self.tree, self.tree.temporal, self.grain
        units = {}

        def split(ids):
            return [tuple(ids[i : i + g]) for i in range(0, len(ids), g)]

        for tc in tt.clusters:
            st = sorted(tc.st_clusters)
            u = {
                "m": [c for c in st if self.need_mu[c]],
                "lam": [c for c in st if self.need_lam[c]],
                "l": [c for c in st if tree[c].parent is not None and self.need_lam[tree[c].parent]],
                "l2t": [c for c in st if tree[c].is_leaf and self.need_lam[c]],
                "n": [c for c in st if tree[c].is_leaf and c in self.nearfield.mats],
            }
            u["m_items"] = split(u["m"])
            u["l_items"] = split(u["l"])
            u["l2t_items"] = split(u["l2t"])
            u["n_items"] = split(u["n"])
            items = []
            for slot in range(len(tc.interaction)):
                task = self.tasks.get((tc.id, slot))
                if task is None:
                    continue
                # cut the pair list between targets, every target stays in one item
                bounds = np.flatnonzero(np.diff(task.pair_tgt)) + 1
                starts = np.concatenate([[0], bounds])
                ends = np.concatenate([bounds, [task.n_pairs]])
                for i in range(0, len(starts), g):
                    items.append((slot, int(starts[i]), int(ends[min(i + g, len(starts)) - 1])))
            u["m2l_items"] = items
            units[tc.id] = u
        self.units = units

    def has_task(self, kind, tid):
        u = self.units[tid]
        if kind == "M":
            return bool(u["m"])
        if kind == "M2L":
            return bool(u["m2l_items"])
        if kind == "L":
            return bool(u["l"])
        if kind == "N":
            return bool(u["n"])
        raise ValueError(kind)

    # ---- state -----------------------------------------------------------
    def new_state(self):
        n = len(self.tree)
        shape = self.orders.moment_shape
        return {
            "mu": np.zeros((n,) + shape),
            "lam_m2l": np.zeros((n, self.n_slots) + shape),
            "lam_l2l": np.zeros((n,) + shape),
            "lam_remote": {},
            "f_far": np.zeros(self.tree.mesh.n_dofs),
            "f_near": np.zeros(self.tree.mesh.n_dofs),
        }

    # ---- work items (shared with the distributed runtime) ------------------
    def m_item(self, cids, w, st):
        """S2M for leaves, pull-M2M (children in id order) otherwise."""
        tree = self.tree
        for cid in cids:
            c = tree[cid]
            if c.is_leaf:
                st["mu"][cid] = s2m(self.basis[cid], w[tree.element_dofs(cid)])
            else:
                acc = np.zeros(self.orders.moment_shape)
                for ch in c.children:
                    if self.need_mu[ch]:
                        m2m(st["mu"][ch], self.q_t[ch], self.q_x[ch], acc)
                st["mu"][cid] = acc

    def m2l_item(self, tid, slot, lo, hi, st):
        task = self.tasks[(tid, slot)]
        if self.m2l_impl == "naive":
            lam = st["lam_m2l"]
            for i in range(lo, hi):
                m2l_naive(task.coefficients(i, self.orders.m_x), st["mu"][task.pair_src[i]],
                          lam[task.pair_tgt[i], slot])
            return
        scratch = _SCRATCH.get(self.orders.m_t + 1, self.orders.m_x, GROUP_CHUNK)
        _m2l_pairs(task.pair_tgt, task.pair_src, task.pair_off, lo, hi, st["mu"], st["lam_m2l"], slot,
                   task.prefactor, task.tables, self.mi, self.orders.m_x, *scratch)

    def local_total(self, cid, st):
        """Local contributions of ``cid``: L2L part plus every M2L slot, in slot order."""
        if cid in st["lam_remote"]:
            return st["lam_remote"][cid]
        lam = st["lam_l2l"][cid].copy()
        for s in range(self.n_slots):
            lam += st["lam_m2l"][cid, s]
        return lam

    def l_item(self, cids, st):
        """Pull-L2L from the parent's total local contributions."""
        for cid in cids:
            p = self.tree[cid].parent
            st["lam_l2l"][cid] = l2l(self.local_total(p, st), self.q_t[cid], self.q_x[cid],
                                     np.zeros(self.orders.moment_shape))

    def l2t_item(self, cids, st):
        for cid in cids:
            st["f_far"][self.tree.element_dofs(cid)] = l2t(self.basis[cid], self.local_total(cid, st))

    def n_item(self, cids, w, st):
        for cid in cids:
            self.nearfield.apply_leaf(cid, w, st["f_near"])

    # ---- driver ------------------------------------------------------------
    def matvec(self, w, timings=None):
        """Approximate ``V w`` for a density vector in global (step-major) DOF order."""
        tree = self.tree
        tt = tree.temporal
        w = np.asarray(w, dtype=float)
        if w.shape != (tree.mesh.n_dofs,):
            raise ValueError(f"expected vector of length {tree.mesh.n_dofs}, got shape {w.shape}")
        st = self.new_state()
        order = sorted(range(len(tt)), key=lambda j: (tt[j].level, tt[j].index))
        t = time.perf_counter
        t0 = t()
        for tid in reversed(order):
            for item in self.units[tid]["m_items"]:
                self.m_item(item, w, st)
        t1 = t()
        for tid in order:
            for slot, lo, hi in self.units[tid]["m2l_items"]:
                self.m2l_item(tid, slot, lo, hi, st)
        t2 = t()
        for tid in order:
            for item in self.units[tid]["l_items"]:
                self.l_item(item, st)
        for tid in order:
            for item in self.units[tid]["l2t_items"]:
                self.l2t_item(item, st)
        t3 = t()
        for tid in order:
            for item in self.units[tid]["n_items"]:
                self.n_item(item, w, st)
        t4 = t()
        if timings is not None:
            timings.update(upward=t1 - t0, m2l=t2 - t1, downward=t3 - t2, nearfield=t4 - t3)
        return st["f_far"] + st["f_near"]

    __matmul__ = matvec

    @property
    def shape(self):
        n = self.tree.mesh.n_dofs
        return (n, n)

    def op_counts(self):
        """Multiply-add counts of one matvec."""
        tree, o = self.tree, self.orders
        nt, nk = o.m_t + 1, len(self.mi)
        oc = OpCounts()
        for cid, bi in self.basis.items():
            ns, nx = bi.tau.shape[0], bi.sigma.shape[0]
            work = ns * nx * nt + nt * nx * nk
            oc.s2m += work
            oc.l2t += work
        for cid in self.q_t:
            work = nt * nt * nk + nt * nk * nk
            if self.need_mu[cid]:
                oc.m2m += work
            if self.need_lam[cid]:
                oc.l2l += work
        oc.m2l = self.n_m2l_pairs * _m2l_flops(o.m_t, o.m_x)
        oc.nearfield = self.nearfield.n_entries
        return oc


def build_fmm(mesh, n_max=80, c_st=0.9, n_tr=5, orders=None, alpha=1.0, quadrature=None,
              slice_bounds=None, **kw):
    """Convenience: build the tree and the plan in one call."""
    from .tree import build_tree

    tree = build_tree(mesh, n_max=n_max, c_st=c_st, n_tr=n_tr, alpha=alpha, slice_bounds=slice_bounds)
    orders = orders or ExpansionOrders(alpha=alpha)
    return FMMPlan(tree, orders, quadrature, **kw)
