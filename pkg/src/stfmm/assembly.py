"""Galerkin single-layer entries: analytic time integration, numerical space integration.

For a spatial distance ``r > 0`` the time antiderivatives of the heat kernel are

    G1(r, s) = erfc(x) / (4 pi alpha r)
    G2(r, s) = s / (4 pi alpha r) * B(x),   B(x) = (1 + 2x^2) erfc(x) - 2x exp(-x^2) / sqrt(pi)

with ``x = r / sqrt(4 alpha s)`` and ``G2 = 0`` for ``s <= 0``. The double
time integral over target (a, b] and source (c, d] is the second difference
``G2(b-c) - G2(a-c) - G2(b-d) + G2(a-d)``. For small ``x`` the terms linear in
``s`` cancel analytically and the remainder is evaluated through
``D(x) = (1 - B(x)) / x`` which is regular at 0 with ``D(0) = 4/sqrt(pi)``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
from numba import njit

from .quadrature import (
    DISJOINT,
    QuadratureSpec,
    classify_pair,
    product_pair_rule,
    singular_pair_rule,
)

log = logging.getLogger(__name__)

_SQRT_PI = math.sqrt(math.pi)
DEFAULT_DENSE_CAP = 16384
DEFAULT_NEARFIELD_CAP = 200_000_000
# disjoint pairs whose centroid distance is below this multiple of the summed
# diameters count as close: nearly singular at small time offsets
_CLOSE_RATIO = 1.0
_DISJOINT_CLOSE = "disjoint_close"


class AssemblyCapError(MemoryError):
    """Raised before allocating a matrix larger than the configured cap."""


@njit(cache=True, nogil=True)
def _b_scalar(x):
    """``B(x) = 4 i^2 erfc(x)`` for ``x >= 0``.

    Direct formula up to x = 7 (relative error below ~1e-12 from the
    cancellation), asymptotic series beyond, exact underflow to 0 past 27.5.
    """
    if x <= 7.0:
        return (1.0 + 2.0 * x * x) * math.erfc(x) - 2.0 * x * math.exp(-x * x) / _SQRT_PI
    if x > 27.5:
        return 0.0
    y = 0.5 / (x * x)
    term = 1.0
    total = 0.0
    sign = 1.0
    for n in range(1, 60):
        term *= (2 * n - 1) * y
        inc = sign * 2 * n * term
        total += inc
        sign = -sign
        if abs(inc) < 1e-17 * abs(total):
            break
    return math.exp(-x * x) / (x * _SQRT_PI) * total


@njit(cache=True, nogil=True)
def _d_scalar(x):
    """``D(x) = (1 - B(x)) / x`` for ``0 <= x < 1``."""
    if x < 1e-8:
        return 4.0 / _SQRT_PI - 2.0 * x
    c = math.erf(x) * (1.0 + 2.0 * x * x) - 2.0 * x * x + 2.0 * x * math.exp(-x * x) / _SQRT_PI
    return c / x


_b_vec = np.vectorize(_b_scalar, otypes=[float])
_d_vec = np.vectorize(_d_scalar, otypes=[float])


def _b_func(x):
    return _b_vec(np.asarray(x, dtype=float))


def _d_func(x):
    return _d_vec(np.asarray(x, dtype=float))


@njit(cache=True, nogil=True)
def _fill_row(r, first, last, h, alpha, g2b, rd, out):
    """Time integrals for offsets ``first..last-1`` at one distance ``r``, written into ``out``.

    Offsets whose smallest positive shift has ``x >= 1`` use the G2 form,
    the others the remainder form; each form is evaluated only where needed.
    """
    c4 = 4.0 * math.pi * alpha
    cr = c4 * math.sqrt(4.0 * alpha)
    # x_n >= 1  <=>  n <= n_star
    n_star = int(math.floor(r * r / (4.0 * alpha * h))) if r > 0.0 else 0
    g_hi = min(last, n_star + 2)
    for n in range(max(first - 1, 1), g_hi + 1):
        s = n * h
        if r > 0.0:
            g2b[n] = s * _b_scalar(r / math.sqrt(4.0 * alpha * s)) / (c4 * r)
        else:
            g2b[n] = math.inf
    g2b[0] = 0.0
    rd[0] = 0.0
    for n in range(max(first - 1, n_star + 1, 1), last + 1):
        s = n * h
        rd[n] = -math.sqrt(s) * _d_scalar(r / math.sqrt(4.0 * alpha * s)) / cr
    for d in range(first, last):
        if d == 0:
            if 1 > g_hi:
                s = h
                g2b[1] = s * _b_scalar(r / math.sqrt(4.0 * alpha * s)) / (c4 * r) if r > 0.0 else math.inf
            out[d] = g2b[1]
            continue
        small = d - 1 if d > 1 else 1
        if small > n_star:
            out[d] = rd[d + 1] - 2.0 * rd[d] + rd[d - 1]
        else:
            out[d] = g2b[d + 1] - 2.0 * g2b[d] + g2b[d - 1]


@njit(cache=True, nogil=True)
def _pair_integrals(ca, cb, xh, yh, w, first, last, h, alpha, out):
    """``out[p, d] += sum_q w_q V_d(|x_q - y_q|)`` with points mapped onto triangle pair ``p``."""
    n_pairs = ca.shape[0]
    nq = w.shape[0]
    g2b = np.empty(last + 2)
    rd = np.empty(last + 2)
    row = np.zeros(last)
    for p in range(n_pairs):
        for q in range(nq):
            d2 = 0.0
            for k in range(3):
                xa = ca[p, 0, k] + xh[q, 0] * (ca[p, 1, k] - ca[p, 0, k]) + xh[q, 1] * (ca[p, 2, k] - ca[p, 1, k])
                yb = cb[p, 0, k] + yh[q, 0] * (cb[p, 1, k] - cb[p, 0, k]) + yh[q, 1] * (cb[p, 2, k] - cb[p, 1, k])
                d2 += (xa - yb) * (xa - yb)
            _fill_row(math.sqrt(d2), first, last, h, alpha, g2b, rd, row)
            for d in range(first, last):
                out[p, d] += w[q] * row[d]


def time_integrated_kernel(r, target, source, alpha=1.0):
    """Double time integral of the heat kernel over ``target x source`` at spatial distance ``r``.

    ``target`` and ``source`` are ``(start, end)`` pairs. Returns 0 exactly
    when the source interval starts at or after the target interval's end.
    ``r`` may be an array; ``r = 0`` gives ``inf`` when the intervals overlap.
    """
    r = np.asarray(r, dtype=float)
    if np.any(r < 0):
        raise ValueError("distance must be non-negative")
    a, b = (float(v) for v in target)
    c, d = (float(v) for v in source)
    if c >= b:
        return np.zeros_like(r)[()] if r.ndim == 0 else np.zeros_like(r)
    shifts = [(b - c, 1.0), (a - c, -1.0), (b - d, -1.0), (a - d, 1.0)]
    shifts = [(s, k) for s, k in shifts if s > 0]
    lin = sum(k * s for s, k in shifts)
    s_min = min(s for s, _ in shifts)
    r_flat = np.atleast_1d(r)
    out = np.empty_like(r_flat)
    with np.errstate(divide="ignore", invalid="ignore"):
        x_max = r_flat / np.sqrt(4.0 * alpha * s_min)
        use_d = x_max < 1.0
        # remainder form, valid when every x is below one
        rd = use_d
        acc = np.zeros(np.count_nonzero(rd))
        for s, k in shifts:
            acc += k * np.sqrt(s) * _d_func(r_flat[rd] / np.sqrt(4.0 * alpha * s))
        val = -acc / (4.0 * np.pi * alpha * np.sqrt(4.0 * alpha))
        if abs(lin) > 0:
            val = val + lin / (4.0 * np.pi * alpha * r_flat[rd])
        out[rd] = val
        rb = ~use_d
        accb = np.zeros(np.count_nonzero(rb))
        for s, k in shifts:
            accb += k * s * _b_func(r_flat[rb] / np.sqrt(4.0 * alpha * s))
        out[rb] = accb / (4.0 * np.pi * alpha * r_flat[rb])
    return out[0] if r.ndim == 0 else out.reshape(r.shape)


def uniform_time_table(r, n_delta, h, alpha=1.0, first=0):
    """``V[delta, q]``: double time integral for uniform steps of length ``h``.

    Rows cover ``delta = k_t - j_t`` in ``first..n_delta-1`` (earlier rows
    are left at zero). ``r = 0`` is allowed for ``delta >= 1``.
    """
    r = np.atleast_1d(np.asarray(r, dtype=float))
    out = np.zeros((n_delta, r.size))
    g2b = np.empty(n_delta + 2)
    rd = np.empty(n_delta + 2)
    row = np.zeros(n_delta)
    for q in range(r.size):
        _fill_row(float(r[q]), first, n_delta, h, alpha, g2b, rd, row)
        out[first:, q] = row[first:]
    return out


class TrianglePairTable:
    """Spatial Galerkin integrals ``V_delta(i, j)`` for triangle pairs and all time offsets.

    Exploits that entries depend on the time-steps only through
    ``delta = k_t - j_t`` on a uniform mesh. Entries are computed on demand
    and memoised; every pair is evaluated by the same routine so values do
    not depend on which other pairs were requested alongside.
    """

    def __init__(self, mesh, spec=None, alpha=1.0, chunk=1024):
        self.mesh = mesh
        self.spec = spec or QuadratureSpec()
        self.alpha = alpha
        self.chunk = chunk
        self.n_delta = mesh.n_timesteps
        self._store = {}
        self._kinds = {}
        space = mesh.space
        self._centroids = space.vertices[space.triangles].mean(axis=1)
        self._diam = space.diameters()

    def _classify(self, i, j):
        tris = self.mesh.space.triangles
        return classify_pair(tris[i], tris[j])

    def values(self, pairs):
        """Array ``[len(pairs), n_delta]`` for a list of ``(i, j)`` triangle pairs.

        The integrand depends on ``|x - y|`` only, so ``(i, j)`` and ``(j, i)``
        share one stored row.
        """
        pairs = [(int(i), int(j)) if i <= j else (int(j), int(i)) for i, j in pairs]
        missing = [p for p in dict.fromkeys(pairs) if p not in self._store]
        if missing:
            self._compute(missing)
        if not pairs:
            return np.zeros((0, self.n_delta))
        return np.stack([self._store[p] for p in pairs])

    def _compute(self, pairs):
        groups = {}
        for i, j in pairs:
            kind, pa, pb = self._classify(i, j)
            if kind == DISJOINT and self._close(i, j):
                kind = _DISJOINT_CLOSE
            groups.setdefault(kind, []).append((i, j, pa, pb))
        for kind, items in groups.items():
            for start in range(0, len(items), self.chunk):
                part = items[start : start + self.chunk]
                vals = self._integrate(kind, part)
                for (i, j, _, _), v in zip(part, vals):
                    self._store[(i, j)] = v

    def _close(self, i, j):
        d = self._centroids[i] - self._centroids[j]
        return math.sqrt(d @ d) < _CLOSE_RATIO * (self._diam[i] + self._diam[j])

    def _corners(self, items, which):
        space = self.mesh.space
        out = np.empty((len(items), 3, 3))
        for n, it in enumerate(items):
            tri = space.triangles[it[which]]
            perm = it[2 + which]
            out[n] = space.vertices[tri[list(perm)]]
        return out

    def _rule_values(self, ca, cb, rule, first, last, out):
        xh, yh, w = rule
        _pair_integrals(ca, cb, np.ascontiguousarray(xh), np.ascontiguousarray(yh),
                        np.ascontiguousarray(w), first, last, self.mesh.h_t, self.alpha, out)

    def _integrate(self, kind, items):
        ca = self._corners(items, 0)
        cb = self._corners(items, 1)
        area = self.mesh.space.areas
        jac = np.array([4.0 * area[i] * area[j] for i, j, _, _ in items])
        nd = self.n_delta
        vals = np.zeros((len(items), nd))
        ns = min(self.spec.singular_steps, nd)
        if kind == DISJOINT:
            o = self.spec.disjoint
            self._rule_values(ca, cb, product_pair_rule(o, o), 0, nd, vals)
            return vals * jac[:, None]
        if kind == _DISJOINT_CLOSE:
            o = self.spec.disjoint_near
            near = product_pair_rule(o, o)
            o = self.spec.disjoint
        else:
            near = singular_pair_rule(kind, self.spec.order(kind))
            o = self.spec.smooth
        self._rule_values(ca, cb, near, 0, ns, vals)
        if nd > ns:
            self._rule_values(ca, cb, product_pair_rule(o, o), ns, nd, vals)
        return vals * jac[:, None]


def nearfield_entry(mesh, target, source, spec=None, alpha=1.0, table=None):
    """Single Galerkin entry for 1-based elements ``target=(k_t, k_x)``, ``source=(j_t, j_x)``."""
    k_t, k_x = target
    j_t, j_x = source
    if not (1 <= k_t <= mesh.n_timesteps and 1 <= j_t <= mesh.n_timesteps):
        raise IndexError("time index out of range")
    if j_t > k_t:
        return 0.0
    table = table or TrianglePairTable(mesh, spec, alpha)
    return float(table.values([(k_x - 1, j_x - 1)])[0, k_t - j_t])


def _block(table, tgt_steps, tgt_tris, src_steps, src_tris):
    """Dense block with rows (step, triangle) of the target and columns of the source, step-major."""
    nt, ns = len(tgt_tris), len(src_tris)
    pairs = [(i, j) for i in tgt_tris for j in src_tris]
    vals = table.values(pairs).reshape(nt, ns, -1)  # [i, j, delta]
    kt = np.arange(*tgt_steps)
    js = np.arange(*src_steps)
    delta = kt[:, None] - js[None, :]
    out = np.zeros((len(kt), nt, len(js), ns))
    for a in range(len(kt)):
        for b in range(len(js)):
            d = delta[a, b]
            if d >= 0:
                out[a, :, b, :] = vals[:, :, d]
    return out.reshape(len(kt) * nt, len(js) * ns)


@dataclass
class NearfieldBlock:
    target: int
    source: int
    matrix: np.ndarray


class NearfieldOperator:
    """All inadmissible blocks, stored per target leaf as one matrix over concatenated sources."""

    def __init__(self, tree, rows, cols, mats, sources):
        self.tree = tree
        self.rows = rows  # target leaf -> DOF array
        self.cols = cols  # target leaf -> concatenated source DOFs
        self.mats = mats  # target leaf -> matrix
        self.sources = sources  # target leaf -> [(source id, col offset, n)]

    @property
    def n_entries(self):
        return sum(m.size for m in self.mats.values())

    def blocks(self):
        for t, srcs in self.sources.items():
            for s, off, n in srcs:
                yield NearfieldBlock(t, s, self.mats[t][:, off : off + n])

    def block(self, target, source):
        for s, off, n in self.sources[target]:
            if s == source:
                return self.mats[target][:, off : off + n]
        raise KeyError((target, source))

    def apply_leaf(self, target, w, out):
        """``out[rows] += M w[cols]`` for one target leaf."""
        if target in self.mats:
            out[self.rows[target]] += self.mats[target] @ w[self.cols[target]]

    def apply(self, w, out=None):
        if out is None:
            out = np.zeros(self.tree.mesh.n_dofs)
        for t in self.mats:
            self.apply_leaf(t, w, out)
        return out


def estimate_nearfield_entries(tree):
    total = 0
    for c in tree.clusters:
        if c.is_leaf:
            for s in c.nearfield:
                total += c.n_elements * tree.clusters[s].n_elements
    return total


def assemble_nearfield(tree, spec=None, alpha=None, cap=DEFAULT_NEARFIELD_CAP, table=None):
    """Assemble the inadmissible blocks of every leaf target."""
    alpha = tree.params["alpha"] if alpha is None else alpha
    total = estimate_nearfield_entries(tree)
    if total > cap:
        raise AssemblyCapError(f"nearfield needs {total} entries, cap is {cap}")
    table = table or TrianglePairTable(tree.mesh, spec, alpha)
    # batch all triangle pairs first
    needed = set()
    for c in tree.clusters:
        if c.is_leaf:
            for s in c.nearfield:
                src = tree.clusters[s]
                needed.update((int(i), int(j)) for i in c.triangles for j in src.triangles)
    table.values(sorted(needed))
    rows, cols, mats, sources = {}, {}, {}, {}
    for c in tree.clusters:
        if not c.is_leaf or not c.nearfield:
            continue
        parts, srcs, off = [], [], 0
        for s in c.nearfield:
            src = tree.clusters[s]
            parts.append(_block(table, c.steps, c.triangles, src.steps, src.triangles))
            srcs.append((s, off, src.n_elements))
            off += src.n_elements
        rows[c.id] = tree.element_dofs(c.id)
        cols[c.id] = np.concatenate([tree.element_dofs(s) for s, _, _ in srcs])
        mats[c.id] = np.ascontiguousarray(np.concatenate(parts, axis=1))
        sources[c.id] = srcs
    return NearfieldOperator(tree, rows, cols, mats, sources)


def assemble_dense(mesh, spec=None, alpha=1.0, cap=DEFAULT_DENSE_CAP, table=None):
    """Full ``E_t E_x`` square single-layer matrix in global DOF order."""
    n = mesh.n_dofs
    if n > cap:
        raise AssemblyCapError(f"dense matrix of size {n} exceeds cap {cap}")
    table = table or TrianglePairTable(mesh, spec, alpha)
    ex = mesh.n_space
    pairs = [(i, j) for i in range(ex) for j in range(ex)]
    vals = table.values(pairs).reshape(ex, ex, mesh.n_timesteps)
    out = np.zeros((mesh.n_timesteps, ex, mesh.n_timesteps, ex))
    for k in range(mesh.n_timesteps):
        for j in range(k + 1):
            out[k, :, j, :] = vals[:, :, k - j]
    return out.reshape(n, n)


def export_dense(matrix, path):
    """Write one matrix row per line."""
    np.savetxt(path, matrix, fmt="%.17g")
