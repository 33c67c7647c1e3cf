"""FMM translation operators: S2M, M2M, M2L, L2L, L2T and their precomputed data.

Moments and local contributions of a cluster are arrays of shape
``(m_t + 1, n_kappa)`` indexed ``[a, kappa]`` with ``kappa`` in the graded
lexicographic order of :func:`stfmm.kernel.multi_indices`.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit

from .kernel import (
    AdmissibilityError,
    chebyshev_table,
    coefficient_tables,
    lagrange_table,
    multi_indices,
    spatial_m2m_matrix,
    temporal_m2m_matrix,
)
from .quadrature import gauss01, map_to_triangle, triangle_rule


@dataclass(frozen=True)
class BasisIntegrals:
    """Separable basis integrals of a leaf.

    ``tau[s, a]`` is the integral of ``L_{J,a}`` over the s-th owned time-step,
    ``sigma[j, kappa]`` that of ``T_{Y,kappa}`` over the j-th owned triangle.
    The full integral of element (s, j) is ``tau[s, a] * sigma[j, kappa]``.
    """

    tau: np.ndarray
    sigma: np.ndarray

    def full(self):
        """``[element, a, kappa]`` in step-major element order."""
        return np.einsum("sa,jk->sjak", self.tau, self.sigma).reshape(
            self.tau.shape[0] * self.sigma.shape[0], self.tau.shape[1], self.sigma.shape[1]
        )


def temporal_basis_integrals(interval, steps, time_nodes, m_t):
    """``tau[s, a]`` exactly by Gauss-Legendre with ``m_t + 1`` points."""
    x, w = gauss01(m_t + 1)
    lo, hi = steps
    t0 = np.asarray(time_nodes[lo:hi])
    dt = np.asarray(time_nodes[lo + 1 : hi + 1]) - t0
    pts = t0[:, None] + dt[:, None] * x[None, :]
    lag = lagrange_table(m_t, interval.to_reference(pts))  # [s, q, a]
    return np.einsum("sqa,q,s->sa", lag, w, dt)


def spatial_basis_integrals(box, corners, areas, m_x, order=None):
    """``sigma[j, kappa]`` for triangles with vertex arrays ``corners[j]``."""
    order = order or (m_x + 1)
    ref, w = triangle_rule(order)
    mi = multi_indices(m_x)
    pts = map_to_triangle(corners[:, :, None, :].transpose(1, 0, 2, 3), ref[None])  # [j, q, 3]
    tab = chebyshev_table(m_x, box.to_reference(pts))  # [j, q, 3, deg]
    vals = tab[:, :, 0, mi[:, 0]] * tab[:, :, 1, mi[:, 1]] * tab[:, :, 2, mi[:, 2]]
    return 2.0 * areas[:, None] * np.einsum("jqk,q->jk", vals, w)


def compute_basis_integrals(tree, cid, orders, spatial_order=None):
    c = tree[cid]
    space = tree.mesh.space
    corners = space.vertices[space.triangles[c.triangles]]
    tau = temporal_basis_integrals(c.box.interval, c.steps, tree.mesh.time_nodes, orders.m_t)
    sigma = spatial_basis_integrals(c.box, corners, space.areas[c.triangles], orders.m_x, spatial_order)
    return BasisIntegrals(tau, sigma)


def s2m(bi, w_local):
    """Moments ``mu[a, kappa] = sum_e w_e tau[s(e), a] sigma[j(e), kappa]``."""
    wl = np.asarray(w_local, dtype=float).reshape(bi.tau.shape[0], bi.sigma.shape[0])
    return bi.tau.T @ wl @ bi.sigma


def l2t(bi, lam):
    """Target values ``f[e] = sum_{b, nu} lam[b, nu] tau[s(e), b] sigma[j(e), nu]`` (step-major)."""
    return (bi.tau @ lam @ bi.sigma.T).ravel()


def spatial_m2m_tensor(child_box, parent_box, m_x):
    """``Q[kappa, nu] = prod_j q_j[kappa_j, nu_j]`` for the padded child and parent cubes."""
    if (
        np.allclose(child_box.corner, parent_box.corner, rtol=0, atol=0)
        and child_box.half_size == parent_box.half_size
    ):
        return np.eye(len(multi_indices(m_x)))
    mi = multi_indices(m_x)
    q = []
    for j in range(3):
        c_lo = child_box.corner[j]
        p_lo = parent_box.corner[j]
        q.append(spatial_m2m_matrix(c_lo, c_lo + 2 * child_box.half_size,
                                    p_lo, p_lo + 2 * parent_box.half_size, m_x))
    return (
        q[0][mi[:, 0]][:, mi[:, 0]] * q[1][mi[:, 1]][:, mi[:, 1]] * q[2][mi[:, 2]][:, mi[:, 2]]
    )


def m2m(mu_child, q_t, q_x, out):
    """``out[a_p, nu] += sum_{a_c, kappa} q_t[a_c, a_p] q_x[kappa, nu] mu_child[a_c, kappa]``."""
    out += q_t.T @ mu_child @ q_x
    return out


def l2l(lam_parent, q_t, q_x, out):
    """Adjoint of :func:`m2m`: ``out[a_c, kappa] += sum q_t[a_c, a_p] q_x[kappa, nu] lam[a_p, nu]``."""
    out += q_t @ lam_parent @ q_x.T
    return out


@njit(cache=True, nogil=True)
def _m2l_one(pref, tables, mu, mi, m, out, cube, scratch_p, scratch_b, acc_cube):
    """Add the truncated M2L of one source into ``out`` (both ``[time, n_kappa]``).

    Three successive 1D transforms per temporal pair with a shared degree
    budget; equal to the naive sum over ``|kappa + nu| <= m``.
    """
    nt = pref.shape[0]
    nk = mi.shape[0]
    acc_cube[:] = 0.0
    for a in range(nt):
        for i in range(nk):
            cube[mi[i, 0], mi[i, 1], mi[i, 2]] = mu[a, i]
        for b in range(nt):
            p = pref[a, b]
            t1 = tables[a, b, 0]
            t2 = tables[a, b, 1]
            t3 = tables[a, b, 2]
            # P[n1, k2, k3, c] = sum_{k1 <= c} t1[k1, n1] mu[k1, k2, k3]
            for n1 in range(m + 1):
                for k2 in range(m + 1 - n1):
                    for k3 in range(m + 1 - n1 - k2):
                        s = 0.0
                        for k1 in range(m + 1 - n1 - k2 - k3):
                            s += t1[k1, n1] * cube[k1, k2, k3]
                            scratch_p[n1, k2, k3, k1] = s
            # B[n1, n2, k3, e] = sum_{k2} t2[k2, n2] P[n1, k2, k3, m - n1 - k2 - k3 - n2 - e]
            for n1 in range(m + 1):
                for n2 in range(m + 1 - n1):
                    for k3 in range(m + 1 - n1 - n2):
                        for e in range(m + 1 - n1 - n2 - k3):
                            s = 0.0
                            top = m - n1 - k3 - n2 - e
                            for k2 in range(top + 1):
                                s += t2[k2, n2] * scratch_p[n1, k2, k3, top - k2]
                            scratch_b[n1, n2, e, k3] = s
            # lam[n1, n2, n3] += p * sum_{k3} t3[k3, n3] B[n1, n2, k3, n3]
            for n1 in range(m + 1):
                for n2 in range(m + 1 - n1):
                    for n3 in range(m + 1 - n1 - n2):
                        s = 0.0
                        for k3 in range(m + 1 - n1 - n2 - n3):
                            s += t3[k3, n3] * scratch_b[n1, n2, n3, k3]
                        acc_cube[b, n1, n2, n3] += p * s
    for b in range(nt):
        for i in range(nk):
            out[b, i] += acc_cube[b, mi[i, 0], mi[i, 1], mi[i, 2]]


@njit(cache=True, nogil=True)
def m2l_batch(targets, sources, keys, mu, lam, prefs, tables, mi, m):
    """Apply M2L for the pairs ``(targets[i], sources[i], keys[i])`` in order.

    Each pair is summed into a zeroed temporary first and then added to
    ``lam[target]``, so the floating-point result only depends on the order
    of pairs per target.
    """
    nt = mu.shape[1]
    cube = np.zeros((m + 1, m + 1, m + 1))
    scratch_p = np.zeros((m + 1, m + 1, m + 1, m + 1))
    scratch_b = np.zeros((m + 1, m + 1, m + 1, m + 1))
    acc = np.zeros((nt, m + 1, m + 1, m + 1))
    for i in range(targets.shape[0]):
        k = keys[i]
        _m2l_one(prefs[k], tables[k], mu[sources[i]], mi, m, lam[targets[i]], cube, scratch_p, scratch_b, acc)


@njit(cache=True, nogil=True, error_model="numpy", fastmath=True)
def _m2l_lanes(pref, tab, ix, mug, mi, m, n, out, cube, ps, bs, acc, lt, tmp):
    """Vectorised M2L of ``n`` pairs sharing their time intervals, one per lane.

    ``tab[a, b, r, k, l]`` holds 1D coefficients for a few per-axis offsets;
    lane ``i`` uses offsets ``ix[i, 0..2]``. ``mug[a, kappa, i]`` are the
    source moments and ``out[b, nu, i]`` is overwritten with the local
    contributions. Lanes are independent, so a pair's result does not
    depend on which other pairs share its chunk.
    """
    nt = pref.shape[0]
    nk = mi.shape[0]
    acc[:] = 0.0
    for a in range(nt):
        for q in range(nk):
            for i in range(n):
                cube[mi[q, 0], mi[q, 1], mi[q, 2], i] = mug[a, q, i]
        for b in range(nt):
            t = tab[a, b]
            for j in range(3):
                for k in range(m + 1):
                    for l in range(m + 1):
                        for i in range(n):
                            lt[j, k, l, i] = t[ix[i, j], k, l]
            t1 = lt[0]
            t2 = lt[1]
            t3 = lt[2]
            for n1 in range(m + 1):
                for k2 in range(m + 1 - n1):
                    for k3 in range(m + 1 - n1 - k2):
                        row = ps[n1, k2, k3]
                        c = t1[0, n1]
                        x = cube[0, k2, k3]
                        for i in range(n):
                            row[0, i] = c[i] * x[i]
                        for k1 in range(1, m + 1 - n1 - k2 - k3):
                            c = t1[k1, n1]
                            x = cube[k1, k2, k3]
                            prev = row[k1 - 1]
                            cur = row[k1]
                            for i in range(n):
                                cur[i] = prev[i] + c[i] * x[i]
            for n1 in range(m + 1):
                for n2 in range(m + 1 - n1):
                    for k3 in range(m + 1 - n1 - n2):
                        for e in range(m + 1 - n1 - n2 - k3):
                            top = m - n1 - k3 - n2 - e
                            dst = bs[n1, n2, e, k3]
                            c = t2[0, n2]
                            x = ps[n1, 0, k3, top]
                            for i in range(n):
                                dst[i] = c[i] * x[i]
                            for k2 in range(1, top + 1):
                                c = t2[k2, n2]
                                x = ps[n1, k2, k3, top - k2]
                                for i in range(n):
                                    dst[i] += c[i] * x[i]
            p = pref[a, b]
            for n1 in range(m + 1):
                for n2 in range(m + 1 - n1):
                    for n3 in range(m + 1 - n1 - n2):
                        src = bs[n1, n2, n3]
                        c = t3[0, n3]
                        x = src[0]
                        for i in range(n):
                            tmp[i] = c[i] * x[i]
                        for k3 in range(1, m + 1 - n1 - n2 - n3):
                            c = t3[k3, n3]
                            x = src[k3]
                            for i in range(n):
                                tmp[i] += c[i] * x[i]
                        s = acc[b, n1, n2, n3]
                        for i in range(n):
                            s[i] += p * tmp[i]
    for b in range(nt):
        for q in range(nk):
            for i in range(n):
                out[b, q, i] = acc[b, mi[q, 0], mi[q, 1], mi[q, 2], i]


def m2l(coeffs, mu_src, lam_tar, m_x):
    """Single M2L with a :class:`~stfmm.kernel.CoeffTensor` (separable transforms)."""
    m = m_x
    nt = coeffs.prefactor.shape[0]
    _m2l_one(np.ascontiguousarray(coeffs.prefactor), np.ascontiguousarray(coeffs.tables),
             np.ascontiguousarray(mu_src), np.ascontiguousarray(multi_indices(m)), m, lam_tar,
             np.zeros((m + 1,) * 3), np.zeros((m + 1,) * 4), np.zeros((m + 1,) * 4),
             np.zeros((nt,) + (m + 1,) * 3))
    return lam_tar


def m2l_naive(coeffs, mu_src, lam_tar):
    """Reference M2L: dense quadruple sum over the truncated coefficient tensor."""
    e = coeffs.dense()  # [a, kappa, b, nu]
    lam_tar += np.einsum("akbn,ak->bn", e, mu_src)
    return lam_tar


def m2l_key(tree, tid, sid):
    """Translation-invariant cache key of an admissible pair at one level."""
    t = tree[tid]
    s = tree[sid]
    if t.level != s.level:
        raise AdmissibilityError("M2L pairs must share the level")
    if not t.steps[0] > s.steps[1]:
        raise AdmissibilityError(f"cluster {sid} is not strictly earlier than {tid}")
    grid = tuple(int(a) - int(b) for a, b in zip(t.grid, s.grid))
    return (t.level, t.steps[1] - t.steps[0], s.steps[1] - s.steps[0], t.steps[0] - s.steps[0], grid)


def m2l_coefficients(tree, tid, sid, orders):
    t = tree[tid]
    s = tree[sid]
    offset = np.asarray(t.box.corner) - np.asarray(s.box.corner)
    return coefficient_tables(t.box.interval, s.box.interval, offset, t.box.half_size, orders)


def nearfield_apply(nearfield, w, out=None):
    """``out += sum over stored blocks of V|_{tar x src} w|_src``."""
    return nearfield.apply(w, out)


__all__ = [
    "BasisIntegrals",
    "compute_basis_integrals",
    "s2m",
    "l2t",
    "m2m",
    "l2l",
    "m2l",
    "m2l_naive",
    "m2l_batch",
    "m2l_key",
    "m2l_coefficients",
    "spatial_m2m_tensor",
    "temporal_m2m_matrix",
    "nearfield_apply",
]
