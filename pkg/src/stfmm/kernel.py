"""Heat kernel and its separable Chebyshev/Lagrange approximation.

Conventions used throughout the package:

* Chebyshev nodes ``xi_k = cos(pi (2k+1) / (2m+2))`` for ``k = 0..m``, i.e. in
  descending order.
* Spatial multi-indices ``kappa`` with ``|kappa| <= m_x`` are stored in graded
  lexicographic order (total degree first, then lexicographic), see
  :func:`multi_indices`.
* Coefficient tensors are indexed ``E[a, kappa, b, nu]`` where ``a``/``kappa``
  belong to the source box and ``b``/``nu`` to the target box.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from functools import lru_cache

import numpy as np


class AdmissibilityError(ValueError):
    """Raised when a box pair is not temporally separated in causal order."""


@dataclass(frozen=True)
class Interval:
    """Half-open interval ``(lower, upper]``."""

    lower: float
    upper: float

    def __post_init__(self):
        if not self.upper > self.lower:
            raise ValueError(f"empty interval ({self.lower}, {self.upper}]")

    @property
    def half_size(self):
        return 0.5 * (self.upper - self.lower)

    @property
    def center(self):
        return 0.5 * (self.lower + self.upper)

    def to_reference(self, t):
        return (np.asarray(t, dtype=float) - self.center) / self.half_size

    def from_reference(self, s):
        return self.center + self.half_size * np.asarray(s, dtype=float)

    def contains(self, t):
        return self.lower < t <= self.upper

    def distance(self, other):
        return max(self.lower - other.upper, other.lower - self.upper, 0.0)


@dataclass(frozen=True)
class Box4:
    """Space-time box ``(corner, corner + 2 h_x] x interval``."""

    corner: tuple
    half_size: float
    interval: Interval

    def __post_init__(self):
        if not self.half_size > 0:
            raise ValueError("spatial half-size must be positive")
        object.__setattr__(self, "corner", tuple(float(c) for c in self.corner))

    @property
    def center(self):
        return np.asarray(self.corner) + self.half_size

    def to_reference(self, x):
        return (np.asarray(x, dtype=float) - self.center) / self.half_size


@dataclass(frozen=True)
class ExpansionOrders:
    m_t: int = 6
    m_x: int = 6
    alpha: float = 1.0

    def __post_init__(self):
        if self.m_t < 0 or self.m_x < 0:
            raise ValueError("expansion orders must be non-negative")
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")

    @property
    def n_multi(self):
        return n_multi_indices(self.m_x)

    @property
    def moment_shape(self):
        return (self.m_t + 1, self.n_multi)


def heat_kernel(diff, dt, alpha=1.0):
    """Fundamental solution of ``u_t - alpha * Laplace(u) = 0`` in 3D.

    ``diff`` may be a single 3-vector or an array of shape ``(..., 3)``;
    ``dt`` broadcasts against it. Negative time differences give exactly 0.
    """
    diff = np.asarray(diff, dtype=float)
    dt = np.asarray(dt, dtype=float)
    if np.any(dt == 0):
        raise ValueError("heat kernel undefined for zero time difference")
    r2 = np.sum(diff * diff, axis=-1)
    causal = dt > 0
    safe = np.where(causal, dt, 1.0)
    val = (4.0 * np.pi * alpha * safe) ** -1.5 * np.exp(-r2 / (4.0 * alpha * safe))
    out = np.where(causal, val, 0.0)
    return out[()] if out.ndim == 0 else out


@lru_cache(maxsize=None)
def _nodes(m):
    k = np.arange(m + 1)
    nodes = np.cos(np.pi * (2 * k + 1) / (2 * m + 2))
    nodes.flags.writeable = False
    return nodes


def chebyshev_nodes(m):
    """Roots of ``T_{m+1}`` in descending order."""
    if m < 0:
        raise ValueError("m must be >= 0")
    return _nodes(int(m)).copy()


def chebyshev_t(k, s):
    """``T_k(s) = cos(k arccos s)`` evaluated by the three-term recurrence."""
    s = np.asarray(s, dtype=float)
    t0 = np.ones_like(s)
    if k == 0:
        return t0
    t1 = s.copy()
    for _ in range(k - 1):
        t0, t1 = t1, 2.0 * s * t1 - t0
    return t1


def chebyshev_table(m, s):
    """Values ``T_0..T_m`` at ``s``; result has shape ``s.shape + (m+1,)``."""
    s = np.asarray(s, dtype=float)
    out = np.empty(s.shape + (m + 1,))
    out[..., 0] = 1.0
    if m >= 1:
        out[..., 1] = s
    for k in range(2, m + 1):
        out[..., k] = 2.0 * s * out[..., k - 1] - out[..., k - 2]
    return out


def chebyshev_eval_transformed(interval, k, x):
    """``T_k`` composed with the affine map from ``interval`` = (a, b] onto [-1, 1]."""
    a, b = interval
    s = (2.0 * np.asarray(x, dtype=float) - (a + b)) / (b - a)
    return chebyshev_t(k, s)


def chebyshev_tensor(box, kappa, x):
    """Tensor product ``prod_j T_{kappa_j}`` on the spatial cube of ``box``."""
    s = box.to_reference(x)
    out = np.ones(s.shape[:-1])
    for j in range(3):
        out = out * chebyshev_t(int(kappa[j]), s[..., j])
    return out


@lru_cache(maxsize=None)
def _bary_weights(m):
    k = np.arange(m + 1)
    w = (-1.0) ** k * np.sin(np.pi * (2 * k + 1) / (2 * m + 2))
    w.flags.writeable = False
    return w


def lagrange_table(m, s):
    """Lagrange basis on the Chebyshev nodes of order ``m`` at reference points ``s``.

    Barycentric evaluation; rows that coincide with a node are set to the
    exact unit vector. Returns shape ``s.shape + (m+1,)``.
    """
    s = np.atleast_1d(np.asarray(s, dtype=float))
    nodes = _nodes(m)
    w = _bary_weights(m)
    diff = s[..., None] - nodes
    exact = diff == 0.0
    hit = exact.any(axis=-1)
    diff = np.where(exact, 1.0, diff)
    terms = w / diff
    out = terms / terms.sum(axis=-1, keepdims=True)
    if hit.any():
        out[hit] = exact[hit].astype(float)
    return out


def lagrange_eval(interval, b, t, m_t):
    """``L_{I,b}(t)`` for the Chebyshev nodes mapped onto ``interval``."""
    if not 0 <= b <= m_t:
        raise IndexError("Lagrange index out of range")
    s = interval.to_reference(t)
    val = lagrange_table(m_t, s)[..., b]
    return val[0] if np.ndim(t) == 0 else val


def lagrange_product(interval, b, t, m_t):
    """Product-formula evaluation of ``L_{I,b}``; used as an independent check."""
    nodes = interval.from_reference(_nodes(m_t))
    t = np.asarray(t, dtype=float)
    out = np.ones_like(t)
    for k in range(m_t + 1):
        if k != b:
            out = out * (t - nodes[k]) / (nodes[b] - nodes[k])
    return out


def temporal_m2m_matrix(child, parent, m_t):
    """``q[a_c, a_p] = L_{parent, a_p}(xi_{child, a_c})``."""
    pts = child.from_reference(_nodes(m_t))
    return lagrange_table(m_t, parent.to_reference(pts))


def spatial_m2m_matrix(child_lo, child_hi, parent_lo, parent_hi, m_x):
    """1D matrix ``q[kappa, nu]`` re-expanding ``T_{parent, nu}`` in the child's Chebyshev basis."""
    nodes = _nodes(m_x)
    pts = 0.5 * (child_lo + child_hi) + 0.5 * (child_hi - child_lo) * nodes
    s_par = (2.0 * pts - (parent_lo + parent_hi)) / (parent_hi - parent_lo)
    t_par = chebyshev_table(m_x, s_par)  # [n, nu]
    t_child = chebyshev_table(m_x, nodes)  # [n, kappa]
    lam = np.full(m_x + 1, 2.0)
    lam[0] = 1.0
    q = lam[:, None] / (m_x + 1) * (t_child.T @ t_par)
    # exact polynomial identity: entries with kappa > nu vanish
    q[np.tril_indices(m_x + 1, -1)] = 0.0
    return q


@lru_cache(maxsize=None)
def multi_indices(m):
    """All ``kappa`` in N_0^3 with ``|kappa| <= m``, graded lexicographic order."""
    out = [
        (i, j, k)
        for d in range(m + 1)
        for i in range(d + 1)
        for j in range(d + 1 - i)
        for k in [d - i - j]
    ]
    out.sort(key=lambda t: (sum(t), t))
    arr = np.array(out, dtype=np.int64).reshape(-1, 3)
    arr.flags.writeable = False
    return arr


def n_multi_indices(m):
    return (m + 1) * (m + 2) * (m + 3) // 6


@lru_cache(maxsize=None)
def multi_index_lookup(m):
    """Dense ``(m+1)^3`` array mapping ``kappa`` to its position, -1 if ``|kappa| > m``."""
    lut = -np.ones((m + 1,) * 3, dtype=np.int64)
    for pos, (i, j, k) in enumerate(multi_indices(m)):
        lut[i, j, k] = pos
    lut.flags.writeable = False
    return lut


def _lambda_weights(m):
    lam = np.full(m + 1, 2.0)
    lam[0] = 1.0
    return lam


def expansion_coeff_1d(k, l, r, d_ab, m_x):
    """Single 1D coefficient ``E_{k,l}(r, d)``; ``k`` is the source and ``l`` the target degree."""
    if not d_ab > 0:
        raise ValueError("d_ab must be positive")
    return float(expansion_tables_1d(np.array([r]), np.array([d_ab]), m_x)[0, k, l])


def expansion_tables_1d(r, d, m_x):
    """Vectorised ``E_{k,l}(r, d)`` for all ``k, l <= m_x``.

    ``r`` and ``d`` broadcast against each other; the result has shape
    ``broadcast(r, d).shape + (m_x+1, m_x+1)`` indexed ``[..., k, l]``.
    """
    r, d = np.broadcast_arrays(np.asarray(r, dtype=float), np.asarray(d, dtype=float))
    if np.any(d <= 0):
        raise ValueError("d_ab must be positive")
    nodes = _nodes(m_x)
    tn = chebyshev_table(m_x, nodes)  # [n, l]
    lam = _lambda_weights(m_x)
    # g[..., n, m] = exp(-(r + xi_n - xi_m)^2 / d)
    arg = r[..., None, None] + nodes[:, None] - nodes[None, :]
    g = np.exp(-(arg * arg) / d[..., None, None])
    # sum_n sum_m g[n, m] T_l(xi_n) T_k(xi_m)
    out = np.einsum("...nm,mk,nl->...kl", g, tn, tn, optimize=True)
    return out * (lam[:, None] * lam[None, :]) / (m_x + 1) ** 2


@dataclass(frozen=True, eq=False)
class CoeffTensor:
    """Separable representation of ``E[a, kappa, b, nu]``.

    ``prefactor[a, b]`` holds ``(4 pi alpha (xi_{I,b} - xi_{J,a}))^{-3/2}`` and
    ``tables[a, b, j]`` the 1D coefficients ``E_{kappa_j, nu_j}(r_j, d_ab)``.
    """

    prefactor: np.ndarray
    tables: np.ndarray
    m_x: int

    def dense(self):
        """Materialise ``E`` with shape ``(m_t+1, n_kappa, m_t+1, n_nu)``; zero where ``|kappa+nu| > m_x``."""
        mi = multi_indices(self.m_x)
        t = self.tables
        e = (
            t[:, :, 0][:, :, mi[:, 0]][:, :, :, mi[:, 0]]
            * t[:, :, 1][:, :, mi[:, 1]][:, :, :, mi[:, 1]]
            * t[:, :, 2][:, :, mi[:, 2]][:, :, :, mi[:, 2]]
        )  # [a, b, kappa, nu]
        e *= self.prefactor[:, :, None, None]
        deg = mi.sum(axis=1)
        e[:, :, deg[:, None] + deg[None, :] > self.m_x] = 0.0
        return np.ascontiguousarray(e.transpose(0, 2, 1, 3))


def _check_admissible(target_interval, source_interval):
    if not target_interval.lower > source_interval.upper:
        raise AdmissibilityError(
            f"target interval {target_interval} must lie strictly after source {source_interval}"
        )


def coefficient_tables(target_interval, source_interval, offset, half_size, orders):
    """Build the separable coefficients for spatial corner offset ``c - d`` and common half-size."""
    _check_admissible(target_interval, source_interval)
    nodes = _nodes(orders.m_t)
    xi_i = target_interval.from_reference(nodes)  # index b
    xi_j = source_interval.from_reference(nodes)  # index a
    delta = xi_i[None, :] - xi_j[:, None]  # [a, b]
    pref = (4.0 * np.pi * orders.alpha * delta) ** -1.5
    d_ab = 4.0 * orders.alpha * delta / half_size**2
    r = np.asarray(offset, dtype=float) / half_size
    tables = expansion_tables_1d(r[None, None, :], d_ab[:, :, None], orders.m_x)
    return CoeffTensor(pref, tables, orders.m_x)


def offset_tables(target_interval, source_interval, r, half_size, orders):
    """Prefactor and 1D tables for many scaled per-axis offsets ``r`` at once.

    Returns ``(pref[a, b], tables[a, b, i, k, l])`` where ``tables[..., i, :, :]``
    belongs to ``r[i]``; a full :class:`CoeffTensor` for offset
    ``(r[i], r[j], r[k])`` is obtained by stacking three of them.
    """
    _check_admissible(target_interval, source_interval)
    nodes = _nodes(orders.m_t)
    delta = target_interval.from_reference(nodes)[None, :] - source_interval.from_reference(nodes)[:, None]
    pref = (4.0 * np.pi * orders.alpha * delta) ** -1.5
    d_ab = 4.0 * orders.alpha * delta / half_size**2
    r = np.asarray(r, dtype=float)
    tables = expansion_tables_1d(r[None, None, :], d_ab[:, :, None], orders.m_x)
    return pref, tables


def expansion_coeffs(z_tar, z_src, orders):
    """Coefficient tensor for a target/source box pair with equal spatial half-size."""
    if not np.isclose(z_tar.half_size, z_src.half_size, rtol=1e-12, atol=0):
        raise ValueError("boxes must share the spatial half-size")
    offset = np.asarray(z_tar.corner) - np.asarray(z_src.corner)
    return coefficient_tables(z_tar.interval, z_src.interval, offset, z_tar.half_size, orders)


def kernel_approx(z_tar, z_src, x, t, y, tau, orders, coeffs=None):
    """Evaluate the separable approximation of ``G_alpha(x - y, t - tau)`` on a box pair.

    ``x``/``y`` may be arrays of shape ``(n, 3)`` with matching ``t``/``tau``
    of shape ``(n,)``.
    """
    if coeffs is None:
        coeffs = expansion_coeffs(z_tar, z_src, orders)
    x = np.atleast_2d(x)
    y = np.atleast_2d(y)
    t = np.atleast_1d(np.asarray(t, dtype=float))
    tau = np.atleast_1d(np.asarray(tau, dtype=float))
    m_x = orders.m_x
    mi = multi_indices(m_x)
    tx = chebyshev_table(m_x, z_tar.to_reference(x))  # [n, 3, deg]
    ty = chebyshev_table(m_x, z_src.to_reference(y))
    tnu = tx[:, 0, mi[:, 0]] * tx[:, 1, mi[:, 1]] * tx[:, 2, mi[:, 2]]  # [n, nu]
    tka = ty[:, 0, mi[:, 0]] * ty[:, 1, mi[:, 1]] * ty[:, 2, mi[:, 2]]  # [n, kappa]
    lt = lagrange_table(orders.m_t, z_tar.interval.to_reference(t))  # [n, b]
    ltau = lagrange_table(orders.m_t, z_src.interval.to_reference(tau))  # [n, a]
    e = coeffs.dense()  # [a, kappa, b, nu]
    out = np.einsum("akbn,ia,ik,ib,in->i", e, ltau, tka, lt, tnu, optimize=True)
    return out[0] if out.size == 1 else out


def check_box_relation(h_x, h_t, alpha, c_st):
    """True iff ``h_x**2 / (4 alpha h_t) <= c_st``."""
    return h_x * h_x / (4.0 * alpha * h_t) <= c_st


class CoefficientCache:
    """Thread-safe store of M2L coefficient tables keyed by a hashable geometry key.

    Entries are stacked into contiguous arrays so compiled kernels can index
    them by integer id.
    """

    def __init__(self, orders):
        self.orders = orders
        self._lock = threading.Lock()
        self._ids = {}
        self._pref = []
        self._tables = []
        self._packed = None

    def __len__(self):
        return len(self._ids)

    def key_id(self, key, builder):
        """Return the integer id for ``key``, calling ``builder()`` to create the entry on a miss."""
        found = self._ids.get(key)
        if found is not None:
            return found
        with self._lock:
            found = self._ids.get(key)
            if found is not None:
                return found
            coeffs = builder()
            self._pref.append(coeffs.prefactor)
            self._tables.append(coeffs.tables)
            self._packed = None
            idx = len(self._pref)
            self._ids[key] = idx - 1
            return idx - 1

    def get(self, key):
        return self.get_by_id(self._ids[key])

    def get_by_id(self, idx):
        return CoeffTensor(self._pref[idx], self._tables[idx], self.orders.m_x)

    def packed(self):
        """``(prefactors[n, a, b], tables[n, a, b, j, k, l])`` as contiguous arrays."""
        with self._lock:
            if self._packed is None or len(self._packed[0]) != len(self._pref):
                m_t, m_x = self.orders.m_t, self.orders.m_x
                if self._pref:
                    pref = np.ascontiguousarray(np.stack(self._pref))
                    tables = np.ascontiguousarray(np.stack(self._tables))
                else:
                    pref = np.zeros((0, m_t + 1, m_t + 1))
                    tables = np.zeros((0, m_t + 1, m_t + 1, 3, m_x + 1, m_x + 1))
                self._packed = (pref, tables)
            return self._packed
