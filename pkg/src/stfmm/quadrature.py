"""Quadrature on triangles and triangle pairs.

The reference triangle is ``{(x1, x2): 0 <= x2 <= x1 <= 1}`` mapped onto a
physical triangle ``(P0, P1, P2)`` by ``P0 + x1 (P1 - P0) + x2 (P2 - P1)``.
Singular pairs (identical, common edge, common vertex) use the standard
relative-coordinate transforms of Sauter and Schwab on ``[0,1]^4``.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

IDENTICAL = "identical"
EDGE = "edge"
VERTEX = "vertex"
DISJOINT = "disjoint"


@dataclass(frozen=True)
class QuadratureSpec:
    """Gauss orders per adjacency class of a triangle pair.

    ``singular_steps`` is the number of time-step offsets (0, 1, ...) for
    which the singular transforms are used; larger offsets have a smooth
    integrand and use the product rule of order ``smooth``. Close disjoint
    pairs (centroid distance below the summed diameters) are nearly singular
    at those small offsets and get the product rule of order ``disjoint_near``.
    """

    identical: int = 8
    edge: int = 8
    vertex: int = 6
    disjoint: int = 4
    smooth: int = 5
    singular_steps: int = 2
    disjoint_near: int = 6

    def __post_init__(self):
        for name in ("identical", "edge", "vertex", "disjoint", "smooth", "disjoint_near"):
            if getattr(self, name) < 1:
                raise ValueError(f"quadrature order '{name}' must be >= 1")
        if self.singular_steps < 1:
            raise ValueError("singular_steps must be >= 1")

    def order(self, kind):
        return getattr(self, kind)

    def doubled(self):
        return QuadratureSpec(
            2 * self.identical, 2 * self.edge, 2 * self.vertex,
            2 * self.disjoint, 2 * self.smooth, self.singular_steps, 2 * self.disjoint_near,
        )


@lru_cache(maxsize=None)
def gauss01(n):
    """Gauss-Legendre nodes and weights on [0, 1]."""
    x, w = np.polynomial.legendre.leggauss(n)
    x = 0.5 * (x + 1.0)
    w = 0.5 * w
    x.flags.writeable = False
    w.flags.writeable = False
    return x, w


@lru_cache(maxsize=None)
def triangle_rule(order):
    """Collapsed Gauss product rule on the reference triangle (weights sum to 1/2)."""
    x, w = gauss01(order)
    u, v = np.meshgrid(x, x, indexing="ij")
    wu, wv = np.meshgrid(w, w, indexing="ij")
    pts = np.stack([u.ravel(), (u * v).ravel()], axis=1)
    wts = (wu * wv * u).ravel()
    pts.flags.writeable = False
    wts.flags.writeable = False
    return pts, wts


def map_to_triangle(corners, ref):
    """Map reference points ``ref[..., 2]`` onto the triangle with vertex rows ``corners``."""
    p0, p1, p2 = corners
    return p0 + ref[..., :1] * (p1 - p0) + ref[..., 1:2] * (p2 - p1)


@lru_cache(maxsize=None)
def product_pair_rule(order_x, order_y):
    """Tensor product of two triangle rules: ``(xhat, yhat, w)`` with weights summing to 1/4."""
    px, wx = triangle_rule(order_x)
    py, wy = triangle_rule(order_y)
    xh = np.repeat(px, len(py), axis=0)
    yh = np.tile(py, (len(px), 1))
    w = np.outer(wx, wy).ravel()
    for a in (xh, yh, w):
        a.flags.writeable = False
    return xh, yh, w


def _cube(order):
    x, w = gauss01(order)
    grids = np.meshgrid(x, x, x, x, indexing="ij")
    wg = np.meshgrid(w, w, w, w, indexing="ij")
    pts = [g.ravel() for g in grids]
    wts = wg[0].ravel() * wg[1].ravel() * wg[2].ravel() * wg[3].ravel()
    return pts, wts


@lru_cache(maxsize=None)
def singular_pair_rule(kind, order):
    """Pair rule for a singular configuration: ``(xhat, yhat, w)``, weights summing to 1/4.

    Vertex conventions: for ``edge`` the shared edge is P0->P1 in both
    triangles, for ``vertex`` the shared vertex is P0 in both.
    """
    (xi, e1, e2, e3), w0 = _cube(order)
    xs, ys, ws = [], [], []

    def add(x1, x2, y1, y2, weight, swap=False):
        x = np.stack([x1, x2], axis=1)
        y = np.stack([y1, y2], axis=1)
        xs.append(x)
        ys.append(y)
        ws.append(w0 * weight)
        if swap:
            xs.append(y)
            ys.append(x)
            ws.append(w0 * weight)

    if kind == IDENTICAL:
        jac = xi**3 * e1**2 * e2
        add(xi, xi * (1 - e1 + e1 * e2), xi * (1 - e1 * e2 * e3), xi * (1 - e1), jac, True)
        add(xi, xi * e1 * (1 - e2 + e2 * e3), xi * (1 - e1 * e2), xi * e1 * (1 - e2), jac, True)
        add(xi * (1 - e1 * e2 * e3), xi * e1 * (1 - e2 * e3), xi, xi * e1 * (1 - e2), jac, True)
    elif kind == EDGE:
        add(xi, xi * e1 * e3, xi * (1 - e1 * e2), xi * e1 * (1 - e2), xi**3 * e1**2)
        jac = xi**3 * e1**2 * e2
        add(xi, xi * e1, xi * (1 - e1 * e2 * e3), xi * e1 * e2 * (1 - e3), jac)
        add(xi * (1 - e1 * e2), xi * e1 * (1 - e2), xi, xi * e1 * e2 * e3, jac)
        add(xi * (1 - e1 * e2 * e3), xi * e1 * e2 * (1 - e3), xi, xi * e1, jac)
        add(xi * (1 - e1 * e2 * e3), xi * e1 * (1 - e2 * e3), xi, xi * e1 * e2, jac)
    elif kind == VERTEX:
        add(xi, xi * e1, xi * e2, xi * e2 * e3, xi**3 * e2, True)
    else:
        raise ValueError(f"unknown singular configuration {kind!r}")
    out = (np.concatenate(xs), np.concatenate(ys), np.concatenate(ws))
    for a in out:
        a.flags.writeable = False
    return out


def classify_pair(tri_a, tri_b):
    """Adjacency of two vertex-index triples.

    Returns ``(kind, perm_a, perm_b)`` where the permutations reorder the
    vertices to the conventions of :func:`singular_pair_rule`. Orientation
    of each triangle is irrelevant for the scalar single-layer integrand.
    """
    a = [int(v) for v in tri_a]
    b = [int(v) for v in tri_b]
    shared = [v for v in a if v in b]
    if len(shared) == 3:
        return IDENTICAL, (0, 1, 2), (0, 1, 2)
    if len(shared) == 2:
        s0, s1 = shared
        pa = (a.index(s0), a.index(s1), 3 - a.index(s0) - a.index(s1))
        pb = (b.index(s0), b.index(s1), 3 - b.index(s0) - b.index(s1))
        return EDGE, pa, pb
    if len(shared) == 1:
        i, j = a.index(shared[0]), b.index(shared[0])
        return VERTEX, (i, (i + 1) % 3, (i + 2) % 3), (j, (j + 1) % 3, (j + 2) % 3)
    return DISJOINT, (0, 1, 2), (0, 1, 2)
