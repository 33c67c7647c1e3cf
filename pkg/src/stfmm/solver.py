"""Unpreconditioned GMRES and manufactured right-hand sides."""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field

import numpy as np


@dataclass
class SolveReport:
    iterations: int
    residuals: list = field(default_factory=list)  # relative residual norms, entry 0 is 1
    wall_time: float = 0.0
    converged: bool = False
    breakdown: bool = False

    @property
    def final_residual(self):
        return self.residuals[-1] if self.residuals else float("nan")

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["iter", "relres"])
            for i, r in enumerate(self.residuals):
                wr.writerow([i, repr(float(r))])


def _apply(op, v):
    if callable(op) and not hasattr(op, "matvec"):
        return op(v)
    if hasattr(op, "matvec"):
        return op.matvec(v)
    return op @ v


def _tree_sum(parts):
    parts = list(parts)
    while len(parts) > 1:
        nxt = [parts[i] + parts[i + 1] for i in range(0, len(parts) - 1, 2)]
        if len(parts) % 2:
            nxt.append(parts[-1])
        parts = nxt
    return parts[0] if parts else 0.0


def make_dot(segments=None):
    """Inner product; with ``segments`` the partial sums are combined in a fixed pairwise tree."""
    if segments is None:
        return lambda a, b: float(np.dot(a, b))
    segs = [np.asarray(s) for s in segments]
    return lambda a, b: float(_tree_sum(np.dot(a[s], b[s]) for s in segs))


def gmres(op, rhs, tol=1e-8, max_iter=None, restart=None, x0=None, segments=None, callback=None):
    """GMRES with modified Gram-Schmidt and Givens rotations.

    ``op`` is anything with ``matvec``, a matrix supporting ``@`` or a
    callable. ``restart=None`` runs unrestarted. Stops when the relative
    residual ``||b - A x|| / ||b||`` estimated by the rotated Hessenberg
    system drops to ``tol``; a (near) zero subdiagonal ends the iteration
    with ``report.breakdown`` set.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    b = np.asarray(rhs, dtype=float)
    n = b.size
    max_iter = n if max_iter is None else int(max_iter)
    m = max_iter if restart is None else int(restart)
    dot = make_dot(segments)
    nrm = lambda v: np.sqrt(dot(v, v))
    x = np.zeros(n) if x0 is None else np.array(x0, dtype=float)
    t0 = time.perf_counter()
    bnorm = nrm(b)
    rep = SolveReport(0, [1.0 if bnorm > 0 else 0.0])
    if bnorm == 0:
        rep.converged = True
        rep.residuals = [0.0]
        rep.wall_time = time.perf_counter() - t0
        return np.zeros(n), rep
    r = b - _apply(op, x) if x0 is not None else b.copy()
    if x0 is not None:
        rep.residuals = [nrm(r) / bnorm]
    it = 0
    while it < max_iter:
        beta = nrm(r)
        if beta / bnorm <= tol:
            rep.converged = True
            break
        V = np.zeros((m + 1, n))
        H = np.zeros((m + 1, m))
        cs, sn = np.zeros(m), np.zeros(m)
        g = np.zeros(m + 1)
        g[0] = beta
        V[0] = r / beta
        k = 0
        stop = False
        while k < m and it < max_iter:
            v = _apply(op, V[k])
            for i in range(k + 1):
                H[i, k] = dot(V[i], v)
                v = v - H[i, k] * V[i]
            H[k + 1, k] = nrm(v)
            for i in range(k):
                a, c = H[i, k], H[i + 1, k]
                H[i, k] = cs[i] * a + sn[i] * c
                H[i + 1, k] = -sn[i] * a + cs[i] * c
            hk, hk1 = H[k, k], H[k + 1, k]
            den = np.hypot(hk, hk1)
            breakdown = hk1 <= 1e-14 * max(abs(hk), 1e-300)
            if den == 0:
                rep.breakdown = True
                stop = True
                break
            cs[k], sn[k] = hk / den, hk1 / den
            H[k, k] = den
            H[k + 1, k] = 0.0
            g[k + 1] = -sn[k] * g[k]
            g[k] = cs[k] * g[k]
            it += 1
            k += 1
            res = abs(g[k]) / bnorm
            rep.residuals.append(float(res))
            if callback is not None:
                callback(it, res)
            if res <= tol:
                rep.converged = True
                stop = True
                break
            if breakdown:
                rep.breakdown = True
                stop = True
                break
            V[k] = v / hk1
        if k:
            y = np.linalg.solve(np.triu(H[:k, :k]), g[:k])
            x = x + V[:k].T @ y
        if stop:
            break
        r = b - _apply(op, x)
    rep.iterations = it
    rep.wall_time = time.perf_counter() - t0
    return x, rep


def manufactured_rhs(mesh, w_ref, mode="fmm", operator=None, **build_kw):
    """Right-hand side ``V w_ref`` evaluated densely or through the FMM.

    Pass ``operator`` to reuse an already built dense matrix or FMM plan;
    otherwise one is built from ``mesh`` (``build_kw`` go to the builder).
    """
    if mode not in ("dense", "fmm"):
        raise ValueError(f"unknown mode {mode!r}")
    w_ref = np.asarray(w_ref, dtype=float)
    if w_ref.shape != (mesh.n_dofs,):
        raise ValueError(f"density has shape {w_ref.shape}, mesh has {mesh.n_dofs} DOFs")
    if operator is None:
        if mode == "dense":
            from .assembly import assemble_dense

            operator = assemble_dense(mesh, **build_kw)
        else:
            from .fmm import build_fmm

            operator = build_fmm(mesh, **build_kw)
    return _apply(operator, w_ref)
