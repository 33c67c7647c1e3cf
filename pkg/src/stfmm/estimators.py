"""scikit-learn style wrappers.

``fit`` takes a space-time mesh instead of a feature matrix: all setup work
(tree, translation tables, nearfield blocks) depends only on the geometry.
``transform`` applies the single-layer operator to densities, ``predict`` of
the solver returns the density for a given right-hand side.
"""

from __future__ import annotations

import math

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .fmm import FMMPlan
from .kernel import ExpansionOrders
from .mesh import SpaceTimeMesh
from .quadrature import QuadratureSpec
from .solver import gmres
from .tree import build_tree


class SingleLayerFMM(TransformerMixin, BaseEstimator):
    """Fast evaluation of the discrete heat single-layer operator.

    Parameters mirror the FMM settings; ``ranks``/``workers`` select the
    distributed runtime (one rank and zero workers evaluate sequentially).
    """

    def __init__(self, n_max=80, c_st=0.9, n_tr=5, m_t=6, m_x=6, alpha=1.0, quadrature=None,
                 slice_bounds=None, ranks=1, workers=0, threshold=None, transport="inproc", grain=4):
        self.n_max = n_max
        self.c_st = c_st
        self.n_tr = n_tr
        self.m_t = m_t
        self.m_x = m_x
        self.alpha = alpha
        self.quadrature = quadrature
        self.slice_bounds = slice_bounds
        self.ranks = ranks
        self.workers = workers
        self.threshold = threshold
        self.transport = transport
        self.grain = grain

    def _validate_params(self):
        if not isinstance(self.n_max, int) or self.n_max < 1:
            raise ValueError("n_max must be a positive integer")
        if not self.c_st > 0 or not self.alpha > 0:
            raise ValueError("c_st and alpha must be positive")
        if self.n_tr < 0 or self.m_t < 0 or self.m_x < 0:
            raise ValueError("n_tr, m_t, m_x must be non-negative")
        if self.ranks < 1 or self.workers < 0:
            raise ValueError("need ranks >= 1 and workers >= 0")
        if self.transport not in ("inproc", "tcp"):
            raise ValueError(f"unknown transport {self.transport!r}")

    def fit(self, X, y=None, nearfield=None, table=None):
        """Build tree and plan for the mesh ``X``; ``y`` is ignored."""
        if not isinstance(X, SpaceTimeMesh):
            raise TypeError(f"fit expects a SpaceTimeMesh, got {type(X).__name__}")
        self._validate_params()
        quad = self.quadrature
        if isinstance(quad, dict):
            quad = QuadratureSpec(**quad)
        self.tree_ = build_tree(X, n_max=self.n_max, c_st=self.c_st, n_tr=self.n_tr, alpha=self.alpha,
                                slice_bounds=self.slice_bounds)
        self.plan_ = FMMPlan(self.tree_, ExpansionOrders(self.m_t, self.m_x, self.alpha), quad,
                             nearfield=nearfield, table=table, grain=self.grain)
        self.mesh_ = X
        self.n_features_in_ = X.n_dofs
        self.distributed_ = None
        if self.ranks > 1 or self.workers > 0:
            from .parallel import DistributedFMM

            self.distributed_ = DistributedFMM(self.plan_, self.ranks, max(self.workers, 1),
                                               self.threshold, self.transport)
        return self

    def matvec(self, w):
        check_is_fitted(self, "plan_")
        if self.distributed_ is not None:
            return self.distributed_.matvec(w)
        return self.plan_.matvec(w)

    @property
    def shape(self):
        check_is_fitted(self, "plan_")
        return self.plan_.shape

    def transform(self, X):
        """``V w`` for one density vector or for every row of a 2D array."""
        check_is_fitted(self, "plan_")
        one = np.ndim(X) == 1
        W = check_array(np.atleast_2d(X), dtype=np.float64)
        if W.shape[1] != self.n_features_in_:
            raise ValueError(f"density length {W.shape[1]} does not match {self.n_features_in_} DOFs")
        out = np.vstack([self.matvec(w) for w in W])
        return out[0] if one else out

    def close(self):
        if getattr(self, "distributed_", None) is not None:
            self.distributed_.close()


class SingleLayerSolver(BaseEstimator):
    """GMRES solve of ``V w = g`` with the FMM operator."""

    def __init__(self, n_max=80, c_st=0.9, n_tr=5, m_t=6, m_x=6, alpha=1.0, quadrature=None,
                 slice_bounds=None, ranks=1, workers=0, threshold=None, transport="inproc", grain=4,
                 tol=1e-8, max_iter=500, restart=None):
        self.n_max = n_max
        self.c_st = c_st
        self.n_tr = n_tr
        self.m_t = m_t
        self.m_x = m_x
        self.alpha = alpha
        self.quadrature = quadrature
        self.slice_bounds = slice_bounds
        self.ranks = ranks
        self.workers = workers
        self.threshold = threshold
        self.transport = transport
        self.grain = grain
        self.tol = tol
        self.max_iter = max_iter
        self.restart = restart

    def fit(self, X, y=None, **fit_kw):
        if not (self.tol > 0 and math.isfinite(self.tol)):
            raise ValueError("tol must be positive")
        params = {k: v for k, v in self.get_params().items() if k not in ("tol", "max_iter", "restart")}
        self.operator_ = SingleLayerFMM(**params).fit(X, **fit_kw)
        self.n_features_in_ = self.operator_.n_features_in_
        return self

    def predict(self, X):
        """Density solving ``V w = X`` (one right-hand side per row for 2D input)."""
        check_is_fitted(self, "operator_")
        one = np.ndim(X) == 1
        B = check_array(np.atleast_2d(X), dtype=np.float64)
        if B.shape[1] != self.n_features_in_:
            raise ValueError(f"right-hand side length {B.shape[1]} does not match {self.n_features_in_} DOFs")
        sols, self.reports_ = [], []
        for b in B:
            x, rep = gmres(self.operator_, b, self.tol, self.max_iter, self.restart)
            sols.append(x)
            self.reports_.append(rep)
        self.report_ = self.reports_[-1]
        out = np.vstack(sols)
        return out[0] if one else out
