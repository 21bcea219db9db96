"""Discrete adjoint (backward) equation on the scenario tree and the cost gradient.

The conditional expectation given the current node is the probability
weighted average over its children, taken particle by particle, so the
backward recursion is exact for the discretized problem:

    Z[K]    = h_x(X[K]) + D dF_T/dnu(m_K)(X[K])
    Zbar[k] = sum_c p_c Z[k+1](c, i)
    Z[k]    = Zbar[k] + dt (l_x(X[k], u[k]) + D dF/dnu(m_k)(X[k]))

``Z[k]`` is the derivative of the discrete cost with respect to ``X[k]``
(per unit Hilbert weight). The control ``u[k]`` first acts on ``X[k+1]``, so
the gradient with respect to ``u[k]`` is ``l_v(X[k], u[k]) + Zbar[k]``.
"""
from dataclasses import dataclass

import numpy as np

from ._storage import ALLOCATOR
from .dynamics import ControlField
from .model import ConfigurationError


@dataclass(eq=False)
class AdjointField:
    """Adjoint values ``levels[k]`` of shape (nodes at k, N, n), k = 0..K.

    When only the root is retained, ``levels`` is None and ``root`` holds Z[0].
    """

    tree: object
    levels: list = None
    root: np.ndarray = None

    def __post_init__(self):
        if self.root is None and self.levels is not None:
            self.root = np.asarray(self.levels[0])

    def child_average(self, k):
        """Zbar[k]: conditional expectation of Z[k+1] given the level-k node."""
        if self.levels is None:
            raise ValueError("adjoint levels were not retained")
        C = self.tree.n_children
        Z = np.asarray(self.levels[k + 1])
        M, N, n = Z.shape
        return np.einsum("c,mcid->mid", self.tree.probs, Z.reshape(M // C, C, N, n))

    def to_csv(self, path):
        from .dynamics import write_level_csv

        write_level_csv(path, self.levels, "z")


def _require_grad_dnu(F):
    if not hasattr(F, "grad_dnu") or not callable(F.grad_dnu):
        raise ConfigurationError("mean-field coupling lacks grad_dnu")


def solve_bsde(spec, ens, u, tree=None):
    """Backward recursion for Z on an ensemble simulated under ``u``."""
    tree = ens.tree if tree is None else tree
    _require_grad_dnu(spec.F)
    _require_grad_dnu(spec.F_T)
    K, dt = tree.K, tree.dt
    levels = [None] * (K + 1)
    XK = np.asarray(ens.levels[K])
    levels[K] = spec.h_x(XK) + spec.F_T.grad_dnu(XK, XK)
    C = tree.n_children
    for k in range(K - 1, -1, -1):
        Xk, uk = np.asarray(ens.levels[k]), np.asarray(u.levels[k])
        Znext = levels[k + 1]
        M, N, n = Xk.shape
        Zbar = np.einsum("c,mcid->mid", tree.probs, Znext.reshape(M, C, N, n))
        Zk = ALLOCATOR.empty((M, N, n))
        Zk[...] = Zbar + dt * (spec.l_x(Xk, uk) + spec.F.grad_dnu(Xk, Xk))
        levels[k] = Zk
    return AdjointField(tree, levels)


def cost_gradient(spec, ens, u, Z):
    """Gradient ``G[k] = l_v(X[k], u[k]) + Zbar[k]`` of the discrete cost."""
    levels = []
    for k in range(u.tree.K):
        Xk, uk = np.asarray(ens.levels[k]), np.asarray(u.levels[k])
        g = ALLOCATOR.empty(Xk.shape)
        g[...] = spec.l_v(Xk, uk) + Z.child_average(k)
        levels.append(g)
    return ControlField(u.tree, levels)


def martingale_increments(Z, k):
    """Child deviations ``Z[k+1](c) - Zbar[k]``: the discrete martingale part of the adjoint."""
    C = Z.tree.n_children
    Znext = np.asarray(Z.levels[k + 1])
    M, N, n = Znext.shape
    return Znext.reshape(M // C, C, N, n) - Z.child_average(k)[:, None]
