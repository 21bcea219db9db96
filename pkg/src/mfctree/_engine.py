"""Fused forward/backward sweeps on the scenario tree.

An objective supplies per-particle stage and terminal costs and their
gradients on chunks of nodes. :func:`evaluate` runs the Euler dynamics
forward, accumulates the discrete cost, and runs the exact discrete adjoint
recursion backward to produce the cost gradient with respect to the control.
Work is split into fixed node chunks; chunk partials are reduced in chunk
order so results do not depend on the worker count.
"""
from dataclasses import dataclass

import numpy as np

from ._storage import ALLOCATOR, chunk_ranges
from .dynamics import CHUNK_ELEMS, NumericalError, _run_chunks


@dataclass
class Evaluation:
    cost: float
    grad: list = None
    dirderiv: float = None
    states: list = None
    adjoint: list = None
    Z0: np.ndarray = None
    root_costs: np.ndarray = None
    particle_costs: np.ndarray = None


def _aligned_ranges(n_nodes, width, align=1):
    """Node chunks of about CHUNK_ELEMS scalars (``width`` per node), in multiples of ``align``."""
    per = max(1, CHUNK_ELEMS // max(1, width))
    if align > 1:
        per = align * max(1, per // align)
    return chunk_ranges(n_nodes, per)


def _children(Y, k_child, j0, j1, noise, sigma, beta, tree):
    """Child states for parents ``j0..j1``: shape ((j1-j0)*C, N, n)."""
    C = tree.n_children
    M, N, n = Y.shape
    out = np.empty((M, C, N, n))
    if noise is None:
        out[...] = Y[:, None]
    else:
        stored = np.asarray(noise.levels[k_child - 1][j0:j1])
        cs = stored.shape[1]
        diag = np.diagonal(sigma)
        if np.array_equal(sigma, np.diag(diag)):
            np.multiply(stored, diag, out=out[:, :cs])
        else:
            out[:, :cs] = stored @ sigma.T
        if cs < C:
            # the last sibling is fixed by the centering constraint
            p = tree.probs
            last = out[:, C - 1]
            np.multiply(out[:, 0], -p[0] / p[-1], out=last)
            for c in range(1, C - 1):
                last -= (p[c] / p[-1]) * out[:, c]
        out += Y[:, None]
    if beta:
        out += beta * tree.increments[None, :, None, :]
    return out.reshape(M * C, N, n)


def child_average(probs, Z, M):
    """Probability-weighted sibling average of child values Z ((M*C), N, n) -> (M, N, n)."""
    Zc = Z.reshape(M, len(probs), *Z.shape[1:])
    out = probs[0] * Zc[:, 0]
    for c in range(1, len(probs)):
        out += probs[c] * Zc[:, c]
    return out


def _check_finite(arr, k, j0):
    if not np.all(np.isfinite(arr)):
        bad = np.argwhere(~np.isfinite(arr))[0]
        raise NumericalError(f"non-finite state at step {k}, node {j0 + int(bad[0])}")


def _control(U, D, alpha, k, j0, j1):
    u = np.asarray(U[k][j0:j1])
    if D is not None and alpha:
        u = u + alpha * np.asarray(D[k][j0:j1])
    return u


def evaluate(obj, tree, noise, X0, U, *, D=None, alpha=0.0, grad=False, dir_only=False,
             keep_states=False, keep_adjoint=False, per_particle=False, workers=1):
    """Cost (and gradient) of the control ``U + alpha * D``.

    Parameters:
        obj: objective providing stage/terminal costs and gradients.
        X0: initial states of shape (n_roots, N, n).
        U, D: lists of per-level control arrays (D optional).
        grad: return the gradient levels.
        dir_only: only return the directional derivative along ``D``.
        keep_states, keep_adjoint: retain all state / adjoint levels.
        per_particle: also accumulate per-root and per-particle costs.
    """
    K, dt, C = tree.K, tree.dt, tree.n_children
    sigma, beta = obj.sigma, obj.beta
    X0 = np.asarray(X0, dtype=float)
    R, N, n = X0.shape
    need_back = grad or dir_only or keep_adjoint
    states = [X0]
    cost = 0.0
    root_costs = np.zeros(R) if per_particle else None
    part_costs = np.zeros((R, N)) if per_particle else None
    Zbar = ALLOCATOR.empty((tree.n_nodes(K - 1), N, n)) if need_back else None
    ZK = ALLOCATOR.empty((tree.n_nodes(K), N, n)) if keep_adjoint else None

    def accumulate(k, j0, c_nodes, weight):
        P = tree.level_probs(k)[j0:j0 + c_nodes.shape[0]]
        total = weight * float(P @ c_nodes.mean(axis=1))
        if per_particle:
            roots = (j0 + np.arange(c_nodes.shape[0])) // (C**k)
            cond = P / tree.root_probs[roots]
            np.add.at(root_costs, roots, weight * cond * c_nodes.mean(axis=1))
            np.add.at(part_costs, roots, weight * cond[:, None] * c_nodes)
        return total

    for k in range(K):
        last = k == K - 1
        Xk_all = states[k]
        nxt = ALLOCATOR.empty((tree.n_nodes(k + 1), N, n)) if (not last or keep_states) else None

        def step(rng, k=k, last=last, Xk_all=Xk_all, nxt=nxt):
            j0, j1 = rng
            Xk = np.asarray(Xk_all[j0:j1])
            Uk = _control(U, D, alpha, k, j0, j1)
            c_stage = obj.stage_cost(k, j0, j1, Xk, Uk)
            Xc = _children(Xk + dt * Uk, k + 1, j0, j1, noise, sigma, beta, tree)
            _check_finite(Xc, k + 1, j0 * C)
            if nxt is not None:
                nxt[j0 * C:j1 * C] = Xc
            part = [accumulate(k, j0, c_stage, dt)]
            if last:
                c_term = obj.terminal_cost(j0 * C, j1 * C, Xc)
                part.append(accumulate(K, j0 * C, c_term, 1.0))
                if need_back:
                    Zc = obj.terminal_grad(j0 * C, j1 * C, Xc)
                    if ZK is not None:
                        ZK[j0 * C:j1 * C] = Zc
                    Zbar[j0:j1] = child_average(tree.probs, Zc, j1 - j0)
            return part

        # per_particle accumulation mutates shared arrays; keep it sequential
        w = 1 if per_particle else workers
        parts = _run_chunks(step, _aligned_ranges(tree.n_nodes(k), C * N * n), w)
        for p in parts:
            for v in p:
                cost += v
        if nxt is not None:
            states.append(nxt)

    result = Evaluation(cost=cost, root_costs=root_costs, particle_costs=part_costs)
    if not need_back:
        result.states = states if keep_states else None
        return result

    G = [None] * K if grad else None
    Zlev = [None] * (K + 1) if keep_adjoint else None
    if keep_adjoint:
        Zlev[K] = ZK
    dd = 0.0
    for k in range(K - 1, -1, -1):
        M = tree.n_nodes(k)
        Gk = ALLOCATOR.empty((M, N, n)) if grad else None
        Zk_all = ALLOCATOR.empty((M, N, n)) if keep_adjoint else None
        newZbar = ALLOCATOR.empty((tree.n_nodes(k - 1), N, n)) if k > 0 else np.empty((R, N, n))
        Xk_all = states[k]
        P = tree.level_probs(k)

        def back(rng, k=k, Gk=Gk, Zk_all=Zk_all, newZbar=newZbar, Xk_all=Xk_all, P=P, Zbar=Zbar):
            j0, j1 = rng
            Xk = np.asarray(Xk_all[j0:j1])
            Uk = _control(U, D, alpha, k, j0, j1)
            gx, gv = obj.stage_grad(k, j0, j1, Xk, Uk)
            Zb = np.asarray(Zbar[j0:j1])
            Gc = gv + Zb
            part = 0.0
            if Gk is not None:
                Gk[j0:j1] = Gc
            if D is not None and dir_only:
                Dk = np.asarray(D[k][j0:j1])
                part = dt * float(P[j0:j1] @ np.einsum("jid,jid->j", Gc, Dk)) / N
            Zc = Zb + dt * gx
            if Zk_all is not None:
                Zk_all[j0:j1] = Zc
            if k > 0:
                newZbar[j0 // C:j1 // C] = child_average(tree.probs, Zc, (j1 - j0) // C)
            else:
                newZbar[j0:j1] = Zc
            return part

        # at k > 0 each chunk must hold whole sibling groups
        ranges = _aligned_ranges(M, N * n, C if k > 0 else 1)
        for part in _run_chunks(back, ranges, workers):
            dd += part
        if grad:
            G[k] = Gk
        if keep_adjoint:
            Zlev[k] = Zk_all
        Zbar = newZbar
        if not keep_states and k > 0:
            states[k] = None
    result.grad = G
    result.dirderiv = dd if dir_only else None
    result.adjoint = Zlev
    result.Z0 = Zbar
    result.states = states if keep_states else None
    return result


def forward_states(sigma, beta, tree, noise, init, U_levels):
    """All state levels for the control ``U_levels`` (no costs)."""
    X0 = np.asarray(init, dtype=float)
    if X0.ndim == 2:
        X0 = X0[None]
    sigma = np.asarray(sigma, dtype=float)
    states = [X0]
    C = tree.n_children
    N, n = X0.shape[1], X0.shape[2]
    for k in range(tree.K):
        nxt = ALLOCATOR.empty((tree.n_nodes(k + 1), N, n))
        for j0, j1 in _aligned_ranges(tree.n_nodes(k), C * N * n):
            Y = np.asarray(states[k][j0:j1]) + tree.dt * np.asarray(U_levels[k][j0:j1])
            Xc = _children(Y, k + 1, j0, j1, noise, sigma, beta, tree)
            _check_finite(Xc, k + 1, j0 * C)
            nxt[j0 * C:j1 * C] = Xc
        states.append(nxt)
    return states


class MeanFieldObjective:
    """Discrete mean field cost: stage ``mean l + F(m)``, terminal ``mean h + F_T(m)``."""

    def __init__(self, spec):
        self.spec = spec
        self.sigma = spec.sigma
        self.beta = spec.beta

    def stage_cost(self, k, j0, j1, X, U):
        s = self.spec
        return s.l(X, U) + s.F.value(X)[:, None]

    def stage_grad(self, k, j0, j1, X, U):
        s = self.spec
        return s.l_x(X, U) + s.F.grad_dnu(X, X), s.l_v(X, U)

    def terminal_cost(self, j0, j1, X):
        s = self.spec
        return s.h(X) + s.F_T.value(X)[:, None]

    def terminal_grad(self, j0, j1, X):
        s = self.spec
        return s.h_x(X) + s.F_T.grad_dnu(X, X)


class TaggedObjective:
    """Single-particle costs along a frozen flow of conditional measures.

    Each tag pays ``l + dF/dnu(m_kj)`` while running and ``h + dF_T/dnu(m_Kj)``
    at the end, where ``m_kj`` are the base ensemble's conditional measures.
    Tags do not enter the measures.
    """

    def __init__(self, spec, base_levels):
        self.spec = spec
        self.base = base_levels
        self.sigma = spec.sigma
        self.beta = spec.beta

    def _m(self, k, j0, j1):
        return np.asarray(self.base[k][j0:j1])

    def stage_cost(self, k, j0, j1, Y, V):
        s = self.spec
        return s.l(Y, V) + s.F.dnu(self._m(k, j0, j1), Y)

    def stage_grad(self, k, j0, j1, Y, V):
        s = self.spec
        return s.l_x(Y, V) + s.F.grad_dnu(self._m(k, j0, j1), Y), s.l_v(Y, V)

    def terminal_cost(self, j0, j1, Y):
        s = self.spec
        return s.h(Y) + s.F_T.dnu(self._m(len(self.base) - 1, j0, j1), Y)

    def terminal_grad(self, j0, j1, Y):
        s = self.spec
        return s.h_x(Y) + s.F_T.grad_dnu(self._m(len(self.base) - 1, j0, j1), Y)


class LinearizedObjective:
    """Second variation of the mean field cost along a base state/control path.

    States follow ``dX_{k+1} = dX_k + dt dU_k`` (noise-free), and the quadratic
    cost is half the second derivative of the discrete cost in (dX, dU).
    """

    sigma = None
    beta = 0.0

    def __init__(self, spec, base_states, base_controls):
        self.spec = spec
        self.Xb = base_states
        self.Ub = base_controls

    def _base(self, k, j0, j1):
        return np.asarray(self.Xb[k][j0:j1]), np.asarray(self.Ub[k][j0:j1])

    def _grads(self, k, j0, j1, dX, dU):
        s = self.spec
        Xb, Ub = self._base(k, j0, j1)
        Lxx, Lxv, Lvv = s.l_xx(Xb, Ub), s.l_xv(Xb, Ub), s.l_vv(Xb, Ub)
        gx = np.einsum("...ab,...b->...a", Lxx, dX) + np.einsum("...ab,...b->...a", Lxv, dU)
        gx = gx + s.F.hess_action(Xb, dX)
        gv = np.einsum("...ba,...b->...a", Lxv, dX) + np.einsum("...ab,...b->...a", Lvv, dU)
        return gx, gv

    def stage_cost(self, k, j0, j1, dX, dU):
        gx, gv = self._grads(k, j0, j1, dX, dU)
        return 0.5 * (np.sum(gx * dX, axis=-1) + np.sum(gv * dU, axis=-1))

    def stage_grad(self, k, j0, j1, dX, dU):
        return self._grads(k, j0, j1, dX, dU)

    def terminal_grad(self, j0, j1, dX):
        s = self.spec
        XK = np.asarray(self.Xb[len(self.Xb) - 1][j0:j1])
        return np.einsum("...ab,...b->...a", s.h_xx(XK), dX) + s.F_T.hess_action(XK, dX)

    def terminal_cost(self, j0, j1, dX):
        return 0.5 * np.sum(self.terminal_grad(j0, j1, dX) * dX, axis=-1)
