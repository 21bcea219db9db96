"""Linear-quadratic ground truth: continuous Riccati equations and exact tree dynamic programming.

For ``l = |v|^2/2 + q|x|^2/2``, ``h = q_T|x|^2/2`` and the couplings
``F(m) = kappa/2 Var(m) + kappa_bar/2 |mean(m)|^2`` (terminal analogues
``kappa_T``, ``kappa_bar_T``), splitting states into conditional mean and
fluctuation decouples the problem. The value is

    V(X, t) = P(t)/2 Var + Q(t)/2 |mean|^2 + offset(t),

with ``-P' = q + kappa - P^2`` and ``-Q' = q + kappa_bar - Q^2`` and the
optimal feedback ``u = -P (x - mean) - Q mean``.
"""
from dataclasses import dataclass, field

import numpy as np

from ._engine import _aligned_ranges
from ._storage import ALLOCATOR
from .dynamics import ControlField, ParticleEnsemble
from .model import (ProblemSpec, ZeroFunctional, mean_coupling, quadratic_running_cost, quadratic_terminal_cost,
                    variance_functional)

BLOWUP = 1e6


class ParameterError(ValueError):
    """LQ parameters outside the supported range."""


@dataclass(frozen=True)
class LQSpec:
    """Parameters of the scalar-weight LQ mean field family."""

    q: float = 0.0
    q_T: float = 0.0
    kappa: float = 0.0
    kappa_bar: float = 0.0
    kappa_T: float = 0.0
    kappa_bar_T: float = 0.0
    sigma: float = 0.0
    beta: float = 0.0
    T: float = 1.0
    n: int = 1

    def __post_init__(self):
        for name in ("q", "q_T", "kappa", "kappa_bar", "kappa_T", "kappa_bar_T", "sigma", "beta"):
            if not getattr(self, name) >= 0:
                raise ParameterError(f"{name} must be nonnegative")
        if not self.T > 0 or int(self.n) < 1:
            raise ParameterError("need T > 0 and n >= 1")

    @property
    def running(self):
        """(fluctuation, mean) running weights."""
        return self.q + self.kappa, self.q + self.kappa_bar

    @property
    def terminal(self):
        return self.q_T + self.kappa_T, self.q_T + self.kappa_bar_T

    def to_problem(self):
        def coupling(kappa, kappa_bar):
            terms = [f for f, c in ((variance_functional(kappa), kappa), (mean_coupling(kappa_bar), kappa_bar)) if c]
            if not terms:
                return ZeroFunctional()
            return terms[0] if len(terms) == 1 else terms[0] + terms[1]

        params = {k: getattr(self, k) for k in self.__dataclass_fields__}
        return ProblemSpec(
            n=int(self.n), T=self.T, sigma=self.sigma, beta=self.beta, lam=1.0,
            F=coupling(self.kappa, self.kappa_bar), F_T=coupling(self.kappa_T, self.kappa_bar_T),
            name="lq", params=params,
            **quadratic_running_cost(int(self.n), self.q, 1.0), **quadratic_terminal_cost(self.q_T),
        )

    @property
    def bound_constants(self):
        """Growth and lower-bound constants of the induced problem."""
        return {"c_l": max(1.0, self.q), "c_h": self.q_T, "c_l_prime": 0.0, "c_h_prime": 0.0,
                "c_prime": 0.0, "c_T_prime": 0.0}


# ---------------------------------------------------------------------------
# continuous Riccati oracle

def riccati_closed_form(c, terminal, tau):
    """Solution of -P' = c - P^2, P(T) = terminal, at time to go ``tau``."""
    tau = np.asarray(tau, dtype=float)
    if c == 0:
        return terminal / (1.0 + terminal * tau)
    r = np.sqrt(c)
    th = np.tanh(r * tau)
    return r * (terminal + r * th) / (r + terminal * th)


def _rk4_backward(c, terminal, times, h_max=1e-3):
    out = np.empty(len(times))
    out[-1] = P = float(terminal)
    f = lambda P: P * P - c
    for i in range(len(times) - 1, 0, -1):
        span = times[i] - times[i - 1]
        m = max(1, int(np.ceil(span / h_max)))
        h = -span / m
        for _ in range(m):
            k1 = f(P)
            k2 = f(P + 0.5 * h * k1)
            k3 = f(P + 0.5 * h * k2)
            k4 = f(P + h * k3)
            P = P + h * (k1 + 2 * k2 + 2 * k3 + k4) / 6.0
            if not np.isfinite(P) or abs(P) > BLOWUP:
                raise ParameterError("Riccati solution blew up")
        out[i - 1] = P
    return out


@dataclass
class RiccatiSolution:
    times: np.ndarray
    P: np.ndarray
    Q: np.ndarray
    offset: np.ndarray
    residual: float
    lq: LQSpec = None

    def gains(self, t):
        """(P(t), Q(t)) by interpolation on the output grid."""
        return float(np.interp(t, self.times, self.P)), float(np.interp(t, self.times, self.Q))

    def feedback(self, k, X):
        """Optimal continuous feedback at output time index ``k`` for states (..., N, n)."""
        X = np.asarray(X, dtype=float)
        mean = X.mean(axis=-2, keepdims=True)
        return -self.P[k] * (X - mean) - self.Q[k] * mean

    def value(self, X, k=0):
        """Value of the cloud X (N, n) at output time index ``k``."""
        X = np.asarray(X, dtype=float)
        mean = X.mean(axis=0)
        var = float(np.mean(np.sum((X - mean) ** 2, axis=1)))
        return 0.5 * self.P[k] * var + 0.5 * self.Q[k] * float(mean @ mean) + float(self.offset[k])


def riccati_solve(lq, grid, h_max=1e-3):
    """Integrate both Riccati equations backward by RK4 on ``grid`` (substeps of at most ``h_max``)."""
    times = grid.times
    (c_fl, c_m), (P_T, Q_T) = lq.running, lq.terminal
    P = _rk4_backward(c_fl, P_T, times, h_max)
    Q = _rk4_backward(c_m, Q_T, times, h_max)
    tau = grid.T - times
    residual = max(float(np.max(np.abs(P - riccati_closed_form(c_fl, P_T, tau)))),
                   float(np.max(np.abs(Q - riccati_closed_form(c_m, Q_T, tau)))))
    if residual > 1e-10:
        raise ParameterError(f"Riccati integration residual {residual:.3e} exceeds 1e-10")
    n = int(lq.n)
    # offset(t) = 1/2 int_t^T (P sigma^2 n + Q beta^2 n) ds, trapezoid on a fine time-to-go grid
    offset = np.empty(len(times))
    for i, t in enumerate(times):
        s = np.linspace(0.0, grid.T - t, 2001)
        integrand = (lq.sigma**2 * riccati_closed_form(c_fl, P_T, s) + lq.beta**2 * riccati_closed_form(c_m, Q_T, s))
        offset[i] = 0.5 * n * float(np.trapezoid(integrand, s)) if len(s) > 1 else 0.0
    return RiccatiSolution(times, P, Q, offset, residual, lq)


# ---------------------------------------------------------------------------
# exact discrete oracle on the tree

def discrete_gains(lq, K, dt):
    """Discrete Riccati coefficients p_k, Q_k of the value ``p/2 Var + Q/2 |mean|^2``, k = 0..K."""
    (c_fl, c_m), (P_T, Q_T) = lq.running, lq.terminal
    p = np.empty(K + 1)
    Q = np.empty(K + 1)
    p[K], Q[K] = P_T, Q_T
    for k in range(K - 1, -1, -1):
        p[k] = dt * c_fl + p[k + 1] / (1.0 + dt * p[k + 1])
        Q[k] = dt * c_m + Q[k + 1] / (1.0 + dt * Q[k + 1])
    return p, Q


def _apply(a_fl, a_m, Y):
    """Apply ``a_fl`` on fluctuations and ``a_m`` on the particle mean of Y (..., N, n)."""
    m = Y.mean(axis=-2, keepdims=True)
    return a_fl * (Y - m) + a_m * m


@dataclass(eq=False)
class LQTreeSolution:
    """Exact discrete LQ solution on a scenario tree (value ``p/2 Var + Q/2 mean^2 + <g, X> + c`` per node)."""

    control: ControlField
    ensemble: ParticleEnsemble
    value: float
    root_values: np.ndarray
    p: np.ndarray
    Q: np.ndarray
    g: list = field(repr=False, default=None)
    c: list = field(repr=False, default=None)

    def Z0(self):
        """Derivative of the discrete value at the initial cloud."""
        X0 = np.asarray(self.ensemble.levels[0])
        return _apply(self.p[0], self.Q[0], X0) + self.g[0]

    @property
    def gains(self):
        """Discrete feedback gains (fluctuation, mean) per step: u = -a_fl (x - mean) - a_m mean - M g."""
        dt = self.ensemble.tree.dt
        p1, Q1 = self.p[1:], self.Q[1:]
        return p1 / (1.0 + dt * p1), Q1 / (1.0 + dt * Q1)


def lqr_tree_solve(lq, tree, noise, init):
    """Backward dynamic programming on the same tree, noise and grid as the solver.

    Parameters:
        lq: LQSpec.
        tree, noise: scenario tree and idiosyncratic increments (noise may be None when sigma = 0).
        init: initial particles (N, n) or (roots, N, n).
    """
    dt, K, C = tree.dt, tree.K, tree.n_children
    X0 = np.asarray(init, dtype=float)
    if X0.ndim == 2:
        X0 = X0[None]
    R, N, n = X0.shape
    p, Q = discrete_gains(lq, K, dt)
    sig, beta = lq.sigma, lq.beta
    probs = tree.probs
    zero_g = noise is None or noise.center or sig == 0
    zero_g = zero_g and (beta == 0 or abs(float(probs @ tree.increments.sum(axis=1))) < 1e-15)

    def shocks(k_child, j0, j1):
        s = np.zeros((j1 - j0, C, N, n))
        if noise is not None and sig:
            s = s + sig * noise.increments(k_child, j0, j1)
        if beta:
            s = s + beta * tree.increments[None, :, None, :]
        return s

    g = [None] * (K + 1)
    c = [None] * (K + 1)
    g[K] = ALLOCATOR.zeros((tree.n_nodes(K), N, n))
    c[K] = np.zeros(tree.n_nodes(K))
    for k in range(K - 1, -1, -1):
        M_fl, M_m = 1.0 / (1.0 + dt * p[k + 1]), 1.0 / (1.0 + dt * Q[k + 1])
        gk = ALLOCATOR.zeros((tree.n_nodes(k), N, n))
        ck = np.zeros(tree.n_nodes(k))
        for j0, j1 in _aligned_ranges(tree.n_nodes(k), C * N * n):
            s = shocks(k + 1, j0, j1)
            As = _apply(p[k + 1], Q[k + 1], s)
            gn = np.asarray(g[k + 1][j0 * C:j1 * C]).reshape(j1 - j0, C, N, n)
            gbar = np.einsum("c,jcid->jid", probs, As + gn)
            quad = np.einsum("jcid,jcid->jc", 0.5 * As + gn, s) / N
            cn = c[k + 1][j0 * C:j1 * C].reshape(j1 - j0, C)
            Mg = _apply(M_fl, M_m, gbar)
            gk[j0:j1] = Mg
            ck[j0:j1] = (cn + quad) @ probs - 0.5 * dt * np.einsum("jid,jid->j", gbar, Mg) / N
        g[k], c[k] = gk, ck
        if zero_g:
            g[k + 1] = None
    # forward pass under the optimal feedback
    states = [X0]
    U = []
    for k in range(K):
        M_fl, M_m = 1.0 / (1.0 + dt * p[k + 1]), 1.0 / (1.0 + dt * Q[k + 1])
        A_fl, A_m = p[k + 1], Q[k + 1]
        Xk = states[k]
        Uk = ALLOCATOR.empty(Xk.shape)
        nxt = ALLOCATOR.empty((tree.n_nodes(k + 1), N, n))
        for j0, j1 in _aligned_ranges(tree.n_nodes(k), C * N * n):
            X = np.asarray(Xk[j0:j1])
            AX = _apply(A_fl, A_m, X)
            if g[k + 1] is not None:
                # gbar recomputed from the stored next-level g
                s = shocks(k + 1, j0, j1)
                gn = np.asarray(g[k + 1][j0 * C:j1 * C]).reshape(j1 - j0, C, N, n)
                AX = AX + np.einsum("c,jcid->jid", probs, _apply(A_fl, A_m, s) + gn)
            u = -_apply(M_fl, M_m, AX)
            Uk[j0:j1] = u
            Y = X + dt * u
            nxt[j0 * C:j1 * C] = (Y[:, None] + shocks(k + 1, j0, j1)).reshape(-1, N, n)
        U.append(Uk)
        states.append(nxt)
    if g[0] is None:
        g[0] = np.zeros((R, N, n))
    roots = np.empty(R)
    for r in range(R):
        X = X0[r]
        roots[r] = 0.5 * float(np.sum(_apply(p[0], Q[0], X) * X)) / N + float(np.sum(g[0][r] * X)) / N + c[0][r]
    value = float(tree.root_probs @ roots)
    return LQTreeSolution(ControlField(tree, U), ParticleEnsemble(tree, states), value, roots, p, Q, g, c)
