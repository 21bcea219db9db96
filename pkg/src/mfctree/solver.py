"""Discrete cost evaluation and adjoint-gradient minimization of the control problem."""
import logging
import time
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from . import _engine
from ._engine import MeanFieldObjective, _aligned_ranges
from .adjoint import AdjointField
from .dynamics import ControlField, NumericalError, ParticleEnsemble, TimeGrid, build_tree, draw_noise
from .hamiltonian import minimize_lagrangian
from .model import check_convexity_margin

log = logging.getLogger(__name__)

STEP_RULES = ("cg", "fixed", "backtracking", "strong-convexity")


class SolvabilityError(ValueError):
    """The convexity margin is not positive, so uniqueness is not guaranteed."""


@dataclass
class SolveOptions:
    """Options for :func:`solve_mfc`.

    ``step_rule`` is one of ``cg`` (nonlinear conjugate gradient with a secant
    line search, the default), ``fixed`` (constant step ``step_size`` or
    1/L estimated by power iteration), ``backtracking`` (Armijo steepest
    descent) or ``strong-convexity`` (step 2/(margin + L)).
    """

    max_iters: int = 200
    grad_tol: float = 1e-8
    step_rule: str = "cg"
    step_size: float = None
    c1: float = 1e-4
    shrink: float = 0.5
    backend: str = "open-loop-tree"
    allow_nonconvex: bool = False
    store_adjoint: bool = True
    restart: int = 50
    workers: int = 1

    def __post_init__(self):
        if not self.grad_tol > 0:
            raise ValueError("grad_tol must be positive")
        if self.step_rule not in STEP_RULES:
            raise ValueError(f"step_rule must be one of {STEP_RULES}")
        if self.backend not in ("open-loop-tree", "feedback-parametric"):
            raise ValueError(f"unknown backend {self.backend!r}")


@dataclass(eq=False)
class OptimalSolution:
    control: ControlField
    ensemble: ParticleEnsemble
    adjoint: AdjointField
    value: float
    grad_norm: float
    iterations: int
    spec: object = None
    tree: object = None
    noise: object = None
    converged: bool = True
    history: list = field(default_factory=list)
    margin: float = None
    options: SolveOptions = None
    runtime: float = 0.0
    policy: dict = None

    @property
    def Z0(self):
        return self.adjoint.root

    @property
    def init(self):
        return np.asarray(self.ensemble.levels[0])

    def summary(self):
        return {
            "value": float(self.value), "grad_norm": float(self.grad_norm), "iterations": int(self.iterations),
            "converged": bool(self.converged), "margin": None if self.margin is None else float(self.margin),
        }


def _as_roots(init):
    X0 = np.asarray(init, dtype=float)
    if X0.ndim == 1:
        X0 = X0[:, None]
    if X0.ndim == 2:
        X0 = X0[None]
    if X0.ndim != 3:
        raise ValueError("initial particles must have shape (N, n) or (roots, N, n)")
    return X0


def evaluate_cost(spec, u, ens, tree=None):
    """Discrete cost of ``u`` given the ensemble it generates.

    Running costs use the left endpoint of each step; the summation order
    matches the solver's internal sweeps, so the result agrees bit for bit.
    """
    tree = ens.tree if tree is None else tree
    K, dt, C = tree.K, tree.dt, tree.n_children
    obj = MeanFieldObjective(spec)
    _, N, n = np.asarray(ens.levels[0]).shape
    cost = 0.0
    for k in range(K):
        P = tree.level_probs(k)
        for j0, j1 in _aligned_ranges(tree.n_nodes(k), C * N * n):
            Xk = np.asarray(ens.levels[k][j0:j1])
            c_stage = obj.stage_cost(k, j0, j1, Xk, np.asarray(u.levels[k][j0:j1]))
            cost += dt * float(P[j0:j1] @ c_stage.mean(axis=1))
            if k == K - 1:
                PK = tree.level_probs(K)
                Xc = np.asarray(ens.levels[K][j0 * C:j1 * C])
                c_term = obj.terminal_cost(j0 * C, j1 * C, Xc)
                cost += 1.0 * float(PK[j0 * C:j1 * C] @ c_term.mean(axis=1))
    return cost


class _Problem:
    """Bundle of (objective, tree, noise, initial states) driven by the minimizer."""

    def __init__(self, obj, tree, noise, X0, workers=1):
        self.obj, self.tree, self.noise, self.X0, self.workers = obj, tree, noise, X0, workers
        self.evals = 0

    def evaluate(self, U, **kw):
        self.evals += 1
        levels = U.levels
        D = kw.pop("D", None)
        return _engine.evaluate(self.obj, self.tree, self.noise, self.X0, levels,
                                D=None if D is None else D.levels, workers=self.workers, **kw)


def _power_iteration(problem, U, G, probes=5, eps=1e-4, seed=0):
    """Estimate the largest curvature of the cost from finite-difference Hessian products."""
    tree = problem.tree
    v = ControlField.random(tree, U.N, U.n, seed)
    v.scale(1.0 / max(v.norm(), 1e-300))
    L = 0.0
    for _ in range(probes):
        ev = problem.evaluate(U, D=v, alpha=eps, grad=True)
        Hv = ControlField(tree, ev.grad).axpy(-1.0, G).scale(1.0 / eps)
        L = Hv.norm()
        if L <= 0:
            break
        v = Hv.scale(1.0 / L)
    return L


def minimize_control(problem, U0, opts, lam, margin=None):
    """Minimize the discrete cost over controls; returns (U, evaluation, iterations, history, converged)."""
    tree = problem.tree
    U = U0
    ev = problem.evaluate(U, grad=True)
    G = ControlField(tree, ev.grad)
    J = ev.cost
    history = [J]
    d = None
    g2_old = None
    alpha_prev = 1.0 / lam
    step = opts.step_size
    if opts.step_rule in ("fixed", "strong-convexity") and step is None:
        L = max(_power_iteration(problem, U, G), lam)
        step = 1.0 / L if opts.step_rule == "fixed" else 2.0 / (max(margin or lam, 1e-12) + L)
    converged = False
    it = 0
    for it in range(opts.max_iters + 1):
        gnorm = G.rms()
        if gnorm <= opts.grad_tol:
            converged = True
            break
        if it == opts.max_iters:
            break
        g2 = G.inner(G)
        if opts.step_rule == "cg":
            if d is None or it % opts.restart == 0:
                d = G.copy().scale(-1.0)
            else:
                d.scale(g2 / g2_old).axpy(-1.0, G)
            slope = G.inner(d)
            if slope >= 0:
                d = G.copy().scale(-1.0)
                slope = -g2
            a0 = alpha_prev
            trial = problem.evaluate(U, D=d, alpha=a0, dir_only=True)
            curv = (trial.dirderiv - slope) / a0
            alpha = -slope / curv if curv > 0 else 2.0 * a0
        else:
            d = G.copy().scale(-1.0)
            slope = -g2
            alpha = step if opts.step_rule in ("fixed", "strong-convexity") else (
                alpha_prev if step is None else step)
        tol_J = 1e-13 * max(1.0, abs(J))
        # release gradient fields before the line search allocates new ones
        G = trial = None
        for _ in range(40):
            new = None
            new = problem.evaluate(U, D=d, alpha=alpha, grad=True)
            if opts.step_rule in ("fixed", "strong-convexity") or new.cost <= J + opts.c1 * alpha * slope:
                break
            # near the rounding floor of J, accept only steps that do not overshoot along d
            if new.cost <= J + tol_J and abs(ControlField(tree, new.grad).inner(d)) <= abs(slope):
                break
            alpha *= opts.shrink
        else:
            raise NumericalError(f"no cost decrease along the search direction at iteration {it}")
        U.axpy(alpha, d)
        if opts.step_rule == "backtracking":
            alpha_prev = alpha / opts.shrink
        else:
            alpha_prev = alpha
        G = ControlField(tree, new.grad)
        J = new.cost
        history.append(J)
        g2_old = g2
        log.debug("iter %d cost %.16e rms grad %.3e step %.3e", it, J, G.rms(), alpha)
    return U, J, G, it, history, converged


def solve_mfc(spec, init, tree, noise, opts=None, initial_control=None):
    """Optimal open-loop-on-tree control by adjoint gradient descent."""
    opts = SolveOptions() if opts is None else opts
    if opts.backend == "feedback-parametric":
        return solve_feedback(spec, init, tree, noise, "affine", opts)
    t_start = time.perf_counter()
    margin = check_convexity_margin(spec)
    if margin <= 0:
        if not opts.allow_nonconvex:
            raise SolvabilityError(f"convexity margin {margin:.6g} is not positive")
        log.warning("solving with non-positive convexity margin %.6g", margin)
    X0 = _as_roots(init)
    problem = _Problem(MeanFieldObjective(spec), tree, noise, X0, opts.workers)
    U0 = ControlField.zeros(tree, X0.shape[1], X0.shape[2]) if initial_control is None else initial_control.copy()
    U, J, G, iters, history, converged = minimize_control(problem, U0, opts, spec.lam, margin)
    if not converged:
        log.warning("solver stopped after %d iterations with rms gradient %.3e", iters, G.rms())
    grad_norm = G.rms()
    del G
    final = problem.evaluate(U, keep_states=True, keep_adjoint=opts.store_adjoint)
    if final.cost != J:
        raise NumericalError("final cost evaluation differs from the last iterate")
    adjoint = AdjointField(tree, final.adjoint, final.Z0)
    return OptimalSolution(
        control=U, ensemble=ParticleEnsemble(tree, final.states), adjoint=adjoint, value=J,
        grad_norm=grad_norm, iterations=iters, spec=spec, tree=tree, noise=noise, converged=converged,
        history=history, margin=margin, options=opts, runtime=time.perf_counter() - t_start,
    )


def value(spec, solution):
    """Value of the problem at its computed optimum."""
    return solution.value


# ---------------------------------------------------------------------------
# feedback-parametric backend

def _policy_controls(theta, k, X):
    """Affine policy u = A x + B mean + c at level ``k`` for states X (nodes, N, n)."""
    A, B, c = theta["A"][k], theta["B"][k], theta["c"][k]
    mean = X.mean(axis=1, keepdims=True)
    return X @ A.T + mean @ B.T + c


def _rollout(spec, tree, noise, X0, theta):
    """Closed-loop simulation under an affine policy; returns (states, control field)."""
    from ._engine import _children

    states = [X0]
    U = []
    for k in range(tree.K):
        Xk = states[k]
        Uk = _policy_controls(theta, k, Xk)
        U.append(Uk)
        states.append(_children(Xk + tree.dt * Uk, k + 1, 0, Xk.shape[0], noise, spec.sigma, spec.beta, tree))
    return states, ControlField(tree, U)


def _fit_policy(tree, states, targets, k):
    X = states[k]
    M, N, n = X.shape
    mean = np.broadcast_to(X.mean(axis=1, keepdims=True), X.shape)
    Phi = np.concatenate([X, mean, np.ones((M, N, 1))], axis=2).reshape(M * N, 2 * n + 1)
    w = np.sqrt(np.repeat(tree.level_probs(k), N) / N)
    Y = targets.reshape(M * N, n)
    coef, *_ = np.linalg.lstsq(Phi * w[:, None], Y * w[:, None], rcond=1e-12)
    return coef[:n].T, coef[n:2 * n].T, coef[2 * n]


def solve_feedback(spec, init, tree, noise, policy_class="affine", opts=None):
    """Affine feedback policy by damped projected Hamiltonian fixed-point iteration.

    Each iteration rolls out the current policy, computes the adjoint of the
    realized controls, minimizes the Lagrangian pointwise with the child
    averaged adjoint and fits the minimizers by weighted least squares in
    ``(x, conditional mean, 1)`` at every step. The update is damped until
    the closed-loop cost does not increase.
    """
    opts = SolveOptions() if opts is None else opts
    if policy_class != "affine":
        raise ValueError("only the affine policy class is available")
    t_start = time.perf_counter()
    margin = check_convexity_margin(spec)
    if margin <= 0 and not opts.allow_nonconvex:
        raise SolvabilityError(f"convexity margin {margin:.6g} is not positive")
    X0 = _as_roots(init)
    n, K = X0.shape[2], tree.K
    theta = {"A": np.zeros((K, n, n)), "B": np.zeros((K, n, n)), "c": np.zeros((K, n))}
    obj = MeanFieldObjective(spec)

    def assess(th):
        states, U = _rollout(spec, tree, noise, X0, th)
        ev = _engine.evaluate(obj, tree, noise, X0, U.levels, grad=True)
        return states, U, ev

    states, U, ev = assess(theta)
    history = [ev.cost]
    s = 1.0
    ups = 0
    converged = False
    it = 0
    for it in range(opts.max_iters + 1):
        G = ControlField(tree, ev.grad)
        if G.rms() <= opts.grad_tol:
            converged = True
            break
        if it == opts.max_iters:
            break
        target = {"A": np.empty_like(theta["A"]), "B": np.empty_like(theta["B"]), "c": np.empty_like(theta["c"])}
        for k in range(K):
            Xk, Uk = states[k], U.levels[k]
            Zbar = ev.grad[k] - spec.l_v(Xk, Uk)
            uk, _, _ = minimize_lagrangian(spec, Xk, Zbar, v0=Uk)
            target["A"][k], target["B"][k], target["c"][k] = _fit_policy(tree, states, uk, k)
        for _ in range(60):
            trial = {key: theta[key] + s * (target[key] - theta[key]) for key in theta}
            t_states, t_U, t_ev = assess(trial)
            if t_ev.cost <= ev.cost + 1e-13 * max(1.0, abs(ev.cost)):
                break
            s *= 0.5
            ups += 1
            if ups >= 3:
                log.debug("feedback iteration damped to step %.3e", s)
        else:
            raise NumericalError("feedback iteration failed to decrease the cost")
        theta, states, U, ev = trial, t_states, t_U, t_ev
        history.append(ev.cost)
        s = min(1.0, 2.0 * s)
        ups = 0
    final = _engine.evaluate(obj, tree, noise, X0, U.levels, keep_states=True, keep_adjoint=opts.store_adjoint)
    G = ControlField(tree, ev.grad)
    return OptimalSolution(
        control=U, ensemble=ParticleEnsemble(tree, final.states), adjoint=AdjointField(tree, final.adjoint, final.Z0),
        value=final.cost, grad_norm=G.rms(), iterations=it, spec=spec, tree=tree, noise=noise,
        converged=converged, history=history, margin=margin, options=opts,
        runtime=time.perf_counter() - t_start, policy=theta,
    )


# ---------------------------------------------------------------------------
# estimator interface

class MFCSolver(BaseEstimator):
    """Estimator-style front end: ``fit`` solves the problem from an initial particle cloud.

    Parameters:
        problem: ProblemSpec to solve.
        K: number of time steps on [t0, problem.T].
        t0: start time.
        branching: common-noise branching per coordinate.
        tree_mode: ``binomial`` or ``gaussian-quadrature``.
        seed: seed of the idiosyncratic noise.
        center_noise: center sibling increments (defaults to True when branching > 1).
        grad_tol, max_iters, step_rule, backend: solver options.
        store_adjoint: keep all adjoint levels in ``adjoint_``.
        workers: number of worker threads.

    Attributes after ``fit``: ``solution_``, ``value_``, ``control_``,
    ``adjoint_``, ``ensemble_``, ``grad_norm_``, ``n_iter_``, ``tree_``.
    """

    def __init__(self, problem=None, K=16, t0=0.0, branching=2, tree_mode="binomial", seed=0, center_noise=None,
                 grad_tol=1e-8, max_iters=200, step_rule="cg", backend="open-loop-tree", store_adjoint=True,
                 workers=1):
        self.problem = problem
        self.K = K
        self.t0 = t0
        self.branching = branching
        self.tree_mode = tree_mode
        self.seed = seed
        self.center_noise = center_noise
        self.grad_tol = grad_tol
        self.max_iters = max_iters
        self.step_rule = step_rule
        self.backend = backend
        self.store_adjoint = store_adjoint
        self.workers = workers

    def _options(self):
        return SolveOptions(max_iters=self.max_iters, grad_tol=self.grad_tol, step_rule=self.step_rule,
                            backend=self.backend, store_adjoint=self.store_adjoint, workers=self.workers)

    def _validate(self, X):
        if self.problem is None:
            raise ValueError("MFCSolver needs a problem")
        X = check_array(X, ensure_2d=False, dtype=np.float64)
        if X.ndim == 1:
            X = X[:, None]
        if X.shape[1] != self.problem.n:
            raise ValueError(f"particles have dimension {X.shape[1]}, problem has {self.problem.n}")
        return X

    def fit(self, X, y=None):
        X = self._validate(X)
        spec = self.problem
        grid = TimeGrid(self.t0, spec.T, self.K)
        tree = build_tree(grid, self.branching, self.tree_mode, spec.n)
        noise = draw_noise(tree, X.shape[0], self.seed, self.center_noise, workers=self.workers)
        sol = solve_mfc(spec, X, tree, noise, self._options())
        self.solution_ = sol
        self.tree_ = tree
        self.value_ = sol.value
        self.control_ = sol.control
        self.adjoint_ = sol.adjoint
        self.ensemble_ = sol.ensemble
        self.grad_norm_ = sol.grad_norm
        self.n_iter_ = sol.iterations
        self.fitted_particles_ = X
        return self

    def predict(self, X):
        """Optimal first-step control for the particle cloud ``X`` (re-solved if it differs)."""
        check_is_fitted(self, "solution_")
        X = self._validate(X)
        if X.shape == self.fitted_particles_.shape and np.array_equal(X, self.fitted_particles_):
            return np.array(self.control_.levels[0][0])
        return np.array(replace_params(self).fit(X).control_.levels[0][0])

    def score(self, X, y=None):
        """Negative optimal cost of the cloud ``X``."""
        check_is_fitted(self, "solution_")
        X = self._validate(X)
        if X.shape == self.fitted_particles_.shape and np.array_equal(X, self.fitted_particles_):
            return -self.value_
        return -replace_params(self).fit(X).value_


def replace_params(est):
    from sklearn.base import clone

    return clone(est)
