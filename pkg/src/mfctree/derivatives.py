"""First derivative, tagged-particle functional derivative and directional second derivatives of the value."""
import logging
from dataclasses import dataclass, field

import numpy as np

from . import _engine, _rng
from ._engine import LinearizedObjective, TaggedObjective
from .dynamics import ControlField, NumericalError, ParticleEnsemble, draw_noise
from .model import ConfigurationError, check_convexity_margin
from .solver import SolveOptions, SolvabilityError, _Problem, minimize_control, solve_mfc

log = logging.getLogger(__name__)


class SkippedError(RuntimeError):
    """A derivative needs callbacks the problem does not provide."""


def _require_converged(solution):
    if not solution.converged:
        raise NumericalError("derivatives need a converged solution")
    if solution.ensemble is None or solution.ensemble.levels is None:
        raise ValueError("solution does not hold its state levels")


def first_derivative(solution):
    """D_X V at the initial cloud: the root adjoint Z[0], shape (N, n) (or (roots, N, n) for forests)."""
    _require_converged(solution)
    Z0 = np.asarray(solution.Z0)
    return Z0[0] if Z0.shape[0] == 1 else Z0


# ---------------------------------------------------------------------------
# tagged particle problem

@dataclass(eq=False)
class TaggedSolution:
    """Tagged particle optimum along the frozen flow of a base solution.

    ``U[i]`` is the normalized functional derivative at ``points[i]``
    (its average over the base cloud is zero), ``DU[i]`` its x-gradient,
    ``raw_costs`` the unnormalized tagged costs.
    """

    points: np.ndarray
    U: np.ndarray
    DU: np.ndarray
    raw_costs: np.ndarray
    support_U: np.ndarray
    support_DU: np.ndarray
    tagged_path: ParticleEnsemble = field(repr=False, default=None)
    control: ControlField = field(repr=False, default=None)
    frozen_flow: object = field(repr=False, default=None)
    grad_norm: float = 0.0
    iterations: int = 0


def _tag_noise(base, seed):
    tree = base.tree
    if base.spec.sigma.any():
        return draw_noise(tree, 1, seed, base.noise.center if base.noise is not None else None,
                          channel=_rng.CHANNEL_TAG)
    return None


def tagged_solve(spec, base, x, seed=None, opts=None, include_support=True):
    """Solve the tagged particle problem for the points ``x`` (shape (M, n) or (n,)).

    All tags share one idiosyncratic noise draw, so U and DU are smooth in x.
    The base cloud is tagged as well to fix the normalization of U.

    Parameters:
        spec: problem (needs F.dnu and F.grad_dnu).
        base: converged OptimalSolution whose conditional measures are frozen.
        x: tag starting points.
        seed: seed of the tag noise (defaults to the base noise seed).
        opts: SolveOptions for the tagged minimization.
    """
    _require_converged(base)
    for Fn in (spec.F, spec.F_T):
        if not callable(getattr(Fn, "dnu", None)) or not callable(getattr(Fn, "grad_dnu", None)):
            raise ConfigurationError("tagged problem needs dnu and grad_dnu")
    opts = SolveOptions(grad_tol=base.options.grad_tol if base.options else 1e-8) if opts is None else opts
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if x.shape[-1] != spec.n:
        raise ValueError("tag points must have the problem dimension")
    tree = base.tree
    X0 = np.asarray(base.ensemble.levels[0])
    R, N, n = X0.shape
    M = x.shape[0]
    tags = np.concatenate([np.broadcast_to(x, (R, M, n)), X0], axis=1) if include_support else \
        np.broadcast_to(x, (R, M, n)).copy()
    seed = (base.noise.seed if base.noise is not None else 0) if seed is None else seed
    noise = _tag_noise(base, seed)
    obj = TaggedObjective(spec, base.ensemble.levels)
    problem = _Problem(obj, tree, noise, tags, opts.workers)
    U0 = ControlField.zeros(tree, tags.shape[1], n)
    U, J, G, iters, history, converged = minimize_control(problem, U0, opts, spec.lam)
    if not converged:
        log.warning("tagged problem stopped with rms gradient %.3e", G.rms())
    final = problem.evaluate(U, grad=True, keep_states=True, per_particle=True)
    costs = final.particle_costs  # (R, tags)
    Z0 = final.Z0
    if include_support:
        shift = costs[:, M:].mean(axis=1, keepdims=True)
    else:
        shift = np.zeros((R, 1))
    Un = costs - shift
    squeeze = (lambda a: a[0]) if R == 1 else (lambda a: a)
    return TaggedSolution(
        points=x, U=squeeze(Un[:, :M]), DU=squeeze(Z0[:, :M]), raw_costs=squeeze(costs[:, :M]),
        support_U=squeeze(Un[:, M:]), support_DU=squeeze(Z0[:, M:]),
        tagged_path=ParticleEnsemble(tree, final.states), control=U, frozen_flow=base,
        grad_norm=G.rms(), iterations=iters,
    )


def perturbed_base(spec, base, x1, copies=1, opts=None):
    """Re-solve the base problem with ``copies`` particles injected at ``x1``.

    The injected particles take the next noise streams of the base draw, so
    the original particles keep their increments. The mixture weight is
    ``copies / (N + copies)``.
    """
    X0 = np.asarray(base.ensemble.levels[0])
    if X0.shape[0] != 1:
        raise ValueError("measure perturbations need a single-root base")
    N, n = X0.shape[1], X0.shape[2]
    x1 = np.broadcast_to(np.asarray(x1, dtype=float), (copies, n))
    init = np.concatenate([X0[0], x1], axis=0)
    noise = None
    if base.noise is not None:
        noise = draw_noise(base.tree, N + copies, base.noise.seed, base.noise.center, base.noise.channel)
    opts = base.options if opts is None else opts
    return solve_mfc(spec, init, base.tree, noise, opts), copies / (N + copies)


def dU_dnu_fd(spec, base, x, x1, eps=None, copies=1, opts=None, tagged_seed=None, base_eps=None):
    """Finite-difference estimate of dU/dnu(x, m)(x1).

    Returns ``(U(x, m_eps) - U(x, m)) / eps`` with ``m_eps = m + eps (delta_x1 - m)``
    realized by injecting ``copies`` particles at ``x1`` (so ``eps = copies/(N+copies)``).
    A precomputed perturbed base can be passed as ``base_eps = (solution, eps)``.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if base_eps is None:
        pb, e = perturbed_base(spec, base, x1, copies, opts)
    else:
        pb, e = base_eps
    if eps is not None and not np.isclose(eps, e):
        raise ValueError(f"eps must equal copies/(N+copies) = {e}")
    U0 = tagged_solve(spec, base, x, tagged_seed).U
    U1 = tagged_solve(spec, pb, x, tagged_seed).U
    out = (U1 - U0) / e
    return float(out[0]) if out.shape[0] == 1 else out


# ---------------------------------------------------------------------------
# second directional derivatives

@dataclass(eq=False)
class SecondDirectional:
    """D^2 V in direction ``direction``: ``result`` = Z(t0) of the linearized system."""

    direction: np.ndarray
    result: np.ndarray
    lq_value: float
    bound_ratio: float
    grad_norm: float = 0.0
    iterations: int = 0
    status: str = "PASS"

    def pair(self, other):
        """<D^2V(direction), other> in the particle pairing (1/N) sum_i a_i . b_i."""
        other = np.asarray(other, dtype=float).reshape(self.result.shape)
        return float(np.sum(self.result * other)) / self.result.shape[-2]


def gaussian_direction(N, n, seed, center=True, whiten=False):
    """Independent standard Gaussian per-particle direction of shape (N, n).

    ``center`` removes the particle mean; ``whiten`` also rescales each
    coordinate to unit empirical variance.
    """
    z = _rng.normal_block(seed, _rng.CHANNEL_DIRECTION, 0, 0, N, n)
    if center:
        z = z - z.mean(axis=0)
    if whiten:
        z = z / np.sqrt(np.mean(z * z, axis=0))
    return z


def constant_direction(N, e):
    e = np.atleast_1d(np.asarray(e, dtype=float))
    return np.broadcast_to(e, (N, e.shape[0])).copy()


def second_directional(spec, base, direction, opts=None):
    """Directional second derivative D^2 V(X0)(direction) via the linearized optimality system.

    Minimizes the second variation of the discrete cost along the base
    optimal path over control variations, with state variations started
    from ``direction`` and driven without noise. Returns the initial
    adjoint of that problem and its optimal value (half the pairing of the
    result with the direction).
    """
    _require_converged(base)
    if check_convexity_margin(spec) <= 0 and not (base.options and base.options.allow_nonconvex):
        raise SolvabilityError("convexity margin is not positive")
    if not spec.has_second_order:
        raise SkippedError("problem lacks second-order cost derivatives")
    for Fn in (spec.F, spec.F_T):
        if not getattr(Fn, "has_hess", True) or not callable(getattr(Fn, "hess_action", None)):
            raise SkippedError("coupling lacks hess_dnu")
    opts = SolveOptions(grad_tol=1e-12, max_iters=500) if opts is None else opts
    tree = base.tree
    X0 = np.asarray(base.ensemble.levels[0])
    d = np.asarray(direction, dtype=float).reshape(X0.shape)
    obj = LinearizedObjective(spec, base.ensemble.levels, base.control.levels)
    problem = _Problem(obj, tree, None, d, opts.workers)
    U0 = ControlField.zeros(tree, X0.shape[1], X0.shape[2])
    U, J, G, iters, history, converged = minimize_control(problem, U0, opts, spec.lam)
    if not converged:
        log.warning("linearized problem stopped with rms gradient %.3e", G.rms())
    final = _engine.evaluate(obj, tree, None, d, U.levels, grad=True)
    Z0 = final.Z0
    norm_d = np.sqrt(np.sum(d * d) / X0.shape[1])
    norm_z = np.sqrt(np.sum(Z0 * Z0) / X0.shape[1])
    result = Z0[0] if Z0.shape[0] == 1 else Z0
    return SecondDirectional(
        direction=d[0] if d.shape[0] == 1 else d, result=result, lq_value=final.cost,
        bound_ratio=float(norm_z / norm_d) if norm_d > 0 else 0.0, grad_norm=G.rms(), iterations=iters,
        status="PASS" if converged else "FAIL",
    )
