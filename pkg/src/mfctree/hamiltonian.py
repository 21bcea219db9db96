"""Pointwise minimization of the Lagrangian L(x, v, p) = l(x, v) + v . p.

The minimizer ``u(x, p)`` is the optimal feedback, ``H(x, p) = L(x, u, p)``
is the Hamiltonian, and by the envelope theorem ``H_p = u`` and
``H_x = l_x(x, u)``.
"""
from dataclasses import dataclass

import numpy as np

from .dynamics import NumericalError

MAX_NEWTON = 50


@dataclass
class HamiltonianEval:
    u_star: np.ndarray
    H: np.ndarray
    H_p: np.ndarray
    H_x: np.ndarray
    newton_iters: int
    residual: float


def _lagrangian(spec, x, v, p):
    return spec.l(x, v) + np.sum(v * p, axis=-1)


def _newton(spec, x, p, v, tol):
    """Damped Newton on v -> l_v(x, v) + p, vectorized over leading axes."""
    iters = 0
    for iters in range(1, MAX_NEWTON + 1):
        r = spec.l_v(x, v) + p
        res = np.max(np.abs(r)) if r.size else 0.0
        if res <= tol:
            return v, res, iters - 1
        if spec.l_vv is None:
            step = -r / spec.lam
        else:
            step = -np.linalg.solve(spec.l_vv(x, v), r[..., None])[..., 0]
        L0 = _lagrangian(spec, x, v, p)
        slope = np.sum(r * step, axis=-1)
        t = np.ones(L0.shape)
        for _ in range(30):
            trial = v + t[..., None] * step
            ok = _lagrangian(spec, x, trial, p) <= L0 + 1e-4 * t * slope + 1e-15 * np.abs(L0)
            # the cost test loses resolution once the decrease is below rounding; fall back to the residual
            ok |= np.max(np.abs(spec.l_v(x, trial) + p), axis=-1) <= (1 - 1e-4 * t) * np.max(np.abs(r), axis=-1)
            if np.all(ok):
                break
            t = np.where(ok, t, 0.5 * t)
        v = v + t[..., None] * step
    r = spec.l_v(x, v) + p
    return v, (np.max(np.abs(r)) if r.size else 0.0), iters


def _gradient_descent(spec, x, p, v, tol, max_iter=2000):
    s = np.full(v.shape[:-1], 1.0 / spec.lam)
    for _ in range(max_iter):
        r = spec.l_v(x, v) + p
        if np.max(np.abs(r)) <= tol:
            break
        L0 = _lagrangian(spec, x, v, p)
        for _ in range(40):
            trial = v - s[..., None] * r
            ok = _lagrangian(spec, x, trial, p) <= L0 - 0.5 * s * np.sum(r * r, axis=-1)
            if np.all(ok):
                break
            s = np.where(ok, s, 0.5 * s)
        v = v - s[..., None] * r
        s = np.minimum(2.0 * s, 1.0 / spec.lam)
    r = spec.l_v(x, v) + p
    return v, float(np.max(np.abs(r)))


def minimize_lagrangian(spec, x, p, tol=1e-10, v0=None):
    """Vectorized minimizer of ``l(x, v) + v . p`` over v; returns (u, residual, iterations)."""
    x = np.asarray(x, dtype=float)
    p = np.asarray(p, dtype=float)
    v = -p / spec.lam if v0 is None else np.array(v0, dtype=float)
    v, res, iters = _newton(spec, x, p, v, tol)
    if res > tol:
        v, res = _gradient_descent(spec, x, p, v, tol)
        if res > tol:
            raise NumericalError(f"Lagrangian minimization stalled with residual {res:.3e} after {iters} Newton steps")
    return v, res, iters


def argmin_lagrangian(spec, x, p, tol=1e-10, v0=None):
    """Minimizer, Hamiltonian value and envelope derivatives at (x, p)."""
    u, res, iters = minimize_lagrangian(spec, x, p, tol, v0)
    p = np.asarray(p, dtype=float)
    H = _lagrangian(spec, np.asarray(x, dtype=float), u, p)
    return HamiltonianEval(u, H, u.copy(), spec.l_x(np.asarray(x, dtype=float), u), iters, float(res))


def hamiltonian(spec, x, p, tol=1e-10):
    """H(x, p) = min_v l(x, v) + v . p (vectorized)."""
    return argmin_lagrangian(spec, x, p, tol).H
