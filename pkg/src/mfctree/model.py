"""Problem definitions: running/terminal costs, mean-field couplings, noise constants.

Measure functionals act on batches of conditional measures. A batch is an
array ``X`` of shape ``(..., N, n)`` holding ``N`` atoms per measure, with
optional weights ``w`` of shape ``(..., N)`` (uniform when omitted). Cost
callbacks are vectorized over leading axes: ``l(x, v)`` takes arrays of shape
``(..., n)`` and returns shape ``(...)``.
"""
from dataclasses import dataclass, field, replace

import numpy as np

from .measure_core import mix


class ConfigurationError(ValueError):
    """A required callback or derivative is missing from a problem definition."""


def _wmean(X, w):
    if w is None:
        return X.mean(axis=-2)
    return np.einsum("...i,...id->...d", w, X)


def _weights_of(m):
    return None if m.is_equal_weight() else m.weights


class MeasureFunctional:
    """A smooth functional F(m) with its flat and Lions-type derivatives.

    Subclasses implement the batched methods below. ``dnu`` is the flat
    derivative dF/dnu normalized to integrate to zero against ``m``;
    ``grad_dnu`` and ``hess_dnu`` are its first and second x-derivatives;
    ``cross_kernel`` is the mixed derivative D_x D_x1 of d^2F/dnu^2.
    """

    has_hess = True
    has_cross = True

    def value(self, X, w=None):
        raise NotImplementedError

    def dnu(self, X, x, w=None):
        raise NotImplementedError

    def grad_dnu(self, X, x, w=None):
        raise NotImplementedError

    def hess_dnu(self, X, x, w=None):
        raise ConfigurationError(f"{type(self).__name__} provides no hess_dnu")

    def cross_kernel(self, X, x, x1, w=None):
        raise ConfigurationError(f"{type(self).__name__} provides no cross_kernel")

    def hess_action(self, X, dX, w=None):
        """Per-atom action of the second variation on the displacement ``dX``.

        Returns ``hess_dnu(x_i) dX_i + sum_l w_l cross_kernel(x_i, x_l) dX_l``,
        so that ``sum_i w_i dX_i . hess_action_i`` is the second derivative of
        ``F`` along ``X + t dX``. The generic version costs O(N^2) per measure.
        """
        H = self.hess_dnu(X, X, w)
        out = np.einsum("...ide,...ie->...id", H, dX)
        N = X.shape[-2]
        wts = np.full(X.shape[:-1], 1.0 / N) if w is None else w
        xi = np.broadcast_to(X[..., :, None, :], X.shape[:-1] + (N, X.shape[-1]))
        xl = np.broadcast_to(X[..., None, :, :], xi.shape)
        K = self.cross_kernel(X, xi, xl, w)
        out += np.einsum("...ilde,...l,...le->...id", K, wts, dX)
        return out

    # measure-level conveniences
    def __call__(self, m):
        return float(self.value(m.points, _weights_of(m)))

    def derivative_at(self, m, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return self.dnu(m.points, x, _weights_of(m))

    def __add__(self, other):
        return SumFunctional([self, other])


class PotentialFunctional(MeasureFunctional):
    """F(m) = integral of phi against m (linear in m)."""

    def __init__(self, phi, dphi, d2phi=None):
        self.phi, self.dphi, self.d2phi = phi, dphi, d2phi
        self.has_hess = d2phi is not None

    def value(self, X, w=None):
        vals = self.phi(X)
        return vals.mean(axis=-1) if w is None else np.sum(w * vals, axis=-1)

    def dnu(self, X, x, w=None):
        return self.phi(x) - self.value(X, w)[..., None]

    def grad_dnu(self, X, x, w=None):
        return self.dphi(x)

    def hess_dnu(self, X, x, w=None):
        if self.d2phi is None:
            return super().hess_dnu(X, x, w)
        return self.d2phi(x)

    def cross_kernel(self, X, x, x1, w=None):
        n = x.shape[-1]
        return np.zeros(x.shape + (n,))

    def hess_action(self, X, dX, w=None):
        return np.einsum("...ide,...ie->...id", self.hess_dnu(X, X, w), dX)


class MeanFunctional(MeasureFunctional):
    """F(m) = g(mean of m) for a smooth g on R^n."""

    def __init__(self, g, dg, d2g=None):
        self.g, self.dg, self.d2g = g, dg, d2g
        self.has_hess = True
        self.has_cross = d2g is not None

    def value(self, X, w=None):
        return self.g(_wmean(X, w))

    def dnu(self, X, x, w=None):
        mu = _wmean(X, w)
        return np.einsum("...d,...id->...i", self.dg(mu), x - mu[..., None, :])

    def grad_dnu(self, X, x, w=None):
        mu = _wmean(X, w)
        return np.broadcast_to(self.dg(mu)[..., None, :], x.shape).copy()

    def hess_dnu(self, X, x, w=None):
        n = x.shape[-1]
        return np.zeros(x.shape + (n,))

    def cross_kernel(self, X, x, x1, w=None):
        if self.d2g is None:
            return super().cross_kernel(X, x, x1, w)
        K = self.d2g(_wmean(X, w))
        extra = x.ndim - X.ndim
        K = K.reshape(K.shape[:-2] + (1,) * (extra + 1) + K.shape[-2:])
        return np.broadcast_to(K, x.shape + (x.shape[-1],)).copy()

    def hess_action(self, X, dX, w=None):
        if self.d2g is None:
            raise ConfigurationError("MeanFunctional without d2g has no cross kernel")
        K = self.d2g(_wmean(X, w))
        dmu = _wmean(dX, w)
        return np.broadcast_to(np.einsum("...de,...e->...d", K, dmu)[..., None, :], dX.shape).copy()


class SumFunctional(MeasureFunctional):
    def __init__(self, terms):
        flat = []
        for t in terms:
            flat.extend(t.terms if isinstance(t, SumFunctional) else [t])
        self.terms = flat
        self.has_hess = all(t.has_hess for t in flat)
        self.has_cross = all(t.has_cross for t in flat)

    def value(self, X, w=None):
        return sum(t.value(X, w) for t in self.terms)

    def dnu(self, X, x, w=None):
        return sum(t.dnu(X, x, w) for t in self.terms)

    def grad_dnu(self, X, x, w=None):
        return sum(t.grad_dnu(X, x, w) for t in self.terms)

    def hess_dnu(self, X, x, w=None):
        return sum(t.hess_dnu(X, x, w) for t in self.terms)

    def cross_kernel(self, X, x, x1, w=None):
        return sum(t.cross_kernel(X, x, x1, w) for t in self.terms)

    def hess_action(self, X, dX, w=None):
        return sum(t.hess_action(X, dX, w) for t in self.terms)


class ZeroFunctional(MeasureFunctional):
    def value(self, X, w=None):
        return np.zeros(X.shape[:-2])

    def dnu(self, X, x, w=None):
        return np.zeros(x.shape[:-1])

    def grad_dnu(self, X, x, w=None):
        return np.zeros(x.shape)

    def hess_dnu(self, X, x, w=None):
        return np.zeros(x.shape + (x.shape[-1],))

    def cross_kernel(self, X, x, x1, w=None):
        return np.zeros(x.shape + (x.shape[-1],))

    def hess_action(self, X, dX, w=None):
        return np.zeros(dX.shape)


def _eye_like(x):
    n = x.shape[-1]
    return np.broadcast_to(np.eye(n), x.shape + (n,)).copy()


def linear_functional(a):
    """F(m) = a . integral x dm."""
    a = np.atleast_1d(np.asarray(a, dtype=float))
    return PotentialFunctional(
        lambda x: x @ a,
        lambda x: np.broadcast_to(a, x.shape).copy(),
        lambda x: np.zeros(x.shape + (x.shape[-1],)),
    )


def moment_functional(c=1.0):
    """F(m) = c integral |x|^2 dm."""
    return PotentialFunctional(
        lambda x: c * np.sum(x * x, axis=-1),
        lambda x: 2.0 * c * x,
        lambda x: 2.0 * c * _eye_like(x),
    )


def mean_square_functional(c=1.0):
    """F(m) = c |integral x dm|^2."""
    return MeanFunctional(
        lambda mu: c * np.sum(mu * mu, axis=-1),
        lambda mu: 2.0 * c * mu,
        lambda mu: 2.0 * c * _eye_like(mu),
    )


def variance_functional(kappa):
    """F(m) = kappa/2 times the variance (trace of covariance) of m."""
    return SumFunctional([moment_functional(0.5 * kappa), mean_square_functional(-0.5 * kappa)])


def mean_coupling(kappa_bar):
    """F(m) = kappa_bar/2 |mean(m)|^2."""
    return mean_square_functional(0.5 * kappa_bar)


def _zero_matrix(x):
    return np.zeros(x.shape + (x.shape[-1],))


@dataclass(frozen=True, eq=False)
class ProblemSpec:
    """Mean field control problem data.

    Cost callbacks are vectorized over leading axes. ``l_xv[..., a, b]`` is
    the mixed derivative with respect to ``x_a`` and ``v_b``. The primed
    constants are the declared lower-bound constants entering the convexity
    margin; ``lam`` is the strong convexity of ``l`` in ``v``.
    """

    n: int
    T: float
    l: object
    l_x: object
    l_v: object
    h: object
    h_x: object
    F: MeasureFunctional = field(default_factory=ZeroFunctional)
    F_T: MeasureFunctional = field(default_factory=ZeroFunctional)
    sigma: object = 0.0
    beta: float = 0.0
    lam: float = 1.0
    c_l_prime: float = 0.0
    c_h_prime: float = 0.0
    c_prime: float = 0.0
    c_T_prime: float = 0.0
    l_xx: object = None
    l_xv: object = None
    l_vv: object = None
    h_xx: object = None
    name: str = "custom"
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        n = int(self.n)
        if n < 1:
            raise ValueError("dimension n must be >= 1")
        sig = np.asarray(self.sigma, dtype=float)
        if sig.ndim == 0:
            sig = sig * np.eye(n)
        if sig.shape != (n, n) or not np.all(np.isfinite(sig)):
            raise ValueError("sigma must be a finite n x n matrix")
        sig.setflags(write=False)
        object.__setattr__(self, "sigma", sig)
        object.__setattr__(self, "n", n)
        if not self.lam > 0:
            raise ValueError("lam must be positive")
        if not self.beta >= 0:
            raise ValueError("beta must be nonnegative")
        if not self.T > 0:
            raise ValueError("horizon T must be positive")

    @property
    def has_second_order(self):
        return all(f is not None for f in (self.l_xx, self.l_xv, self.l_vv, self.h_xx))

    def with_changes(self, **changes):
        return replace(self, **changes)


def check_convexity_margin(spec):
    """Solvability margin lam - T (c_T' + c_h') - (c' + c_l') T^2 / 2."""
    T = spec.T
    return spec.lam - T * (spec.c_T_prime + spec.c_h_prime) - 0.5 * (spec.c_prime + spec.c_l_prime) * T**2


@dataclass
class ValidationReport:
    name: str
    passed: bool
    observed: float
    tolerance: float
    details: dict = field(default_factory=dict)


def validate_functional_derivative(Fn, m, m2, eps_list, rtol=1e-6, min_order=0.9):
    """Check the flat derivative of ``Fn`` along the mixture direction m -> m2.

    The difference quotient (F(m + eps (m2 - m)) - F(m)) / eps is compared with
    the integral of dF/dnu(m) against (m2 - m). The check passes when the
    errors are negligible at every eps, or when they decay with fitted order
    at least ``min_order`` and the smallest-eps error is below ``rtol * 10^3``.
    """
    eps = np.asarray(eps_list, dtype=float)
    if eps.ndim != 1 or len(eps) < 2 or np.any(eps <= 0) or np.any(np.diff(eps) >= 0):
        raise ValueError("eps_list must be strictly decreasing and positive")
    base = Fn(m)
    target = float(np.dot(m2.weights, Fn.derivative_at(m, m2.points)) - np.dot(m.weights, Fn.derivative_at(m, m.points)))
    quotients = np.array([(Fn(mix(m, m2, e)) - base) / e for e in eps])
    errors = np.abs(quotients - target)
    scale = 1.0 + abs(target)
    if np.all(errors <= rtol * scale):
        order, passed = float("inf"), True
    else:
        ok = errors > 1e-14 * scale
        if ok.sum() >= 2:
            order = float(np.polyfit(np.log(eps[ok]), np.log(errors[ok]), 1)[0])
        else:
            order = 0.0
        passed = order >= min_order and errors[-1] <= 1e3 * rtol * scale
    return ValidationReport(
        "functional_derivative", bool(passed), float(errors[-1]), rtol,
        {"eps": eps.tolist(), "quotients": quotients.tolist(), "target": target, "order": order},
    )


def validate_pointwise_gradients(spec, sample_count=20, rng_seed=0, step=1e-5, rtol=1e-6):
    """Central finite differences of l and h against l_x, l_v and h_x at random points."""
    rng = np.random.default_rng(rng_seed)
    n = spec.n
    worst = {"l_x": 0.0, "l_v": 0.0, "h_x": 0.0}
    eye = np.eye(n)
    for _ in range(sample_count):
        x, v = rng.normal(size=n), rng.normal(size=n)
        fd_lx = np.array([(spec.l(x + step * e, v) - spec.l(x - step * e, v)) / (2 * step) for e in eye])
        fd_lv = np.array([(spec.l(x, v + step * e) - spec.l(x, v - step * e)) / (2 * step) for e in eye])
        fd_hx = np.array([(spec.h(x + step * e) - spec.h(x - step * e)) / (2 * step) for e in eye])
        for key, fd, an in (("l_x", fd_lx, spec.l_x(x, v)), ("l_v", fd_lv, spec.l_v(x, v)), ("h_x", fd_hx, spec.h_x(x))):
            an = np.asarray(an, dtype=float)
            err = float(np.max(np.abs(fd - an)) / max(1.0, float(np.max(np.abs(an)))))
            worst[key] = max(worst[key], err)
    observed = max(worst.values())
    return ValidationReport("pointwise_gradients", observed <= rtol, observed, rtol, worst)


# ---------------------------------------------------------------------------
# built-in problem families

def _sq(x):
    if x.shape[-1] == 1:
        return np.square(x[..., 0])
    return np.einsum("...i,...i->...", x, x)


def quadratic_running_cost(n, q=0.0, lam=1.0, target=None):
    """l(x, v) = lam/2 |v|^2 + q/2 |x - target|^2 with all derivatives."""
    a = np.zeros(n) if target is None else np.broadcast_to(np.asarray(target, dtype=float), (n,)).copy()
    centered = not np.any(a)

    def dev(x):
        return x if centered else x - a

    return dict(
        l=lambda x, v: 0.5 * lam * _sq(v) + 0.5 * q * _sq(dev(x)),
        l_x=lambda x, v: q * dev(x),
        l_v=lambda x, v: lam * v,
        l_xx=lambda x, v: q * _eye_like(x),
        l_xv=lambda x, v: _zero_matrix(x),
        l_vv=lambda x, v: lam * _eye_like(x),
    )


def quadratic_terminal_cost(q_T=0.0):
    return dict(
        h=lambda x: 0.5 * q_T * _sq(x),
        h_x=lambda x: q_T * x,
        h_xx=lambda x: q_T * _eye_like(x),
    )


def quadratic_mean_problem(n=1, T=1.0, q=0.0, q_T=0.0, kappa_bar=1.0, kappa_bar_T=0.0, lam=1.0,
                           target=0.0, sigma=0.0, beta=0.0):
    """Quadratic costs with a running pull of each state toward ``target``
    and quadratic penalties on the conditional mean."""
    return ProblemSpec(
        n=n, T=T, sigma=sigma, beta=beta, lam=lam,
        F=mean_coupling(kappa_bar), F_T=mean_coupling(kappa_bar_T),
        name="quadratic-mean",
        params=dict(n=n, T=T, q=q, q_T=q_T, kappa_bar=kappa_bar, kappa_bar_T=kappa_bar_T, lam=lam,
                    target=target, sigma=sigma, beta=beta),
        **quadratic_running_cost(n, q, lam, np.full(n, target)), **quadratic_terminal_cost(q_T),
    )


def double_well_problem(n=1, T=1.0, w=0.2, lam=1.0, q_T=0.5, kappa=0.5, kappa_bar=0.0, sigma=0.3, beta=0.0):
    """Running cost lam/2 |v|^2 + w/4 (|x|^2 - 1)^2 (non-convex in x).

    The smallest eigenvalue of the x-Hessian of the well is -w, which is the
    declared c_l' constant.
    """
    def l(x, v):
        r = np.sum(x * x, axis=-1)
        return 0.5 * lam * np.sum(v * v, axis=-1) + 0.25 * w * (r - 1.0) ** 2

    def l_x(x, v):
        r = np.sum(x * x, axis=-1, keepdims=True)
        return w * (r - 1.0) * x + 0.0 * v

    def l_xx(x, v):
        r = np.sum(x * x, axis=-1)[..., None, None]
        return w * ((r - 1.0) * _eye_like(x) + 2.0 * x[..., :, None] * x[..., None, :])

    F = variance_functional(kappa) + mean_coupling(kappa_bar)
    return ProblemSpec(
        n=n, T=T, sigma=sigma, beta=beta, lam=lam, c_l_prime=w,
        l=l, l_x=l_x, l_v=lambda x, v: lam * v + 0.0 * x,
        l_xx=l_xx, l_xv=lambda x, v: _zero_matrix(x), l_vv=lambda x, v: lam * _eye_like(x),
        F=F, F_T=ZeroFunctional(), name="double-well-running-cost",
        params=dict(n=n, T=T, w=w, lam=lam, q_T=q_T, kappa=kappa, kappa_bar=kappa_bar, sigma=sigma, beta=beta),
        **quadratic_terminal_cost(q_T),
    )


def random_smooth_problem(seed, n=1, T=1.0):
    """Randomly weighted smooth problem with nonlinear costs and couplings.

    Running cost ``lam/2|v|^2 + a/2|x|^2 + b sum cos(x) + c x.v``, terminal
    ``q_T/2|x|^2 + d sum sin(x)``, running coupling variance + mean square +
    a cosine potential, terminal coupling ``f log(1 + |mean|^2)``.
    """
    r = np.random.default_rng([int(seed), 911])
    lam, a, b, c, d = 1.0 + r.uniform(0, 1), r.uniform(0, 1), r.uniform(-0.3, 0.3), r.uniform(-0.2, 0.2), r.uniform(-0.3, 0.3)
    q_T, kappa, kappa_bar, e, w, f = r.uniform(0, 1), r.uniform(0, 1), r.uniform(0, 1), r.uniform(-0.3, 0.3), r.uniform(0.5, 2), r.uniform(0, 0.5)
    sigma = np.diag(r.uniform(0.1, 0.5, n))
    beta = float(r.uniform(0.0, 0.4))
    c_l, c_h, c_m, c_T = abs(b) + abs(c), abs(d), abs(e) * w * w, 2 * f
    # keep the convexity margin at least 1/2 whatever the draws
    lam = max(lam, 0.5 + T * (c_T + c_h) + 0.5 * (c_m + c_l) * T**2)

    def l(x, v):
        return 0.5 * lam * _sq(v) + 0.5 * a * _sq(x) + b * np.sum(np.cos(x), axis=-1) + c * np.sum(x * v, axis=-1)

    cosine = PotentialFunctional(
        lambda x: e * np.sum(np.cos(w * x), axis=-1),
        lambda x: -e * w * np.sin(w * x),
        lambda x: -e * w * w * np.cos(w * x)[..., None] * np.eye(x.shape[-1]),
    )

    def g(mu):
        return f * np.log1p(_sq(mu))

    def dg(mu):
        return 2.0 * f * mu / (1.0 + _sq(mu))[..., None]

    def d2g(mu):
        s = (1.0 + _sq(mu))[..., None, None]
        return 2.0 * f * (_eye_like(mu) / s - 2.0 * mu[..., :, None] * mu[..., None, :] / s**2)

    return ProblemSpec(
        n=n, T=T, sigma=sigma, beta=beta, lam=lam,
        l=l,
        l_x=lambda x, v: a * x - b * np.sin(x) + c * v,
        l_v=lambda x, v: lam * v + c * x,
        l_xx=lambda x, v: a * _eye_like(x) - b * np.cos(x)[..., None] * np.eye(x.shape[-1]),
        l_xv=lambda x, v: c * _eye_like(x),
        l_vv=lambda x, v: lam * _eye_like(x),
        h=lambda x: 0.5 * q_T * _sq(x) + d * np.sum(np.sin(x), axis=-1),
        h_x=lambda x: q_T * x + d * np.cos(x),
        h_xx=lambda x: q_T * _eye_like(x) - d * np.sin(x)[..., None] * np.eye(x.shape[-1]),
        F=variance_functional(kappa) + mean_coupling(kappa_bar) + cosine, F_T=MeanFunctional(g, dg, d2g),
        c_l_prime=c_l, c_h_prime=c_h, c_prime=c_m, c_T_prime=c_T,
        name="random-smooth", params=dict(seed=int(seed), n=n, T=T),
    )


def _lq_family(**params):
    from .lq_oracle import LQSpec

    return LQSpec(**params).to_problem()


_FAMILIES = {
    "lq": _lq_family,
    "quadratic-mean": quadratic_mean_problem,
    "double-well-running-cost": double_well_problem,
    "random-smooth": random_smooth_problem,
}


def register_family(name, builder):
    """Register a named problem family; ``builder(**params)`` returns a ProblemSpec."""
    if name in _FAMILIES:
        raise ValueError(f"problem family {name!r} already registered")
    _FAMILIES[name] = builder


def make_problem(name, **params):
    try:
        builder = _FAMILIES[name]
    except KeyError:
        raise ConfigurationError(f"unknown problem family {name!r}; known: {sorted(_FAMILIES)}") from None
    return builder(**params)


def family_names():
    return sorted(_FAMILIES)
