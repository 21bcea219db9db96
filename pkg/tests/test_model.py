import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mfctree.measure_core import EmpiricalMeasure
from mfctree.model import (ConfigurationError, MeanFunctional, PotentialFunctional, ZeroFunctional,
                           check_convexity_margin, double_well_problem, family_names, linear_functional,
                           make_problem, mean_coupling, mean_square_functional, moment_functional,
                           random_smooth_problem, register_family, validate_functional_derivative,
                           validate_pointwise_gradients, variance_functional)
from mfctree.lq_oracle import LQSpec


def functionals(n):
    smooth = random_smooth_problem(3, n=n)
    return {
        "linear": linear_functional(np.linspace(0.5, 1.5, n)),
        "moment": moment_functional(0.7),
        "mean_square": mean_square_functional(1.3),
        "variance": variance_functional(0.8),
        "mean_coupling": mean_coupling(0.6),
        "smooth_running": smooth.F,
        "smooth_terminal": smooth.F_T,
    }


clouds = st.integers(1, 2).flatmap(lambda n: arrays(np.float64, st.tuples(st.integers(2, 8), st.just(n)),
                                                    elements=st.floats(-2, 2)))


@pytest.mark.parametrize("name", list(functionals(1)))
@given(X=clouds, Y=clouds)
def test_flat_derivative_matches_mixture_quotients(name, X, Y):
    if X.shape[1] != Y.shape[1]:
        Y = np.resize(Y, (Y.shape[0], X.shape[1]))
    Fn = functionals(X.shape[1])[name]
    rep = validate_functional_derivative(Fn, EmpiricalMeasure(X), EmpiricalMeasure(Y), [1e-3, 1e-4, 1e-5])
    assert rep.passed, rep.details


@pytest.mark.parametrize("name", list(functionals(2)))
def test_derivative_normalized_and_gradients_consistent(name, rng):
    n = 2
    Fn = functionals(n)[name]
    X = rng.normal(size=(7, n))
    w = rng.uniform(0.5, 1.5, 7)
    w /= w.sum()
    assert w @ Fn.dnu(X, X, w) == pytest.approx(0.0, abs=1e-12)
    x = rng.normal(size=(3, n))
    h = 1e-6
    for j in range(n):
        e = np.zeros(n)
        e[j] = h
        fd = (Fn.dnu(X, x + e, w) - Fn.dnu(X, x - e, w)) / (2 * h)
        np.testing.assert_allclose(Fn.grad_dnu(X, x, w)[:, j], fd, rtol=1e-6, atol=1e-8)
        fd2 = (Fn.grad_dnu(X, x + e, w) - Fn.grad_dnu(X, x - e, w)) / (2 * h)
        np.testing.assert_allclose(Fn.hess_dnu(X, x, w)[:, :, j], fd2, rtol=1e-5, atol=1e-7)


@pytest.mark.parametrize("name", list(functionals(2)))
def test_hess_action_is_second_variation(name, rng):
    n, N = 2, 6
    Fn = functionals(n)[name]
    X, dX = rng.normal(size=(N, n)), rng.normal(size=(N, n))
    h = 1e-3
    second = (Fn.value(X + h * dX) - 2 * Fn.value(X) + Fn.value(X - h * dX)) / h**2
    assert np.sum(dX * Fn.hess_action(X, dX)) / N == pytest.approx(second, rel=1e-4, abs=1e-8)


def test_functionals_add_and_zero():
    X = np.arange(6.0).reshape(3, 2)
    total = variance_functional(1.0) + mean_coupling(2.0) + ZeroFunctional()
    assert total.value(X) == pytest.approx(variance_functional(1.0).value(X) + mean_coupling(2.0).value(X))


def test_mean_functional_without_d2g_has_no_cross_kernel():
    Fn = MeanFunctional(lambda m: m[..., 0], lambda m: np.ones_like(m))
    assert not Fn.has_cross
    with pytest.raises(ConfigurationError):
        Fn.hess_action(np.zeros((2, 1)), np.ones((2, 1)))


def test_potential_without_second_derivative_reports_missing_hessian():
    Fn = PotentialFunctional(lambda x: x[..., 0] ** 3, lambda x: 3 * x**2)
    with pytest.raises(ConfigurationError):
        Fn.hess_dnu(np.zeros((2, 1)), np.zeros((2, 1)))


@pytest.mark.parametrize("family", ["lq", "quadratic-mean", "double-well-running-cost", "random-smooth"])
def test_builtin_families_have_consistent_pointwise_gradients(family):
    params = {"seed": 2, "n": 2} if family == "random-smooth" else {}
    spec = make_problem(family, **params)
    rep = validate_pointwise_gradients(spec)
    assert rep.passed, rep.details


@pytest.mark.parametrize("seed", range(5))
def test_random_smooth_problems_are_solvable(seed):
    assert check_convexity_margin(random_smooth_problem(seed, n=2)) > 0


def test_convexity_margin_formula():
    spec = LQSpec(T=2.0).to_problem().with_changes(lam=1.5, c_T_prime=0.1, c_h_prime=0.05, c_prime=0.2, c_l_prime=0.1)
    assert check_convexity_margin(spec) == pytest.approx(1.5 - 2 * 0.15 - 0.5 * 0.3 * 4)
    assert check_convexity_margin(double_well_problem(w=3.0, T=1.0)) < 0


def test_registry_rejects_unknown_and_duplicate_names():
    with pytest.raises(ConfigurationError, match="unknown problem family"):
        make_problem("no-such-family")
    with pytest.raises(ValueError):
        register_family("lq", lambda: None)
    assert "lq" in family_names()


@pytest.mark.parametrize("bad", [dict(n=0), dict(lam=0.0), dict(beta=-1.0), dict(T=0.0), dict(sigma=np.ones((2, 2)))])
def test_problem_spec_validation(bad):
    spec = LQSpec().to_problem()
    with pytest.raises(ValueError):
        spec.with_changes(**bad)
