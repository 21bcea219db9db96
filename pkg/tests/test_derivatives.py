import numpy as np
import pytest

from mfctree.derivatives import (SkippedError, first_derivative, gaussian_direction, second_directional,
                                 tagged_solve)
from mfctree.lq_oracle import LQSpec, discrete_gains
from mfctree.model import random_smooth_problem
from mfctree.solver import SolveOptions, solve_mfc

from conftest import small_setup

TIGHT = SolveOptions(grad_tol=1e-12, max_iters=500)


@pytest.fixture(scope="module", params=[dict(kappa=0.5, kappa_bar=0.0), dict(kappa=0.2, kappa_bar=0.9, q_T=2.0)])
def lq_case(request):
    lq = LQSpec(**{"q": 0.5, "q_T": 1.0, "sigma": 0.4, "beta": 0.3, **request.param})
    spec = lq.to_problem()
    tree, noise, X0 = small_setup(spec, K=4, N=16)
    return lq, spec, solve_mfc(spec, X0, tree, noise, TIGHT)


def test_lq_second_derivative_matches_gains(lq_case):
    lq, spec, sol = lq_case
    p, Q = discrete_gains(lq, sol.tree.K, sol.tree.dt)
    for seed in range(3):
        xi = gaussian_direction(16, 1, seed, center=False)
        r = second_directional(spec, sol, xi)
        m = xi.mean(axis=0)
        np.testing.assert_allclose(r.result, p[0] * (xi - m) + Q[0] * m, atol=1e-8)
        assert r.lq_value == pytest.approx(0.5 * r.pair(xi), rel=1e-8)


def test_lq_first_derivative_is_affine_in_x(lq_case):
    lq, spec, sol = lq_case
    Z0 = first_derivative(sol)
    X0 = sol.init[0]
    A = np.column_stack([X0[:, 0], np.ones(len(X0))])
    coef, *_ = np.linalg.lstsq(A, Z0[:, 0], rcond=None)
    np.testing.assert_allclose(A @ coef, Z0[:, 0], atol=1e-9)


def test_lq_functional_derivative_gradient_matches_adjoint(lq_case):
    _, spec, sol = lq_case
    tag = tagged_solve(spec, sol, np.array([[0.2], [-0.4]]), opts=TIGHT)
    np.testing.assert_allclose(tag.support_DU, first_derivative(sol), atol=1e-8)
    assert abs(np.mean(tag.support_U)) <= 1e-12


@pytest.fixture(scope="module")
def smooth_case():
    spec = random_smooth_problem(1, n=1)
    tree, noise, X0 = small_setup(spec, K=3, N=8)
    return spec, tree, noise, X0, solve_mfc(spec, X0, tree, noise, TIGHT)


def test_second_derivative_is_self_adjoint(smooth_case):
    spec, _, _, _, sol = smooth_case
    a, b = (second_directional(spec, sol, gaussian_direction(8, 1, s, center=False)) for s in (0, 1))
    assert a.pair(b.direction) == pytest.approx(b.pair(a.direction), rel=1e-6, abs=1e-10)


def test_second_derivative_matches_resolved_first_derivative(smooth_case):
    spec, tree, noise, X0, sol = smooth_case
    xi = gaussian_direction(8, 1, 2, center=False)
    r = second_directional(spec, sol, xi)
    eps = 1e-3
    Zp = first_derivative(solve_mfc(spec, X0 + eps * xi, tree, noise, TIGHT))
    Zm = first_derivative(solve_mfc(spec, X0 - eps * xi, tree, noise, TIGHT))
    fd = (Zp - Zm) / (2 * eps)
    assert np.linalg.norm(r.result - fd) <= 1e-3 * np.linalg.norm(fd)


def test_missing_second_order_callbacks_are_skipped(smooth_case):
    spec, _, _, _, sol = smooth_case
    crippled = spec.with_changes(l_xx=None)
    with pytest.raises(SkippedError):
        second_directional(crippled, sol, np.ones((8, 1)))
