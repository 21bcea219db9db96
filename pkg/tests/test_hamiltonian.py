import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mfctree.hamiltonian import argmin_lagrangian, hamiltonian, minimize_lagrangian
from mfctree.lq_oracle import LQSpec
from mfctree.model import random_smooth_problem

points = arrays(np.float64, (6, 2), elements=st.floats(-3, 3))


def test_lq_hamiltonian_closed_form(rng):
    spec = LQSpec(q=0.7).to_problem()
    x, p = rng.normal(size=(10, 1)), rng.normal(size=(10, 1))
    ev = argmin_lagrangian(spec, x, p)
    np.testing.assert_allclose(ev.u_star, -p, atol=1e-14)
    np.testing.assert_allclose(ev.H, 0.35 * x[:, 0] ** 2 - 0.5 * p[:, 0] ** 2, atol=1e-14)


@pytest.mark.parametrize("seed", range(3))
@given(x=points, p=points, v=points)
def test_minimizer_is_stationary_and_optimal(seed, x, p, v):
    spec = random_smooth_problem(seed, n=2)
    ev = argmin_lagrangian(spec, x, p)
    np.testing.assert_allclose(spec.l_v(x, ev.u_star) + p, 0.0, atol=1e-9)
    assert np.all(ev.H <= spec.l(x, v) + np.sum(v * p, axis=-1) + 1e-10)


@pytest.mark.parametrize("seed", range(3))
def test_envelope_derivatives(seed, rng):
    spec = random_smooth_problem(seed, n=2)
    x, p = rng.normal(size=(5, 2)), rng.normal(size=(5, 2))
    ev = argmin_lagrangian(spec, x, p, tol=1e-13)
    h = 1e-6
    for j in range(2):
        e = np.zeros(2)
        e[j] = h
        dHp = (hamiltonian(spec, x, p + e, 1e-13) - hamiltonian(spec, x, p - e, 1e-13)) / (2 * h)
        dHx = (hamiltonian(spec, x + e, p, 1e-13) - hamiltonian(spec, x - e, p, 1e-13)) / (2 * h)
        np.testing.assert_allclose(dHp, ev.H_p[:, j], rtol=1e-6, atol=1e-7)
        np.testing.assert_allclose(dHx, ev.H_x[:, j], rtol=1e-6, atol=1e-7)


def test_warm_start_converges_immediately():
    spec = random_smooth_problem(1, n=1)
    x, p = np.array([[0.3]]), np.array([[-0.2]])
    u, res, _ = minimize_lagrangian(spec, x, p)
    u2, res2, iters = minimize_lagrangian(spec, x, p, v0=u)
    assert iters <= 1 and res2 <= 1e-10
    np.testing.assert_allclose(u2, u, atol=1e-12)
