import numpy as np
import pytest
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from conicarleman.errors import CarlemanError
from conicarleman.geometry import build_cone
from conicarleman.kleingordon import (
    DampedKGSystem, DecayTrace, KGState, damped_oscillator, data_norm, decay_fit, dyadic_times,
    energy, energy_balance_residual, reversibility_error, run, step_implicit_midpoint)
from conicarleman.operators import LaplaceOperator, assemble_laplacian


@pytest.fixture(scope="module")
def small():
    s = build_cone(0.8, 1.0, 3.0, 21, 16, 0.5)
    return s, assemble_laplacian(s), assemble_laplacian(s, "neumann")


def two_node():
    K = sp.csr_matrix(np.array([[1.0, -1.0], [-1.0, 1.0]]))
    return LaplaceOperator(None, K, np.array([1.0, 2.0]), np.arange(2))


def test_two_node_step_matches_hand_solve():
    L = two_node()
    dt, c = 0.1, 0.5
    system = DampedKGSystem(L, c, dt)
    u0, v0 = np.array([1.0, -0.5]), np.array([0.2, 0.3])
    nxt = step_implicit_midpoint(KGState(u0, v0), system)
    # z' = A z with A = [[0, I], [-M^{-1}(K + M), -c I]]
    Minv = np.diag(1 / L.weights)
    A = np.block([[np.zeros((2, 2)), np.eye(2)], [-Minv @ (L.K.toarray() + np.diag(L.weights)), -c * np.eye(2)]])
    z1 = np.linalg.solve(np.eye(4) - dt / 2 * A, (np.eye(4) + dt / 2 * A) @ np.r_[u0, v0])
    assert np.allclose(np.r_[nxt.u, nxt.v], z1, rtol=1e-14, atol=1e-15)
    tr = run(system, u0, v0, dt)
    assert energy_balance_residual(tr) <= 1e-14


def test_zero_state_stays_zero(small):
    _, L, _ = small
    nxt = step_implicit_midpoint(KGState(np.zeros(L.n), np.zeros(L.n)), DampedKGSystem(L, 1.0, 0.05))
    assert not nxt.u.any() and not nxt.v.any()


def test_undamped_conservation(small, rng):
    _, L, _ = small
    system = DampedKGSystem(L, 0.0, 0.05)
    tr = run(system, rng.standard_normal(L.n), rng.standard_normal(L.n), 20.0)
    assert np.max(np.abs(tr.E - tr.E[0])) / tr.E[0] <= 1e-10
    assert energy_balance_residual(tr) <= 1e-10


def test_damped_energy_decreases(small, rng):
    s, L, _ = small
    r, _ = s.grid.mesh()
    tr = run(DampedKGSystem(L, np.exp(-r), 0.05), rng.standard_normal(L.n), np.zeros(L.n), 10.0)
    assert np.all(np.diff(tr.E) <= 1e-14 * tr.E[0])
    assert energy_balance_residual(tr) <= 1e-12


def test_constant_data_matches_scalar_ode(small):
    _, _, Ln = small
    c, dt = 0.5, 1e-3
    tr = run(DampedKGSystem(Ln, c, dt), np.ones(Ln.n), np.zeros(Ln.n), 20.0, record_every=1000)
    # spatially constant solutions: E = u^2 + u'^2 times Vol / 2
    vol = Ln.weights.sum()
    u = tr.final.u
    assert np.allclose(u, damped_oscillator(20.0, c), atol=1e-6)
    exact_E = [0.5 * vol * (damped_oscillator(t, c) ** 2 + _deriv(t, c) ** 2) for t in tr.t]
    assert np.allclose(tr.E, exact_E, rtol=1e-5)


def _deriv(t, c, e=1e-6):
    return (damped_oscillator(t + e, c) - damped_oscillator(t - e, c)) / (2 * e)


def test_damped_oscillator_regimes():
    t = np.linspace(0, 5, 11)
    for c in (0.0, 0.5, 2.0, 3.0):
        u = damped_oscillator(t, c, 1.0, 0.3)
        assert u[0] == pytest.approx(1.0)
        # ODE residual by finite differences
        e = 1e-4
        um, uu = damped_oscillator(t - e, c, 1.0, 0.3), damped_oscillator(t + e, c, 1.0, 0.3)
        res = (uu - 2 * u + um) / e**2 + c * (uu - um) / (2 * e) + u
        assert np.max(np.abs(res)) < 1e-5


def test_energy_examples(small):
    _, L, Ln = small
    sys_n = DampedKGSystem(Ln, 0.0, 0.1)
    assert energy(KGState(np.zeros(Ln.n), np.zeros(Ln.n)), sys_n) == 0.0
    assert energy(KGState(np.zeros(Ln.n), np.ones(Ln.n)), sys_n) == pytest.approx(0.5 * Ln.weights.sum())
    s = np.sqrt(L.weights)
    S = (sp.diags(1 / s) @ L.K @ sp.diags(1 / s)).tocsc()
    vals, vecs = spla.eigsh(S, k=3, sigma=-1.0, which="LM")
    u0 = vecs[:, 2] / s
    E = energy(KGState(u0, np.zeros(L.n)), DampedKGSystem(L, 0.0, 0.1))
    assert E == pytest.approx(0.5 * (vals[2] + 1) * L.norm(u0) ** 2, rel=1e-10)


def test_reversibility(small, rng):
    _, L, _ = small
    err = reversibility_error(DampedKGSystem(L, 0.0, 0.05), rng.standard_normal(L.n), np.zeros(L.n), 10.0)
    assert err <= 1e-10


def test_invalid_system(small):
    _, L, _ = small
    with pytest.raises(CarlemanError):
        DampedKGSystem(L, -1.0, 0.1)
    with pytest.raises(CarlemanError):
        DampedKGSystem(L, 0.0, 0.0)


def _trace(t, E):
    z = np.zeros_like(t)
    return DecayTrace(t, E, z, z)


def test_decay_fit_exponential_trace():
    t = np.linspace(0, 200, 20001)
    fit = decay_fit(_trace(t, np.exp(-t)), 1.0)
    assert np.isfinite(fit.c_log) and fit.t_sup <= 1.0
    assert fit.last_decade_slope <= 0


def test_decay_fit_log_law_is_flat():
    t = np.linspace(0, 500, 5001)
    D0 = 3.0
    fit = decay_fit(_trace(t, 1 / np.log(2 + t)), D0)
    assert np.allclose(fit.profile, 1 / D0)
    assert fit.c_log == pytest.approx(1 / D0)
    assert abs(fit.last_decade_slope) < 1e-12


def test_decay_fit_guards():
    t = np.linspace(0, 50, 51)
    with pytest.raises(CarlemanError):
        decay_fit(_trace(t, np.ones_like(t)), 1.0)
    t = np.linspace(0, 200, 201)
    with pytest.raises(CarlemanError):
        decay_fit(_trace(t, np.ones_like(t)), 0.0)


def test_dyadic_times():
    assert list(dyadic_times(10.0)) == [0.0, 1.0, 2.0, 4.0, 8.0, 10.0]


def test_data_norm_positive(small, rng):
    _, L, _ = small
    assert data_norm(L, rng.standard_normal(L.n), rng.standard_normal(L.n)) > 0
