"""Property-based checks of structural invariants."""
import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings, strategies as st

from conicarleman.cli import fmt
from conicarleman.geometry import build_cone, volume_weights
from conicarleman.kleingordon import DampedKGSystem, energy_balance_residual, run
from conicarleman.operators import (assemble_laplacian, conjugate_operator, exp_fit,
                                    pairing_identity_check, semiclassical_operator, sigma_min)
from conicarleman.symbols import principal_symbol_from, subprincipal_from
from conicarleman.weights import chart_distance, trim_and_offset, trim_ramp, wrap_angle

FAST = settings(max_examples=25, deadline=None)

cones = st.builds(
    lambda beta, R, nr, nt: build_cone(beta, 1.0, R, nr, nt, 0.5),
    st.floats(0.5, 1.2), st.floats(2.0, 5.0), st.integers(8, 20), st.integers(8, 24))
seeds = st.integers(0, 2**32 - 1)


@FAST
@given(cones, seeds)
def test_laplacian_symmetric_nonnegative(surface, seed):
    L = assemble_laplacian(surface)
    assert abs(L.K - L.K.T).max() <= 1e-12 * abs(L.K).max()
    u = np.random.default_rng(seed).standard_normal(L.n)
    assert L.dirichlet_form(u, u).real >= -1e-12


@FAST
@given(cones)
def test_volume_weights_positive(surface):
    assert np.all(volume_weights(surface) > 0)


@FAST
@given(cones, seeds, st.floats(0.05, 0.5))
def test_conjugation_is_similarity(surface, seed, h):
    L = assemble_laplacian(surface)
    rng = np.random.default_rng(seed)
    phi = rng.uniform(0, 1, surface.grid.shape) * h
    P = semiclassical_operator(L, h, 1.0)
    C = conjugate_operator(P, phi)
    p = L.restrict(phi)
    u = rng.standard_normal(L.n)
    # C e^{phi/h} u = e^{phi/h} P u, written with a common reference to stay in range
    e = np.exp((p - p.max()) / h)
    assert np.allclose(C.apply(e * u), e * P.apply(u), rtol=1e-9, atol=1e-12 * np.abs(P.apply(u)).max())


@FAST
@given(st.lists(st.floats(0.01, 100.0), min_size=2, max_size=40))
def test_sigma_min_of_diagonal(d):
    assert sigma_min(sp.diags(d)).sigma_min == pytest.approx(min(d), rel=1e-8)


@FAST
@given(st.floats(0.1, 5.0), st.floats(-3.0, 3.0))
def test_exp_fit_recovers_exact_law(C, b):
    h = np.array([1 / 5, 1 / 10, 1 / 15, 1 / 20, 1 / 30, 1 / 40])
    fit = exp_fit(h, np.exp(C / h + b))
    assert fit.slope == pytest.approx(C, rel=1e-8, abs=1e-9)
    assert fit.intercept == pytest.approx(b, abs=1e-7)
    assert fit.r2 == pytest.approx(1.0)


@FAST
@given(cones, seeds, st.floats(0.02, 0.5))
def test_pairing_identity(surface, seed, h):
    L = assemble_laplacian(surface)
    rng = np.random.default_rng(seed)
    W = rng.uniform(0, 2, surface.grid.shape)
    u = rng.standard_normal(L.n) + 1j * rng.standard_normal(L.n)
    assert pairing_identity_check(L, u, W, h).relative <= 1e-12


@FAST
@given(cones, seeds, st.floats(1e-3, 0.2))
def test_energy_balance_exact(surface, seed, dt):
    L = assemble_laplacian(surface)
    rng = np.random.default_rng(seed)
    W = rng.uniform(0, 3, surface.grid.shape)
    tr = run(DampedKGSystem(L, W, dt), rng.standard_normal(L.n), rng.standard_normal(L.n), 30 * dt)
    assert energy_balance_residual(tr) <= 1e-10
    assert np.all(np.diff(tr.E) <= 1e-12 * tr.E[0])


@FAST
@given(st.floats(-50, 50))
def test_wrap_angle_range(x):
    w = float(wrap_angle(x))
    assert -np.pi < w <= np.pi + 1e-12
    assert np.isclose(np.cos(w), np.cos(x), atol=1e-9) and np.isclose(np.sin(w), np.sin(x), atol=1e-9)


@FAST
@given(cones, st.floats(0.0, 4.0), st.floats(0, 2 * np.pi), st.floats(0.0, 4.0), st.floats(0, 2 * np.pi))
def test_chart_distance_symmetric(surface, r0, t0, r1, t1):
    d01 = chart_distance(surface, r0, t0, r1, t1)
    d10 = chart_distance(surface, r1, t1, r0, t0)
    assert d01 == pytest.approx(d10, abs=1e-12)
    assert chart_distance(surface, r0, t0, r0, t0) == 0.0


@FAST
@given(st.floats(0.5, 2.0), st.floats(0.0, 1.0), seeds)
def test_trim_bounds(psi_max, tau, seed):
    rng = np.random.default_rng(seed)
    drop = 2 * psi_max + tau + 0.1
    psi = rng.uniform(-psi_max, psi_max, 100)
    sigma = trim_ramp(rng.uniform(-0.5, 1.5, 100))
    out = trim_and_offset(psi, sigma, drop, psi_max, tau)
    assert np.all(out >= -drop - 1e-12) and np.all(out <= psi_max + 1e-12)


@FAST
@given(st.lists(st.floats(-3, 3), min_size=2, max_size=2), st.lists(st.floats(-3, 3), min_size=2, max_size=2),
       st.floats(-2, 2))
def test_principal_symbol_conjugate_symmetry(g, xi, V):
    g, xi = np.array(g), np.array(xi)
    p = principal_symbol_from(g, V, xi)
    assert principal_symbol_from(g, V, -xi) == pytest.approx(np.conj(p))
    assert p.imag == pytest.approx(2 * g @ xi)


@FAST
@given(st.lists(st.floats(-3, 3), min_size=4, max_size=4), st.lists(st.floats(-3, 3), min_size=2, max_size=2))
def test_subprincipal_even_in_xi(h, xi):
    H = np.array(h).reshape(2, 2)
    H = H + H.T
    g = np.array([0.3, -0.7])
    xi = np.array(xi)
    assert subprincipal_from(g, H, np.zeros(2), xi) == pytest.approx(subprincipal_from(g, H, np.zeros(2), -xi))


@FAST
@given(st.floats(allow_nan=False, allow_infinity=False, width=64))
def test_csv_float_roundtrip(x):
    assert float(fmt(x)) == x
