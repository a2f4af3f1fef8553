import numpy as np
import pytest
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from conicarleman.errors import CarlemanError, CertificationError
from conicarleman.geometry import RegionMask, build_cone, build_cylinder
from conicarleman.operators import (
    assemble_laplacian, carleman_constant, carleman_stack, conjugate_operator, damped_operator,
    eigenmode_mass, exp_fit, ground_state_energy, local_carleman_check, pairing_identity_check,
    plane_wave_stress, resolvent_norm, semiclassical_operator, sigma_min, tuned_potential,
    well_potential)
from conicarleman.weights import chart_distance


def _symmetric(L):
    s = np.sqrt(L.weights)
    return (sp.diags(1 / s) @ L.K @ sp.diags(1 / s)).tocsc()


def cylinder_eigenvalues(radius, R, count):
    vals = [((k + 0.5) * np.pi / R) ** 2 + (m / radius) ** 2 for k in range(count) for m in range(-count, count + 1)]
    return np.sort(vals)[:count]


def test_cylinder_spectrum_matches_closed_form(cylinder):
    L = assemble_laplacian(cylinder)
    vals = np.sort(spla.eigsh(_symmetric(L), k=10, sigma=-1.0, which="LM", return_eigenvectors=False))
    assert np.allclose(vals, cylinder_eigenvalues(1.0, 10.0, 10), rtol=1e-2)


def test_neumann_constants_in_kernel(cone):
    L = assemble_laplacian(cone, "neumann")
    assert np.max(np.abs(L.apply(np.ones(L.n)))) < 1e-10


def test_dirichlet_form_nonnegative(cone_L, rng):
    for _ in range(100):
        u = rng.standard_normal(cone_L.n)
        q = cone_L.dirichlet_form(u, u).real
        assert q >= 0
        assert q == pytest.approx(cone_L.inner(cone_L.apply(u), u).real, rel=1e-10)


def test_conjugation_by_constant_is_identity(cone_L):
    P = semiclassical_operator(cone_L, 0.2, 1.0)
    C = conjugate_operator(P, 0.7)
    assert abs(C.matrix - P.matrix).max() == 0.0


def test_conjugation_preserves_spectrum():
    s = build_cone(0.8, 1.0, 4.0, 40, 32, 0.5)
    L = assemble_laplacian(s)
    r, th = s.grid.mesh()
    phi = 0.3 * np.exp(0.5 * (r - 2.0)) + 0.05 * np.cos(th)
    P = semiclassical_operator(L, 0.2, 1.0)
    a = np.sort(np.linalg.eigvals(P.matrix.toarray()).real)
    b = np.sort(np.linalg.eigvals(conjugate_operator(P, phi).matrix.toarray()).real)
    assert np.max(np.abs(a - b)) <= 1e-8 * np.max(np.abs(a))


def test_conjugation_entrywise(cone_L, rng):
    P = semiclassical_operator(cone_L, 0.1, 1.0)
    phi = rng.uniform(0, 1, cone_L.surface.grid.shape)
    C = conjugate_operator(P, phi).matrix.tocoo()
    p = cone_L.restrict(phi)
    ref = P.matrix.tocsr()
    for k in rng.integers(0, C.nnz, 50):
        i, j = C.row[k], C.col[k]
        assert C.data[k] == pytest.approx(ref[i, j] * np.exp((p[i] - p[j]) / 0.1), rel=1e-12)


def test_conjugation_overflow_guard(cone_L):
    r, _ = cone_L.surface.grid.mesh()
    with pytest.raises(CarlemanError):
        conjugate_operator(semiclassical_operator(cone_L, 0.001, 1.0), r)


def test_sigma_min_small_cases():
    assert sigma_min(sp.identity(50)).sigma_min == pytest.approx(1.0)
    assert sigma_min(sp.diags([3.0, 2.0, 0.5])).sigma_min == pytest.approx(0.5)


def test_sigma_min_against_dense(rng):
    A = sp.random(500, 500, density=0.01, random_state=7) + 0.2 * sp.identity(500)
    w_out, w_in = rng.uniform(0.5, 2, 500), rng.uniform(0.5, 2, 500)
    res = sigma_min(A, w_out, w_in, tol=1e-10)
    B = np.sqrt(w_out)[:, None] * A.toarray() / np.sqrt(w_in)[None, :]
    exact = np.linalg.svd(B, compute_uv=False).min()
    assert res.certified
    assert res.sigma_min == pytest.approx(exact, rel=1e-8)


def test_carleman_constant_all_omega(cone_L):
    # the Gram matrix is S^2 + I, so sigma >= 1; its bottom is a tight cluster and the
    # iteration need not certify, but every iterate already satisfies the bound
    K, _ = carleman_constant(semiclassical_operator(cone_L, 0.1, 1.0),
                             RegionMask(np.ones(cone_L.surface.grid.shape, bool)), max_iter=20)
    assert K <= 1.0 + 1e-12


def test_carleman_constant_lower_bound_from_ground_state(cone_L):
    s = cone_L.surface
    r, _ = s.grid.mesh()
    omega = RegionMask(r <= 0.3)
    h = 0.05
    P = semiclassical_operator(cone_L, h, 0.0)
    K, _ = carleman_constant(P, omega)
    _, vecs = spla.eigsh(_symmetric(cone_L), k=1, sigma=-1.0, which="LM")
    u = vecs[:, 0] / np.sqrt(cone_L.weights)
    om = cone_L.mask_vector(omega)
    ratio = cone_L.norm(u) / np.hypot(cone_L.norm(P.apply(u)), cone_L.norm(np.where(om, u, 0)))
    assert K >= 1.0 and K >= ratio * (1 - 1e-8)


def test_carleman_constant_dense_cross_check():
    s = build_cone(0.8, 1.0, 3.0, 21, 16, 0.5)
    L = assemble_laplacian(s)
    r, _ = s.grid.mesh()
    P = semiclassical_operator(L, 0.2, 1.0)
    omega = RegionMask(r <= 0.6)
    K, _ = carleman_constant(P, omega)
    A, w_out = carleman_stack(P, omega)
    B = np.sqrt(w_out)[:, None] * A.toarray() / np.sqrt(L.weights)[None, :]
    assert K == pytest.approx(1 / np.linalg.svd(B, compute_uv=False).min(), rel=1e-7)


def test_empty_omega_rejected(cone_L):
    with pytest.raises(CarlemanError):
        carleman_constant(semiclassical_operator(cone_L, 0.1), RegionMask(np.zeros(cone_L.surface.grid.shape, bool)))


def test_local_check_finite_and_elliptic():
    s = build_cone(0.8, 1.0, 6.0, 151, 384, 0.5)
    L = assemble_laplacian(s)
    r, th = s.grid.mesh()
    chi = RegionMask(chart_distance(s, r, th, 4.0, 0.0) <= 1.0)
    phi = np.exp(r - 4.0)
    ratio, res = local_carleman_check(semiclassical_operator(L, 0.1, 1.0), phi, chi)
    assert np.isfinite(ratio) and ratio > 0
    # h^2 L + 1 with a weak weight: elliptic, no h^{-1/2} loss
    small = 0.05 * np.exp(r - 4.0)
    vals = [local_carleman_check(semiclassical_operator(L, h, -1.0), small, chi)[0] for h in (0.1, 0.05)]
    assert max(vals) <= 2.0


def test_resolvent_uniform_damping(cone_L):
    h, delta = 0.1, 0.5
    y, _ = resolvent_norm(cone_L, delta, h)
    assert y <= 1 / (h * delta) * (1 + 1e-8)


def test_resolvent_undamped_is_distance_to_spectrum(cone_L):
    h = 0.15
    vals = spla.eigsh(_symmetric(cone_L), k=6, sigma=1 / h**2, which="LM", return_eigenvectors=False)
    expect = 1 / np.min(np.abs(h**2 * vals - 1))
    y, _ = resolvent_norm(cone_L, 0.0, h, tol=1e-12)
    assert y == pytest.approx(expect, rel=1e-6)


def test_pairing_identity_random_fields(rng):
    s = build_cone(0.8, 1.0, 4.0, 60, 48, 0.5)
    L = assemble_laplacian(s)
    r, _ = s.grid.mesh()
    W = np.exp(-r)
    for _ in range(5):
        u = rng.standard_normal(L.n) + 1j * rng.standard_normal(L.n)
        assert pairing_identity_check(L, u, W, 0.1).relative <= 1e-12
    u = rng.standard_normal(L.n) + 1j * rng.standard_normal(L.n)
    assert abs(pairing_identity_check(L, u, 0.0, 0.1).pairing.imag) <= 1e-12 * L.norm(u) ** 2
    u = rng.standard_normal(L.n)
    pc = pairing_identity_check(L, u, W, 0.1)
    assert pc.pairing.imag == pytest.approx(-0.1 * pc.damping, rel=1e-12)


def test_mode_mass_full_and_half():
    s = build_cylinder(1.0, 6.0, 61, 64)
    L = assemble_laplacian(s)
    full = eigenmode_mass(L, [0.3, 0.2], RegionMask(np.ones(s.grid.shape, bool)), 4)
    assert all(m.mass_ratio == pytest.approx(1.0) for m in full)
    _, th = s.grid.mesh()
    half = eigenmode_mass(L, [0.3, 0.2], RegionMask(th < np.pi), 4)
    # any combination of cos(m theta), sin(m theta) puts exactly half its mass in a half turn
    assert all(m.mass_ratio**2 == pytest.approx(0.5, abs=1e-8) for m in half)


def test_exp_fit_exact_law_and_constant():
    h = np.array([1 / 5, 1 / 10, 1 / 20, 1 / 40])
    fit = exp_fit(h, np.exp(3 / h))
    assert fit.slope == pytest.approx(3.0) and fit.r2 == pytest.approx(1.0)
    assert exp_fit(h, np.full(4, 2.0)).slope == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(CertificationError):
        exp_fit(h, [1.0, -1.0, 2.0, 3.0])
    with pytest.raises(CarlemanError):
        exp_fit(h[:3], [1.0, 2.0, 3.0])


def test_tuned_well_has_zero_mode(cone_L):
    V0 = well_potential(cone_L.surface, (2.0, 1.0))
    V = tuned_potential(cone_L, cone_L.restrict(V0), 0.1)
    assert abs(ground_state_energy(cone_L, V, 0.1)) < 1e-10


def test_stress_single_radius():
    rows = plane_wave_stress(0.2, [2.0], lambda R: build_cone(0.8, 1.0, R, 21, 32, 0.5),
                             lambda s: RegionMask(s.grid.mesh()[0] <= 0.5))
    assert len(rows) == 1 and rows[0].K > 1
