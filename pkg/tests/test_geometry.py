import numpy as np
import pytest

from conicarleman.errors import GeometryError
from conicarleman.geometry import (RegionMask, build_cone, eps_dense_check, geodesic_distance,
                                   grad_norm, metric_gradient, volume_weights)


def test_small_cap_limit_is_polar_plane():
    s = build_cone(1.0, 1e-3, 2.0, 201, 16, 5e-4)
    r = np.linspace(1e-3, 2.0, 50)
    assert np.allclose(s.profile.a(r), r, atol=1e-12)
    assert abs(float(s.profile.a(0.0)) - 5e-4) < 1e-15


def test_pure_cone_region_exact():
    s = build_cone(1.0, 1.0, 4.0, 41, 16, 0.5)
    assert s.profile.a(1.0) == pytest.approx(1.0, abs=1e-14)
    assert s.profile.a(2.0) == pytest.approx(2.0, abs=1e-14)


def test_cubic_blend_matches_independent_solve():
    beta, rc, a_min = 0.8, 1.0, 0.5
    s = build_cone(beta, rc, 4.0, 41, 16, a_min)
    # a = a_min + c2 r^2 + c3 r^3 with a(rc) = beta rc, a'(rc) = beta
    c2, c3 = np.linalg.solve([[rc**2, rc**3], [2 * rc, 3 * rc**2]], [beta * rc - a_min, beta])
    expect = a_min + c2 * 0.25 + c3 * 0.125
    assert s.profile.a(0.5) == pytest.approx(expect, rel=1e-13)
    assert expect == pytest.approx(0.55, rel=1e-13)
    assert s.profile.da(1.0) == pytest.approx(beta, rel=1e-12)


def test_invalid_geometry_rejected():
    with pytest.raises(GeometryError):
        build_cone(0.8, 5.0, 4.0, 41, 16, 0.5)
    with pytest.raises(GeometryError):
        build_cone(-1.0, 1.0, 4.0, 41, 16, 0.5)
    with pytest.raises(GeometryError):
        build_cone(0.8, 1.0, 4.0, 3, 16, 0.5)


def test_gradient_of_radial_coordinate(cone):
    r, _ = cone.grid.mesh()
    assert np.allclose(grad_norm(cone, r), 1.0, atol=1e-12)


def test_gradient_of_angle_on_pure_cone(cone):
    r, th = cone.grid.mesh()
    # theta is not periodic; use a local field sin(theta) at theta = 0 where d/dtheta = cos = 1
    _, g_t = metric_gradient(cone, np.sin(th))
    rows = cone.grid.r >= 1.0
    expect = 1.0 / (0.8 * cone.grid.r[rows])
    dt = cone.grid.dtheta
    assert np.allclose(g_t[rows, 0], expect * np.sin(dt) / dt, rtol=1e-12)


def test_gradient_of_cartesian_x_on_flat_cone(flat):
    r, th = flat.grid.mesh()
    gn = grad_norm(flat, r * np.cos(th))
    rows = (flat.grid.r >= 1.0) & (flat.grid.r < flat.grid.R)
    assert np.allclose(gn[rows], 1.0, atol=2e-3)


def test_volume_of_pure_cone_annulus(cone):
    w = volume_weights(cone)
    r = cone.grid.r
    total = w[r > 1.0 + 1e-12].sum() + 0.5 * w[np.isclose(r, 1.0)].sum()
    # last ring already carries the trapezoid half weight
    assert total == pytest.approx(2 * np.pi * 0.8 * (16.0 - 1.0) / 2, rel=1e-12)


def test_volume_weights_positive_and_scale(cone):
    assert np.all(volume_weights(cone) > 0)
    fine = build_cone(0.8, 1.0, 4.0, 41, 64, 0.5)
    assert np.allclose(volume_weights(fine)[:, 0], volume_weights(cone)[:, 0] / 2)


def test_dense_check_all_nodes(cone):
    rep = eps_dense_check(cone, RegionMask(np.ones(cone.grid.shape, bool)), 0.1)
    assert rep.ok and rep.worst_distance == 0.0


def test_dense_check_outer_ring_reaches_tip(cone):
    m = np.zeros(cone.grid.shape, bool)
    m[-1] = True
    rep = eps_dense_check(cone, RegionMask(m), 10.0)
    assert rep.worst_distance == pytest.approx(cone.grid.R, rel=1e-12)
    assert rep.worst_node[0] == 0


def test_dense_check_periodic_symmetry(cone):
    m = np.zeros(cone.grid.shape, bool)
    m[:, 0] = True
    d = geodesic_distance(cone, m)
    nt = cone.grid.n_theta
    for j in range(1, nt // 2):
        assert np.allclose(d[:, j], d[:, nt - j], rtol=1e-12)


def test_empty_mask_is_an_error(cone):
    with pytest.raises(GeometryError):
        eps_dense_check(cone, RegionMask(np.zeros(cone.grid.shape, bool)), 1.0)


def test_mask_csv_roundtrip(cone, tmp_path, rng):
    m = RegionMask(rng.random(cone.grid.shape) < 0.3)
    m.to_csv(tmp_path / "m.csv")
    back = RegionMask.from_csv(tmp_path / "m.csv", cone.grid.shape)
    assert np.array_equal(back.flags, m.flags)
