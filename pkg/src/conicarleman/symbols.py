"""Phase-space symbols of the conjugated operator on ``dr^2 + a(r)^2 dtheta^2``.

Covectors are given in the orthonormal coframe, ``xi = (xi_r, xi_t)`` with
``|xi|^2 = xi_r^2 + xi_t^2``.  In canonical coordinates ``(r, theta, p_r,
p_theta)`` this is ``xi_r = p_r`` and ``xi_t = p_theta / a(r)``.

Every weight is accessed through a *jet*: the value of ``psi`` with its
orthonormal-frame gradient and covariant Hessian at a base point, plus the
potential and its gradient.  Grid weights produce jets by centered
differences at interior nodes; analytic weights by differencing a callable.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from conicarleman.errors import CarlemanError
from conicarleman.geometry import Surface


@dataclass(frozen=True)
class PhasePoint:
    r: float
    theta: float
    xi_r: float
    xi_t: float
    node: tuple[int, int] | None = None


@dataclass
class Jet:
    """Arrays broadcast over base points; ``grad`` is (..., 2), ``hess`` (..., 2, 2)."""

    psi: np.ndarray
    grad: np.ndarray
    hess: np.ndarray
    V: np.ndarray
    grad_V: np.ndarray


def frame_hessian(a, da, f_r, f_t, f_rr, f_rt, f_tt):
    """Covariant Hessian in the orthonormal frame from coordinate derivatives.

    Christoffel symbols of ``dr^2 + a^2 dtheta^2``: ``Gamma^r_tt = -a a'``,
    ``Gamma^t_rt = a'/a``.
    """
    h_rr = f_rr
    h_rt = (f_rt - da / a * f_t) / a
    h_tt = (f_tt + a * da * f_r) / a**2
    return np.stack([np.stack([h_rr, h_rt], -1), np.stack([h_rt, h_tt], -1)], -2)


class GridWeight:
    """Jets of a nodal field by centered differences (interior nodes only)."""

    def __init__(self, surface: Surface, psi, lam: float, V=0.0):
        self.surface = surface
        self.psi = np.asarray(psi, dtype=float).reshape(surface.grid.shape)
        self.lam = float(lam)
        self.V = np.broadcast_to(np.asarray(V, dtype=float), surface.grid.shape)

    def _derivs(self, f, i, j):
        g = self.surface.grid
        nt = g.n_theta
        jp, jm = (j + 1) % nt, (j - 1) % nt
        dr, dt = g.dr, g.dtheta
        f_r = (f[i + 1, j] - f[i - 1, j]) / (2 * dr)
        f_t = (f[i, jp] - f[i, jm]) / (2 * dt)
        f_rr = (f[i + 1, j] - 2 * f[i, j] + f[i - 1, j]) / dr**2
        f_tt = (f[i, jp] - 2 * f[i, j] + f[i, jm]) / dt**2
        f_rt = (f[i + 1, jp] - f[i + 1, jm] - f[i - 1, jp] + f[i - 1, jm]) / (4 * dr * dt)
        return f_r, f_t, f_rr, f_rt, f_tt

    def jet(self, i, j) -> Jet:
        i = np.asarray(i)
        j = np.asarray(j)
        if np.any(i <= 0) or np.any(i >= self.surface.grid.n_r - 1):
            raise CarlemanError("symbol requested at a boundary node")
        r = self.surface.grid.r[i]
        a = self.surface.profile.a(r)
        da = self.surface.profile.da(r)
        f_r, f_t, f_rr, f_rt, f_tt = self._derivs(self.psi, i, j)
        v_r, v_t, *_ = self._derivs(self.V, i, j)
        grad = np.stack([f_r, f_t / a], -1)
        hess = frame_hessian(a, da, f_r, f_t, f_rr, f_rt, f_tt)
        return Jet(self.psi[i, j], grad, hess, self.V[i, j], np.stack([v_r, v_t / a], -1))

    def jet_at(self, pt: PhasePoint) -> Jet:
        if pt.node is None:
            raise CarlemanError("grid weights need a node index")
        return self.jet(*pt.node)


class AnalyticWeight:
    """Jets of callables ``psi(r, theta)`` and ``V(r, theta)`` by fine central differences."""

    def __init__(self, surface: Surface, psi, lam: float, V=None, step: float = 1e-4):
        self.surface = surface
        self.psi_fn = psi
        self.lam = float(lam)
        self.V_fn = V if V is not None else (lambda r, t: np.zeros_like(np.asarray(r, float)))
        self.step = step

    def _derivs(self, fn, r, t, second=True):
        e = self.step
        f0 = fn(r, t)
        f_r = (fn(r + e, t) - fn(r - e, t)) / (2 * e)
        f_t = (fn(r, t + e) - fn(r, t - e)) / (2 * e)
        if not second:
            return f0, f_r, f_t
        f_rr = (fn(r + e, t) - 2 * f0 + fn(r - e, t)) / e**2
        f_tt = (fn(r, t + e) - 2 * f0 + fn(r, t - e)) / e**2
        f_rt = (fn(r + e, t + e) - fn(r + e, t - e) - fn(r - e, t + e) + fn(r - e, t - e)) / (4 * e * e)
        return f0, f_r, f_t, f_rr, f_rt, f_tt

    def gradient(self, r, t):
        """Value and frame gradient only (what the principal symbol needs)."""
        a = self.surface.profile.a(r)
        f0, f_r, f_t = self._derivs(self.psi_fn, r, t, second=False)
        return f0, np.stack([f_r, f_t / a], -1)

    def jet_at_coords(self, r, t) -> Jet:
        a = self.surface.profile.a(r)
        da = self.surface.profile.da(r)
        f0, f_r, f_t, f_rr, f_rt, f_tt = self._derivs(self.psi_fn, r, t)
        v0, v_r, v_t = self._derivs(self.V_fn, r, t, second=False)
        hess = frame_hessian(a, da, f_r, f_t, f_rr, f_rt, f_tt)
        return Jet(f0, np.stack([f_r, f_t / a], -1), hess, v0, np.stack([v_r, v_t / a], -1))

    def jet_at(self, pt: PhasePoint) -> Jet:
        return self.jet_at_coords(pt.r, pt.theta)


def phi_derivatives(jet: Jet, lam: float):
    """``phi = e^{lam psi}``: value, frame gradient and covariant Hessian by the chain rule."""
    phi = np.exp(lam * jet.psi)
    g = jet.grad
    grad_phi = lam * phi[..., None] * g
    outer = g[..., :, None] * g[..., None, :]
    hess_phi = lam * phi[..., None, None] * (jet.hess + lam * outer)
    return phi, grad_phi, hess_phi


def principal_symbol_from(grad_phi, V, xi):
    """``|xi|^2 - V - |grad phi|^2 + 2i grad phi . xi``."""
    xi = np.asarray(xi, dtype=float)
    re = np.sum(xi**2, -1) - V - np.sum(grad_phi**2, -1)
    im = 2 * np.sum(grad_phi * xi, -1)
    return re + 1j * im


def principal_symbol(pt: PhasePoint, weight, V=None) -> complex:
    """Principal symbol of ``e^{phi/h} (h^2 Delta - V) e^{-phi/h}`` at ``pt``."""
    jet = weight.jet_at(pt)
    _, grad_phi, _ = phi_derivatives(jet, weight.lam)
    v = jet.V if V is None else V
    return complex(principal_symbol_from(grad_phi, v, (pt.xi_r, pt.xi_t)))


def subprincipal_from(grad_phi, hess_phi, grad_V, xi):
    """``2 (grad V + grad |grad phi|^2) . grad phi + 4 xi . Hess phi . xi``.

    Uses ``grad |grad phi|^2 = 2 Hess(phi) grad phi``.
    """
    xi = np.asarray(xi, dtype=float)
    grad_sq = 2 * np.einsum("...ij,...j->...i", hess_phi, grad_phi)
    first = 2 * np.sum((grad_V + grad_sq) * grad_phi, -1)
    second = 4 * np.einsum("...i,...ij,...j->...", xi, hess_phi, xi)
    return first + second


def covariant_hessian(surface: Surface, f, i, j) -> np.ndarray:
    """Orthonormal-frame covariant Hessian of a nodal field at interior nodes."""
    gw = GridWeight(surface, f, 1.0)
    return gw.jet(i, j).hess


def subprincipal_symbol(pt: PhasePoint, weight) -> float:
    """``{Re p_phi, Im p_phi}`` via the closed form with covariant Hessian."""
    jet = weight.jet_at(pt)
    _, grad_phi, hess_phi = phi_derivatives(jet, weight.lam)
    return float(subprincipal_from(grad_phi, hess_phi, jet.grad_V, (pt.xi_r, pt.xi_t)))


def poisson_bracket(f, g, x, p, step: float) -> float:
    """``sum_q (d_p f d_q g - d_q f d_p g)`` by centered differences.

    ``f`` and ``g`` take canonical coordinates ``(x, p)`` (length-2 arrays each).
    """
    x = np.asarray(x, float)
    p = np.asarray(p, float)
    total = 0.0
    for q in range(2):
        e = np.zeros(2)
        e[q] = step
        dfp = (f(x, p + e) - f(x, p - e)) / (2 * step)
        dgp = (g(x, p + e) - g(x, p - e)) / (2 * step)
        dfx = (f(x + e, p) - f(x - e, p)) / (2 * step)
        dgx = (g(x + e, p) - g(x - e, p)) / (2 * step)
        total += dfp * dgx - dfx * dgp
    return float(total)


def poisson_bracket_oracle(pt: PhasePoint, weight: AnalyticWeight, step: float = 1e-3) -> float:
    """Independent check of :func:`subprincipal_symbol`.

    Differences only the principal symbol, in canonical coordinates; never
    touches the Hessian or Christoffel formulas.
    """
    if step <= 0 or step > 0.1:
        raise CarlemanError("oracle step must lie in (0, 0.1]")
    if not isinstance(weight, AnalyticWeight):
        raise CarlemanError("the bracket oracle needs an analytic weight")
    if pt.r - step <= 0:
        raise CarlemanError("base point too close to r = 0 for the oracle stencil")
    a = weight.surface.profile.a
    lam = weight.lam

    def symbol(x, p):
        r, t = x
        _, grad = weight.gradient(r, t)
        phi = np.exp(lam * weight.psi_fn(r, t))
        grad_phi = lam * phi * grad
        xi = np.array([p[0], p[1] / a(r)])
        return principal_symbol_from(grad_phi, weight.V_fn(r, t), xi)

    x0 = np.array([pt.r, pt.theta])
    p0 = np.array([pt.xi_r, pt.xi_t * float(a(pt.r))])
    return poisson_bracket(lambda x, p: symbol(x, p).real, lambda x, p: symbol(x, p).imag, x0, p0, step)


# -- characteristic set and the subellipticity scan ------------------------------


def characteristic_set_sample(weight: GridWeight, n_xi_angles: int = 8, n_xi_radii: int = 5,
                              nodes=None) -> list[PhasePoint]:
    """Covectors on circles spanning ``1/4 Q <= |xi|^2 <= 4 Q``, ``Q = |grad phi|^2 + V``."""
    g = weight.surface.grid
    if nodes is None:
        I, J = np.meshgrid(np.arange(1, g.n_r - 1), np.arange(g.n_theta), indexing="ij")
        nodes = (I.ravel(), J.ravel())
    jet = weight.jet(*nodes)
    _, grad_phi, _ = phi_derivatives(jet, weight.lam)
    Q = np.sum(grad_phi**2, -1) + jet.V
    keep = Q > 0
    angles = 2 * np.pi * np.arange(n_xi_angles) / n_xi_angles
    t = np.linspace(-1.0, 1.0, n_xi_radii)
    pts = []
    for idx in np.flatnonzero(keep):
        i, j = int(nodes[0][idx]), int(nodes[1][idx])
        for tt in t:
            rad = np.sqrt(Q[idx] * 4.0**tt)
            for al in angles:
                pts.append(PhasePoint(float(g.r[i]), float(g.theta[j]), float(rad * np.cos(al)),
                                      float(rad * np.sin(al)), (i, j)))
    return pts


@dataclass
class SymbolReport:
    lam: float
    weight_index: int
    min_p_sub: float            # min of p_sub / e^{3 lam psi} over the sample
    argmin_node: tuple[int, int]
    argmin_xi: tuple[float, float]
    n_points: int


@dataclass
class ScanResult:
    lambda_0: float | None
    best_margin: float
    growth_exponent: float | None
    reports: list[SymbolReport] = field(default_factory=list)

    def minima(self) -> dict[float, float]:
        out: dict[float, float] = {}
        for rep in self.reports:
            out[rep.lam] = min(out.get(rep.lam, np.inf), rep.min_p_sub)
        return out


def _weight_scan(surface: Surface, psi, lam: float, V, mask, n_angles: int, n_radii: int):
    """Normalised ``min p_sub e^{-3 lam psi}`` over Sigma samples at nodes in ``mask``."""
    gw = GridWeight(surface, psi, lam, V)
    g = surface.grid
    inner = np.zeros(g.shape, dtype=bool)
    inner[1:-1] = True
    sel = np.argwhere(inner & mask)
    if sel.size == 0:
        return np.inf, (-1, -1), (0.0, 0.0), 0
    I, J = sel[:, 0], sel[:, 1]
    jet = gw.jet(I, J)
    phi, grad_phi, hess_phi = phi_derivatives(jet, lam)
    Q = np.sum(grad_phi**2, -1) + jet.V
    ok = Q > 0
    I, J, Q = I[ok], J[ok], Q[ok]
    phi, grad_phi, hess_phi = phi[ok], grad_phi[ok], hess_phi[ok]
    grad_V = jet.grad_V[ok]
    base = 2 * np.sum((grad_V + 2 * np.einsum("nij,nj->ni", hess_phi, grad_phi)) * grad_phi, -1)
    angles = 2 * np.pi * np.arange(n_angles) / n_angles
    dirs = np.stack([np.cos(angles), np.sin(angles)], -1)            # (A, 2)
    quad = np.einsum("ai,nij,aj->na", dirs, hess_phi, dirs)         # (N, A)
    t = np.linspace(-1.0, 1.0, n_radii)
    rad2 = Q[:, None] * 4.0 ** t[None, :]                            # (N, T)
    p_sub = base[:, None, None] + 4 * quad[:, None, :] * rad2[:, :, None]
    norm = np.exp(3 * lam * gw.psi[I, J])
    scaled = p_sub / norm[:, None, None]
    k = int(np.argmin(scaled))
    n_idx, t_idx, a_idx = np.unravel_index(k, scaled.shape)
    rad = np.sqrt(rad2[n_idx, t_idx])
    xi = (float(rad * dirs[a_idx, 0]), float(rad * dirs[a_idx, 1]))
    return float(scaled.ravel()[k]), (int(I[n_idx]), int(J[n_idx])), xi, int(scaled.size)


def subellipticity_scan(family, V=0.0, lambda_grid=None, eps_cfg: float = 0.0,
                        n_xi_angles: int = 8, n_xi_radii: int = 5) -> ScanResult:
    """Least ``lambda`` whose normalised ``min p_sub`` exceeds ``eps_cfg`` for every weight.

    ``p_sub`` is divided by ``e^{3 lam psi}`` (the scale of its leading term)
    so the minimum over nodes is not dominated by the most negative ``psi``;
    positivity is unaffected.  The growth exponent is the log-log slope of the
    worst normalised minimum over the passing tail of the grid.
    """
    if lambda_grid is None:
        lambda_grid = np.arange(2.0, 21.0, 2.0)
    surface = family.surface
    reports = []
    lam0 = None
    per_lam = []
    for lam in lambda_grid:
        worst = np.inf
        for k, w in enumerate(family.weights):
            mask = w.grad_norm >= family.rho
            m, node, xi, npts = _weight_scan(surface, w.psi, float(lam), V, mask, n_xi_angles, n_xi_radii)
            reports.append(SymbolReport(float(lam), k, m, node, xi, npts))
            worst = min(worst, m)
        per_lam.append(worst)
        if lam0 is None and worst > eps_cfg:
            lam0 = float(lam)
    per_lam = np.asarray(per_lam)
    lams = np.asarray(lambda_grid, dtype=float)
    growth = None
    if lam0 is not None:
        tail = (lams >= lam0) & (per_lam > 0)
        if tail.sum() >= 2:
            growth = float(np.polyfit(np.log(lams[tail]), np.log(per_lam[tail]), 1)[0])
    return ScanResult(lam0, float(per_lam.max()), growth, reports)
