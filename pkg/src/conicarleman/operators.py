"""Sparse semiclassical operators, conjugation and smallest-singular-value measurements.

The Laplacian is assembled in flux form as ``L = M^{-1} K`` where ``K`` is the
symmetric stiffness matrix of the discrete Dirichlet form and ``M`` the
diagonal matrix of volume weights, so ``L`` is self-adjoint and nonnegative in
the weighted inner product by construction.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from conicarleman.errors import CarlemanError, CertificationError
from conicarleman.geometry import RegionMask, Surface, volume_weights
from conicarleman.weights import chart_distance, smoothstep

log = logging.getLogger(__name__)

LOG_OVERFLOW_LIMIT = 600.0


@dataclass
class LaplaceOperator:
    surface: Surface
    K: sp.csr_matrix = field(repr=False)
    weights: np.ndarray = field(repr=False)
    active: np.ndarray = field(repr=False)
    bc: str = "dirichlet"

    @property
    def n(self) -> int:
        return self.active.size

    @property
    def matrix(self) -> sp.csr_matrix:
        return sp.diags(1.0 / self.weights) @ self.K

    def restrict(self, field_values) -> np.ndarray:
        """Full nodal field -> vector of active unknowns."""
        return np.asarray(field_values).ravel()[self.active]

    def extend(self, vec) -> np.ndarray:
        """Active vector -> full nodal field, zero on eliminated nodes."""
        vec = np.asarray(vec)
        out = np.zeros(self.surface.grid.size, dtype=vec.dtype)
        out[self.active] = vec
        return out.reshape(self.surface.grid.shape)

    def apply(self, vec) -> np.ndarray:
        return (self.K @ vec) / self.weights

    def inner(self, u, v) -> complex:
        return np.sum(self.weights * u * np.conj(v))

    def norm(self, u) -> float:
        return float(np.sqrt(np.real(self.inner(u, u))))

    def dirichlet_form(self, u, v) -> complex:
        """Edge-sum form ``<grad u, grad v>``; equals ``<L u, v>`` exactly."""
        return np.vdot(v, self.K @ u)

    def mask_vector(self, mask: RegionMask) -> np.ndarray:
        return self.restrict(mask.flags).astype(bool)


def assemble_laplacian(surface: Surface, bc: str = "dirichlet") -> LaplaceOperator:
    """Flux-form Laplace-Beltrami operator.

    Neumann at ``r = 0`` (ghost reflection), periodic in theta; at ``r = R``
    either Dirichlet (row elimination, the default) or Neumann.
    """
    if bc not in ("dirichlet", "neumann"):
        raise CarlemanError(f"unknown boundary condition {bc!r}")
    g = surface.grid
    a = surface.profile.a
    nr, nt = g.shape
    w = volume_weights(surface).ravel()
    a_nodes = a(g.r)
    a_half = a(g.r[:-1] + 0.5 * g.dr)

    rows, cols, vals = [], [], []
    I, J = np.meshgrid(np.arange(nr - 1), np.arange(nt), indexing="ij")
    rows.append(g.flat_index(I, J).ravel())
    cols.append(g.flat_index(I + 1, J).ravel())
    vals.append(np.repeat(a_half * g.dtheta / g.dr, nt))

    I, J = np.meshgrid(np.arange(nr), np.arange(nt), indexing="ij")
    rows.append(g.flat_index(I, J).ravel())
    cols.append(g.flat_index(I, J + 1).ravel())
    w_ring = w.reshape(g.shape)[:, 0]
    vals.append(np.repeat(w_ring / (a_nodes**2 * g.dtheta**2), nt))

    rows, cols, vals = (np.concatenate(x) for x in (rows, cols, vals))
    n = g.size
    E = sp.coo_matrix((vals, (rows, cols)), shape=(n, n)).tocsr()
    E = E + E.T
    K = sp.diags(np.asarray(E.sum(axis=1)).ravel()) - E

    if bc == "dirichlet":
        active = np.arange((nr - 1) * nt)
    else:
        active = np.arange(n)
    K = K.tocsr()[active][:, active].tocsr()
    return LaplaceOperator(surface, K, w[active], active, bc)


@dataclass
class SemiclassicalOperator:
    """``h^2 L - V`` (plain), its conjugation by ``e^{phi/h}``, or ``h^2 L - i h W - 1`` (damped)."""

    L: LaplaceOperator
    h: float
    matrix: sp.csr_matrix = field(repr=False)
    variant: str = "plain"
    V: np.ndarray | None = field(default=None, repr=False)
    W: np.ndarray | None = field(default=None, repr=False)
    phi: np.ndarray | None = field(default=None, repr=False)

    def apply(self, u):
        return self.matrix @ u


def semiclassical_operator(L: LaplaceOperator, h: float, V=1.0) -> SemiclassicalOperator:
    """``P_h = h^2 L - V``; ``V`` is a scalar or a full nodal field."""
    if np.ndim(V) == 0:
        v = np.full(L.n, float(V))
    else:
        v = L.restrict(V).astype(float)
    A = (h**2 * L.matrix - sp.diags(v)).tocsr()
    return SemiclassicalOperator(L, h, A, "plain", V=v)


def damped_operator(L: LaplaceOperator, W, h: float) -> SemiclassicalOperator:
    """``h^2 L - i h W - 1``."""
    w = L.restrict(W).astype(float) if np.ndim(W) else np.full(L.n, float(W))
    if np.any(w < 0):
        raise CarlemanError("damping W must be nonnegative")
    A = (h**2 * L.matrix - 1j * h * sp.diags(w) - sp.identity(L.n)).tocsr()
    return SemiclassicalOperator(L, h, A, "damped", W=w)


def interpolate_potential(table: dict[float, np.ndarray], h: float) -> np.ndarray:
    """Linear interpolation in ``h`` of tabulated potentials ``V(x; h)``."""
    hs = sorted(table)
    if h <= hs[0]:
        return np.asarray(table[hs[0]])
    if h >= hs[-1]:
        return np.asarray(table[hs[-1]])
    k = np.searchsorted(hs, h)
    h0, h1 = hs[k - 1], hs[k]
    t = (h - h0) / (h1 - h0)
    return (1 - t) * np.asarray(table[h0]) + t * np.asarray(table[h1])


def conjugate_operator(P: SemiclassicalOperator, phi, h: float | None = None) -> SemiclassicalOperator:
    """``e^{phi/h} P e^{-phi/h}`` assembled entrywise in log space."""
    if P.variant != "plain":
        raise CarlemanError("only the plain variant can be conjugated")
    h = P.h if h is None else h
    p = P.L.restrict(phi).astype(float) if np.size(phi) > 1 else np.full(P.L.n, float(phi))
    spread = (p.max() - p.min()) / h
    if spread > LOG_OVERFLOW_LIMIT:
        raise CarlemanError(
            f"conjugation spread (max phi - min phi)/h = {spread:.1f} exceeds {LOG_OVERFLOW_LIMIT}; "
            "use a larger h or smaller lambda")
    A = P.matrix.tocoo()
    ref = p.max()
    scale = np.exp((p[A.row] - ref) / h - (p[A.col] - ref) / h)
    C = sp.csr_matrix((A.data * scale, (A.row, A.col)), shape=A.shape)
    return SemiclassicalOperator(P.L, h, C, "conjugated", V=P.V, phi=p)


@dataclass
class SigmaMinResult:
    sigma_min: float
    residual: float
    iterations: int
    certified: bool
    vector: np.ndarray | None = field(default=None, repr=False)


def sigma_min(A, w_out=None, w_in=None, tol: float = 1e-8, max_iter: int = 200,
              block: int = 6, seed: int = 0) -> SigmaMinResult:
    """Smallest singular value of ``A`` between weighted l2 spaces.

    Subspace inverse iteration on the Gram operator ``G = B^H B`` where
    ``B = diag(sqrt(w_out)) A diag(1/sqrt(w_in))``, with one sparse LU
    factorization and Rayleigh-Ritz on every sweep.

    The value reported is ``||B v||`` for the converged unit vector ``v``
    rather than the square root of the Ritz value; this stays accurate when
    ``sigma^2`` falls below roundoff relative to ``||G||``.  The residual is
    the backward error ``||G v - sigma^2 v|| / ||G||_1``.  The returned vector
    is in the unweighted input coordinates.
    """
    A = sp.csr_matrix(A)
    m, n = A.shape
    w_out = np.ones(m) if w_out is None else np.asarray(w_out, float)
    w_in = np.ones(n) if w_in is None else np.asarray(w_in, float)
    s_in = np.sqrt(w_in)
    B = (sp.diags(np.sqrt(w_out)) @ A @ sp.diags(1.0 / s_in)).tocsc()
    G = (B.conj().T @ B).tocsc()
    g_norm = max(float(abs(G).sum(axis=0).max()), np.finfo(float).tiny)
    complex_case = np.iscomplexobj(G.data)

    def finish(v, it):
        v = v / np.linalg.norm(v)
        sig = float(np.linalg.norm(B @ v))
        res = float(np.linalg.norm(G @ v - sig**2 * v) / g_norm)
        return SigmaMinResult(sig, res, it, res <= tol, v / s_in)

    if n <= 3 * block:
        _, V = np.linalg.eigh(G.toarray())
        return finish(V[:, 0], 1)

    try:
        lu = spla.splu(G, permc_spec="COLAMD")
    except RuntimeError:
        log.info("Gram factorization singular; shifting to locate the null vector")
        shift = 1e-14 * g_norm
        lu = spla.splu((G + shift * sp.identity(n, format="csc")).tocsc(), permc_spec="COLAMD")

    rng = np.random.default_rng(seed)
    p = min(block, n)
    X = rng.standard_normal((n, p))
    if complex_case:
        X = X + 1j * rng.standard_normal((n, p))
    X, _ = np.linalg.qr(X)
    result, prev = None, np.inf
    for it in range(1, max_iter + 1):
        Y, _ = np.linalg.qr(lu.solve(X))
        H = Y.conj().T @ (G @ Y)
        _, Z = np.linalg.eigh(0.5 * (H + H.conj().T))
        X = Y @ Z
        result = finish(X[:, 0], it)
        # backward error alone is too weak once sigma^2 << ||G||; also require a settled value
        if result.certified and abs(result.sigma_min - prev) <= tol * result.sigma_min:
            break
        prev = result.sigma_min
    if not result.certified:
        log.warning("sigma_min not certified after %d iterations (residual %.2e)",
                    result.iterations, result.residual)
    return result


def carleman_stack(P: SemiclassicalOperator, omega: RegionMask):
    """``[P_h; R_Omega]`` with matching output weights."""
    L = P.L
    om = L.mask_vector(omega)
    if not om.any():
        raise CarlemanError("control region empty")
    idx = np.flatnonzero(om)
    R = sp.csr_matrix((np.ones(idx.size), (np.arange(idx.size), idx)), shape=(idx.size, L.n))
    A = sp.vstack([P.matrix, R]).tocsr()
    w_out = np.concatenate([L.weights, L.weights[idx]])
    return A, w_out


def carleman_constant(P: SemiclassicalOperator, omega: RegionMask, tol: float = 1e-8,
                      max_iter: int = 200) -> tuple[float, SigmaMinResult]:
    """``K(h) = sup ||u|| / sqrt(||P_h u||^2 + ||1_Omega u||^2)``."""
    A, w_out = carleman_stack(P, omega)
    res = sigma_min(A, w_out, P.L.weights, tol=tol, max_iter=max_iter)
    K = np.inf if res.sigma_min == 0 else 1.0 / res.sigma_min
    return K, res


def local_carleman_check(P: SemiclassicalOperator, phi, chi_mask: RegionMask,
                         tol: float = 1e-8, max_iter: int = 200) -> tuple[float, SigmaMinResult]:
    """``sup ||e^{phi/h} chi u|| / ||e^{phi/h} P_h chi u||`` over fields supported in ``chi``.

    Equals ``1/sigma_min`` of the conjugated operator restricted to columns in
    the support; rows are the support plus its stencil neighbours, so leakage
    out of the support counts.  Only those nodes enter the conjugation, and
    the overflow guard is applied to them alone.
    """
    if P.variant != "plain":
        raise CarlemanError("only the plain variant can be conjugated")
    L = P.L
    cols = np.flatnonzero(L.mask_vector(chi_mask))
    if cols.size == 0:
        raise CarlemanError("cutoff support is empty")
    block = P.matrix[:, cols]
    rows = np.unique(block.nonzero()[0])
    p = L.restrict(phi).astype(float) if np.size(phi) > 1 else np.full(L.n, float(phi))
    p_rows, p_cols = p[rows], p[cols]
    involved = np.concatenate([p_rows, p_cols])
    spread = (involved.max() - involved.min()) / P.h
    if spread > LOG_OVERFLOW_LIMIT:
        raise CarlemanError(
            f"conjugation spread (max phi - min phi)/h = {spread:.1f} exceeds {LOG_OVERFLOW_LIMIT}; "
            "use a larger h or smaller lambda")
    A = block[rows].tocoo()
    scale = np.exp((p_rows[A.row] - p_cols[A.col]) / P.h)
    A = sp.csr_matrix((A.data * scale, (A.row, A.col)), shape=A.shape)
    res = sigma_min(A, L.weights[rows], L.weights[cols], tol=tol, max_iter=max_iter)
    return (np.inf if res.sigma_min == 0 else 1.0 / res.sigma_min), res


def resolvent_norm(L: LaplaceOperator, W, h: float, tol: float = 1e-8,
                   max_iter: int = 200) -> tuple[float, SigmaMinResult]:
    """``||(h^2 L - i h W - 1)^{-1}||`` in the weighted norm."""
    w = np.asarray(W)
    if w.size > 1 and not np.any(L.restrict(w) > 0):
        raise CarlemanError("damping region is empty")
    D = damped_operator(L, W, h)
    res = sigma_min(D.matrix, L.weights, L.weights, tol=tol, max_iter=max_iter)
    return (np.inf if res.sigma_min == 0 else 1.0 / res.sigma_min), res


@dataclass
class PairingCheck:
    residual: float
    relative: float
    pairing: complex
    dirichlet: float
    damping: float


def pairing_identity_check(L: LaplaceOperator, u, W, h: float) -> PairingCheck:
    """Compare ``<f, u>`` with ``h^2 <grad u, grad u> - ||u||^2 - i h ||sqrt(W) u||^2``."""
    D = damped_operator(L, W, h)
    f = D.apply(u)
    lhs = L.inner(f, u)
    grad2 = float(np.real(L.dirichlet_form(u, u)))
    wu = float(np.real(L.inner(D.W * u, u)))
    rhs = h**2 * grad2 - L.norm(u) ** 2 - 1j * h * wu
    resid = abs(lhs - rhs)
    scale = L.norm(u) ** 2 + L.norm(f) * L.norm(u)
    return PairingCheck(float(resid), float(resid / scale), complex(lhs), grad2, wu)


@dataclass
class ModeMass:
    h: float
    eigenvalue: float
    mass_ratio: float

    @property
    def exponent(self) -> float:
        """``-h log(||u||_Omega / ||u||)``."""
        return -self.h * np.log(self.mass_ratio)


def eigenmode_mass(L: LaplaceOperator, h_values, omega: RegionMask, n_modes: int = 6) -> list[ModeMass]:
    """Shift-invert eigenpairs of ``L`` nearest ``1/h^2`` and their mass in ``Omega``.

    For each ``h`` the returned entry is the worst (least mass in Omega) of the
    ``n_modes`` eigenfunctions nearest the shift.
    """
    om = L.mask_vector(omega)
    if not om.any():
        raise CarlemanError("control region empty")
    s = np.sqrt(L.weights)
    S = (sp.diags(1 / s) @ L.K @ sp.diags(1 / s)).tocsc()
    out = []
    for h in h_values:
        shift = 1.0 / h**2
        try:
            vals, vecs = spla.eigsh(S, k=n_modes, sigma=shift, which="LM",
                                    v0=np.ones(L.n))
        except spla.ArpackNoConvergence:
            log.warning("no eigenvalues converged near 1/h^2 for h=%g; skipping", h)
            continue
        ratios = np.sqrt(np.sum(np.abs(vecs[om]) ** 2, axis=0) / np.sum(np.abs(vecs) ** 2, axis=0))
        k = int(np.argmin(ratios))
        out.append(ModeMass(float(h), float(vals[k]), float(ratios[k])))
    return out


@dataclass
class FitResult:
    slope: float
    intercept: float
    r2: float
    residuals: np.ndarray = field(repr=False)

    def predict(self, h):
        return np.exp(self.slope / np.asarray(h) + self.intercept)


def exp_fit(h_values, y_values) -> FitResult:
    """Least squares for ``log y = C / h + b``."""
    h = np.asarray(h_values, float)
    y = np.asarray(y_values, float)
    if h.size < 4:
        raise CarlemanError("exp_fit needs at least 4 points")
    if np.any(~np.isfinite(y)) or np.any(y <= 0):
        raise CertificationError("exp_fit requires finite positive values")
    x, ly = 1.0 / h, np.log(y)
    X = np.column_stack([x, np.ones_like(x)])
    (C, b), *_ = np.linalg.lstsq(X, ly, rcond=None)
    resid = ly - (C * x + b)
    ss_tot = np.sum((ly - ly.mean()) ** 2)
    r2 = 1.0 if ss_tot == 0 else float(max(0.0, 1 - np.sum(resid**2) / ss_tot))
    return FitResult(float(C), float(b), r2, resid)


def farthest_point(surface: Surface, sites, r_range: tuple[float, float],
                   n_r: int = 101, n_theta: int = 721) -> tuple[float, float]:
    """Point of ``r_range x S^1`` farthest (in chart distance) from every site.

    Searched on a fixed candidate set independent of the grid, so the result
    does not move under refinement.
    """
    cr, ct = np.meshgrid(np.linspace(*r_range, n_r), np.linspace(0, 2 * np.pi, n_theta),
                         indexing="ij")
    d = np.min([chart_distance(surface, cr, ct, r0, t0) for r0, t0 in sites], axis=0)
    k = int(np.argmax(d))
    return float(cr.ravel()[k]), float(ct.ravel()[k])


def well_potential(surface: Surface, center: tuple[float, float], depth: float = 0.3,
                   floor: float = 0.1, width: float = 0.2) -> np.ndarray:
    """``V0 = -floor + (floor + depth) (1 - smoothstep(d / width))``, ``d`` the distance to ``center``.

    ``h^2 L - V0`` then has a single well of depth ``-depth`` surrounded by a
    barrier of height ``floor``.
    """
    r, th = surface.grid.mesh()
    d = chart_distance(surface, r, th, *center)
    return -floor + (floor + depth) * (1.0 - smoothstep(d / width))


def ground_state_energy(L: LaplaceOperator, V, h: float) -> float:
    """Lowest eigenvalue of ``h^2 L - V`` (symmetrised in the weighted inner product)."""
    v = L.restrict(V).astype(float) if np.ndim(V) else np.full(L.n, float(V))
    s = np.sqrt(L.weights)
    S = h**2 * (sp.diags(1 / s) @ L.K @ sp.diags(1 / s)) - sp.diags(v)
    vals = spla.eigsh(S.tocsc(), k=1, sigma=float(-v.max() - 1.0), which="LM",
                      v0=np.ones(L.n), return_eigenvectors=False)
    return float(vals[0])


def tuned_potential(L: LaplaceOperator, V0, h: float) -> np.ndarray:
    """``V(x; h) = V0 + E0(h)`` so that ``h^2 L - V`` has an exact zero mode.

    The zero mode is the ground state of the well; its mass outside the well
    is the tunnelling amplitude, which is what makes ``K(h)`` exponential.
    """
    return np.asarray(V0, float) + ground_state_energy(L, V0, h)


@dataclass
class StressRow:
    R: float
    K: float
    residual: float
    certified: bool


def plane_wave_stress(h0: float, R_values, make_surface, make_omega, V=1.0) -> list[StressRow]:
    """``K(h0, R)`` as the truncation radius grows.

    ``make_surface(R)`` builds the geometry and ``make_omega(surface)`` the
    control region; keep the latter fixed near the tip for the counterexample
    and let it grow with ``R`` for the eps-dense control.
    """
    rows = []
    for R in R_values:
        surface = make_surface(R)
        L = assemble_laplacian(surface)
        K, res = carleman_constant(semiclassical_operator(L, h0, V), make_omega(surface))
        rows.append(StressRow(float(R), float(K), res.residual, res.certified))
    return rows
