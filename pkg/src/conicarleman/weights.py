"""Multiple-weight families on the cone: construction, certification and gluing checks.

Weights are stored canonically in log space: ``log phi = lambda * psi`` and
``phi / h = exp(lambda * psi) / h`` is only ever combined through
log-sum-exp, never exponentiated a second time.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from scipy.interpolate import RegularGridInterpolator
from scipy.special import logsumexp

from conicarleman.errors import CertificationError, GeometryError, RelocationError
from conicarleman.geometry import (RegionMask, Surface, eps_dense_check, geodesic_distance,
                                   grad_norm)

log = logging.getLogger(__name__)


def smoothstep(t):
    """Quintic C^2 ramp from 0 (t <= 0) to 1 (t >= 1)."""
    t = np.clip(t, 0.0, 1.0)
    return t**3 * (10 - 15 * t + 6 * t * t)


def trim_ramp(t, t0: float = 0.1):
    """C^1 piecewise-quadratic ramp from 0 to 1 with a short convex start.

    Curvature is ``+2/t0`` on ``[0, t0]`` and ``-2/(1 - t0)`` on ``[t0, 1]``.
    Unlike a ramp that is flat to high order at ``t = 1``, the ratio
    ``|sigma''| / sigma'^2`` stays bounded on ``{sigma' >= c}`` like ``1/c^2``,
    which is what keeps trimmed weights subelliptic at moderate ``lambda``.
    """
    t = np.clip(np.asarray(t, dtype=float), 0.0, 1.0)
    head = t * t / t0
    tail = 1.0 - (1.0 - t) ** 2 / (1.0 - t0)
    return np.where(t < t0, head, tail)


def wrap_angle(dtheta):
    """Map angles to (-pi, pi]."""
    return np.pi - np.mod(np.pi - np.asarray(dtheta), 2 * np.pi)


def chart_distance(surface: Surface, r, theta, r0: float, theta0: float):
    """Smooth grid-independent surrogate for geodesic distance to ``(r0, theta0)``.

    ``sqrt((r - r0)^2 + 4 a(r) a(r0) sin^2((theta - theta0)/2))``; agrees with the
    intrinsic distance to second order near the centre.
    """
    a = surface.profile.a
    return np.sqrt((r - r0) ** 2 + 4 * a(r) * a(r0) * np.sin((theta - theta0) / 2) ** 2)


@dataclass
class Weight:
    psi: np.ndarray = field(repr=False)
    lam: float
    label: str = ""
    grad_norm: np.ndarray | None = field(default=None, repr=False)

    @property
    def log_phi(self) -> np.ndarray:
        return self.lam * self.psi

    @property
    def phi(self) -> np.ndarray:
        return np.exp(self.log_phi)


@dataclass
class WeightFamily:
    surface: Surface = field(repr=False)
    weights: list[Weight]
    rho: float
    tau: float
    omega: RegionMask = field(repr=False)

    @property
    def n(self) -> int:
        return len(self.weights)

    @property
    def lam(self) -> float:
        return self.weights[0].lam

    def psi_stack(self) -> np.ndarray:
        return np.stack([w.psi for w in self.weights])

    def grad_stack(self) -> np.ndarray:
        return np.stack([w.grad_norm for w in self.weights])

    def to_json(self) -> dict:
        g = self.surface.grid
        p = self.surface.profile
        return {
            "grid": {"n_r": g.n_r, "n_theta": g.n_theta, "R": g.R},
            "profile": {"kind": p.kind, "beta": p.beta, "r_cone": p.r_cone, "a_min": p.a_min},
            "lambda": self.lam,
            "rho": self.rho,
            "tau": self.tau,
            "weights": [{"label": w.label, "psi": w.psi.tolist()} for w in self.weights],
            "omega": self.omega.flags.astype(int).tolist(),
        }

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh)

    @classmethod
    def from_json(cls, data: dict) -> "WeightFamily":
        from conicarleman.geometry import build_cone, build_cylinder

        g, p = data["grid"], data["profile"]
        if p["kind"] == "cylinder":
            surface = build_cylinder(p["a_min"], g["R"], g["n_r"], g["n_theta"])
        else:
            surface = build_cone(p["beta"], p["r_cone"], g["R"], g["n_r"], g["n_theta"], p["a_min"])
        weights = [make_weight(surface, np.asarray(w["psi"]), data["lambda"], w["label"])
                   for w in data["weights"]]
        omega = RegionMask(np.asarray(data["omega"], dtype=bool), "Omega")
        return cls(surface, weights, data["rho"], data["tau"], omega)

    @classmethod
    def load(cls, path) -> "WeightFamily":
        with open(path) as fh:
            return cls.from_json(json.load(fh))


def make_weight(surface: Surface, psi, lam: float, label: str = "") -> Weight:
    psi = np.asarray(psi, dtype=float).reshape(surface.grid.shape)
    return Weight(psi, float(lam), label, grad_norm(surface, psi))


# -- sectors and lattice weights ------------------------------------------------


@dataclass
class Sector:
    index: int
    center: float
    half_width: float
    mask: RegionMask = field(repr=False)


def sector_decomposition(surface: Surface, n_sectors: int, overlap_fraction: float,
                         cap_margin: float = 1.0) -> tuple[list[Sector], RegionMask]:
    """Angular sectors of the conic end plus the cap ``{r < r_cone + cap_margin}``."""
    if n_sectors < 3:
        raise GeometryError("need at least 3 sectors for an overlapping cover")
    if not 0 < overlap_fraction <= 0.5:
        raise GeometryError("overlap_fraction must lie in (0, 0.5]")
    r, th = surface.grid.mesh()
    r_cone = surface.profile.r_cone
    half = (1 + overlap_fraction) * np.pi / n_sectors
    sectors = []
    for k in range(n_sectors):
        c = 2 * np.pi * k / n_sectors
        flags = (np.abs(wrap_angle(th - c)) <= half + 1e-12) & (r >= r_cone)
        sectors.append(Sector(k, c, half, RegionMask(flags, f"sector{k}")))
    cap = RegionMask(r < r_cone + cap_margin, "cap")
    return sectors, cap


def flatten_sector(surface: Surface, sector: Sector):
    """Developing map ``(r, theta) -> (r cos(beta dtheta), r sin(beta dtheta))``."""
    beta = surface.profile.beta
    if 2 * sector.half_width > np.pi / beta:
        raise GeometryError("sector wider than pi/beta: flattening map not injective")
    r, th = surface.grid.mesh()
    ang = beta * wrap_angle(th - sector.center)
    return r * np.cos(ang), r * np.sin(ang)


def pullback_lattice_weight(surface: Surface, sector: Sector, pitch: float = 1.0) -> np.ndarray:
    """``cos(2 pi x / s) cos(2 pi y / s)`` pulled back through the flattening, 0 off-sector."""
    x, y = flatten_sector(surface, sector)
    psi = np.cos(2 * np.pi * x / pitch) * np.cos(2 * np.pi * y / pitch)
    return np.where(sector.mask.flags, psi, 0.0)


def flattening_distortion(surface: Surface, sector: Sector) -> tuple[float, float]:
    """Min and max ratio of flattened to intrinsic edge length over sector edges."""
    g = surface.grid
    x, y = flatten_sector(surface, sector)
    m = sector.mask.flags
    a = surface.a_nodes
    ratios = []
    both = m[1:] & m[:-1]
    ratios.append((np.hypot(np.diff(x, axis=0), np.diff(y, axis=0)) / g.dr)[both])
    mt = m & np.roll(m, -1, axis=1)
    flat = np.hypot(np.roll(x, -1, axis=1) - x, np.roll(y, -1, axis=1) - y)
    intrinsic = 2 * a[:, None] * np.sin(g.dtheta / 2) * np.ones((1, g.n_theta))
    ratios.append((flat / intrinsic)[mt])
    ratios = np.concatenate(ratios)
    return float(ratios.min()), float(ratios.max())


# -- critical points -------------------------------------------------------------


@dataclass
class CriticalCluster:
    nodes: np.ndarray = field(repr=False)   # (k, 2) array of (i, j)
    centroid: tuple[float, float]           # (r, theta)
    diameter: float

    @property
    def size(self) -> int:
        return len(self.nodes)


def _label_periodic(flags: np.ndarray) -> tuple[np.ndarray, int]:
    """Connected components with 8-connectivity and theta wrap-around."""
    labels, n = ndimage.label(flags, structure=np.ones((3, 3)))
    if n == 0:
        return labels, 0
    parent = list(range(n + 1))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    first, last = labels[:, 0], labels[:, -1]
    nr = flags.shape[0]
    for i in range(nr):
        if first[i] == 0:
            continue
        for di in (-1, 0, 1):
            k = i + di
            if 0 <= k < nr and last[k]:
                ra, rb = find(first[i]), find(last[k])
                if ra != rb:
                    parent[max(ra, rb)] = min(ra, rb)
    roots = np.array([find(a) for a in range(n + 1)])
    uniq = {r: idx for idx, r in enumerate(sorted(set(roots[1:])), start=1)}
    remap = np.zeros(n + 1, dtype=int)
    for a in range(1, n + 1):
        remap[a] = uniq[roots[a]]
    return remap[labels], len(uniq)


def find_critical_points(surface: Surface, psi, rho: float) -> list[CriticalCluster]:
    """Connected components of ``{|grad psi| < rho}``, ordered by centroid."""
    if rho <= 0:
        raise ValueError("rho must be positive")
    gn = grad_norm(surface, psi)
    return clusters_of(surface, gn < rho)


def clusters_of(surface: Surface, flags) -> list[CriticalCluster]:
    g = surface.grid
    labels, n = _label_periodic(np.asarray(flags, dtype=bool))
    out = []
    for k in range(1, n + 1):
        idx = np.argwhere(labels == k)
        r = g.r[idx[:, 0]]
        th = g.theta[idx[:, 1]]
        # circular mean handles clusters straddling theta = 0
        t_c = float(np.mod(np.angle(np.mean(np.exp(1j * th))), 2 * np.pi))
        r_c = float(r.mean())
        d = chart_distance(surface, r[:, None], th[:, None], r[None, :], th[None, :]) \
            if len(idx) <= 400 else _approx_diameter(surface, r, th)
        out.append(CriticalCluster(idx, (r_c, t_c), float(np.max(d))))
    out.sort(key=lambda c: (round(c.centroid[0], 9), round(c.centroid[1], 9)))
    return out


def _approx_diameter(surface, r, th):
    sample = np.linspace(0, len(r) - 1, 400).astype(int)
    return chart_distance(surface, r[sample][:, None], th[sample][:, None],
                          r[sample][None, :], th[sample][None, :])


# -- relocation --------------------------------------------------------------------


def bump_flow(points, p_from, p_to, support_radius: float, n_steps: int | None = None,
              cell: float | None = None, direction: float = 1.0) -> np.ndarray:
    """Time-1 flow of ``X(q) = b(|q - p_from|) (p_to - p_from)`` in Euclidean coordinates.

    ``b`` equals 1 within ``|p_to - p_from|`` of ``p_from`` and decays to 0 at
    ``support_radius`` with a quintic ramp, so ``p_from`` is carried exactly to
    ``p_to`` and nothing outside the support ball moves.  ``direction=-1``
    gives the inverse map.  RK4 with steps short enough that one step moves a
    point by less than ``0.1 * cell``.
    """
    q = np.array(points, dtype=float, copy=True)
    p_from = np.asarray(p_from, float)
    shift = np.asarray(p_to, float) - p_from
    dist = float(np.linalg.norm(shift))
    if dist == 0.0:
        return q
    inner = dist
    if support_radius <= inner:
        raise RelocationError("support radius must exceed the relocation distance")
    if n_steps is None:
        cell = dist / 10 if cell is None else cell
        n_steps = max(4, int(np.ceil(dist / (0.1 * cell))))
    dt = direction / n_steps

    def field_at(x):
        rad = np.linalg.norm(x - p_from, axis=-1, keepdims=True)
        b = 1.0 - smoothstep((rad - inner) / (support_radius - inner))
        return b * shift

    for _ in range(n_steps):
        k1 = field_at(q)
        k2 = field_at(q + 0.5 * dt * k1)
        k3 = field_at(q + 0.5 * dt * k2)
        k4 = field_at(q + dt * k3)
        q = q + dt / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
    return q


def move_critical_point(surface: Surface, psi, p_from, p_to, support_radius: float,
                        rho: float = 0.3) -> np.ndarray:
    """Relocate the critical cluster near ``p_from`` to ``p_to`` by ``psi o Phi^{-1}``.

    Points are ``(r, theta)``.  The flow runs in the local chart
    ``(r, a(r_from) * dtheta)`` around ``p_from``; values outside the support
    ball are copied unchanged.
    """
    g = surface.grid
    psi = np.asarray(psi, dtype=float).reshape(g.shape)
    r_f, t_f = map(float, p_from)
    r_t, t_t = map(float, p_to)
    if not (0 <= r_t <= g.R and 0 <= r_f <= g.R):
        raise RelocationError("relocation path leaves the grid")
    a_f = float(surface.profile.a(r_f))
    to_local = np.array([r_t - r_f, a_f * wrap_angle(t_t - t_f)])
    if np.linalg.norm(to_local) == 0.0:
        return psi.copy()
    if r_f - support_radius < 0 or r_f + support_radius > g.R:
        raise RelocationError("relocation support leaves the grid")

    r, th = g.mesh()
    local = np.stack([r - r_f, a_f * wrap_angle(th - t_f)], axis=-1)
    inside = np.linalg.norm(local, axis=-1) < support_radius

    low = find_critical_points(surface, psi, rho)
    touching = [c for c in low if np.any(inside[c.nodes[:, 0], c.nodes[:, 1]])]
    if len(touching) > 1:
        raise RelocationError("relocation ambiguous: %d critical clusters inside the support"
                              % len(touching))

    cell = min(g.dr, a_f * g.dtheta)
    pre = bump_flow(local[inside], np.zeros(2), to_local, support_radius,
                    cell=cell, direction=-1.0)
    # back to (r, theta) and sample the original field there
    r_src = pre[:, 0] + r_f
    t_src = np.mod(pre[:, 1] / a_f + t_f, 2 * np.pi)
    th_ext = np.concatenate([g.theta, [2 * np.pi]])
    psi_ext = np.concatenate([psi, psi[:, :1]], axis=1)
    interp = RegularGridInterpolator((g.r, th_ext), psi_ext, method="cubic")
    out = psi.copy()
    out[inside] = interp(np.column_stack([np.clip(r_src, 0, g.R), t_src]))
    return out


# -- trimming ----------------------------------------------------------------------


def trim_and_offset(psi, plateau, drop: float, psi_max: float = 1.0, tau: float = 0.0) -> np.ndarray:
    """Blend ``psi`` down to ``-drop`` with the plateau function ``sigma``.

    ``plateau`` is 1 on the core, 0 on and beyond the sector boundary; the
    result is ``sigma * psi - (1 - sigma) * drop``.
    """
    if drop <= max(2 * psi_max, psi_max + tau):
        need = max(2 * psi_max, psi_max + tau)
        raise CertificationError(f"drop {drop} too small to guarantee domination; need > {need}")
    sigma = np.clip(np.asarray(plateau, dtype=float), 0.0, 1.0)
    return sigma * np.asarray(psi) - (1 - sigma) * drop


def plateau_from_masks(surface: Surface, core: RegionMask, support: RegionMask) -> np.ndarray:
    """Generic plateau from graph distances: 1 on core, 0 off support."""
    d_core = geodesic_distance(surface, core.flags)
    outside = ~support.flags
    if not outside.any():
        return np.where(core.flags, 1.0, 1.0)
    d_out = geodesic_distance(surface, outside)
    t = d_out / np.maximum(d_out + d_core, 1e-300)
    return np.where(core.flags, 1.0, np.where(outside, 0.0, smoothstep(t)))


# -- family assembly -------------------------------------------------------------


@dataclass
class FamilyConfig:
    """Construction parameters of the sector-plus-cap family.

    Defaults target a cone truncated at ``R = 10``: collars are wide compared
    with the lattice pitch so that trimming does not create sharp ridges, and
    the cap slope is below ``rho`` so the cap core ends up inside ``Omega``.
    """

    n_sectors: int = 4
    overlap_fraction: float = 0.5
    pitch: float = 2.5
    lam: float = 1.0
    drop: float = 2.2
    psi_max: float = 1.0
    rho: float = 1.4
    tau: float = 0.1
    eps: float = 1.0
    omega_radius: float | None = 0.3  # None: eps/2
    edge_width: float | None = 2.0    # arc width of the angular collar; None: angular collar
    core_margin: float | None = None  # angular core half-width beyond pi/n; default overlap*pi/(2n)
    sector_start: float = 0.5     # radial collar of sector weights starts at r_cone + sector_start
    sector_inner: float = 2.0     # ... and has this width
    cap_core: float = 4.0         # cap weight core ends at r_cone + cap_core
    cap_collar: float = 2.0       # ... and reaches -drop at r_cone + cap_core + cap_collar
    cap_profile: str = "linear"   # or "cosine"
    moves: list = field(default_factory=list)   # [(k, (r0, t0), (r1, t1), support), ...]


def _sector_plateau(surface: Surface, sector: Sector, cfg: FamilyConfig) -> np.ndarray:
    """Plateau ``sigma`` of a sector weight: 1 on the core, 0 off the sector.

    With ``edge_width`` set, the angular collar is the band of flattened
    distance ``< edge_width`` to the sector's boundary rays, so its width is a
    length rather than an angle.
    """
    r, th = surface.grid.mesh()
    dth = np.abs(wrap_angle(th - sector.center))
    if cfg.edge_width is None:
        margin = cfg.overlap_fraction * np.pi / (2 * cfg.n_sectors) if cfg.core_margin is None \
            else cfg.core_margin
        core_half = np.pi / cfg.n_sectors + margin
        if not core_half < sector.half_width:
            raise GeometryError("angular core must be narrower than the sector")
        s_ang = trim_ramp((sector.half_width - dth) / (sector.half_width - core_half))
    else:
        beta = surface.profile.beta
        gap = np.clip(sector.half_width - dth, 0.0, None)
        edge_dist = r * np.sin(np.minimum(beta * gap, np.pi / 2))
        s_ang = trim_ramp(edge_dist / cfg.edge_width)
    r0 = surface.profile.r_cone + cfg.sector_start
    s_rad = trim_ramp((r - r0) / cfg.sector_inner)
    return np.where(sector.mask.flags, s_ang * s_rad, 0.0)


def cap_weight(surface: Surface, cfg: FamilyConfig) -> tuple[np.ndarray, np.ndarray]:
    """Cap profile and plateau.

    ``"linear"`` falls from ``psi_max`` at ``r = 0`` to ``-psi_max`` at the end
    of the core with constant slope (``r = 0`` is a boundary, so there is no
    critical ring); ``"cosine"`` is ``psi_max cos(pi r / r1)`` with critical
    rings at ``r = 0`` and ``r = r1``.
    """
    r, _ = surface.grid.mesh()
    r1 = surface.profile.r_cone + cfg.cap_core
    if cfg.cap_profile == "linear":
        psi0 = cfg.psi_max * (1 - 2 * r / r1)
    elif cfg.cap_profile == "cosine":
        psi0 = cfg.psi_max * np.cos(np.pi * r / r1)
    else:
        raise GeometryError(f"unknown cap profile {cfg.cap_profile!r}")
    plateau = trim_ramp((r1 + cfg.cap_collar - r) / cfg.cap_collar)
    return psi0, plateau


def undominated(family_psi: np.ndarray, family_grad: np.ndarray, rho: float, tau: float,
                omega: np.ndarray | None = None) -> np.ndarray:
    """Boolean ``(n, n_r, n_theta)``: weight k has small gradient at x and nobody dominates it."""
    small = family_grad < rho
    big = ~small
    bad = np.zeros_like(small)
    n = family_psi.shape[0]
    for k in range(n):
        ok = np.zeros(small.shape[1:], dtype=bool)
        for l in range(n):
            if l != k:
                ok |= big[l] & (family_psi[l] >= family_psi[k] + tau)
        bad[k] = small[k] & ~ok
    if omega is not None:
        bad &= ~omega[None]
    return bad


def lattice_sites(surface: Surface, spacing: float, r_start: float) -> list[tuple[float, float]]:
    """Staggered rings of sites roughly ``spacing`` apart along the surface."""
    sites = []
    for k, rr in enumerate(np.arange(r_start, surface.grid.R, spacing)):
        m = max(1, int(round(2 * np.pi * float(surface.profile.a(rr)) / spacing)))
        for j in range(m):
            sites.append((float(rr), float(2 * np.pi * (j + 0.5 * (k % 2)) / m)))
    return sites


def balls_mask(surface: Surface, sites, radius: float, label: str = "Omega") -> RegionMask:
    r, th = surface.grid.mesh()
    flags = np.zeros(surface.grid.shape, dtype=bool)
    for r0, t0 in sites:
        flags |= chart_distance(surface, r, th, r0, t0) <= radius
    return RegionMask(flags, label)


def densify(surface: Surface, omega: RegionMask, eps: float, radius: float,
            max_sites: int = 10_000) -> tuple[RegionMask, int]:
    """Add balls at the farthest node until ``omega`` is ``eps``-dense."""
    g = surface.grid
    added = 0
    for _ in range(max_sites):
        report = eps_dense_check(surface, omega, eps)
        if report.ok:
            return omega, added
        i, j = report.worst_node
        ball = balls_mask(surface, [(g.r[i], g.theta[j])], radius).flags
        ball[i, j] = True
        omega = RegionMask(omega.flags | ball, omega.label)
        added += 1
    raise CertificationError(f"could not make Omega {eps}-dense with {max_sites} balls")


def _raw_weights(surface: Surface, cfg: FamilyConfig) -> list[tuple[np.ndarray, np.ndarray, str]]:
    """Untrimmed profiles with their plateaus: the sectors, then the cap."""
    sectors, _ = sector_decomposition(surface, cfg.n_sectors, cfg.overlap_fraction,
                                      cfg.cap_core + cfg.cap_collar)
    raw = []
    for sec in sectors:
        psi0 = cfg.psi_max * pullback_lattice_weight(surface, sec, cfg.pitch)
        raw.append((psi0, _sector_plateau(surface, sec, cfg), f"sector{sec.index}"))
    cpsi, cplat = cap_weight(surface, cfg)
    raw.append((cpsi, cplat, "cap"))
    return raw


def family_weight(surface: Surface, cfg: FamilyConfig, k: int) -> np.ndarray:
    """Weight ``k`` of the family evaluated on an arbitrary grid (no relocations).

    Every ingredient is a closed-form function of ``(r, theta)``, so this is
    the same weight as in :func:`build_family`, sampled on ``surface``.
    """
    psi0, plateau, _ = _raw_weights(surface, cfg)[k]
    return trim_and_offset(psi0, plateau, cfg.drop, cfg.psi_max, cfg.tau)


def build_family(surface: Surface, cfg: FamilyConfig | None = None,
                 omega: RegionMask | None = None) -> WeightFamily:
    """Trimmed sector weights plus a cap weight, with ``Omega`` auto-generated if not given.

    Auto-generation puts a ball of radius ``omega_radius`` (default ``eps/2``)
    at the centroid of every critical cluster that no other weight dominates,
    then requires the result to be ``eps``-dense.
    """
    cfg = cfg or FamilyConfig()
    if 2 * cfg.psi_max >= cfg.drop:
        raise CertificationError(f"drop must exceed 2*psi_max = {2 * cfg.psi_max}")
    raw = _raw_weights(surface, cfg)
    psis = [p for p, _, _ in raw]
    for move in cfg.moves:
        k, p_from, p_to, support = move
        psis[k] = move_critical_point(surface, psis[k], p_from, p_to, support, cfg.rho)

    weights = [make_weight(surface, trim_and_offset(p, plat, cfg.drop, cfg.psi_max, cfg.tau),
                           cfg.lam, label)
               for p, (_, plat, label) in zip(psis, raw)]

    if omega is None:
        psi = np.stack([w.psi for w in weights])
        grad = np.stack([w.grad_norm for w in weights])
        bad = undominated(psi, grad, cfg.rho, cfg.tau).any(axis=0)
        if not bad.any():
            raise CertificationError("no undominated critical points; Omega would be empty")
        radius = cfg.eps / 2 if cfg.omega_radius is None else cfg.omega_radius
        sites = [c.centroid for c in clusters_of(surface, bad)]
        omega = balls_mask(surface, sites, radius)
        omega = RegionMask(omega.flags | bad, "Omega")
        omega, extra = densify(surface, omega, cfg.eps, radius)
        log.info("auto Omega: %d critical sites + %d density sites, %d nodes",
                 len(sites), extra, omega.count)
    if omega.count == 0:
        raise CertificationError("control region empty: compatibility cannot hold")
    return WeightFamily(surface, weights, cfg.rho, cfg.tau, omega)


# -- certification -------------------------------------------------------------------


@dataclass
class CompatibilityReport:
    ok: bool
    rho_star: float
    tau_star: float
    violations: list = field(default_factory=list)

    def to_json(self) -> dict:
        return {"ok": self.ok, "rho_star": self.rho_star, "tau_star": self.tau_star,
                "violations": [list(v) for v in self.violations]}


def compatibility_violations(family: WeightFamily, rho: float, tau: float) -> list[tuple[int, int, int]]:
    """All ``(k, i, j)`` with ``x = (i, j)`` outside Omega violating the definition."""
    bad = undominated(family.psi_stack(), family.grad_stack(), rho, tau, family.omega.flags)
    return [tuple(int(v) for v in idx) for idx in np.argwhere(bad)]


def check_compatibility(family: WeightFamily, rho_step: float = 0.05, tau_step: float = 0.02,
                        rho_max_steps: int = 40, tau_max_steps: int = 50) -> CompatibilityReport:
    """Exhaustive node scan on the ``rho x tau`` lattice.

    Returns the lexicographically largest passing ``(rho*, tau*)``.  When
    nothing passes, violations are reported at the family's own ``(rho, tau)``.
    """
    psi, grad = family.psi_stack(), family.grad_stack()
    om = family.omega.flags
    best = None
    for a in range(rho_max_steps, 0, -1):
        rho = a * rho_step
        for b in range(tau_max_steps, 0, -1):
            tau = b * tau_step
            if not undominated(psi, grad, rho, tau, om).any():
                best = (rho, tau)
                break
        if best is not None:
            break
    if best is not None:
        return CompatibilityReport(True, round(best[0], 12), round(best[1], 12), [])
    return CompatibilityReport(False, 0.0, 0.0, compatibility_violations(family, family.rho, family.tau))


# -- cutoffs and gluing ------------------------------------------------------------


@dataclass
class CutoffFamily:
    chi: np.ndarray = field(repr=False)        # (n, n_r, n_theta)
    chi_tilde: np.ndarray = field(repr=False)
    min_sum_off_omega: float


def build_cutoffs(family: WeightFamily) -> CutoffFamily:
    """``chi_k`` ramps |grad psi_k| from rho/2 to rho; ``chi_tilde_k = (1 - chi_k)`` off Omega."""
    rho = family.rho
    grad = family.grad_stack()
    chi = smoothstep((grad - rho / 2) / (rho / 2))
    off = ~family.omega.flags
    chi_tilde = np.where(off[None], 1.0 - chi, 0.0)
    total = chi.sum(axis=0)
    if off.any():
        worst = float(total[off].min())
        if worst < 1.0:
            i, j = np.argwhere(off & (total < 1.0))[0]
            raise CertificationError(f"sum of cutoffs below 1 at node ({i}, {j}): {worst:.4f}")
    else:
        worst = float("inf")
    return CutoffFamily(chi, chi_tilde, worst)


def gluing_epsilon(lam: float, tau: float, min_psi: float) -> float:
    """``(e^{lam tau} - 1) e^{lam min psi}``."""
    return float(np.expm1(lam * tau) * np.exp(lam * min_psi))


@dataclass
class GluingReport:
    ok_lower: bool
    ok_upper: bool
    epsilon: float
    margin_lower: float
    margin_upper: float


def verify_gluing_inequalities(family: WeightFamily, cutoffs: CutoffFamily, h: float) -> GluingReport:
    """Both pointwise inequalities, compared in log space.

    lower (off Omega): ``log sum chi_k e^{phi_k/h} >= log sum e^{phi_k/h} - log 2n``
    upper (all k'): ``log chi~_k' + phi_k'/h <= -eps/h + log sum e^{phi_k/h}``
    Margins are the worst slack of each, in log units.
    """
    lam = family.lam
    psi = family.psi_stack()
    n = family.n
    eps = gluing_epsilon(lam, family.tau, float(psi.min()))
    e = np.exp(lam * psi) / h       # the exponent phi/h itself is moderate
    log_total = logsumexp(e, axis=0)
    off = ~family.omega.flags

    with np.errstate(divide="ignore"):
        log_chi = np.log(cutoffs.chi)
        log_chi_t = np.log(cutoffs.chi_tilde)
    lower_lhs = logsumexp(e + log_chi, axis=0)
    slack_lower = lower_lhs - (log_total - np.log(2 * n))
    margin_lower = float(slack_lower[off].min()) if off.any() else float("inf")

    upper_lhs = log_chi_t + e
    slack_upper = (log_total - eps / h)[None] - upper_lhs
    finite = np.isfinite(upper_lhs)
    margin_upper = float(slack_upper[finite].min()) if finite.any() else float("inf")
    return GluingReport(margin_lower >= 0, margin_upper >= 0, eps, margin_lower, margin_upper)
