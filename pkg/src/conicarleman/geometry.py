"""Truncated conic surfaces of revolution and their discrete metric quantities.

The surface is ``[0, R] x S^1`` with metric ``dr^2 + a(r)^2 dtheta^2``.  For
``r >= r_cone`` the warp factor is the pure cone ``a(r) = beta * r``; below it a
cubic funnel with ``a(0) = a_min`` and ``a'(0) = 0`` models the compact piece.

Nodal fields are numpy arrays of shape ``(n_r, n_theta)``; flattening is
row-major, so node ``(i, j)`` has flat index ``i * n_theta + j``.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import dijkstra

from conicarleman.errors import GeometryError


@dataclass(frozen=True)
class ConeProfile:
    """Warp factor ``a(r)``.

    ``kind`` is ``"cone"`` (cubic cap blended into ``beta * r``) or
    ``"cylinder"`` (``a`` constant and equal to ``a_min``).
    """

    beta: float
    r_cone: float
    a_min: float
    R: float
    kind: str = "cone"
    c2: float = 0.0
    c3: float = 0.0

    def a(self, r):
        r = np.asarray(r, dtype=float)
        if self.kind == "cylinder":
            return np.full_like(r, self.a_min)
        cap = self.a_min + self.c2 * r**2 + self.c3 * r**3
        return np.where(r >= self.r_cone, self.beta * r, cap)

    def da(self, r):
        r = np.asarray(r, dtype=float)
        if self.kind == "cylinder":
            return np.zeros_like(r)
        cap = 2 * self.c2 * r + 3 * self.c3 * r**2
        return np.where(r >= self.r_cone, self.beta, cap)

    def d2a(self, r):
        r = np.asarray(r, dtype=float)
        if self.kind == "cylinder":
            return np.zeros_like(r)
        cap = 2 * self.c2 + 6 * self.c3 * r
        return np.where(r >= self.r_cone, 0.0, cap)


@dataclass(frozen=True)
class Grid:
    n_r: int
    n_theta: int
    R: float
    r: np.ndarray = field(repr=False)
    theta: np.ndarray = field(repr=False)

    @property
    def dr(self) -> float:
        return self.R / (self.n_r - 1)

    @property
    def dtheta(self) -> float:
        return 2 * np.pi / self.n_theta

    @property
    def shape(self) -> tuple[int, int]:
        return (self.n_r, self.n_theta)

    @property
    def size(self) -> int:
        return self.n_r * self.n_theta

    def mesh(self) -> tuple[np.ndarray, np.ndarray]:
        return np.meshgrid(self.r, self.theta, indexing="ij")

    def flat_index(self, i, j):
        return np.asarray(i) * self.n_theta + np.mod(j, self.n_theta)

    def nearest_node(self, r: float, theta: float) -> tuple[int, int]:
        i = int(np.clip(round(r / self.dr), 0, self.n_r - 1))
        j = int(round(theta / self.dtheta)) % self.n_theta
        return i, j


@dataclass(frozen=True)
class Surface:
    """Profile and grid bundled; the object every other module consumes."""

    profile: ConeProfile
    grid: Grid

    @property
    def a_nodes(self) -> np.ndarray:
        return self.profile.a(self.grid.r)

    def zeros(self, dtype=float) -> np.ndarray:
        return np.zeros(self.grid.shape, dtype=dtype)


@dataclass(frozen=True)
class RegionMask:
    flags: np.ndarray
    label: str = "Omega"

    def __post_init__(self):
        object.__setattr__(self, "flags", np.asarray(self.flags, dtype=bool))

    @property
    def count(self) -> int:
        return int(self.flags.sum())

    def __or__(self, other: "RegionMask") -> "RegionMask":
        return RegionMask(self.flags | other.flags, self.label)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["i", "j", "flag"])
            for (i, j), v in np.ndenumerate(self.flags):
                writer.writerow([i, j, int(v)])

    @classmethod
    def from_csv(cls, path, shape, label="Omega") -> "RegionMask":
        flags = np.zeros(shape, dtype=bool)
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                flags[int(row["i"]), int(row["j"])] = bool(int(row["flag"]))
        return cls(flags, label)


def _make_grid(R: float, n_r: int, n_theta: int) -> Grid:
    if n_r < 4 or n_theta < 4:
        raise GeometryError("grid needs n_r >= 4 and n_theta >= 4")
    r = np.linspace(0.0, R, n_r)
    theta = 2 * np.pi * np.arange(n_theta) / n_theta
    return Grid(n_r, n_theta, float(R), r, theta)


def build_cone(beta: float, r_cone: float, R: float, n_r: int, n_theta: int,
               a_min: float) -> Surface:
    """Build the cubic-capped cone.

    The cap is ``a(r) = a_min + c2 r^2 + c3 r^3`` with value and slope matched
    to ``beta * r`` at ``r_cone``.
    """
    if beta <= 0 or a_min <= 0 or not 0 < r_cone < R:
        raise GeometryError(f"need beta > 0, a_min > 0, 0 < r_cone < R (got {beta}, {a_min}, {r_cone}, {R})")
    rc = r_cone
    # c2 rc^2 + c3 rc^3 = beta rc - a_min ;  2 c2 rc + 3 c3 rc^2 = beta
    c3 = (beta * rc - 2 * (beta * rc - a_min)) / rc**3
    c2 = (beta * rc - a_min) / rc**2 - c3 * rc
    profile = ConeProfile(beta, rc, a_min, float(R), "cone", c2, c3)
    fine = np.linspace(0.0, rc, 2001)
    if np.min(profile.a(fine)) < a_min / 2:
        raise GeometryError("cubic blend dips below a_min/2; increase a_min or r_cone")
    return Surface(profile, _make_grid(R, n_r, n_theta))


def build_cylinder(radius: float, R: float, n_r: int, n_theta: int) -> Surface:
    """Constant warp ``a = radius``: the separable test geometry."""
    if radius <= 0:
        raise GeometryError("cylinder radius must be positive")
    profile = ConeProfile(0.0, 0.0, float(radius), float(R), "cylinder")
    return Surface(profile, _make_grid(R, n_r, n_theta))


def metric_gradient(surface: Surface, u: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Orthonormal-frame gradient components ``(d_r u, a^-1 d_theta u)``."""
    g = surface.grid
    u = np.asarray(u, dtype=float).reshape(g.shape)
    g_r = np.empty_like(u)
    g_r[1:-1] = (u[2:] - u[:-2]) / (2 * g.dr)
    g_r[0] = (-3 * u[0] + 4 * u[1] - u[2]) / (2 * g.dr)
    g_r[-1] = (3 * u[-1] - 4 * u[-2] + u[-3]) / (2 * g.dr)
    d_theta = (np.roll(u, -1, axis=1) - np.roll(u, 1, axis=1)) / (2 * g.dtheta)
    g_theta = d_theta / surface.a_nodes[:, None]
    return g_r, g_theta


def grad_norm(surface: Surface, u: np.ndarray) -> np.ndarray:
    g_r, g_t = metric_gradient(surface, u)
    return np.hypot(g_r, g_t)


def volume_weights(surface: Surface) -> np.ndarray:
    """Trapezoid-in-r quadrature weights ``a(r_i) dr dtheta``."""
    g = surface.grid
    w_r = surface.a_nodes * g.dr
    w_r[0] *= 0.5
    w_r[-1] *= 0.5
    return np.repeat(w_r[:, None] * g.dtheta, g.n_theta, axis=1)


def inner(surface: Surface, u, v) -> complex:
    w = volume_weights(surface)
    return np.sum(w * np.asarray(u) * np.conj(np.asarray(v)))


def grid_graph(surface: Surface):
    """8-neighbour graph with metric edge lengths, as a CSR adjacency matrix."""
    g = surface.grid
    a = surface.profile.a
    nr, nt = g.shape
    rows, cols, lens = [], [], []
    I, J = np.meshgrid(np.arange(nr), np.arange(nt), indexing="ij")

    def add(di, dj, length):
        ok = (I + di >= 0) & (I + di < nr)
        src = g.flat_index(I[ok], J[ok])
        dst = g.flat_index(I[ok] + di, J[ok] + dj)
        rows.append(src)
        cols.append(dst)
        lens.append(np.broadcast_to(length, I.shape)[ok])

    r_mid = g.r[:, None] + 0.5 * g.dr
    add(1, 0, np.full(I.shape, g.dr))
    add(0, 1, a(g.r)[:, None] * g.dtheta * np.ones((1, nt)))
    diag = np.sqrt(g.dr**2 + (a(r_mid) * g.dtheta) ** 2) * np.ones((1, nt))
    add(1, 1, diag)
    add(1, -1, diag)
    rows, cols, lens = (np.concatenate(x) for x in (rows, cols, lens))
    n = g.size
    return coo_matrix((lens, (rows, cols)), shape=(n, n)).tocsr()


def geodesic_distance(surface: Surface, sources: np.ndarray) -> np.ndarray:
    """Graph geodesic distance from the set of flagged nodes to every node."""
    src = np.flatnonzero(np.asarray(sources, dtype=bool).ravel())
    if src.size == 0:
        raise GeometryError("control region empty")
    d = dijkstra(grid_graph(surface), directed=False, indices=src, min_only=True)
    return d.reshape(surface.grid.shape)


@dataclass
class DensityReport:
    ok: bool
    worst_distance: float
    worst_node: tuple[int, int]


def eps_dense_check(surface: Surface, mask: RegionMask, eps: float) -> DensityReport:
    if eps <= 0:
        raise GeometryError("eps must be positive")
    if mask.count == 0:
        raise GeometryError("control region empty")
    d = geodesic_distance(surface, mask.flags)
    k = int(np.argmax(d))
    worst = float(d.ravel()[k])
    node = tuple(int(x) for x in np.unravel_index(k, d.shape))
    return DensityReport(worst <= eps, worst, node)
