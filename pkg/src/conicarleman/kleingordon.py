"""Damped Klein-Gordon dynamics ``u_tt + W u_t + L u + u = 0`` with exact energy accounting.

Time stepping is the implicit midpoint rule on ``z = (u, v)``.  Eliminating
``u^{n+1}`` leaves one symmetric positive definite solve per step,

    (M + dt^2/4 (K + M) + dt/2 M W) v^{n+1} = M v - dt (K + M) u - dt^2/4 (K + M) v - dt/2 M W v,

so the factorization is computed once and reused.  The discrete energy

    E = 1/2 (<K u, u> + ||u||^2 + ||v||^2)

then satisfies ``E^{n+1} - E^n = -dt ||sqrt(W) v^{n+1/2}||^2`` to roundoff.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from conicarleman.errors import CarlemanError
from conicarleman.operators import LaplaceOperator

log = logging.getLogger(__name__)


@dataclass
class KGState:
    u: np.ndarray
    v: np.ndarray
    t: float = 0.0


class DampedKGSystem:
    """Cached midpoint solver for a fixed ``(L, W, dt)``."""

    def __init__(self, L: LaplaceOperator, W=0.0, dt: float = 1e-2):
        if dt == 0:
            raise CarlemanError("time step must be nonzero")
        w = L.restrict(W).astype(float) if np.ndim(W) else np.full(L.n, float(W))
        if np.any(w < 0):
            raise CarlemanError("damping W must be nonnegative")
        self.L = L
        self.W = w
        self.dt = float(dt)
        M = sp.diags(L.weights)
        self._KM = (L.K + M).tocsr()
        self._MW = sp.diags(L.weights * w)
        S = M + 0.25 * dt * dt * self._KM + 0.5 * dt * self._MW
        try:
            self._lu = spla.splu(S.tocsc())
        except RuntimeError as exc:
            raise CarlemanError(f"midpoint system factorization failed: {exc}") from exc

    def reversed(self) -> "DampedKGSystem":
        return DampedKGSystem(self.L, self.L.extend(self.W), -self.dt)


def _advance(system: DampedKGSystem, u, v, ku):
    """One midpoint step given ``ku = (K + M) u``; returns ``(u, v, (K + M) u)`` at the new time."""
    dt = system.dt
    rhs = (system.L.weights * v - dt * ku - 0.25 * dt * dt * (system._KM @ v)
           - 0.5 * dt * (system._MW @ v))
    v_new = system._lu.solve(rhs)
    u_new = u + 0.5 * dt * (v + v_new)
    return u_new, v_new, system._KM @ u_new


def step_implicit_midpoint(state: KGState, system: DampedKGSystem) -> KGState:
    u, v, _ = _advance(system, state.u, state.v, system._KM @ state.u)
    if not (np.all(np.isfinite(u)) and np.all(np.isfinite(v))):
        raise CarlemanError(f"midpoint solve produced non-finite values at t = {state.t:g}")
    return KGState(u, v, state.t + system.dt)


def energy(state: KGState, system: DampedKGSystem) -> float:
    """``1/2 (||grad u||^2 + ||u||^2 + ||v||^2)`` in the volume-weighted norms."""
    L = system.L
    u, v = state.u, state.v
    return 0.5 * float(np.real(L.dirichlet_form(u, u)) + L.norm(u) ** 2 + L.norm(v) ** 2)


def dissipation(v_mid, system: DampedKGSystem) -> float:
    """``||sqrt(W) v||^2``."""
    return float(np.sum(system.L.weights * system.W * np.abs(v_mid) ** 2))


@dataclass
class DecayTrace:
    t: np.ndarray
    E: np.ndarray
    dissipation: np.ndarray          # ||sqrt(W) v^{n+1/2}||^2 for the step ending at t[n]; 0 at t[0]
    residual: np.ndarray             # |E^{n+1} - E^n + dt diss| / E^0; 0 at t[0]
    final: KGState | None = field(default=None, repr=False)


def run(system: DampedKGSystem, u0, v0, T: float, record_every: int = 1,
        track_energy: bool = True) -> DecayTrace:
    """Integrate to time ``|T|`` and record energy, dissipation and balance residual."""
    n_steps = int(round(abs(T / system.dt)))
    u = np.array(u0, dtype=float)
    v = np.array(v0, dtype=float)
    m = system.L.weights
    mw = m * system.W
    ku = system._KM @ u
    E_prev = 0.5 * float(u @ ku + v @ (m * v))
    scale = E_prev if E_prev > 0 else 1.0
    ts, Es, ds, rs = [0.0], [E_prev], [0.0], [0.0]
    for n in range(1, n_steps + 1):
        u_new, v_new, ku = _advance(system, u, v, ku)
        if track_energy:
            vm = 0.5 * (v + v_new)
            d = float(vm @ (mw * vm))
            E_new = 0.5 * float(u_new @ ku + v_new @ (m * v_new))
            res = abs(E_new - E_prev + abs(system.dt) * d) / scale
            E_prev = E_new
            if n % record_every == 0 or n == n_steps:
                ts.append(n * system.dt)
                Es.append(E_new)
                ds.append(d)
                rs.append(res)
        u, v = u_new, v_new
    if not (np.all(np.isfinite(u)) and np.all(np.isfinite(v))):
        raise CarlemanError("time stepping produced non-finite values")
    final = KGState(u, v, n_steps * system.dt)
    return DecayTrace(np.abs(np.array(ts)), np.array(Es), np.array(ds), np.array(rs), final)


def energy_balance_residual(trace: DecayTrace) -> float:
    return float(np.max(trace.residual))


def reversibility_error(system: DampedKGSystem, u0, v0, T: float) -> float:
    """Relative distance to the initial state after evolving to ``T`` and back."""
    fwd = run(system, u0, v0, T, track_energy=False).final
    back = run(system.reversed(), fwd.u, fwd.v, T, track_energy=False).final
    L = system.L
    num = np.hypot(L.norm(back.u - u0), L.norm(back.v - v0))
    den = np.hypot(L.norm(np.asarray(u0)), L.norm(np.asarray(v0)))
    return float(num / den)


def damped_oscillator(t, c: float, u0: float = 1.0, v0: float = 0.0):
    """Closed form of ``u'' + c u' + u = 0`` (any ``c >= 0``)."""
    t = np.asarray(t, dtype=float)
    disc = c * c / 4 - 1
    a = -c / 2
    if disc < 0:
        w = np.sqrt(-disc)
        return np.exp(a * t) * (u0 * np.cos(w * t) + (v0 - a * u0) / w * np.sin(w * t))
    if disc == 0:
        return np.exp(a * t) * (u0 + (v0 - a * u0) * t)
    w = np.sqrt(disc)
    return np.exp(a * t) * (u0 * np.cosh(w * t) + (v0 - a * u0) / w * np.sinh(w * t))


def data_norm(L: LaplaceOperator, u0, u1) -> float:
    """``D0 = ||u0||^2 + ||L u0||^2 + ||u1||^2 + <L u1, u1>`` (graph-norm H^2 x H^1 proxy)."""
    return float(L.norm(u0) ** 2 + L.norm(L.apply(u0)) ** 2 + L.norm(u1) ** 2
                 + np.real(L.dirichlet_form(u1, u1)))


@dataclass
class DecayFit:
    c_log: float
    D0: float
    t_sup: float
    last_decade_slope: float
    profile: np.ndarray = field(repr=False)     # E(t) log(2 + t) / D0 on trace.t
    samples: np.ndarray = field(repr=False)     # dyadic sample times used for c_log


def dyadic_times(T: float) -> np.ndarray:
    k = int(np.floor(np.log2(T))) if T >= 1 else 0
    return np.concatenate([[0.0], 2.0 ** np.arange(k + 1), [T]])


def decay_fit(trace: DecayTrace, D0: float, min_T: float = 100.0) -> DecayFit:
    """Sup of ``E(t) log(2 + t) / D0`` over dyadic times, and the trend over the last decade."""
    T = float(trace.t[-1])
    if T < min_T:
        raise CarlemanError(f"trace too short for a decay fit: T = {T:g} < {min_T:g}")
    if D0 <= 0:
        raise CarlemanError("initial data norm must be positive")
    profile = trace.E * np.log(2 + trace.t) / D0
    samples = np.unique(dyadic_times(T))
    idx = np.clip(np.searchsorted(trace.t, samples - 1e-9), 0, trace.t.size - 1)
    k = int(np.argmax(profile[idx]))
    tail = trace.t >= T / 10
    slope = float(np.polyfit(np.log10(trace.t[tail]), profile[tail], 1)[0])
    return DecayFit(float(profile[idx][k]), float(D0), float(trace.t[idx][k]), slope, profile, samples)
