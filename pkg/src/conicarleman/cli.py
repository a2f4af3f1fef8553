"""Command line experiment runner.

Usage::

    conicarleman <group> <action> --config run.json [--output-dir DIR] [--dry-run]
    conicarleman reproduce manifest.json

Every run writes CSV/JSON outputs into ``<output_dir>/<group>-<action>/``
together with ``manifest.json`` (resolved config,
input hashes, output hashes, wall times).  Exit codes: 0 success, 1
operational error, 2 certification failure.
"""
from __future__ import annotations

import argparse
import concurrent.futures as cf
import copy
import csv
import datetime as dt
import functools
import hashlib
import io
import json
import logging
import os
import sys
import tempfile
import time
from pathlib import Path

import jsonschema
import numpy as np

from conicarleman import __version__
from conicarleman.errors import CarlemanError, CertificationError, ConfigError
from conicarleman.geometry import RegionMask, build_cone, build_cylinder, eps_dense_check
from conicarleman.kleingordon import DampedKGSystem, data_norm, decay_fit, energy_balance_residual, run
from conicarleman.operators import (
    assemble_laplacian, carleman_constant, eigenmode_mass, exp_fit, farthest_point,
    pairing_identity_check, plane_wave_stress, resolvent_norm, semiclassical_operator,
    tuned_potential, well_potential)
from conicarleman.symbols import subellipticity_scan
from conicarleman.weights import (
    FamilyConfig, balls_mask, build_cutoffs, build_family, chart_distance, check_compatibility,
    lattice_sites, smoothstep, verify_gluing_inequalities)

log = logging.getLogger(__name__)

WORKERS_ENV = "CONICARLEMAN_WORKERS"
COMMANDS = {
    "geometry": ["check"],
    "weights": ["build", "check"],
    "symbols": ["scan"],
    "carleman": ["sweep"],
    "resolvent": ["sweep"],
    "eigenmass": ["sweep"],
    "kg": ["run"],
    "stress": ["planewave"],
}

# -- schema ------------------------------------------------------------------------

_num = {"type": "number"}
_pos = {"type": "number", "exclusiveMinimum": 0}
_posint = {"type": "integer", "minimum": 1}
_point = {"type": "array", "items": _num, "minItems": 2, "maxItems": 2}


def _obj(props: dict, required=()) -> dict:
    return {"type": "object", "properties": props, "required": list(required),
            "additionalProperties": False}


def _kind(name: str, props: dict, required=()) -> dict:
    return _obj({"kind": {"const": name}, **props}, ["kind", *required])


OMEGA_SCHEMA = {"oneOf": [
    _kind("lattice", {"spacing": _pos, "r_start": _num, "radius": _pos}),
    _kind("ball", {"center": _point, "radius": _num}, ["center", "radius"]),
    _kind("disk", {"r_max": _num}, ["r_max"]),
    _kind("family", {}),
    _kind("all", {}),
    _kind("file", {"path": {"type": "string"}}, ["path"]),
]}

V_SCHEMA = {"oneOf": [
    _kind("constant", {"value": _num}, ["value"]),
    _kind("well", {"center": _point, "depth": _pos, "floor": _pos, "width": _pos,
                   "r_range": _point, "spacing": _pos, "r_start": _num}),
]}

W_SCHEMA = {"oneOf": [
    _kind("lattice", {"spacing": _pos, "r_start": _num, "radius": _pos, "r_max": _num}),
    _kind("constant", {"value": {"type": "number", "minimum": 0}}, ["value"]),
    _kind("zero", {}),
]}

INITIAL_SCHEMA = {"oneOf": [
    _kind("gaussian", {"center": _point, "width": _pos}, ["center"]),
    _kind("eigenmode", {"index": {"type": "integer", "minimum": 0}}, ["index"]),
    _kind("constant", {"value": _num}),
    _kind("file", {"path": {"type": "string"}}, ["path"]),
]}

CONFIG_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    **_obj({
        "geometry": _obj({
            "kind": {"enum": ["cone", "cylinder"]},
            "beta": _pos, "r_cone": _pos, "a_min": _pos, "radius": _pos,
            "R": _pos, "n_r": {"type": "integer", "minimum": 4},
            "n_theta": {"type": "integer", "minimum": 4},
            "bc": {"enum": ["dirichlet", "neumann"]},
            "eps": _pos,
        }),
        "weights": _obj({
            "n_sectors": _posint, "overlap_fraction": _num, "pitch": _pos, "lam": _pos,
            "drop": _pos, "psi_max": _pos, "rho": _pos, "tau": _pos, "eps": _pos,
            "omega_radius": {"type": ["number", "null"]},
            "edge_width": {"type": ["number", "null"]},
            "core_margin": {"type": ["number", "null"]},
            "sector_start": _num, "sector_inner": _pos, "cap_core": _pos, "cap_collar": _pos,
            "cap_profile": {"enum": ["linear", "cosine"]},
            "rho_max_steps": _posint, "tau_max_steps": _posint,
            "gluing_h": {"type": "array", "items": _pos, "minItems": 1},
        }),
        "symbols": _obj({
            "lambda_grid": {"type": "array", "items": _pos, "minItems": 1},
            "V": _num, "n_angles": _posint, "n_radii": _posint, "eps_cfg": _num,
        }),
        "operator": _obj({
            "h": {"type": "array", "items": _pos, "minItems": 1},
            "omega": OMEGA_SCHEMA,
            "V": V_SCHEMA,
            "tol": _pos, "max_iter": _posint,
            "n_modes": _posint, "n_pairing": _posint,
        }),
        "kg": _obj({
            "W": W_SCHEMA, "delta": {"type": "number", "minimum": 0}, "eps": _pos,
            "dt": _pos, "T": _pos, "initial": INITIAL_SCHEMA, "record_every": _posint,
        }),
        "stress": _obj({
            "h0": _pos, "R_values": {"type": "array", "items": _pos, "minItems": 1},
            "points_per_unit": _pos, "n_theta_per_unit": _pos, "V": _num,
            "omega": OMEGA_SCHEMA,
        }),
        "output_dir": {"type": "string"},
        "seed": {"type": "integer", "minimum": 0},
    }),
}

DEFAULTS = {
    "geometry": {"kind": "cone", "beta": 0.8, "r_cone": 1.0, "a_min": 0.5, "radius": 1.0,
                 "R": 4.0, "n_r": 201, "n_theta": 128, "bc": "dirichlet", "eps": 1.0},
    "weights": {"rho_max_steps": 80, "tau_max_steps": 50, "gluing_h": [0.1, 0.05, 0.02]},
    "symbols": {"lambda_grid": [2.0, 4.0, 6.0, 8.0, 10.0, 12.0, 14.0, 16.0, 18.0, 20.0],
                "V": 0.0, "n_angles": 8, "n_radii": 5, "eps_cfg": 0.0},
    "operator": {"h": [1 / 5, 1 / 10, 1 / 15, 1 / 20, 1 / 30, 1 / 40],
                 "omega": {"kind": "lattice"}, "V": {"kind": "constant", "value": 1.0},
                 "tol": 1e-8, "max_iter": 200, "n_modes": 6, "n_pairing": 20},
    "kg": {"W": {"kind": "lattice"}, "delta": 1.0, "eps": 1.0, "dt": 1e-2, "T": 500.0,
           "initial": {"kind": "gaussian", "center": [2.5, 1.0], "width": 0.5},
           "record_every": 1},
    "stress": {"h0": 0.1, "R_values": [2.0, 4.0, 8.0], "points_per_unit": 25.0,
               "n_theta_per_unit": 64.0, "V": 1.0, "omega": {"kind": "disk", "r_max": 0.5}},
    "output_dir": "out",
    "seed": 0,
}
OMEGA_DEFAULTS = {"lattice": {"spacing": 1.0, "r_start": 0.3, "radius": 0.25}}
V_DEFAULTS = {"well": {"depth": 0.3, "floor": 0.1, "width": 0.2, "r_range": [1.0, 2.5],
                       "spacing": 1.0, "r_start": 0.3}}
W_DEFAULTS = {"lattice": {"r_start": 0.3, "radius": 0.25}}
INITIAL_DEFAULTS = {"gaussian": {"width": 0.5}, "constant": {"value": 1.0}}


def _pointer(path) -> str:
    return "/" + "/".join(str(p) for p in path) if path else "/"


def _errors(schema: dict, instance, base: list) -> list[str]:
    problems = []
    validator = jsonschema.Draft202012Validator(schema)
    for err in sorted(validator.iter_errors(instance), key=lambda e: list(map(str, e.absolute_path))):
        path = base + list(err.absolute_path)
        if err.validator == "oneOf":
            # tagged union: validate against the branch named by "kind"
            kind = err.instance.get("kind") if isinstance(err.instance, dict) else None
            branch = next((b for b in err.validator_value
                           if b["properties"]["kind"]["const"] == kind), None)
            if branch is None:
                problems.append(f"{_pointer(path + ['kind'])}: unknown or missing kind {kind!r}")
            else:
                problems += _errors(branch, err.instance, path)
        elif err.validator == "additionalProperties":
            extra = sorted(set(err.instance) - set(err.schema.get("properties", {})))
            problems += [f"{_pointer(path + [k])}: unknown key" for k in extra]
        else:
            problems.append(f"{_pointer(path)}: {err.message}")
    return problems


def validate_config(raw: dict) -> list[str]:
    """Every schema violation as ``pointer: message``; unknown keys included."""
    return _errors(CONFIG_SCHEMA, raw, [])


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        out[k] = _merge(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) and "kind" not in v else copy.deepcopy(v)
    return out


def _fill_kind(spec: dict, defaults: dict) -> dict:
    return {**defaults.get(spec["kind"], {}), **spec}


def resolve_config(raw: dict) -> dict:
    """Validate, then fill defaults so the manifest records every value used."""
    problems = validate_config(raw)
    if problems:
        raise ConfigError(problems)
    cfg = _merge(DEFAULTS, raw)
    op, kg, st = cfg["operator"], cfg["kg"], cfg["stress"]
    op["omega"] = _fill_kind(op["omega"], OMEGA_DEFAULTS)
    st["omega"] = _fill_kind(st["omega"], OMEGA_DEFAULTS)
    op["V"] = _fill_kind(op["V"], V_DEFAULTS)
    kg["W"] = _fill_kind(kg["W"], {"lattice": {"spacing": kg["eps"], **W_DEFAULTS["lattice"]}})
    kg["initial"] = _fill_kind(kg["initial"], INITIAL_DEFAULTS)
    return cfg


def load_config(path) -> tuple[dict, bytes]:
    data = Path(path).read_bytes()
    try:
        raw = json.loads(data)
    except json.JSONDecodeError as exc:
        raise ConfigError([f"/: invalid JSON ({exc})"]) from exc
    if not isinstance(raw, dict):
        raise ConfigError(["/: config must be a JSON object"])
    return resolve_config(raw), data


def canonical(cfg: dict) -> str:
    return json.dumps(cfg, sort_keys=True, separators=(",", ":"))


def run_id(cfg: dict, command: str) -> str:
    return hashlib.sha256((command + "\n" + canonical(cfg)).encode()).hexdigest()[:16]


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# -- builders ----------------------------------------------------------------------


def make_surface(geo: dict, R: float | None = None, n_r: int | None = None,
                 n_theta: int | None = None):
    R = geo["R"] if R is None else R
    n_r = geo["n_r"] if n_r is None else n_r
    n_theta = geo["n_theta"] if n_theta is None else n_theta
    if geo["kind"] == "cylinder":
        return build_cylinder(geo["radius"], R, n_r, n_theta)
    return build_cone(geo["beta"], geo["r_cone"], R, n_r, n_theta, geo["a_min"])


def family_config(cfg: dict) -> FamilyConfig:
    keys = set(FamilyConfig.__dataclass_fields__) - {"moves"}
    return FamilyConfig(**{k: v for k, v in cfg["weights"].items() if k in keys})


def certified_family(surface, cfg: dict):
    fam = build_family(surface, family_config(cfg))
    w = cfg["weights"]
    rep = check_compatibility(fam, rho_max_steps=w["rho_max_steps"], tau_max_steps=w["tau_max_steps"])
    if rep.ok:
        fam.rho, fam.tau = rep.rho_star, rep.tau_star
    return fam, rep


def make_omega(surface, spec: dict, cfg: dict, where: str = "/operator/omega") -> RegionMask:
    kind = spec["kind"]
    r, th = surface.grid.mesh()
    if kind == "lattice":
        mask = balls_mask(surface, lattice_sites(surface, spec["spacing"], spec["r_start"]), spec["radius"])
    elif kind == "ball":
        mask = RegionMask(chart_distance(surface, r, th, *spec["center"]) <= spec["radius"])
    elif kind == "disk":
        mask = RegionMask(r <= spec["r_max"])
    elif kind == "family":
        mask = build_family(surface, family_config(cfg)).omega
    elif kind == "all":
        mask = RegionMask(np.ones(surface.grid.shape, dtype=bool))
    else:
        path = Path(spec["path"])
        if not path.exists():
            raise ConfigError([f"{where}/path: file not found: {path}"])
        mask = RegionMask.from_csv(path, surface.grid.shape)
    if mask.count == 0:
        raise ConfigError([f"{where}: control region is empty on this grid"])
    return mask


def make_potential(L, surface, spec: dict, h: float):
    if spec["kind"] == "constant":
        return float(spec["value"])
    center = spec.get("center")
    if center is None:
        sites = lattice_sites(surface, spec["spacing"], spec["r_start"])
        center = farthest_point(surface, sites, tuple(spec["r_range"]))
    V0 = well_potential(surface, tuple(center), spec["depth"], spec["floor"], spec["width"])
    return tuned_potential(L, L.restrict(V0), h)


def make_damping(surface, spec: dict, delta: float) -> np.ndarray:
    kind = spec["kind"]
    if kind == "zero":
        return surface.zeros()
    if kind == "constant":
        return np.full(surface.grid.shape, delta * spec["value"])
    r, th = surface.grid.mesh()
    r_max = spec.get("r_max", surface.grid.R)
    W = surface.zeros()
    for r0, t0 in lattice_sites(surface, spec["spacing"], spec["r_start"]):
        if r0 <= r_max:
            W = np.maximum(W, 1.0 - smoothstep(chart_distance(surface, r, th, r0, t0) / spec["radius"]))
    if not W.any():
        raise ConfigError(["/kg/W: damping region is empty on this grid"])
    return delta * W


def make_initial(L, surface, spec: dict):
    kind = spec["kind"]
    zero = np.zeros(L.n)
    if kind == "gaussian":
        r, th = surface.grid.mesh()
        d = chart_distance(surface, r, th, *spec["center"])
        return L.restrict(np.exp(-(d / spec["width"]) ** 2)), zero
    if kind == "constant":
        return np.full(L.n, float(spec["value"])), zero
    if kind == "eigenmode":
        import scipy.sparse as sp
        import scipy.sparse.linalg as spla
        s = np.sqrt(L.weights)
        S = (sp.diags(1 / s) @ L.K @ sp.diags(1 / s)).tocsc()
        k = spec["index"] + 1
        _, vecs = spla.eigsh(S, k=k, sigma=-1.0, which="LM", v0=np.ones(L.n))
        u = vecs[:, -1] / s
        return u / L.norm(u), zero
    path = Path(spec["path"])
    if not path.exists():
        raise ConfigError([f"/kg/initial/path: file not found: {path}"])
    data = np.genfromtxt(path, delimiter=",", names=True)
    u0 = L.restrict(np.asarray(data["u0"], float).reshape(surface.grid.shape))
    u1 = (L.restrict(np.asarray(data["u1"], float).reshape(surface.grid.shape))
          if "u1" in data.dtype.names else zero)
    return u0, u1


def referenced_files(cfg: dict) -> list[str]:
    out = []
    for spec in (cfg["operator"]["omega"], cfg["stress"]["omega"], cfg["kg"]["initial"]):
        if spec["kind"] == "file":
            out.append(spec["path"])
    return out


# -- sweep points (top level so worker processes can run them) ---------------------


@functools.lru_cache(maxsize=4)
def _context(cfg_json: str):
    cfg = json.loads(cfg_json)
    surface = make_surface(cfg["geometry"])
    L = assemble_laplacian(surface, cfg["geometry"]["bc"])
    return cfg, surface, L


def _carleman_point(cfg_json: str, h: float):
    cfg, surface, L = _context(cfg_json)
    op = cfg["operator"]
    omega = make_omega(surface, op["omega"], cfg)
    P = semiclassical_operator(L, h, make_potential(L, surface, op["V"], h))
    K, res = carleman_constant(P, omega, op["tol"], op["max_iter"])
    return [h, K, res.residual, int(res.certified), res.iterations]


def _resolvent_point(cfg_json: str, h: float):
    cfg, surface, L = _context(cfg_json)
    op, kg = cfg["operator"], cfg["kg"]
    W = make_damping(surface, kg["W"], kg["delta"])
    y, res = resolvent_norm(L, W, h, op["tol"], op["max_iter"])
    return [h, y, res.residual, int(res.certified), res.iterations]


def _stress_point(cfg_json: str, R: float):
    cfg = json.loads(cfg_json)
    st = cfg["stress"]
    surface = make_surface(cfg["geometry"], R, int(round(st["points_per_unit"] * R)) + 1,
                           int(round(st["n_theta_per_unit"] * R)))
    row = plane_wave_stress(st["h0"], [R], lambda _R: surface,
                            lambda s: make_omega(s, st["omega"], cfg, "/stress/omega"), st["V"])[0]
    return [row.R, row.K, row.residual, int(row.certified)]


def parallel_map(fn, cfg: dict, items) -> list:
    workers = int(os.environ.get(WORKERS_ENV, "1") or 1)
    key = canonical(cfg)
    if workers <= 1 or len(items) <= 1:
        return [fn(key, x) for x in items]
    with cf.ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, [key] * len(items), items))


# -- outputs -----------------------------------------------------------------------


def fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return "%.17g" % float(x)
    return str(x)


def csv_bytes(header, rows, rid: str) -> bytes:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["run_id", *header])
    for row in rows:
        writer.writerow([rid, *(fmt(x) for x in row)])
    return buf.getvalue().encode()


def _jsonable(x):
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, (np.bool_,)):
        return bool(x)
    if isinstance(x, np.integer):
        return int(x)
    if isinstance(x, (float, np.floating)):
        x = float(x)
        return x if np.isfinite(x) else str(x)
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    return x


def json_bytes(obj, rid: str) -> bytes:
    return (json.dumps(_jsonable({"run_id": rid, **obj}), indent=2, sort_keys=True) + "\n").encode()


def atomic_write(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".")
    with os.fdopen(fd, "wb") as fh:
        fh.write(data)
    os.chmod(tmp, 0o644)
    os.replace(tmp, path)


class Outputs:
    """Single writer for a run: collects CSV/JSON files, then writes them."""

    def __init__(self, rid: str):
        self.rid = rid
        self.files: dict[str, bytes] = {}
        self.status = 0
        self.messages: list[str] = []

    def table(self, name, header, rows):
        self.files[name] = csv_bytes(header, rows, self.rid)

    def summary(self, name, obj):
        self.files[name] = json_bytes(obj, self.rid)

    def mask(self, name, mask: RegionMask):
        rows = [(i, j, int(v)) for (i, j), v in np.ndenumerate(mask.flags)]
        self.table(name, ["i", "j", "flag"], rows)

    def fail(self, message: str):
        self.status = 2
        self.messages.append(message)


# -- stages ------------------------------------------------------------------------


def stage_geometry_check(cfg, out: Outputs):
    _, surface, L = _context(canonical(cfg))
    g = surface.grid
    a = surface.a_nodes
    omega = make_omega(surface, cfg["operator"]["omega"], cfg)
    dens = eps_dense_check(surface, omega, cfg["geometry"]["eps"])
    out.mask("omega_mask.csv", omega)
    out.table("profile.csv", ["r", "a"], zip(g.r, a))
    out.summary("geometry.json", {
        "n_r": g.n_r, "n_theta": g.n_theta, "R": g.R, "unknowns": L.n,
        "a_min": float(a.min()), "area": float(L.weights.sum()),
        "omega_nodes": omega.count, "eps": cfg["geometry"]["eps"],
        "eps_dense": dens.ok, "worst_distance": dens.worst_distance, "worst_node": dens.worst_node})
    if not dens.ok:
        out.fail(f"Omega is not eps-dense: worst distance {dens.worst_distance:.4g}")


def stage_weights_build(cfg, out: Outputs):
    _, surface, _ = _context(canonical(cfg))
    fam = build_family(surface, family_config(cfg))
    out.mask("omega_mask.csv", fam.omega)
    rows = []
    for k, w in enumerate(fam.weights):
        rows += [(k, i, j, w.psi[i, j], w.grad_norm[i, j]) for (i, j) in np.ndindex(w.psi.shape)]
    out.table("weights.csv", ["k", "i", "j", "psi", "grad_norm"], rows)
    out.summary("family.json", {"n_weights": fam.n, "labels": [w.label for w in fam.weights],
                                "lambda": fam.lam, "rho": fam.rho, "tau": fam.tau,
                                "omega_nodes": fam.omega.count})


def stage_weights_check(cfg, out: Outputs):
    _, surface, _ = _context(canonical(cfg))
    fam, rep = certified_family(surface, cfg)
    dens = eps_dense_check(surface, fam.omega, cfg["weights"].get("eps", 1.0))
    out.mask("omega_mask.csv", fam.omega)
    rows = []
    if rep.ok:
        cut = build_cutoffs(fam)
        for h in cfg["weights"]["gluing_h"]:
            g = verify_gluing_inequalities(fam, cut, h)
            rows.append([h, int(g.ok_lower), int(g.ok_upper), g.epsilon, g.margin_lower, g.margin_upper])
            if not (g.ok_lower and g.ok_upper):
                out.fail(f"gluing inequality fails at h = {h}")
    else:
        out.fail(f"family is not compatible: {len(rep.violations)} violations")
    out.table("gluing.csv", ["h", "ok_lower", "ok_upper", "epsilon", "margin_lower", "margin_upper"], rows)
    out.summary("compatibility.json", {**rep.to_json(), "violations": rep.violations[:100],
                                       "n_violations": len(rep.violations),
                                       "eps_dense": dens.ok, "worst_distance": dens.worst_distance})
    if not dens.ok:
        out.fail("Omega is not eps-dense")


def stage_symbols_scan(cfg, out: Outputs):
    _, surface, _ = _context(canonical(cfg))
    fam, rep = certified_family(surface, cfg)
    if not rep.ok:
        out.fail("family is not compatible; scan skipped")
        return
    sy = cfg["symbols"]
    sc = subellipticity_scan(fam, sy["V"], np.asarray(sy["lambda_grid"], float), sy["eps_cfg"],
                             sy["n_angles"], sy["n_radii"])
    out.table("scan.csv", ["lambda", "weight", "min_p_sub", "i", "j", "xi_r", "xi_theta", "n_points"],
              [[r.lam, r.weight_index, r.min_p_sub, *r.argmin_node, *r.argmin_xi, r.n_points]
               for r in sc.reports])
    out.summary("scan.json", {"lambda_0": sc.lambda_0, "growth_exponent": sc.growth_exponent,
                              "best_margin": sc.best_margin, "rho": fam.rho, "tau": fam.tau,
                              "minima": {str(k): v for k, v in sc.minima().items()}})
    if sc.lambda_0 is None:
        out.fail("no lambda on the grid makes p_sub positive")


def _fit_summary(out: Outputs, name, hs, ys, extra=None):
    body = dict(extra or {})
    try:
        fit = exp_fit(hs, ys)
        body.update(C=fit.slope, intercept=fit.intercept, r2=fit.r2)
    except CertificationError as exc:
        body.update(C=None, intercept=None, r2=None, error=str(exc))
        out.fail(str(exc))
    except CarlemanError as exc:
        body.update(C=None, intercept=None, r2=None, error=str(exc))
    out.summary(name, body)


def stage_carleman_sweep(cfg, out: Outputs):
    _, surface, _ = _context(canonical(cfg))
    omega = make_omega(surface, cfg["operator"]["omega"], cfg)
    out.mask("omega_mask.csv", omega)
    rows = parallel_map(_carleman_point, cfg, list(cfg["operator"]["h"]))
    out.table("carleman.csv", ["h", "K", "residual", "certified", "iterations"], rows)
    _fit_summary(out, "carleman.json", [r[0] for r in rows], [r[1] for r in rows],
                 {"omega_nodes": omega.count})


def stage_resolvent_sweep(cfg, out: Outputs):
    _, surface, L = _context(canonical(cfg))
    kg, op = cfg["kg"], cfg["operator"]
    W = make_damping(surface, kg["W"], kg["delta"])
    rows = parallel_map(_resolvent_point, cfg, list(op["h"]))
    out.table("resolvent.csv", ["h", "norm", "residual", "certified", "iterations"], rows)
    rng = np.random.default_rng(cfg["seed"])
    prow = []
    for k in range(op["n_pairing"]):
        u = rng.standard_normal(L.n) + 1j * rng.standard_normal(L.n)
        h = op["h"][k % len(op["h"])]
        pc = pairing_identity_check(L, u, W, h)
        prow.append([k, h, pc.residual, pc.relative])
    out.table("pairing.csv", ["field", "h", "residual", "relative"], prow)
    _fit_summary(out, "resolvent.json", [r[0] for r in rows], [r[1] for r in rows],
                 {"pairing_max_relative": max(r[3] for r in prow)})


def stage_eigenmass_sweep(cfg, out: Outputs):
    _, surface, L = _context(canonical(cfg))
    op = cfg["operator"]
    omega = make_omega(surface, op["omega"], cfg)
    out.mask("omega_mask.csv", omega)
    mm = eigenmode_mass(L, op["h"], omega, op["n_modes"])
    out.table("eigenmass.csv", ["h", "eigenvalue", "mass_ratio", "exponent"],
              [[m.h, m.eigenvalue, m.mass_ratio, m.exponent] for m in mm])
    ex = [m.exponent for m in mm]
    out.summary("eigenmass.json", {"sup_exponent": max(ex) if ex else None, "n_points": len(ex)})
    if not ex:
        out.fail("no eigenpairs converged")


def stage_kg_run(cfg, out: Outputs):
    _, surface, L = _context(canonical(cfg))
    kg = cfg["kg"]
    W = make_damping(surface, kg["W"], kg["delta"])
    u0, u1 = make_initial(L, surface, kg["initial"])
    system = DampedKGSystem(L, W, kg["dt"])
    trace = run(system, u0, u1, kg["T"], kg["record_every"])
    out.table("energy.csv", ["t", "E", "dissipation", "residual"],
              zip(trace.t, trace.E, trace.dissipation, trace.residual))
    D0 = data_norm(L, u0, u1)
    body = {"D0": D0, "balance_residual": energy_balance_residual(trace),
            "params": {"dt": kg["dt"], "T": kg["T"], "delta": kg["delta"], "eps": kg["eps"],
                       "W": kg["W"], "initial": kg["initial"]}}
    if trace.t[-1] >= 100:
        fit = decay_fit(trace, D0)
        body.update(c_log=fit.c_log, t_sup=fit.t_sup, last_decade_slope=fit.last_decade_slope)
    else:
        body.update(c_log=None, t_sup=None, last_decade_slope=None)
    out.summary("kg.json", body)


def stage_stress_planewave(cfg, out: Outputs):
    rows = parallel_map(_stress_point, cfg, list(cfg["stress"]["R_values"]))
    out.table("stress.csv", ["R", "K", "residual", "certified"], rows)
    K = [r[1] for r in rows]
    out.summary("stress.json", {"h0": cfg["stress"]["h0"], "K": K,
                                "monotone": bool(np.all(np.diff(K) > 0)),
                                "total_factor": K[-1] / K[0]})


STAGES = {
    ("geometry", "check"): stage_geometry_check,
    ("weights", "build"): stage_weights_build,
    ("weights", "check"): stage_weights_check,
    ("symbols", "scan"): stage_symbols_scan,
    ("carleman", "sweep"): stage_carleman_sweep,
    ("resolvent", "sweep"): stage_resolvent_sweep,
    ("eigenmass", "sweep"): stage_eigenmass_sweep,
    ("kg", "run"): stage_kg_run,
    ("stress", "planewave"): stage_stress_planewave,
}


# -- orchestration -----------------------------------------------------------------


def _now() -> str:
    return dt.datetime.now(dt.timezone.utc).isoformat()


def plan(command: str, cfg: dict) -> dict:
    group = command.split()[0]
    points = {"carleman": len(cfg["operator"]["h"]), "resolvent": len(cfg["operator"]["h"]),
              "eigenmass": len(cfg["operator"]["h"]), "stress": len(cfg["stress"]["R_values"])}
    return {"command": command, "output_dir": cfg["output_dir"], "sweep_points": points.get(group, 1),
            "workers": int(os.environ.get(WORKERS_ENV, "1") or 1), "config": cfg}


def execute(group: str, action: str, cfg: dict, config_path: Path, out_dir: Path) -> int:
    command = f"{group} {action}"
    rid = run_id(cfg, command)
    inputs = {str(config_path.resolve()): sha256_file(config_path)}
    for p in referenced_files(cfg):
        inputs[str(Path(p).resolve())] = sha256_file(p)
    manifest = {"tool": "conicarleman", "version": __version__, "command": command,
                "run_id": rid, "config_path": str(config_path.resolve()), "config": cfg,
                "inputs": inputs, "outputs": {}, "started": _now(), "finished": None,
                "stage_seconds": {}, "status": "running"}
    out_dir.mkdir(parents=True, exist_ok=True)
    mpath = out_dir / "manifest.json"
    atomic_write(mpath, (json.dumps(manifest, indent=2) + "\n").encode())
    out = Outputs(rid)
    t0 = time.perf_counter()
    try:
        STAGES[(group, action)](cfg, out)
    finally:
        manifest["stage_seconds"][command] = time.perf_counter() - t0
    for name, data in out.files.items():
        atomic_write(out_dir / name, data)
        manifest["outputs"][name] = hashlib.sha256(data).hexdigest()
    manifest.update(finished=_now(), status="ok" if out.status == 0 else "certification_failure",
                    messages=out.messages)
    atomic_write(mpath, (json.dumps(_jsonable(manifest), indent=2) + "\n").encode())
    for msg in out.messages:
        print(f"certification failure: {msg}", file=sys.stderr)
    return out.status


def reproduce(manifest_path: Path) -> int:
    manifest = json.loads(Path(manifest_path).read_text())
    for path, digest in manifest["inputs"].items():
        if not Path(path).exists():
            print(f"input missing: {path}", file=sys.stderr)
            return 1
        if sha256_file(path) != digest:
            print(f"input hash mismatch: {path}", file=sys.stderr)
            return 1
    group, action = manifest["command"].split()
    cfg = manifest["config"]
    with tempfile.TemporaryDirectory() as tmp:
        execute(group, action, cfg, Path(manifest["config_path"]), Path(tmp))
        fresh = json.loads((Path(tmp) / "manifest.json").read_text())["outputs"]
    bad = [name for name, digest in manifest["outputs"].items()
           if name.endswith(".csv") and fresh.get(name) != digest]
    for name in bad:
        print(f"output differs: {name}", file=sys.stderr)
    return 1 if bad else 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="conicarleman", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    groups = parser.add_subparsers(dest="group", required=True)
    for group, actions in COMMANDS.items():
        gp = groups.add_parser(group)
        sub = gp.add_subparsers(dest="action", required=True)
        for action in actions:
            ap = sub.add_parser(action)
            ap.add_argument("--config", required=True, type=Path)
            ap.add_argument("--output-dir", type=Path, default=None)
            ap.add_argument("--dry-run", action="store_true", help="print the resolved plan and exit")
            ap.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)
    rp = groups.add_parser("reproduce")
    rp.add_argument("manifest", type=Path)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.group == "reproduce":
            return reproduce(args.manifest)
        cfg, _ = load_config(args.config)
        if args.output_dir is not None:
            cfg["output_dir"] = str(args.output_dir)
        if args.dry_run:
            print(json.dumps(plan(f"{args.group} {args.action}", cfg), indent=2))
            return 0
        out_dir = Path(cfg["output_dir"]) / f"{args.group}-{args.action}"
        return execute(args.group, args.action, cfg, args.config, out_dir)
    except ConfigError as exc:
        for p in exc.problems:
            print(f"config error: {p}", file=sys.stderr)
        return 1
    except CertificationError as exc:
        print(f"certification failure: {exc}", file=sys.stderr)
        return 2
    except (CarlemanError, OSError, KeyError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
