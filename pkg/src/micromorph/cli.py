"""Batch front end: ``micromorph <experiment> --config <path> [--threads N] [--out DIR]``.

The configuration is an INI file whose sections mirror the modules, or the
same structure as a JSON object::

    [run]
    seed = 42

    [geometry]
    domain = l_prism        ; unit_cube | l_prism | box
    dims = 1, 1, 1          ; box only
    level = 4               ; cells per unit length
    levels = 2, 4, 8        ; korn only

    [energy]
    model = linear          ; linear | nonlinear
    coefficients = identity ; identity | isotropic
    mu_e = 1
    lambda_e = 0
    mu_micro = 1
    lambda_micro = 0
    l_c = 1                 ; scalar multiple of the identity
    q = 1.5                 ; nonlinear only, 1 < q < 2
    alpha = 0.6667          ; nonlinear only, defaults to 1/q

    [solve]
    loads = body_force      ; zero | body_force | constant_moment | manufactured
    force = 0, 0, 1
    moment = 0, 0, 0, 0, 0, 0, 0, 0, 0
    tol = 1e-10
    max_iter = 100000

    [transform]
    shifts = 0.05, 0.025
    x0 = 1, 1, 0.5          ; defaults to the domain's re-entrant point
    n_points = 2000

    [analysis]
    h_bar = 0.25
    grid = 64
    tol_s = 0.15
    korn_tol = 1e-8
    n_side = 128            ; sweep sample of the cutoff ball, per side

Exit codes: 0 every verdict passed, 1 some verdict failed, 2 configuration
error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import configparser
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import analysis, loads as loads_mod, output, transform
from .energy import CoefficientField, LinearCoefficients, NonlinearParams
from .errors import ConfigError, InadmissibleShift, MicromorphError, NonPositiveCoefficient, NumericalFailure
from .fespace import H1VectorSpace, HCurlTensorSpace, interpolate_u
from .geometry import SHAPES, DomainSpec, build_mesh
from .solve import solve_linear, solve_nonlinear

EXPERIMENTS = ("solve", "verify-transforms", "korn", "helmholtz", "probe", "full-regularity")

EXIT_PASS, EXIT_VERDICT, EXIT_CONFIG, EXIT_NUMERICAL = 0, 1, 2, 3

# section -> key -> default
SCHEMA = {
    "run": {"experiment": None, "seed": 42, "out": None},
    "geometry": {"domain": "unit_cube", "dims": (1.0, 1.0, 1.0), "level": 4, "levels": (2, 4, 8)},
    "energy": {"model": "linear", "coefficients": "identity", "mu_e": 1.0, "lambda_e": 0.0,
               "mu_micro": 1.0, "lambda_micro": 0.0, "l_c": 1.0, "q": 1.5, "alpha": None},
    "solve": {"loads": "body_force", "force": (0.0, 0.0, 1.0), "moment": (0.0,) * 9, "tol": None,
              "max_iter": 100_000},
    "transform": {"shifts": (0.05, 0.025), "x0": None, "n_points": 2000},
    "analysis": {"h_bar": 0.25, "grid": 64, "tol_s": 0.15, "korn_tol": 1e-8,
                 "n_side": 128},
}


@dataclass
class RunConfig:
    experiment: str
    seed: int
    domain: DomainSpec
    level: int
    levels: tuple
    model: object  # LinearCoefficients | NonlinearParams
    loads: loads_mod.LoadSpec
    tol: float | None
    max_iter: int
    shifts: tuple
    x0: np.ndarray | None
    n_points: int
    h_bar: float
    grid: int
    tol_s: float
    korn_tol: float
    n_side: int = 128
    out: Path = field(default_factory=lambda: Path("results"))


# ------------------------------------------------------------------ parsing


def _read_raw(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ConfigError("config", f"file not found: {path}")
    text = path.read_text()
    if path.suffix.lower() == ".json" or text.lstrip().startswith("{"):
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError("config", f"invalid JSON: {exc}") from None
        if not isinstance(data, dict) or not all(isinstance(v, dict) for v in data.values()):
            raise ConfigError("config", "JSON config must map section names to objects")
        return data
    cp = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError("config", str(exc).splitlines()[0]) from None
    return {s: dict(cp[s]) for s in cp.sections()}


def _floats(key, v, n=None):
    if isinstance(v, str):
        v = [p for p in v.replace(",", " ").split() if p]
    try:
        out = tuple(float(x) for x in np.atleast_1d(v))
    except (TypeError, ValueError):
        raise ConfigError(key, f"expected numbers, got {v!r}") from None
    if n is not None and len(out) != n:
        raise ConfigError(key, f"expected {n} numbers, got {len(out)}")
    return out


def _float(key, v):
    try:
        return float(v)
    except (TypeError, ValueError):
        raise ConfigError(key, f"expected a number, got {v!r}") from None


def _int(key, v):
    try:
        f = float(v)
    except (TypeError, ValueError):
        raise ConfigError(key, f"expected an integer, got {v!r}") from None
    if f != int(f):
        raise ConfigError(key, f"expected an integer, got {v!r}")
    return int(f)


def _positive(key, v):
    if not v > 0:
        raise ConfigError(key, f"must be positive, got {v}")
    return v


def parse_config(raw: dict, experiment: str | None = None) -> RunConfig:
    """Validate a raw section/key mapping; every problem raises ``ConfigError`` naming the key."""
    vals = {s: dict(d) for s, d in SCHEMA.items()}
    for sec, entries in raw.items():
        if sec not in SCHEMA:
            raise ConfigError(sec, f"unknown section (expected one of {', '.join(SCHEMA)})")
        for k, v in entries.items():
            if k not in SCHEMA[sec]:
                raise ConfigError(k, f"unknown key in section [{sec}]")
            vals[sec][k] = v
    run, geo, en, so, tr, an = (vals[s] for s in SCHEMA)

    exp = experiment or run["experiment"]
    if exp not in EXPERIMENTS:
        raise ConfigError("experiment", f"unknown experiment {exp!r} (expected one of {', '.join(EXPERIMENTS)})")
    seed = _int("seed", run["seed"])

    shape = str(geo["domain"])
    if shape not in SHAPES:
        raise ConfigError("domain", f"unknown domain {shape!r} (expected one of {', '.join(SHAPES)})")
    if shape == "box":
        dims = tuple(_positive("dims", d) for d in _floats("dims", geo["dims"], 3))
        domain = DomainSpec.box(*dims)
    else:
        domain = DomainSpec(shape)
    level = _positive("level", _int("level", geo["level"]))
    levels = tuple(_positive("levels", _int("levels", x)) for x in _floats("levels", geo["levels"]))
    if list(levels) != sorted(levels):
        raise ConfigError("levels", "levels must be increasing")

    model_kind = str(en["model"])
    if model_kind == "nonlinear":
        q = _float("q", en["q"])
        if not 1.0 < q < 2.0:
            raise ConfigError("q", f"must satisfy 1 < q < 2, got {q}")
        alpha = None if en["alpha"] in (None, "", "none") else _float("alpha", en["alpha"])
        if alpha is not None and alpha < 0:
            raise ConfigError("alpha", f"must be >= 0, got {alpha}")
        model = NonlinearParams(q, alpha)
    elif model_kind == "linear":
        kind = str(en["coefficients"])
        lc = _positive("l_c", _float("l_c", en["l_c"]))
        if kind == "identity":
            model = LinearCoefficients(l_c=CoefficientField(lc * np.eye(9)))
        elif kind == "isotropic":
            model = LinearCoefficients(
                CoefficientField.isotropic(_float("mu_e", en["mu_e"]), _float("lambda_e", en["lambda_e"])),
                CoefficientField.isotropic(_float("mu_micro", en["mu_micro"]),
                                           _float("lambda_micro", en["lambda_micro"])),
                CoefficientField(lc * np.eye(9)))
        else:
            raise ConfigError("coefficients", f"unknown coefficient preset {kind!r}")
        try:
            model.validate(domain.bounds)
        except NonPositiveCoefficient as exc:
            raise ConfigError("coefficients", str(exc)) from None
    else:
        raise ConfigError("model", f"unknown model {model_kind!r} (expected linear or nonlinear)")

    name = str(so["loads"])
    if name == "zero":
        loads = loads_mod.zero_loads()
    elif name == "body_force":
        loads = loads_mod.constant_body_force(_floats("force", so["force"], 3))
    elif name == "constant_moment":
        loads = loads_mod.constant_moment(np.reshape(_floats("moment", so["moment"], 9), (3, 3)))
    elif name == "manufactured":
        loads = loads_mod.manufactured_loads()
    else:
        raise ConfigError("loads", f"unknown load preset {name!r} (expected one of {', '.join(loads_mod.PRESETS)})")
    tol = None if so["tol"] in (None, "", "none") else _positive("tol", _float("tol", so["tol"]))
    max_iter = _positive("max_iter", _int("max_iter", so["max_iter"]))

    shifts = tuple(_positive("shifts", s) for s in _floats("shifts", tr["shifts"]))
    x0 = None if tr["x0"] in (None, "", "none") else np.array(_floats("x0", tr["x0"], 3))
    n_points = _positive("n_points", _int("n_points", tr["n_points"]))

    h_bar = _positive("h_bar", _float("h_bar", an["h_bar"]))
    grid = _positive("grid", _int("grid", an["grid"]))
    tol_s = _positive("tol_s", _float("tol_s", an["tol_s"]))
    korn_tol = _positive("korn_tol", _float("korn_tol", an["korn_tol"]))
    n_side = _positive("n_side", _int("n_side", an["n_side"]))
    out = Path(run["out"]) if run["out"] else Path("results")
    return RunConfig(exp, seed, domain, level, levels, model, loads, tol, max_iter, shifts, x0,
                     n_points, h_bar, grid, tol_s, korn_tol, n_side, out)


def load_config(path, experiment: str | None = None) -> RunConfig:
    return parse_config(_read_raw(path), experiment)


# -------------------------------------------------------------- experiments


@dataclass
class Outcome:
    summary: dict
    verdicts: dict
    tables: dict = field(default_factory=dict)  # file stem -> rows
    fields: tuple | None = None  # (mesh, u, P) for VTK


def _x0(cfg: RunConfig):
    return cfg.x0 if cfg.x0 is not None else cfg.domain.reentrant_point()


def _model_name(model) -> str:
    if isinstance(model, NonlinearParams):
        return f"nonlinear(q={model.q:g}, alpha={model.alpha:g})"
    return "linear"


def run_solve(cfg: RunConfig) -> Outcome:
    mesh = build_mesh(cfg.domain, cfg.level)
    if isinstance(cfg.model, NonlinearParams):
        tol = cfg.tol or 1e-8
        u, P, rep = solve_nonlinear(mesh, cfg.model, cfg.loads, tol=tol, max_iter=cfg.max_iter)
        hist = rep.energy_history
        tables = {"energy_history": [{"iteration": i, "energy": float(e)} for i, e in enumerate(hist)]}
        monotone = all(b <= a for a, b in zip(hist, hist[1:]))
        verdicts = {"converged": rep.residual <= tol, "energy_monotone": monotone}
    else:
        tol = cfg.tol or 1e-10
        u, P, rep = solve_linear(mesh, cfg.model, cfg.loads, tol=tol, max_iter=cfg.max_iter)
        tables = {}
        verdicts = {"el_residual": rep.residual <= tol}
    summary = {"mesh": {"level": cfg.level, "vertices": mesh.n_vertices, "cells": mesh.n_cells,
                        "edges": mesh.n_edges}, "model": _model_name(cfg.model), "loads": cfg.loads.name,
               "report": rep.to_dict()}
    return Outcome(summary, verdicts, tables, (mesh, u, P))


def run_verify_transforms(cfg: RunConfig) -> Outcome:
    rng = np.random.default_rng(cfg.seed)
    mesh = build_mesh(cfg.domain, cfg.level)
    x0 = _x0(cfg)
    P = transform.random_field_P(HCurlTensorSpace(mesh), rng)
    M, div_M = transform.random_polynomial_tensor(rng, 2)
    rows, verdicts = [], {}
    for length in cfg.shifts:
        iv = transform.InnerVariation.at(cfg.domain, x0, length)
        c = transform.curl_identity_check(iv, P, rng, n_points=cfg.n_points)
        d = transform.div_identity_check(iv, M, div_M, cfg.domain, rng, n_points=cfg.n_points)
        a = transform.adjoint_check(iv, P, M)
        rows.append({"h": float(length), "curl_defect": c["defect"], "div_defect": d["defect"],
                     "adjoint_defect": a["defect"], "adjoint_coarse": a["defects"][0],
                     "adjoint_reduction": a["reduction"]})
        verdicts[f"curl_{length:g}"] = c["defect"] <= 1e-5
        verdicts[f"div_{length:g}"] = d["defect"] <= 1e-5
        verdicts[f"adjoint_{length:g}"] = a["passed"]
    fuzz = transform.mapping_fuzz(cfg.domain, x0, cfg.seed)
    verdicts["mapping_fuzz"] = fuzz["passed"]
    iv = transform.InnerVariation.at(cfg.domain, x0, max(cfg.shifts))
    bound = transform.uniform_bound(iv, cfg.seed)
    summary = {"x0": x0, "h0": iv.h0, "rows": rows, "mapping_fuzz": fuzz, "uniform_bound": bound}
    return Outcome(summary, verdicts, {"transforms": rows})


def run_korn(cfg: RunConfig) -> Outcome:
    res = analysis.korn_study(cfg.domain, cfg.levels, tol=cfg.korn_tol, seed=cfg.seed)
    return Outcome({"rows": res["rows"], "final_increment": res["final_increment"]}, res["verdicts"],
                   {"korn": res["rows"]})


def run_helmholtz(cfg: RunConfig) -> Outcome:
    rng = np.random.default_rng(cfg.seed)
    mesh = build_mesh(cfg.domain, cfg.level)
    tol = cfg.tol or 1e-10
    a = rng.standard_normal((3, 3))
    cases = {
        "random_edge": rng.standard_normal(mesh.n_edges),
        "smooth": lambda x: np.sin(x @ a),
        "constant": lambda x: np.tile([1.0, -2.0, 0.5], (len(x), 1)),
    }
    rows, verdicts = [], {}
    for name, p in cases.items():
        s = analysis.helmholtz_decompose(mesh, p, tol=tol)
        rows.append({"case": name, "p2": s.norms["p"], "Dv2": s.norms["Dv"], "q2": s.norms["q"],
                     "cross_rel": s.cross, "div_residual": s.div_residual})
        verdicts[f"pythagoras_{name}"] = s.cross <= 1e-9
        verdicts[f"divergence_{name}"] = s.div_residual <= 1e-9
    return Outcome({"rows": rows}, verdicts, {"helmholtz": rows})


def _calibration_fields():
    a = np.array([0.7, -1.3, 0.4])
    return {
        "step": (lambda x: (x[:, 0] > 0.5).astype(float), 0, (0.45, 0.55)),
        "smooth": (lambda x: np.sin(x @ a) + x[:, 2] ** 2, 0, (1.0, 1.0)),
        "affine": (lambda x: x @ a + 1.0, 0, (1.0, 1.0)),
    }


def run_probe(cfg: RunConfig) -> Outcome:
    domain = DomainSpec.unit_cube() if cfg.domain.shape != "unit_cube" else cfg.domain
    reports, verdicts, tables = {}, {}, {}
    fields = _calibration_fields()
    # the smooth field again, as a P1 interpolant on the configured level
    smooth = fields["smooth"][0]
    u = interpolate_u(H1VectorSpace(build_mesh(domain, cfg.level)),
                      lambda x: np.stack([smooth(x)] * 3, axis=1))
    fields["interpolated"] = (lambda x: u.value(x)[:, 0], 0, (1.0, 1.0))
    for name, (f, m, (lo, hi)) in fields.items():
        r = analysis.regularity_index(f, m, domain, cfg.h_bar, grid=cfg.grid, rng=cfg.seed, name=name)
        reports[name] = r.to_dict()
        verdicts[name] = r.s_est is not None and lo - 1e-12 <= r.s_est <= hi + 1e-12
        tables[f"probe_{name}"] = r.rows
    return Outcome({"probes": reports}, verdicts, tables)


def run_full_regularity(cfg: RunConfig) -> Outcome:
    rep = analysis.regularity_experiment(cfg.domain, cfg.model, cfg.loads, cfg.level, h_bar=cfg.h_bar,
                                         grid=cfg.grid, seed=cfg.seed, tol_s=cfg.tol_s, solver_tol=cfg.tol,
                                         n_side=cfg.n_side)
    tables = {f"probe_{k}": v.rows for k, v in rep.probes.items()}
    tables["sweep"] = rep.sweep
    # zero fields have no index; their verdict is vacuous
    verdicts = {k: (True if v is None else v) for k, v in rep.verdicts.items()}
    summary = rep.summary()
    summary.pop("passed")
    return Outcome(summary, verdicts, tables)


RUNNERS = {
    "solve": run_solve,
    "verify-transforms": run_verify_transforms,
    "korn": run_korn,
    "helmholtz": run_helmholtz,
    "probe": run_probe,
    "full-regularity": run_full_regularity,
}


def run(cfg: RunConfig) -> int:
    """Run one experiment, write its artifacts and return the exit status."""
    outcome = RUNNERS[cfg.experiment](cfg)
    cfg.out.mkdir(parents=True, exist_ok=True)
    passed = all(bool(v) for v in outcome.verdicts.values())
    summary = {"experiment": cfg.experiment, "seed": cfg.seed, "domain": cfg.domain.shape,
               "results": outcome.summary, "verdicts": outcome.verdicts, "passed": passed}
    output.write_json(cfg.out / "summary.json", summary)
    for stem, rows in outcome.tables.items():
        output.write_csv(cfg.out / f"{stem}.csv", rows)
    if outcome.fields is not None:
        mesh, u, P = outcome.fields
        output.write_vtk(cfg.out / "fields.vtk", mesh, u, P)
    return EXIT_PASS if passed else EXIT_VERDICT


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="micromorph", description=__doc__.splitlines()[0])
    ap.add_argument("experiment", choices=EXPERIMENTS)
    ap.add_argument("--config", required=True, help="INI or JSON configuration file")
    ap.add_argument("--threads", type=int, default=None, help="cap on BLAS/OpenMP threads")
    ap.add_argument("--out", default=None, help="output directory (overrides [run] out)")
    args = ap.parse_args(argv)
    try:
        cfg = load_config(args.config, args.experiment)
        if args.out:
            cfg.out = Path(args.out)
        if args.threads is not None:
            if args.threads < 1:
                raise ConfigError("threads", "must be at least 1")
            from threadpoolctl import threadpool_limits

            with threadpool_limits(limits=args.threads):
                status = run(cfg)
        else:
            status = run(cfg)
    except (ConfigError, InadmissibleShift) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalFailure as exc:
        print(f"numerical failure ({type(exc).__name__}): {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except MicromorphError as exc:
        print(f"error ({type(exc).__name__}): {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    print(f"{args.experiment}: {'PASS' if status == EXIT_PASS else 'FAIL'} -> {cfg.out}")
    return status


if __name__ == "__main__":
    sys.exit(main())
