"""Experiment runner: validated configs, seeded streams, suites and reports.

Usage::

    roughspde run CONFIG [--suite NAME] [--out DIR] [--threads N]

Exit status: 0 all thresholds met, 1 a threshold failed, 2 configuration
error, 3 runtime error or blow-up.  The default output directory is taken
from ``ROUGHSPDE_OUT`` (falling back to ``./results``).
"""

from __future__ import annotations

import argparse
import copy
import csv
import io
import json
import logging
import math
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import jsonschema
import numpy as np
import yaml

from .calculus import (
    driver_function,
    fubini_swap_residual,
    mild_ito_residual,
    pairing_constancy,
    weak_form_residual,
)
from .controlled import JointlyControlledPath
from .errors import BlowUpError, ConfigError, RoughSpdeError
from .hormander import (
    _tail_slope,
    _wilson,
    constant_rank,
    gram_qk,
    generate_brackets,
    lambda_projected,
    malliavin_tail_mc,
    projection_matrix,
)
from .rough_path import lift_brownian, lift_canonical, translate, with_bracket
from .rpde import (
    RpdeProblem,
    adjoint_jacobian_apply,
    duhamel_derivative,
    jacobian_apply,
    mild_residual,
    solve_forward,
)
from .spectral_space import ModeBasis, TimeGrid
from .vector_fields import DriftComposite, PolyField, field_from_spec, ginzburg_landau_fields, mode_vector

__all__ = [
    "SCHEMA_VERSION",
    "SUITES",
    "ExperimentConfig",
    "load_config",
    "validate_config",
    "seed_rng",
    "derive_seed",
    "emit_report",
    "read_csv_report",
    "run_experiment",
    "main",
]

log = logging.getLogger("roughspde")

SCHEMA_VERSION = "1.0"
SUITES = ("convergence", "identities", "jacobian", "fubini", "hormander", "tail")
OUT_ENV = "ROUGHSPDE_OUT"

EXIT_PASS, EXIT_FAIL, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2, 3

_num = {"type": "number"}
_pos = {"type": "number", "exclusiveMinimum": 0}

CONFIG_SCHEMA = {
    "type": "object",
    "required": ["experiment"],
    "additionalProperties": False,
    "properties": {
        "experiment": {"type": "string", "minLength": 1},
        "suite": {"enum": list(SUITES)},
        "seed": {"type": "integer", "minimum": 0},
        "basis": {
            "type": "object", "additionalProperties": False,
            "properties": {"K_max": {"type": "integer", "minimum": 0, "maximum": 64}, "mass": _pos},
        },
        "grid": {
            "type": "object", "additionalProperties": False,
            "properties": {
                "t_end": _pos,
                "level": {"type": "integer", "minimum": 1, "maximum": 18},
                "fine_depth": {"type": "integer", "minimum": 1, "maximum": 22},
            },
        },
        "driver": {
            "type": "object", "additionalProperties": False,
            "properties": {
                "type": {"enum": ["brownian", "canonical"]},
                "convention": {"enum": ["strat", "ito"]},
                "gamma": {"type": "number", "exclusiveMinimum": 1.0 / 3.0, "maximum": 0.5},
                "dimension": {"type": "integer", "minimum": 1},
                "path": {"type": "array", "items": {"type": "object"}},
                "bracket_shift": _num,
            },
        },
        "problem": {
            "type": "object", "additionalProperties": False,
            "properties": {
                "model": {"enum": ["ginzburg_landau", "custom"]},
                "scale": _num,
                "nonlinearity": {"type": ["object", "null"]},
                "fields": {"type": "array", "items": {"type": "object"}},
                "initial": {},
            },
        },
        "solver": {
            "type": "object", "additionalProperties": False,
            "properties": {
                "picard_tol": _pos,
                "max_iter": {"type": "integer", "minimum": 1},
                "max_window": {"type": "integer", "minimum": 1},
            },
        },
        "probe": {
            "type": "object", "additionalProperties": False,
            "properties": {
                "projection_rank": {"type": "integer", "minimum": 1},
                "a": {"type": "number", "minimum": 0, "maximum": 1},
                "eps_grid": {"type": "array", "items": _pos, "minItems": 1},
                "n_samples": {"type": "integer", "minimum": 1},
                "k_max": {"type": "integer", "minimum": 0, "maximum": 10},
                "n_pairs": {"type": "integer", "minimum": 1},
                "test_modes": {"type": "array", "items": {"type": "integer", "minimum": 0}},
                "levels": {"type": "array", "items": {"type": "integer", "minimum": 1}, "minItems": 2},
                "reference_level": {"type": "integer", "minimum": 2},
                "eps_list": {"type": "array", "items": _pos, "minItems": 1},
                "n_states": {"type": "integer", "minimum": 1},
            },
        },
        "thresholds": {
            "type": "object",
            "additionalProperties": {
                "oneOf": [
                    _num,
                    {"type": "object", "additionalProperties": False, "minProperties": 1,
                     "properties": {"le": _num, "ge": _num, "eq": {}}},
                ]
            },
        },
        "output": {
            "type": "object", "additionalProperties": False,
            "properties": {"dir": {"type": "string"}},
        },
    },
}

DEFAULTS = {
    "basis": {"K_max": 4, "mass": 1.0},
    "grid": {"t_end": 1.0, "level": 9},
    "driver": {"type": "brownian", "convention": "strat", "gamma": 0.45, "dimension": 2},
    "problem": {"model": "ginzburg_landau", "scale": 1.0, "initial": {"sin1": 0.5}},
    "solver": {"picard_tol": 1e-13, "max_iter": 60},
    "probe": {
        "projection_rank": 5, "a": 0.8, "n_samples": 200, "k_max": 6, "n_pairs": 20,
        "test_modes": [0, 1, 2, 3, 4], "eps_list": [1e-2, 1e-3, 1e-4], "n_states": 10,
        "eps_grid": [1e-1, 3e-2, 1e-2, 3e-3, 1e-3, 3e-4, 1e-4, 3e-5, 1e-5],
    },
    "thresholds": {},
    "output": {},
}


@dataclass
class ExperimentConfig:
    """Validated configuration with defaults filled in."""

    experiment: str
    suite: str | None
    seed: int | None
    basis: dict
    grid: dict
    driver: dict
    problem: dict
    solver: dict
    probe: dict
    thresholds: dict
    output: dict
    source: str = ""
    raw: dict = field(default_factory=dict)

    @property
    def stochastic(self) -> bool:
        return self.driver["type"] == "brownian" or self.suite == "tail"


def _merged(raw: dict) -> dict:
    out = copy.deepcopy(DEFAULTS)
    for k, v in raw.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k].update(v)
        else:
            out[k] = v
    return out


def validate_config(raw: dict, source: str = "") -> ExperimentConfig:
    """Schema and range validation; raises :class:`ConfigError` before any computation."""
    if not isinstance(raw, dict):
        raise ConfigError("config must be a mapping")
    try:
        jsonschema.validate(raw, CONFIG_SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"{where}: {exc.message}") from None
    cfg = _merged(raw)
    g = cfg["grid"]
    drv = cfg["driver"]
    g.setdefault("fine_depth", g["level"] + 4 if drv["type"] == "brownian" else g["level"] + 3)
    if g["fine_depth"] < g["level"]:
        raise ConfigError("grid/fine_depth must be at least grid/level")
    if drv["type"] == "brownian" and g["fine_depth"] < g["level"] + 4:
        raise ConfigError("grid/fine_depth must be at least grid/level + 4 for Brownian drivers")
    if drv["type"] == "canonical" and "path" not in drv:
        raise ConfigError("driver/path is required for canonical drivers")
    if drv["type"] == "canonical" and len(drv["path"]) != drv["dimension"]:
        raise ConfigError("driver/path must have one entry per driver dimension")
    prb = cfg["problem"]
    if prb["model"] == "custom" and not prb.get("fields"):
        raise ConfigError("problem/fields is required for custom models")
    if prb["model"] == "ginzburg_landau" and drv["dimension"] != 2:
        raise ConfigError("the Ginzburg-Landau model has two noises (driver/dimension = 2)")
    if prb["model"] == "custom" and len(prb["fields"]) != drv["dimension"]:
        raise ConfigError("problem/fields must have one entry per driver dimension")
    pr = cfg["probe"]
    if "levels" in pr:
        ref = pr.get("reference_level", max(pr["levels"]) + 2)
        if ref <= max(pr["levels"]):
            raise ConfigError("probe/reference_level must exceed every probe level")
    ec = ExperimentConfig(
        experiment=cfg["experiment"], suite=cfg.get("suite"), seed=cfg.get("seed"),
        basis=cfg["basis"], grid=g, driver=drv, problem=prb, solver=cfg["solver"], probe=pr,
        thresholds=cfg["thresholds"], output=cfg["output"], source=source, raw=raw,
    )
    if ec.stochastic and ec.seed is None:
        raise ConfigError("seed is mandatory for stochastic experiments")
    return ec


def load_config(path) -> ExperimentConfig:
    """Read a YAML or JSON config file and validate it."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    try:
        raw = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
    except (json.JSONDecodeError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot parse config {path}: {exc}") from None
    return validate_config(raw, str(path))


# ----------------------------------------------------------------------
# seeding


def seed_rng(master_seed: int, stream_id: int) -> np.random.Generator:
    """PCG64 generator seeded by ``SeedSequence([master_seed, stream_id])``.

    Both the seed-sequence hashing and PCG64 are specified bit for bit by
    numpy, so streams replay across platforms.
    """
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(master_seed), int(stream_id)])))


def derive_seed(master_seed: int, stream_id: int) -> int:
    """A 63-bit integer seed for the stream (used for Brownian lifts)."""
    ss = np.random.SeedSequence([int(master_seed), int(stream_id)])
    return int(ss.generate_state(1, np.uint64)[0] >> np.uint64(1))


# ----------------------------------------------------------------------
# report emission


def _fmt(x) -> tuple[str, bool]:
    """Serialized scalar and whether it is a non-finite float."""
    if isinstance(x, (bool, np.bool_)):
        return ("true" if x else "false"), False
    if isinstance(x, (int, np.integer)):
        return str(int(x)), False
    if isinstance(x, (float, np.floating)):
        x = float(x)
        if math.isnan(x):
            return "nan", True
        if math.isinf(x):
            return ("inf" if x > 0 else "-inf"), True
        return format(x, ".17g"), False
    if x is None:
        return "", False
    return str(x), False


def _json_text(obj, indent: int, level: int, bad: list, where: str) -> str:
    pad = " " * (indent * (level + 1))
    end = " " * (indent * level)
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f"{pad}{json.dumps(str(k))}: {_json_text(v, indent, level + 1, bad, f'{where}/{k}')}"
                 for k, v in obj.items()]
        return "{\n" + ",\n".join(items) + "\n" + end + "}"
    if isinstance(obj, (list, tuple, np.ndarray)):
        seq = obj.tolist() if isinstance(obj, np.ndarray) else obj
        if not seq:
            return "[]"
        parts = [_json_text(v, indent, level + 1, bad, f"{where}/{i}") for i, v in enumerate(seq)]
        return "[" + ", ".join(parts) + "]"
    if isinstance(obj, str):
        return json.dumps(obj)
    if obj is None:
        return "null"
    s, nonfinite = _fmt(obj)
    if nonfinite:
        bad.append(where or "/")
        return json.dumps(s)
    return s


def emit_report(results, fmt: str, path, columns=None) -> Path:
    """Write ``results`` as CSV (list of row mappings) or JSON (mapping).

    CSV columns keep first-seen key order (or ``columns``) followed by a
    ``nan_flag`` column set to 1 on rows holding a non-finite value.  Floats
    carry 17 significant digits; non-finite values are written as ``nan`` /
    ``inf``.  JSON documents get ``schema_version`` and, when any value is
    non-finite, a ``nan_fields`` list of their locations and ``passed: false``.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if fmt == "csv":
        rows = list(results)
        cols = list(columns) if columns is not None else []
        if columns is None:
            for r in rows:
                for k in r:
                    if k not in cols:
                        cols.append(k)
        if "nan_flag" not in cols:
            cols.append("nan_flag")
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(cols)
        for r in rows:
            cells, flag = [], False
            for c in cols:
                if c == "nan_flag":
                    cells.append(None)
                    continue
                s, bad = _fmt(r.get(c))
                flag |= bad
                cells.append(s)
            cells[cols.index("nan_flag")] = "1" if flag else "0"
            w.writerow(cells)
        path.write_text(buf.getvalue())
        return path
    if fmt == "json":
        doc = {"schema_version": SCHEMA_VERSION}
        doc.update(results)
        bad: list = []
        text = _json_text(doc, 2, 0, bad, "")
        if bad:
            doc["nan_fields"] = bad
            doc["passed"] = False
            text = _json_text(doc, 2, 0, [], "")
        path.write_text(text + "\n")
        return path
    raise ConfigError(f"unknown report format {fmt!r}")


def read_csv_report(path) -> list:
    """Parse a report CSV back into rows; numeric cells become ``float``."""
    rows = []
    with open(path, newline="") as fh:
        for r in csv.DictReader(fh):
            out = {}
            for k, v in r.items():
                try:
                    out[k] = float(v)
                except ValueError:
                    out[k] = v
            rows.append(out)
    return rows


# ----------------------------------------------------------------------
# builders


def _path_fn(spec: list):
    """``t -> (len(t), d)`` from per-component ``poly`` / ``sin`` / ``cos`` terms."""
    comps = []
    for c in spec:
        unknown = set(c) - {"poly", "sin", "cos"}
        if unknown:
            raise ConfigError(f"unknown path terms {sorted(unknown)}")
        comps.append((list(c.get("poly", [])), list(c.get("sin", [])), list(c.get("cos", []))))

    def fn(t):
        t = np.asarray(t, dtype=float)
        cols = []
        for poly, sins, coss in comps:
            v = np.zeros_like(t)
            for p, a in enumerate(poly):
                v = v + a * t**p
            for a, w in sins:
                v = v + a * np.sin(w * t)
            for a, w in coss:
                v = v + a * np.cos(w * t)
            cols.append(v)
        return np.stack(cols, axis=-1)

    return fn


def build_basis(cfg: ExperimentConfig) -> ModeBasis:
    return ModeBasis(cfg.basis["K_max"], cfg.basis["mass"])


def build_grid(cfg: ExperimentConfig, level: int | None = None) -> TimeGrid:
    return TimeGrid(0.0, cfg.grid["t_end"], cfg.grid["level"] if level is None else level)


def build_driver(cfg: ExperimentConfig, seed: int | None = None, level: int | None = None,
                 fine_depth: int | None = None):
    drv = cfg.driver
    grid = build_grid(cfg, level)
    lvl = grid.level
    if drv["type"] == "brownian":
        seed = derive_seed(cfg.seed, 0) if seed is None else seed
        depth = max(cfg.grid["fine_depth"] - cfg.grid["level"] + lvl, lvl + 4) if fine_depth is None else fine_depth
        return lift_brownian(seed, drv["dimension"], grid, drv["convention"], depth, drv["gamma"])
    depth = max(cfg.grid["fine_depth"] - cfg.grid["level"] + lvl, lvl) if fine_depth is None else fine_depth
    Z = lift_canonical(_path_fn(drv["path"]), grid, depth, drv["gamma"])
    shift = drv.get("bracket_shift")
    if drv["convention"] == "ito" and shift is None:
        shift = -0.5
    if shift:
        Z = with_bracket(Z, shift * grid.points[:, None, None] * np.eye(Z.d)[None])
    return Z


def build_problem(cfg: ExperimentConfig, Z, basis: ModeBasis | None = None) -> RpdeProblem:
    basis = build_basis(cfg) if basis is None else basis
    prb = cfg.problem
    try:
        xi = mode_vector(basis, prb["initial"])
        if prb["model"] == "ginzburg_landau":
            _, N, fields = ginzburg_landau_fields(basis, prb["scale"])
        else:
            N = None if prb.get("nonlinearity") is None else field_from_spec(prb["nonlinearity"], basis)
            fields = [field_from_spec(f, basis) for f in prb["fields"]]
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"problem: {exc}") from None
    return RpdeProblem(basis, N, fields, Z, xi)


def _solve(cfg: ExperimentConfig, p: RpdeProblem):
    s = cfg.solver
    return solve_forward(p, picard_tol=s["picard_tol"], max_iter=s["max_iter"], max_window=s.get("max_window"))


def _square_field(basis: ModeBasis) -> PolyField:
    c = np.zeros((3, basis.size))
    c[2] = basis.mode(0)
    return PolyField(basis, c, "u^2")


# ----------------------------------------------------------------------
# suites; each returns (rows, summary)


def _suite_convergence(cfg: ExperimentConfig, pool, threads: int):
    pr = cfg.probe
    levels = sorted(pr.get("levels", [cfg.grid["level"] - 3, cfg.grid["level"] - 2, cfg.grid["level"] - 1]))
    ref = pr.get("reference_level", cfg.grid["level"] + 1 if max(levels) < cfg.grid["level"] + 1 else max(levels) + 2)
    Zref = build_driver(cfg, level=ref)
    p = build_problem(cfg, Zref)
    uref = _solve(cfg, p).values

    def one(L):
        sol = _solve(cfg, p.with_driver(Zref.coarsen(L)))
        stride = 2 ** (ref - L)
        err = float(np.max(np.linalg.norm(sol.values - uref[::stride], axis=-1)))
        return {"level": L, "dt": Zref.grid.length / 2**L, "error": err,
                "picard_iterations": int(sol.info.get("iterations", -1))}

    rows = list(pool.map(one, levels))
    err = np.array([r["error"] for r in rows])
    slope = float(np.polyfit(np.array(levels, float), np.log2(err), 1)[0]) if np.all(err > 0) else float("nan")
    summary = {"reference_level": ref, "fitted_slope": slope, "rate": -slope,
               "error_max": float(err.max()), "error_min": float(err.min()),
               "errors_decreasing": bool(np.all(np.diff(err) < 0))}
    return rows, summary


def _suite_identities(cfg: ExperimentConfig, pool, threads: int):
    Z = build_driver(cfg)
    p = build_problem(cfg, Z)
    sol = _solve(cfg, p)
    b = p.basis
    rows = []
    weak = []
    for j in cfg.probe["test_modes"]:
        if j >= b.size:
            raise ConfigError(f"probe/test_modes index {j} exceeds the basis size")
        h = b.mode(j) / float(b.norm(b.mode(j), 1.0))
        r = weak_form_residual(sol, h)
        weak.append(r)
        rows.append({"quantity": "weak_residual", "label": f"e{j}", "value": r})
    fields = list(p.diffusions) + [_square_field(b)]
    labels = [f"F{i + 1}" for i in range(p.d)] + ["u^2"]
    ito, ito0 = [], []
    for A, lab in zip(fields, labels):
        r1 = mild_ito_residual(sol, A)
        r0 = mild_ito_residual(sol, A, include_bracket=False)
        ito.append(r1)
        ito0.append(r0)
        rows.append({"quantity": "ito_residual", "label": lab, "value": r1})
        rows.append({"quantity": "ito_residual_no_bracket", "label": lab, "value": r0})
    pc = pairing_constancy(sol, b.mode(0), b.mode(0))
    rows.append({"quantity": "pairing_relative", "label": "e0,e0", "value": pc["relative"]})
    rows.append({"quantity": "pairing_corrected_relative", "label": "e0,e0", "value": pc["corrected_relative"]})
    md = mild_residual(sol)
    rows.append({"quantity": "mild_defect", "label": "cells", "value": md})
    summary = {
        "weak_residual_max": float(max(weak)),
        "ito_residual_max": float(max(ito)),
        "ito_residual_no_bracket_max": float(max(ito0)),
        "pairing_relative": float(pc["relative"]),
        "pairing_corrected_relative": float(pc["corrected_relative"]),
        "mild_defect": md,
        "driver_convention": Z.convention,
    }
    return rows, summary


def _suite_jacobian(cfg: ExperimentConfig, pool, threads: int):
    Z = build_driver(cfg)
    p = build_problem(cfg, Z)
    sol = _solve(cfg, p)
    n = p.basis.size
    rng = seed_rng(cfg.seed or 0, 1)
    k = cfg.probe["n_pairs"]
    Phi = rng.standard_normal((k, n))
    Psi = rng.standard_normal((k, n))
    JP = jacobian_apply(sol, Phi)
    KP = adjoint_jacobian_apply(sol, Psi)
    rows = []
    gaps = []
    for i in range(k):
        g = abs(JP[i] @ Psi[i] - Phi[i] @ KP[i]) / (np.linalg.norm(Phi[i]) * np.linalg.norm(Psi[i]))
        gaps.append(float(g))
        rows.append({"quantity": "duality_gap", "index": i, "eps": float("nan"), "value": float(g)})
    T = Z.grid.length

    def h(t):
        t = np.asarray(t, dtype=float)
        return np.stack([np.sin(np.pi * t / T) * (j + 1) / Z.d for j in range(Z.d)], axis=-1) * (t[..., None] / T)

    D = duhamel_derivative(sol, h)
    errs = []
    for eps in cfg.probe["eps_list"]:
        s2 = _solve(cfg, p.with_driver(translate(Z, lambda t, e=eps: e * h(t))))
        q = (s2.values[-1] - sol.values[-1]) / eps
        e = float(np.linalg.norm(q - D) / np.linalg.norm(D))
        errs.append(e)
        rows.append({"quantity": "duhamel_relative", "index": 0, "eps": eps, "value": e})
    eps_sorted = np.argsort(cfg.probe["eps_list"])[::-1]
    summary = {"duality_gap_max": float(max(gaps)),
               "duhamel_relative": {str(e): v for e, v in zip(cfg.probe["eps_list"], errs)},
               "duhamel_decreasing": bool(np.all(np.diff(np.array(errs)[eps_sorted]) < 0)),
               "duhamel_relative_min": float(min(errs))}
    return rows, summary


def _suite_fubini(cfg: ExperimentConfig, pool, threads: int):
    Z = build_driver(cfg)
    d = Z.d

    def fn(X):
        return np.stack([np.sin(X[:, 0]), np.cos(X[:, -1]), X[:, 0] * X[:, -1]], -1)

    def dfn(X):
        out = np.zeros((X.shape[0], d, 3))
        out[:, 0, 0] = np.cos(X[:, 0])
        out[:, -1, 1] = -np.sin(X[:, -1])
        out[:, 0, 2] += X[:, -1]
        out[:, -1, 2] += X[:, 0]
        return out

    def gn(X):
        return np.stack([np.exp(0.3 * X[:, -1]), X[:, 0] ** 2], -1)

    def dgn(X):
        out = np.zeros((X.shape[0], d, 2))
        out[:, -1, 0] = 0.3 * np.exp(0.3 * X[:, -1])
        out[:, 0, 1] += 2 * X[:, 0]
        return out

    B = seed_rng(cfg.seed or 0, 2).standard_normal((d, d, 3, 2))
    Y = JointlyControlledPath.from_bilinear(B, driver_function(Z, fn, dfn), driver_function(Z, gn, dgn), dense=False)
    rep = fubini_swap_residual(Y, Z)
    rows = [{"quantity": k, "value": float(v)} for k, v in rep.items()]
    summary = {"swap_uncorrected": float(rep["uncorrected"]), "swap_corrected": float(rep["corrected"]),
               "correction_ratio": float(rep["uncorrected"] / rep["corrected"]) if rep["corrected"] > 0 else float("inf"),
               "driver_convention": Z.convention}
    return rows, summary


def _suite_hormander(cfg: ExperimentConfig, pool, threads: int):
    basis = build_basis(cfg)
    Z = build_driver(cfg)
    p = build_problem(cfg, Z, basis)
    F0 = p.drift
    if F0 is not None:
        F0 = DriftComposite(basis, F0)
    kmax = cfg.probe["k_max"]
    r = cfg.probe["projection_rank"]
    if r > basis.size:
        raise ConfigError("probe/projection_rank exceeds the basis size")
    A = generate_brackets(F0, p.diffusions, kmax)
    rows = []
    for rec in A.to_records():
        rows.append({"quantity": "bracket", **rec})
    ranks = [constant_rank(A, k, r) for k in range(kmax + 1)]
    k_star = next((k for k, v in enumerate(ranks) if v == r), -1)
    rng = seed_rng(cfg.seed or 0, 3)
    band = max(basis.K_max - 2, 0)
    lam, eig_min = [], []
    for i in range(cfg.probe["n_states"]):
        u = np.zeros(basis.size)
        u[: 2 * band + 1] = 0.5 * rng.standard_normal(2 * band + 1)
        Q = gram_qk(A, kmax, u, r)
        eig_min.append(float(np.linalg.eigvalsh(Q)[0]))
        lam.append(lambda_projected(Q, cfg.probe["a"]))
    for k, v in enumerate(ranks):
        rows.append({"quantity": "constant_rank", "generation": k, "value": v})
    summary = {"generation_sizes": A.sizes(), "constant_ranks": ranks, "k_star": k_star,
               "full_rank": k_star >= 0, "gram_min_eigenvalue": float(min(eig_min)),
               "lambda_min_over_states": float(min(lam))}
    return rows, summary


def _suite_tail(cfg: ExperimentConfig, pool, threads: int):
    Z = build_driver(cfg)
    p = build_problem(cfg, Z)
    pr = cfg.probe
    n = pr["n_samples"]
    seeds = [derive_seed(cfg.seed, 100 + j) for j in range(n)]
    R = projection_matrix(p.basis, pr["projection_rank"])
    chunks = [seeds[i::threads] for i in range(threads)]

    def run(chunk):
        if not chunk:
            return None
        return malliavin_tail_mc(p, R, pr["a"], pr["eps_grid"], len(chunk), chunk,
                                 fine_depth=cfg.grid["fine_depth"], convention=cfg.driver["convention"],
                                 solver_kw={"picard_tol": cfg.solver["picard_tol"], "max_iter": cfg.solver["max_iter"]})

    parts = [t for t in pool.map(run, chunks) if t is not None]
    lam_by_seed = {}
    for t in parts:
        lam_by_seed.update(zip(t.seeds, t.samples))
    lam = np.array([lam_by_seed[s] for s in seeds])
    eps = np.sort(np.asarray(pr["eps_grid"], float))[::-1]
    probs = np.array([(lam <= e).mean() for e in eps])
    rows = [{"quantity": "sample", "index": j, "seed": s, "eps": float("nan"), "value": float(v)}
            for j, (s, v) in enumerate(zip(seeds, lam))]
    rows += [{"quantity": "tail_prob", "index": j, "seed": -1, "eps": float(e), "value": float(q)}
             for j, (e, q) in enumerate(zip(eps, probs))]
    _, half = _wilson(probs * n, n)
    slope, window = _tail_slope(eps, probs)
    for j, hw in enumerate(half):
        rows.append({"quantity": "tail_half_width", "index": j, "seed": -1, "eps": float(eps[j]), "value": float(hw)})
    summary = {"n_samples": n, "lambda_min": float(lam.min()), "lambda_median": float(np.median(lam)),
               "all_positive": bool(np.all(lam > 0)), "tail_non_increasing": bool(np.all(np.diff(probs) <= 0)),
               "tail_reaches_zero": bool(probs[-1] == 0.0), "tail_slope": slope,
               "resolvable_window": list(window)}
    return rows, summary


_SUITE_FN = {
    "convergence": _suite_convergence,
    "identities": _suite_identities,
    "jacobian": _suite_jacobian,
    "fubini": _suite_fubini,
    "hormander": _suite_hormander,
    "tail": _suite_tail,
}


# ----------------------------------------------------------------------
# runner


def _check_thresholds(summary: dict, thresholds: dict) -> dict:
    out = {}
    for key, spec in thresholds.items():
        if key not in summary:
            raise ConfigError(f"threshold {key!r} does not name a summary field of this suite")
        val = summary[key]
        spec = {"le": spec} if isinstance(spec, (int, float)) and not isinstance(spec, bool) else spec
        ok = True
        for op, ref in spec.items():
            if op == "eq":
                ok &= val == ref
                continue
            v = float(val)
            if math.isnan(v):
                ok = False
            elif op == "le":
                ok &= v <= ref
            elif op == "ge":
                ok &= v >= ref
        out[key] = bool(ok)
    return out


@dataclass
class RunResult:
    status: int
    summary: dict
    csv_path: Path | None = None
    json_path: Path | None = None


def run_experiment(config, suite: str | None = None, out_dir=None, threads: int = 1) -> RunResult:
    """Run one suite and write ``<out>/<experiment>/<suite>.{csv,json}``."""
    cfg = config if isinstance(config, ExperimentConfig) else validate_config(config)
    suite = suite or cfg.suite
    if suite is None:
        raise ConfigError("no suite given (config 'suite' or --suite)")
    if suite not in _SUITE_FN:
        raise ConfigError(f"unknown suite {suite!r}; expected one of {', '.join(SUITES)}")
    if suite == "tail" and cfg.seed is None:
        raise ConfigError("seed is mandatory for stochastic experiments")
    out_dir = Path(out_dir or cfg.output.get("dir") or os.environ.get(OUT_ENV) or "results")
    target = out_dir / cfg.experiment
    log.info("running %s/%s into %s", cfg.experiment, suite, target)
    t0 = time.perf_counter()
    with ThreadPoolExecutor(max_workers=max(1, int(threads))) as pool:
        rows, summary = _SUITE_FN[suite](cfg, pool, max(1, int(threads)))
    runtime = time.perf_counter() - t0
    log.info("suite finished in %.2f s", runtime)
    checks = _check_thresholds(summary, cfg.thresholds)
    passed = all(checks.values())
    csv_path = emit_report(rows, "csv", target / f"{suite}.csv")
    doc = {"experiment": cfg.experiment, "suite": suite, "seed": cfg.seed, "summary": summary,
           "thresholds": cfg.thresholds, "checks": checks, "passed": passed, "runtime_seconds": runtime}
    json_path = emit_report(doc, "json", target / f"{suite}.json")
    nonfinite = json.loads(json_path.read_text()).get("nan_fields")
    status = EXIT_PASS if passed and not nonfinite else EXIT_FAIL
    return RunResult(status, summary, csv_path, json_path)


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="roughspde", description="Rough SPDE experiment runner")
    sub = ap.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="run an experiment suite from a config file")
    run.add_argument("config", help="YAML or JSON experiment config")
    run.add_argument("--suite", choices=SUITES, help="override the config's suite")
    run.add_argument("--out", help=f"output directory (default ${OUT_ENV} or ./results)")
    run.add_argument("--threads", type=int, default=1, help="worker threads for seeds and levels")
    run.add_argument("-v", "--verbose", action="store_true")
    return ap


def main(argv=None) -> int:
    try:
        args = _parser().parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_PASS
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if args.threads < 1:
        print("error: --threads must be at least 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        cfg = load_config(args.config)
        res = run_experiment(cfg, args.suite, args.out, args.threads)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except BlowUpError as exc:
        print(f"blow-up: {exc} (config {args.config})", file=sys.stderr)
        return EXIT_RUNTIME
    except (RoughSpdeError, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"runtime error: {exc} (config {args.config})", file=sys.stderr)
        return EXIT_RUNTIME
    print(f"{'PASS' if res.status == EXIT_PASS else 'FAIL'} {res.json_path}")
    return res.status


if __name__ == "__main__":
    sys.exit(main())
