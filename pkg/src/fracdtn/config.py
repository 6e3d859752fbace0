"""Scenario configs: JSON loading, schema and geometry diagnostics, object construction."""

from __future__ import annotations

import copy
import hashlib
import json
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

from .errors import FracDtnError, ValidationError
from .geometry import Box, DomainPartition, Grid, build_grid, partition
from .inverse import bump_datum
from .operator import EllipticTensorField, _cell_centers

__all__ = [
    "DEFAULT_TOLERANCES",
    "build_grid_from",
    "build_partition",
    "build_potential",
    "build_tensor",
    "config_hash",
    "diagnose",
    "effective_tolerances",
    "load_config",
    "load_schema",
    "schema_errors",
    "with_seed",
]

DEFAULT_TOLERANCES = {
    "theta": 1e-6,
    "match_tol": 1e-10,
    "monotone_tol": 1e-12,
    "tau": 1.1,
    "rcond": 1e-13,
    "quadrature_nodes": 400,
}


def load_schema() -> dict:
    text = resources.files("fracdtn").joinpath("schema/config.schema.json").read_text()
    return json.loads(text)


def load_config(path: str | Path) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ValidationError(f"cannot read config {path}: {exc.strerror or exc}") from exc
    try:
        cfg = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ValidationError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ValidationError("config must be a JSON object")
    return cfg


def config_hash(cfg: dict) -> str:
    canon = json.dumps(cfg, sort_keys=True, separators=(",", ":"), ensure_ascii=True)
    return hashlib.sha256(canon.encode()).hexdigest()


def effective_tolerances(cfg: dict) -> dict:
    return {**DEFAULT_TOLERANCES, **cfg.get("tolerances", {})}


def schema_errors(cfg: dict) -> list[str]:
    validator = jsonschema.Draft202012Validator(load_schema())
    out = []
    for err in sorted(validator.iter_errors(cfg), key=lambda e: list(map(str, e.absolute_path))):
        where = "/".join(map(str, err.absolute_path)) or "<root>"
        out.append(f"schema: {where}: {err.message}")
    return out


# -- builders -----------------------------------------------------------------


def build_grid_from(cfg: dict) -> Grid:
    g = cfg["grid"]
    return build_grid(g["n"], g["R"], g["m"])


def build_tensor(cfg: dict, n: int) -> EllipticTensorField:
    t = cfg["tensor"]
    if t["type"] == "constant":
        return EllipticTensorField.constant(t["matrix"], t.get("gamma"))
    return EllipticTensorField.named(t["name"], n, t.get("params"), t.get("gamma"))


def build_partition(cfg: dict, grid: Grid, obstacle=...) -> DomainPartition:
    obs = cfg.get("obstacle") if obstacle is ... else obstacle
    return partition(grid, cfg["omega"], obs, cfg.get("o1"), cfg.get("o2"))


def _rng(seed: int, salt: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), salt])


def build_potential(spec: dict | None, grid: Grid, part: DomainPartition, seed: int = 0,
                    salt: int = 0, resonance=None) -> np.ndarray | float:
    """Node field (or scalar) for a potential spec.

    ``resonance`` is a callable returning the resonant constant; it is only
    evaluated for the ``resonant`` named potential.
    """
    if spec is None:
        return 0.0
    kind = spec["type"]
    if kind == "constant":
        return float(spec["value"])
    if kind == "pixels":
        vals = np.asarray(spec["values"], dtype=float)
        region = spec.get("region", "nodes")
        want = grid.size if region == "nodes" else part.annulus.size
        if vals.shape != (want,):
            raise ValidationError(f"pixel potential needs {want} values for region {region!r}, got {vals.size}")
        return vals
    name, p = spec["name"], dict(spec.get("params", {}))
    X = grid.nodes
    if name == "wave":
        k = np.asarray(p.get("k", [3.0] * grid.n), dtype=float)
        return p.get("base", 1.0) + p.get("amplitude", 0.5) * np.prod(np.cos(X * k), axis=1)
    if name == "bump":
        c = np.asarray(p.get("center", [0.0] * grid.n), dtype=float)
        half = float(p.get("half_width", 1)) * grid.h
        block = np.all(np.abs(X - c) <= half + 1e-9 * grid.h, axis=1)
        return p.get("base", 1.0) + p.get("height", 1.0) * block
    if name == "random":
        lo, hi = float(p.get("low", 0.5)), float(p.get("high", 1.5))
        return _rng(seed, 1000 + salt).uniform(lo, hi, grid.size)
    if name == "resonant":
        if resonance is None:
            raise ValidationError("resonant potential needs an operator")
        return float(resonance())
    raise ValidationError(f"unknown potential {name!r}")


# -- diagnostics --------------------------------------------------------------


def _try(diags: list, label: str, fn):
    try:
        return fn()
    except FracDtnError as exc:
        diags.append(f"{label}: {exc}")
    except (KeyError, TypeError, ValueError) as exc:
        diags.append(f"{label}: malformed entry ({exc})")
    return None


def diagnose(cfg: dict) -> list[str]:
    """All schema, geometry and ellipticity violations; no solves."""
    diags = schema_errors(cfg)
    if diags:
        return diags
    grid = _try(diags, "grid", lambda: build_grid_from(cfg))
    if grid is None:
        return diags

    def tensor_check():
        A = build_tensor(cfg, grid.n)
        A.check(grid.nodes)
        A.check(_cell_centers(grid))

    _try(diags, "tensor", tensor_check)
    exp = cfg["experiment"]
    kind = cfg.get("kind")
    part = _try(diags, "geometry", lambda: build_partition(cfg, grid))
    if part is not None and kind is not None and (kind == "none") == part.has_obstacle:
        diags.append(f"geometry: obstacle kind {kind!r} does not match the obstacle declaration")
    if part is not None:
        for key in ("potential",):
            if cfg.get(key) is not None:
                _try(diags, key, lambda: build_potential(cfg[key], grid, part, resonance=lambda: 0.0))
        if "potential2" in exp:
            _try(diags, "experiment/potential2",
                 lambda: build_potential(exp["potential2"], grid, part, resonance=lambda: 0.0))
        if "probe" in exp:
            _try(diags, "experiment/probe",
                 lambda: bump_datum(grid, part, exp["probe"]["center"], exp["probe"]["width"]))
        if exp["type"] == "runge" and exp["target"]["type"] == "box":
            _try(diags, "experiment/target", lambda: Box(tuple(exp["target"]["lo"]), tuple(exp["target"]["hi"])))
    for i, cand in enumerate(exp.get("candidates", [])):
        _try(diags, f"experiment/candidates/{i}", lambda: build_partition(cfg, grid, cand["shape"]))
    if "truth_index" in exp and exp["truth_index"] >= len(exp["candidates"]):
        diags.append(f"experiment/truth_index: {exp['truth_index']} is outside the candidate list")
    for i, pot in enumerate(exp.get("potentials", [])):
        if part is not None:
            _try(diags, f"experiment/potentials/{i}",
                 lambda: build_potential(pot, grid, part, resonance=lambda: 0.0))
    return diags


def with_seed(cfg: dict, seed: int | None) -> dict:
    out = copy.deepcopy(cfg)
    if seed is not None:
        out["seed"] = int(seed)
    out.setdefault("seed", 0)
    return out
