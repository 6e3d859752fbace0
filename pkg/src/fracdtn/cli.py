"""Batch driver: ``fracdtn run | validate | cache``.

Exit codes: 0 success, 2 validation error, 3 ill-posed scenario, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import math
import platform
import sys
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .cache import cache_dir, cached_factorization, clear_cache, list_cache
from .config import (
    build_grid_from,
    build_partition,
    build_potential,
    build_tensor,
    config_hash,
    diagnose,
    effective_tolerances,
    load_config,
    with_seed,
)
from .dtn import assemble_dtn_matrix, apply_dtn, integral_identity_sides
from .errors import IllPosedError, NumericalError, ValidationError
from .forward import (
    make_scenario,
    resonant_potential,
    solve_exterior_problem,
    stability_ratio,
)
from .geometry import Box
from .inverse import (
    ObstacleCandidateFamily,
    bump_datum,
    distinguish_obstacles,
    nodal_solutions,
    recover_obstacle,
    recover_potential,
    runge_approximate,
)
from .operator import (
    FractionalOperator,
    assemble_local_operator,
    extract_kernel,
    heat_quadrature_fractional_apply,
    kernel_pairs,
    kernel_power_law,
    spectral_fractional_power,
)

EXIT_OK, EXIT_INVALID, EXIT_ILLPOSED, EXIT_NUMERICAL = 0, 2, 3, 4
U64_MAX = 2**64 - 1


@dataclass
class Outputs:
    metrics: dict = field(default_factory=dict)
    fields: dict = field(default_factory=dict)  # name -> (header, 2D array)
    plotdata: dict = field(default_factory=dict)
    binaries: dict = field(default_factory=dict)  # name -> DtnMatrix


@dataclass
class Context:
    cfg: dict
    tol: dict
    seed: int
    threads: int
    use_cache: bool
    grid: object = None
    operator: FractionalOperator | None = None
    cache_hit: bool = False

    def rng(self, salt: int) -> np.random.Generator:
        return np.random.default_rng([self.seed, salt])


# -- helpers ------------------------------------------------------------------


def _clean(obj):
    """JSON-safe copy: numpy scalars unwrapped, non-finite floats become None."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer, int)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        return float(obj) if math.isfinite(obj) else None
    return obj


def _node_table(ctx: Context, idx: np.ndarray, columns: dict) -> tuple[list, np.ndarray]:
    pts = ctx.grid.nodes[idx]
    names = ["index"] + ["x", "y", "z"][: ctx.grid.n] + list(columns)
    data = np.column_stack([idx, pts] + [np.asarray(v, dtype=float) for v in columns.values()])
    return names, data


def _probe(ctx: Context, part) -> np.ndarray:
    p = ctx.cfg["experiment"]["probe"]
    return bump_datum(ctx.grid, part, p["center"], p["width"], "o1")


def _potential(ctx: Context, spec, part, salt: int, kind: str | None = None):
    return build_potential(spec, ctx.grid, part, ctx.seed, salt,
                           resonance=lambda: resonant_potential(part, ctx.operator, kind))


def _base_scenario(ctx: Context, part=None, potential_spec=..., salt: int = 0):
    part = part if part is not None else build_partition(ctx.cfg, ctx.grid)
    kind = ctx.cfg.get("kind")
    spec = ctx.cfg.get("potential") if potential_spec is ... else potential_spec
    q = _potential(ctx, spec, part, salt, kind)
    return make_scenario(part, ctx.operator, q, kind)


# -- experiments --------------------------------------------------------------


def exp_forward(ctx: Context) -> Outputs:
    exp = ctx.cfg["experiment"]
    scn = _base_scenario(ctx)
    part = scn.partition
    g = _probe(ctx, part) if "probe" in exp else np.zeros(ctx.grid.size)
    f = exp.get("source", 0.0 if "probe" in exp else 1.0)
    rep = scn.eigenvalue_report
    out = Outputs()
    out.metrics = {
        "eigenvalue_condition": {"sigma_min": rep.sigma_min, "sigma_max": rep.sigma_max,
                                 "ratio": rep.ratio, "well_posed": rep.well_posed},
        "min_abs_q": scn.min_abs_q(),
        "kind": scn.kind,
        "counts": {k: int(getattr(part, k).size) for k in ("omega", "obstacle", "annulus", "exterior", "o1", "o2")},
    }
    sol = solve_exterior_problem(scn, g, f)
    out.metrics["residuals"] = sol.residuals
    trials = int(exp.get("stability_trials", 0))
    if trials:
        out.metrics["stability"] = stability_ratio(scn, trials, ctx.rng(11))
    region = np.zeros(ctx.grid.size)
    region[part.obstacle], region[part.exterior] = 1, 2
    out.fields["solution"] = _node_table(ctx, np.arange(ctx.grid.size),
                                         {"region": region, "u": sol.u, "Lsu": sol.Lsu})
    return out


def exp_dtn(ctx: Context) -> Outputs:
    exp = ctx.cfg["experiment"]
    scn = _base_scenario(ctx)
    part = scn.partition
    dtn = assemble_dtn_matrix(scn, ctx.threads)
    hn = ctx.grid.cell_measure
    out = Outputs()
    pairs = int(exp.get("symmetry_pairs", 10))
    rng = ctx.rng(21)
    worst = 0.0
    for _ in range(pairs):
        gs = []
        for _ in range(2):
            v = np.zeros(ctx.grid.size)
            v[part.exterior] = rng.standard_normal(part.exterior.size)
            gs.append(v)
        a = float(apply_dtn(scn, gs[0]) @ gs[1][part.exterior] * hn)
        b = float(apply_dtn(scn, gs[1]) @ gs[0][part.exterior] * hn)
        worst = max(worst, abs(a - b) / max(abs(a) + abs(b), 1e-300))
    out.metrics = {
        "shape": list(dtn.shape),
        "frobenius_norm": float(np.linalg.norm(dtn.values)),
        "symmetry_pairs": pairs,
        "symmetry_max_relative_residual": worst,
        "kind": scn.kind,
    }
    out.fields["dtn_matrix"] = ([f"o1_{j}" for j in dtn.o1], dtn.values)
    if exp.get("save_matrix"):
        out.binaries["dtn"] = dtn
    return out


def exp_identity(ctx: Context) -> Outputs:
    exp = ctx.cfg["experiment"]
    part = build_partition(ctx.cfg, ctx.grid)
    scn1 = _base_scenario(ctx, part, salt=1)
    scn2 = _base_scenario(ctx, part, exp["potential2"], salt=2)
    rng = ctx.rng(31)
    rows = []
    for _ in range(int(exp.get("draws", 5))):
        g1 = rng.standard_normal(part.o1.size)
        g2 = rng.standard_normal(part.o2.size)
        lhs, rhs = integral_identity_sides(scn1, scn2, g1, g2)
        rel = abs(lhs - rhs) / (abs(lhs) + abs(rhs)) if (lhs or rhs) else 0.0
        rows.append((lhs, rhs, abs(lhs - rhs), rel))
    arr = np.array(rows)
    out = Outputs()
    out.metrics = {
        "draws": len(rows),
        "residual": float(arr[:, 3].max()),
        "max_absolute_residual": float(arr[:, 2].max()),
        "lhs": arr[:, 0], "rhs": arr[:, 1],
    }
    out.plotdata["identity_sides"] = (["lhs", "rhs", "abs_residual", "rel_residual"], arr)
    return out


def exp_kernel(ctx: Context) -> Outputs:
    exp = ctx.cfg["experiment"]
    sep = float(exp.get("min_separation", 4.0))
    K = extract_kernel(ctx.operator, ctx.grid)
    fit = kernel_power_law(K, sep)
    r, k = kernel_pairs(K, sep)
    keep = k > 0
    edges = np.geomspace(r.min(), r.max() * (1 + 1e-12), int(exp.get("bins", 20)) + 1)
    which = np.digitize(r, edges) - 1
    rows = []
    for b in range(len(edges) - 1):
        sel = (which == b) & keep
        if sel.any():
            rows.append((np.exp(np.log(r[sel]).mean()), np.median(k[sel]), k[sel].min(), k[sel].max(), sel.sum()))
    out = Outputs()
    ref = fit["reference_constant"]
    out.metrics = {**fit, "prefactor_relative_error": abs(fit["prefactor"] - ref) / ref}
    # cross-check one column against the quadrature route
    v = np.zeros(ctx.grid.size)
    v[ctx.grid.size // 2] = 1.0
    quad = heat_quadrature_fractional_apply(ctx.operator.local, ctx.operator.s, v, ctx.tol["quadrature_nodes"],
                                            ctx.operator.factorization)
    spec = ctx.operator.apply(v)
    out.metrics["quadrature_relative_error"] = float(np.linalg.norm(quad - spec) / np.linalg.norm(spec))
    out.plotdata["kernel_loglog"] = (["r", "K_median", "K_min", "K_max", "pairs"], np.array(rows))
    return out


def exp_runge(ctx: Context) -> Outputs:
    exp = ctx.cfg["experiment"]
    scn = _base_scenario(ctx)
    part = scn.partition
    tgt = exp["target"]
    if tgt["type"] == "one":
        phi = np.ones(part.annulus.size)
    elif tgt["type"] == "box":
        phi = Box(tuple(tgt["lo"]), tuple(tgt["hi"])).contains(ctx.grid.nodes[part.annulus]).astype(float)
    else:
        phi = nodal_solutions(scn, "o1") @ ctx.rng(41).standard_normal(part.o1.size)
    a = exp.get("alphas", {"start": 1e-2, "stop": 1e-14, "num": 25})
    alphas = np.geomspace(a["start"], a["stop"], a["num"])
    res = runge_approximate(scn, phi, alphas, exp.get("relative_target"), ctx.tol["monotone_tol"])
    out = Outputs()
    out.metrics = {
        "target": tgt["type"],
        "residual": res.residual,
        "relative_residual": res.relative_residual,
        "alpha": res.alpha,
        "monotone": res.monotone,
        "o1_nodes": int(part.o1.size),
        "annulus_nodes": int(part.annulus.size),
    }
    out.plotdata["runge_path"] = (["alpha", "residual"], np.array(res.path))
    out.fields["control"] = _node_table(ctx, part.o1, {"g": res.g})
    return out


def _family(ctx: Context) -> ObstacleCandidateFamily:
    exp, cfg = ctx.cfg["experiment"], ctx.cfg
    cands = exp["candidates"]
    return ObstacleCandidateFamily(ctx.grid, cfg["omega"], cfg.get("o1"), cfg.get("o2"),
                                   tuple(c["shape"] for c in cands), tuple(c["kind"] for c in cands))


def exp_recover_obstacle(ctx: Context) -> Outputs:
    exp = ctx.cfg["experiment"]
    fam = _family(ctx)
    part0 = build_partition(ctx.cfg, ctx.grid, None)
    g = _probe(ctx, part0)
    q = _potential(ctx, ctx.cfg.get("potential"), part0, 0)
    truth = exp["truth_index"]
    scns = fam.scenarios(ctx.operator, q)
    p = scns[truth].partition
    meas = apply_dtn(scns[truth], g)[np.searchsorted(p.exterior, p.o2)]
    noise = float(exp.get("noise", 0.0))
    if noise > 0:
        e = ctx.rng(51).standard_normal(meas.size)
        meas = meas + noise * np.linalg.norm(meas) * e / np.linalg.norm(e)
    rec = recover_obstacle(meas, g, fam, q, ctx.operator, ctx.tol["match_tol"], ctx.threads)
    out = Outputs()
    out.metrics = {
        "best_candidate": rec.best_index,
        "truth_index": truth,
        "correct": rec.best_index == truth,
        "best_misfit": rec.best_misfit,
        "in_family": rec.in_family,
        "match_tolerance": rec.tolerance,
        "noise": noise,
        "misfits": rec.misfits,
    }
    kinds = np.array([0.0 if k == "soft" else 1.0 for k in fam.kinds])
    out.plotdata["misfits"] = (["candidate", "obstacle_nodes", "hard", "misfit"],
                               np.column_stack([np.arange(len(fam)), rec.obstacle_sizes, kinds, rec.misfits]))
    return out


def exp_recover_potential(ctx: Context) -> Outputs:
    exp = ctx.cfg["experiment"]
    part = build_partition(ctx.cfg, ctx.grid)
    scn1 = _base_scenario(ctx, part, salt=1)
    scn2 = _base_scenario(ctx, part, exp["potential2"], salt=2)
    d1 = assemble_dtn_matrix(scn1, ctx.threads)
    d2 = assemble_dtn_matrix(scn2, ctx.threads)
    noise = float(exp.get("noise", 0.0))
    level = None
    if noise > 0:
        E = ctx.rng(61).standard_normal(d1.shape)
        E *= noise * np.linalg.norm(d1.values - d2.values) / np.linalg.norm(E)
        d1 = type(d1)(d1.values + E, d1.o1, d1.o2, d1.cell_measure, d1.meta)
        level = float(np.linalg.norm(E) * ctx.grid.cell_measure)
    rec = recover_potential(d1, d2, scn1, scn2, noise_level=level, tau=ctx.tol["tau"],
                            rank=exp.get("rank"), rcond=ctx.tol["rcond"])
    true = scn1.q[part.annulus] - scn2.q[part.annulus]
    tn = np.linalg.norm(true)
    err = np.linalg.norm(rec.dq - true)
    out = Outputs()
    out.metrics = {
        "relative_error": float(err / tn) if tn > 0 else float(err),
        "rank": rec.rank,
        "residual": rec.residual,
        "noise": noise,
        "noise_level": level,
        "conditioning": rec.conditioning,
    }
    out.fields["potential_difference"] = _node_table(ctx, part.annulus, {"true": true, "recovered": rec.dq})
    return out


def exp_distinguish(ctx: Context) -> Outputs:
    exp = ctx.cfg["experiment"]
    fam = _family(ctx)
    parts = fam.partitions()
    g = _probe(ctx, parts[0])
    scns = []
    for a, (p, kind) in enumerate(zip(parts, fam.kinds)):
        for b, spec in enumerate(exp["potentials"]):
            q = _potential(ctx, spec, p, 100 + b, kind)
            scns.append((a, b, make_scenario(p, ctx.operator, q, kind)))
    rows = []
    distinct_ok, identical_zero, min_rel = True, True, float("inf")
    for a1, b1, s1 in scns:
        for a2, b2, s2 in scns:
            d = distinguish_obstacles(s1, s2, g, ctx.tol["theta"])
            rel = d.discrepancy / d.reference if d.reference > 0 else float("inf")
            if a1 != a2:
                distinct_ok &= d.distinct
                min_rel = min(min_rel, rel)
            elif b1 == b2:
                identical_zero &= d.discrepancy == 0.0
            rows.append((a1, b1, a2, b2, d.discrepancy, rel, float(d.distinct)))
    out = Outputs()
    out.metrics = {
        "scenarios": len(scns),
        "distinct_obstacle_pairs_detected": bool(distinct_ok),
        "identical_pairs_zero": bool(identical_zero),
        "min_relative_discrepancy_distinct": min_rel,
        "theta": ctx.tol["theta"],
        "min_abs_q": [s.min_abs_q() for _, _, s in scns],
    }
    out.plotdata["discrepancy"] = (["obstacle_a", "potential_a", "obstacle_b", "potential_b",
                                    "discrepancy", "relative", "distinct"], np.array(rows))
    return out


EXPERIMENTS = {
    "forward": exp_forward,
    "dtn": exp_dtn,
    "identity-check": exp_identity,
    "kernel-bounds": exp_kernel,
    "runge": exp_runge,
    "recover-obstacle": exp_recover_obstacle,
    "recover-potential": exp_recover_potential,
    "distinguish": exp_distinguish,
}


# -- driver -------------------------------------------------------------------


def _write_csv(path: Path, header: list, data: np.ndarray) -> None:
    data = np.atleast_2d(np.asarray(data, dtype=float))
    np.savetxt(path, data, delimiter=",", fmt="%.17g", header=",".join(header), comments="")


def execute(cfg: dict, out_dir: Path, threads: int = 1, seed: int | None = None,
            use_cache: bool = True) -> dict:
    """Run one config and write its outputs; returns the result document."""
    diags = diagnose(cfg)
    if diags:
        raise ValidationError("; ".join(diags))
    cfg = with_seed(cfg, seed)
    tol = effective_tolerances(cfg)
    ctx = Context(cfg, tol, int(cfg["seed"]), max(1, int(threads)), use_cache)
    ctx.grid = build_grid_from(cfg)
    L = assemble_local_operator(ctx.grid, build_tensor(cfg, ctx.grid.n))
    fact, ctx.cache_hit = cached_factorization(L, use_cache)
    ctx.operator = spectral_fractional_power(L, cfg["s"], fact)
    kind = cfg["experiment"]["type"]
    outputs = EXPERIMENTS[kind](ctx)

    out_dir.mkdir(parents=True, exist_ok=True)
    files = []
    for sub, table in (("fields", outputs.fields), ("plotdata", outputs.plotdata)):
        if table:
            (out_dir / sub).mkdir(exist_ok=True)
        for name, (header, data) in sorted(table.items()):
            _write_csv(out_dir / sub / f"{name}.csv", header, data)
            files.append(f"{sub}/{name}.csv")
    for name, mat in sorted(outputs.binaries.items()):
        (out_dir / "fields").mkdir(exist_ok=True)
        for path in mat.save(out_dir / "fields" / name):
            files.append(f"fields/{path.name}")
    result = {
        "experiment": kind,
        "status": "ok",
        "metrics": outputs.metrics,
        "tolerances": tol,
        "files": files,
        "provenance": {
            "config_hash": config_hash(cfg),
            "seed": ctx.seed,
            "versions": {
                "fracdtn": __version__,
                "numpy": np.__version__,
                "scipy": scipy.__version__,
                "python": platform.python_version(),
            },
            "threads": ctx.threads,
            "timestamp": datetime.now(timezone.utc).isoformat(),
        },
    }
    result = _clean(result)
    (out_dir / "result.json").write_text(json.dumps(result, indent=2, sort_keys=True) + "\n")
    return result


def _seed(text: str) -> int:
    value = int(text)
    if not 0 <= value <= U64_MAX:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return value


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="fracdtn", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"fracdtn {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="execute the experiment declared in a config")
    run.add_argument("config")
    run.add_argument("--out", default="out", help="output directory (default: ./out)")
    run.add_argument("--threads", type=int, default=1)
    run.add_argument("--seed", type=_seed, default=None, help="overrides the config seed")
    run.add_argument("--no-cache", action="store_true", help="recompute the spectral factorization")
    val = sub.add_parser("validate", help="schema, geometry and ellipticity checks without solving")
    val.add_argument("config")
    cache = sub.add_parser("cache", help="manage the factorization cache")
    cache.add_argument("action", choices=["list", "clear", "path"])
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "validate":
            diags = diagnose(load_config(args.config))
            print(json.dumps({"config": args.config, "diagnostics": diags}, indent=2))
            return EXIT_OK if not diags else EXIT_INVALID
        if args.command == "cache":
            if args.action == "path":
                print(cache_dir())
            elif args.action == "list":
                print(json.dumps(list_cache(), indent=2, sort_keys=True))
            else:
                print(f"removed {clear_cache() if cache_dir().exists() else 0} files")
            return EXIT_OK
        cfg = load_config(args.config)
        result = execute(cfg, Path(args.out), args.threads, args.seed, not args.no_cache)
        print(f"{result['experiment']}: wrote {Path(args.out) / 'result.json'}")
        return EXIT_OK
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except IllPosedError as exc:
        print(f"ill-posed: {exc}", file=sys.stderr)
        return EXIT_ILLPOSED
    except (NumericalError, np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
