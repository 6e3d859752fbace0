"""Exterior-value problem ``(L^s + q) u = f`` on the annulus with an embedded obstacle.

Soft obstacles pin ``u = 0`` in D; hard obstacles add the rows
``(L^s u)_i = 0`` for i in D with ``u|_D`` unknown. Exterior values are
imposed, never solved for, so a solve depends on the datum only through its
exterior nodes.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.linalg as sla

from .errors import IllPosedError, ValidationError
from .geometry import DomainPartition
from .operator import FractionalOperator, hs_norm

__all__ = [
    "EigenvalueReport",
    "Scenario",
    "Solution",
    "check_eigenvalue_condition",
    "make_scenario",
    "resonant_potential",
    "solve_exterior_problem",
    "solve_many",
    "stability_ratio",
]

WELL_POSED_RATIO = 1e-8
KINDS = ("soft", "hard", "none")


@dataclass(frozen=True, eq=False)
class Scenario:
    """Partition, operator, potential and obstacle condition.

    ``q`` and ``f`` are node fields over the whole grid; only their annulus
    values enter the equations (``q`` on the rest of Omega is kept for the
    nonvanishing-potential check of hard obstacles).
    """

    partition: DomainPartition
    operator: FractionalOperator
    q: np.ndarray
    kind: str
    f: np.ndarray
    require_nonvanishing_q: bool = False
    label: str = ""

    @property
    def grid(self):
        return self.partition.grid

    @property
    def unknowns(self) -> np.ndarray:
        """Node indices solved for: the annulus, plus D for hard obstacles."""
        return self.partition.omega if self.kind == "hard" else self.partition.annulus

    @cached_property
    def system_matrix(self) -> np.ndarray:
        U = self.unknowns
        M = self.operator.matrix[np.ix_(U, U)].copy()
        qU = self.q[U].copy()
        qU[~np.isin(U, self.partition.annulus)] = 0.0
        M[np.diag_indices_from(M)] += qU
        return M

    @cached_property
    def eigenvalue_report(self) -> "EigenvalueReport":
        sv = np.abs(np.linalg.eigvalsh(self.system_matrix))
        smin, smax = float(sv.min()), float(sv.max())
        return EigenvalueReport(smin, smax, smin > WELL_POSED_RATIO * smax)

    @cached_property
    def _lu(self):
        return sla.lu_factor(self.system_matrix, check_finite=False)

    def min_abs_q(self) -> float:
        return float(np.abs(self.q[self.partition.omega]).min())


def _node_field(values, part: DomainPartition, region: str, name: str) -> np.ndarray:
    N = part.grid.size
    idx = getattr(part, region)
    if values is None:
        return np.zeros(N)
    arr = np.asarray(values, dtype=float)
    out = np.zeros(N)
    if arr.ndim == 0:
        out[idx] = float(arr)
    elif arr.shape == (N,):
        out[:] = arr
    elif arr.shape == (idx.size,):
        out[idx] = arr
    else:
        raise ValidationError(f"{name} has shape {arr.shape}; expected ({N},) or ({idx.size},)")
    if not np.all(np.isfinite(out)):
        raise ValidationError(f"{name} must be finite")
    return out


def make_scenario(part: DomainPartition, operator: FractionalOperator, q=0.0,
                  kind: str | None = None, f=None, require_nonvanishing_q: bool = False,
                  label: str = "") -> Scenario:
    """Validate and bundle a scenario.

    ``q`` may be a scalar, a node field, or an annulus field. ``kind`` defaults
    to ``"soft"`` when the partition has an obstacle and ``"none"`` otherwise.
    """
    if kind is None:
        kind = "soft" if part.has_obstacle else "none"
    if kind not in KINDS:
        raise ValidationError(f"obstacle kind must be one of {KINDS}, got {kind!r}")
    if (kind == "none") == part.has_obstacle:
        raise ValidationError(f"obstacle kind {kind!r} does not match the partition")
    if operator.matrix.shape[0] != part.grid.size:
        raise ValidationError("operator size does not match the grid")
    region = "annulus" if np.shape(q) == (part.annulus.size,) else "omega"
    qf = _node_field(q, part, region, "potential q")
    ff = _node_field(f, part, "annulus", "source f")
    ff[~part.mask("annulus")] = 0.0
    scn = Scenario(part, operator, qf, kind, ff, require_nonvanishing_q, label)
    if require_nonvanishing_q and scn.min_abs_q() == 0.0:
        raise ValidationError("potential vanishes somewhere in Omega but a nonvanishing q is required")
    return scn


@dataclass(frozen=True)
class EigenvalueReport:
    sigma_min: float
    sigma_max: float
    well_posed: bool

    @property
    def ratio(self) -> float:
        return self.sigma_min / self.sigma_max if self.sigma_max > 0 else 0.0


def check_eigenvalue_condition(scn: Scenario) -> EigenvalueReport:
    """Smallest/largest singular value of the constrained interior system."""
    return scn.eigenvalue_report


def resonant_potential(part: DomainPartition, operator: FractionalOperator, kind: str | None = None) -> float:
    """Constant ``q = c`` on Omega that makes the interior system singular.

    The obstacle rows of a hard obstacle carry no potential, so they are
    eliminated by a Schur complement first; ``-c`` is then the smallest
    eigenvalue of the annulus block.
    """
    kind = kind or ("soft" if part.has_obstacle else "none")
    Ls = operator.matrix
    ann = part.annulus
    S = Ls[np.ix_(ann, ann)]
    if kind == "hard" and part.has_obstacle:
        D = part.obstacle
        S = S - Ls[np.ix_(ann, D)] @ np.linalg.solve(Ls[np.ix_(D, D)], Ls[np.ix_(D, ann)])
    return -float(np.linalg.eigvalsh(0.5 * (S + S.T))[0])


@dataclass(frozen=True, eq=False)
class Solution:
    u: np.ndarray
    Lsu: np.ndarray
    residuals: dict = field(default_factory=dict)

    def trace(self, idx: np.ndarray) -> np.ndarray:
        return self.u[idx]


def _exterior_datum(scn: Scenario, g) -> np.ndarray:
    """Full node matrix (N, k) holding the exterior values of ``g``; zero in Omega."""
    part = scn.partition
    N, E = part.grid.size, part.exterior
    G = np.asarray(g, dtype=float)
    if G.ndim == 1:
        G = G[:, None]
    out = np.zeros((N, G.shape[1]))
    if G.shape[0] == N:
        out[E] = G[E]
    elif G.shape[0] == E.size:
        out[E] = G
    else:
        raise ValidationError(f"exterior datum has {G.shape[0]} rows; expected {N} or {E.size}")
    if not np.all(np.isfinite(out)):
        raise ValidationError("exterior datum must be finite")
    return out


def solve_many(scn: Scenario, G, F=None) -> np.ndarray:
    """Solutions (N, k) for the columns of ``G``; sources ``F`` default to ``scn.f``."""
    rep = scn.eigenvalue_report
    if not rep.well_posed:
        raise IllPosedError(
            f"interior system is singular (sigma_min/sigma_max = {rep.ratio:.3e} <= {WELL_POSED_RATIO:g})"
        )
    U = scn.unknowns
    Ls = scn.operator.matrix
    X = _exterior_datum(scn, G)
    k = X.shape[1]
    if F is None:
        src = np.repeat(scn.f[:, None], k, axis=1)
    else:
        src = np.asarray(F, dtype=float).reshape(scn.grid.size, -1)
        if src.shape[1] != k:
            raise ValidationError("source and datum column counts differ")
        src = np.where(scn.partition.mask("annulus")[:, None], src, 0.0)
    rhs = src[U] - Ls[np.ix_(U, scn.partition.exterior)] @ X[scn.partition.exterior]
    X[U] = sla.lu_solve(scn._lu, rhs, check_finite=False)
    return X


def solve_exterior_problem(scn: Scenario, g, f=None) -> Solution:
    """Solve with exterior datum ``g`` (node field or exterior field).

    Values of ``g`` inside Omega are ignored. ``f`` overrides the scenario
    source (annulus values only).
    """
    F = None if f is None else _node_field(f, scn.partition, "annulus", "source f")[:, None]
    u = solve_many(scn, g, F)[:, 0]
    Lsu = scn.operator.matrix @ u
    part = scn.partition
    ann, D, E = part.annulus, part.obstacle, part.exterior
    src = scn.f if f is None else F[:, 0]
    res = {
        "annulus": float(np.linalg.norm(Lsu[ann] + scn.q[ann] * u[ann] - src[ann])),
        "exterior": float(np.linalg.norm(u[E] - _exterior_datum(scn, g)[E, 0])),
    }
    if scn.kind == "soft":
        res["obstacle"] = float(np.abs(u[D]).max())
    elif scn.kind == "hard":
        total = np.linalg.norm(Lsu)
        res["obstacle"] = float(np.linalg.norm(Lsu[D]) / total) if total > 0 else 0.0
    return Solution(u=u, Lsu=Lsu, residuals=res)


def stability_ratio(scn: Scenario, trials: int = 100, seed: int | np.random.Generator = 0) -> dict:
    """Empirical stability constant ``||u||_Hs / (||f||_L2 + ||g||_Hs)`` over random data.

    Exterior data are standard normal on the exterior nodes and zero in Omega;
    sources are standard normal on the annulus. Zero draws are skipped.
    """
    rng = np.random.default_rng(seed)
    part = scn.partition
    N, hn = part.grid.size, part.grid.cell_measure
    G = np.zeros((N, trials))
    F = np.zeros((N, trials))
    G[part.exterior] = rng.standard_normal((part.exterior.size, trials))
    F[part.annulus] = rng.standard_normal((part.annulus.size, trials))
    Usol = solve_many(scn, G, F)
    ratios = []
    for k in range(trials):
        denom = np.sqrt((F[:, k] ** 2).sum() * hn) + hs_norm(scn.operator, G[:, k], hn)
        if denom == 0:
            continue
        ratios.append(hs_norm(scn.operator, Usol[:, k], hn) / denom)
    ratios = np.array(ratios)
    return {
        "trials": int(ratios.size),
        "max_ratio": float(ratios.max()) if ratios.size else float("nan"),
        "mean_ratio": float(ratios.mean()) if ratios.size else float("nan"),
    }
