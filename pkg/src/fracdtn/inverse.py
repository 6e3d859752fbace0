"""Inverse algorithms: obstacle distinguishability and search, Runge control, potential recovery.

Obstacle recovery is an exhaustive search over a declared candidate family:
uniqueness from a single measurement licenses comparing the one observed
trace against every candidate's prediction. Potential recovery inverts the
integral identity, which is exact for the discrete model, so with enough
patch nodes the product system determines the potential difference.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .dtn import DtnMatrix, apply_dtn
from .errors import IllPosedError, ValidationError
from .forward import Scenario, make_scenario, solve_many
from .geometry import DomainPartition, Grid, Shape, partition
from .operator import FractionalOperator

__all__ = [
    "Distinction",
    "ObstacleCandidateFamily",
    "ObstacleRecovery",
    "PotentialRecovery",
    "RungeResult",
    "bump_datum",
    "distinguish_obstacles",
    "nodal_solutions",
    "product_system",
    "recover_obstacle",
    "recover_potential",
    "runge_approximate",
]

DEFAULT_THETA = 1e-6


def _l2(v: np.ndarray, hn: float) -> float:
    return float(np.sqrt((np.asarray(v) ** 2).sum() * hn))


def bump_datum(grid: Grid, part: DomainPartition, center, width: float, patch: str = "o1") -> np.ndarray:
    """Smooth compactly supported bump ``exp(1 - 1/(1 - r^2))`` on a patch, zero elsewhere."""
    idx = getattr(part, patch)
    r2 = ((grid.nodes[idx] - np.asarray(center, dtype=float)) ** 2).sum(axis=1) / width**2
    vals = np.zeros(idx.size)
    inside = r2 < 1.0
    vals[inside] = np.exp(1.0 - 1.0 / (1.0 - r2[inside]))
    out = np.zeros(grid.size)
    out[idx] = vals
    if not np.any(vals):
        raise ValidationError("bump datum has no support on the patch")
    return out


def _trace_o2(scn: Scenario, g) -> np.ndarray:
    part = scn.partition
    return apply_dtn(scn, g)[np.searchsorted(part.exterior, part.o2)]


def _check_hard_hypothesis(scn: Scenario) -> None:
    if scn.kind == "hard" and scn.min_abs_q() == 0.0:
        raise ValidationError("hard obstacle needs a potential without zeros in Omega")


# -- distinguishability -------------------------------------------------------


@dataclass(frozen=True)
class Distinction:
    discrepancy: float
    reference: float
    distinct: bool
    theta: float
    min_abs_q: tuple[float, float]


def distinguish_obstacles(scn1: Scenario, scn2: Scenario, g, theta: float = DEFAULT_THETA) -> Distinction:
    """Compare the two DtN traces on ``o2`` for one datum ``g`` on ``o1``."""
    p1, p2 = scn1.partition, scn2.partition
    if p1.grid != p2.grid or not all(
        np.array_equal(getattr(p1, k), getattr(p2, k)) for k in ("omega", "o1", "o2")
    ):
        raise ValidationError("scenarios must share grid, Omega and both patches")
    g = np.asarray(g, dtype=float)
    gfull = np.zeros(p1.grid.size)
    if g.shape == (p1.o1.size,):
        gfull[p1.o1] = g
    elif g.shape == (p1.grid.size,):
        gfull[p1.o1] = g[p1.o1]
    else:
        raise ValidationError(f"datum has shape {g.shape}")
    if not np.any(gfull):
        raise ValidationError("probing datum must not vanish on o1")
    for scn in (scn1, scn2):
        _check_hard_hypothesis(scn)
    hn = p1.grid.cell_measure
    t1 = _trace_o2(scn1, gfull)
    t2 = t1 if scn2 is scn1 else _trace_o2(scn2, gfull)
    disc, ref = _l2(t1 - t2, hn), _l2(t1, hn)
    return Distinction(disc, ref, disc > theta * ref, theta, (scn1.min_abs_q(), scn2.min_abs_q()))


# -- obstacle search ----------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ObstacleCandidateFamily:
    """Candidate obstacles sharing one grid, Omega and patch layout."""

    grid: Grid
    omega: Shape | dict
    o1: Shape | dict | None
    o2: Shape | dict | None
    candidates: tuple = ()
    kinds: tuple = ()

    def __post_init__(self):
        if len(self.kinds) != len(self.candidates):
            raise ValidationError("need one obstacle kind per candidate")

    def __len__(self) -> int:
        return len(self.candidates)

    def partitions(self) -> list[DomainPartition]:
        parts = [partition(self.grid, self.omega, c, self.o1, self.o2) for c in self.candidates]
        seen = {}
        for i, p in enumerate(parts):
            key = p.obstacle.tobytes()
            if key in seen:
                raise ValidationError(f"candidates {seen[key]} and {i} cover the same nodes")
            seen[key] = i
        return parts

    def scenarios(self, operator: FractionalOperator, q) -> list[Scenario]:
        return [
            make_scenario(p, operator, q, kind, label=f"candidate-{i}")
            for i, (p, kind) in enumerate(zip(self.partitions(), self.kinds))
        ]


@dataclass(frozen=True)
class ObstacleRecovery:
    best_index: int
    best_misfit: float
    misfits: list
    obstacle_sizes: list
    in_family: bool
    tolerance: float


def recover_obstacle(measurement, g, family: ObstacleCandidateFamily, q,
                     operator: FractionalOperator, match_tol: float = 1e-10,
                     threads: int = 1) -> ObstacleRecovery:
    """Exhaustive search: the candidate whose predicted ``o2`` trace is closest to ``measurement``.

    Ties go to the smaller obstacle, then the lower index. ``in_family`` is set
    when the best misfit is at most ``match_tol * max(1, ||measurement||)``.
    Ill-posed candidates get an infinite misfit.
    """
    if len(family) == 0:
        raise ValidationError("candidate family is empty")
    scns = family.scenarios(operator, q)
    hn = family.grid.cell_measure
    meas = np.asarray(measurement, dtype=float)
    o2 = scns[0].partition.o2
    if meas.shape != (o2.size,):
        raise ValidationError(f"measurement must have length {o2.size}")
    gfull = np.asarray(g, dtype=float)
    if gfull.shape != (family.grid.size,) or not np.any(gfull[scns[0].partition.o1]):
        raise ValidationError("probing datum must be a nonzero node field supported on o1")

    def misfit(scn):
        try:
            return _l2(_trace_o2(scn, gfull) - meas, hn)
        except IllPosedError:
            return float("inf")

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            misfits = list(pool.map(misfit, scns))
    else:
        misfits = [misfit(s) for s in scns]
    if all(np.isinf(misfits)):
        raise IllPosedError("every candidate scenario is ill-posed")
    sizes = [int(s.partition.obstacle.size) for s in scns]
    best = min(range(len(scns)), key=lambda i: (misfits[i], sizes[i], i))
    tol = match_tol * max(1.0, _l2(meas, hn))
    return ObstacleRecovery(best, misfits[best], misfits, sizes, misfits[best] <= tol, tol)


# -- Runge approximation ------------------------------------------------------


def nodal_solutions(scn: Scenario, patch: str = "o1") -> np.ndarray:
    """Annulus values (|annulus|, |patch|) of the solutions excited by each patch node."""
    part = scn.partition
    idx = getattr(part, patch)
    G = np.zeros((part.grid.size, idx.size))
    G[idx, np.arange(idx.size)] = 1.0
    return solve_many(scn, G, np.zeros_like(G))[part.annulus]


@dataclass(frozen=True, eq=False)
class RungeResult:
    g: np.ndarray
    residual: float
    relative_residual: float
    alpha: float
    path: list
    monotone: bool


def runge_approximate(scn: Scenario, phi, alphas, target: float | None = None,
                      monotone_tol: float = 1e-12) -> RungeResult:
    """Tikhonov-regularised exterior control approximating ``phi`` on the annulus.

    For every ``alpha`` in the (decreasing) sweep this minimises
    ``||S g - phi||^2 + alpha ||g||^2`` with S the map from ``o1`` nodal data
    to annulus values; ``h^n`` weights cancel. The minimiser is evaluated through
    the SVD of S. The chosen control is the first one whose relative residual
    drops to ``target``, or the smallest residual if no target is given.
    ``monotone`` records whether residuals never increase along the sweep
    (up to ``monotone_tol`` relative to ``||phi||``).
    """
    alphas = [float(a) for a in alphas]
    if not alphas:
        raise ValidationError("regularisation sweep is empty")
    if any(a <= 0 for a in alphas) or any(b >= a for a, b in zip(alphas, alphas[1:])):
        raise ValidationError("alphas must be positive and strictly decreasing")
    part = scn.partition
    hn = part.grid.cell_measure
    phi = np.asarray(phi, dtype=float)
    if phi.shape == (part.grid.size,):
        phi = phi[part.annulus]
    if phi.shape != (part.annulus.size,):
        raise ValidationError(f"target must be an annulus or node field, got shape {phi.shape}")

    S = nodal_solutions(scn, "o1")
    U, sv, Vt = np.linalg.svd(S, full_matrices=False)
    coef = U.T @ phi
    phi_norm = _l2(phi, hn)
    path, controls = [], []
    for a in alphas:
        g = Vt.T @ (sv / (sv**2 + a) * coef)
        res = _l2(S @ g - phi, hn)
        path.append((a, res))
        controls.append(g)
    res_arr = np.array([r for _, r in path])
    monotone = bool(np.all(np.diff(res_arr) <= monotone_tol * max(phi_norm, 1e-300)))
    rel = res_arr / phi_norm if phi_norm > 0 else res_arr
    if target is not None and np.any(rel <= target):
        k = int(np.flatnonzero(rel <= target)[0])
    else:
        k = int(np.argmin(res_arr))
    return RungeResult(controls[k], float(res_arr[k]), float(rel[k]), alphas[k], path, monotone)


# -- potential recovery -------------------------------------------------------


@dataclass(frozen=True, eq=False)
class PotentialRecovery:
    dq: np.ndarray  # annulus field
    dq_nodes: np.ndarray  # node field, zero off the annulus
    residual: float
    rank: int
    conditioning: dict = field(default_factory=dict)


def product_system(dtn1: DtnMatrix, dtn2: DtnMatrix, scn1: Scenario, scn2: Scenario):
    """Matrix ``M[(i, j), p] = u1_i(x_p) u2_j(x_p) h^n`` and data ``d[(i, j)] = <(L1 - L2) g_i, g_j>``."""
    part = scn1.partition
    if not part.same_as(scn2.partition) or scn1.kind != scn2.kind:
        raise ValidationError("potential recovery needs scenarios with the same obstacle")
    for dtn in (dtn1, dtn2):
        if not (np.array_equal(dtn.o1, part.o1) and np.array_equal(dtn.o2, part.o2)):
            raise ValidationError("DtN matrices are not on the scenario patches")
        if dtn.meta.get("basis", "nodal") != "nodal":
            raise ValidationError("potential recovery needs nodal DtN columns")
    hn = part.grid.cell_measure
    U1 = nodal_solutions(scn1, "o1")
    U2 = nodal_solutions(scn2, "o2")
    M = np.einsum("pi,pj->ijp", U1, U2).reshape(-1, part.annulus.size) * hn
    d = (dtn1.values - dtn2.values).T.reshape(-1) * hn
    return M, d


def recover_potential(dtn1: DtnMatrix, dtn2: DtnMatrix, scn1: Scenario, scn2: Scenario,
                      noise_level: float | None = None, tau: float = 1.1,
                      rank: int | None = None, rcond: float = 1e-13,
                      allow_underdetermined: bool = False) -> PotentialRecovery:
    """Recover ``q1 - q2`` on the annulus by truncated SVD of the product system.

    Solutions ``u1`` are computed under ``scn1`` and ``u2`` under ``scn2``.
    Truncation: explicit ``rank``; else the discrepancy principle when the
    absolute data-noise norm ``noise_level`` is given; else all singular
    values above ``rcond * sigma_max``.

    The system has far more rows than unknowns, so white data noise lives
    almost entirely outside the range of M and the plain residual never drops
    below ``noise_level``. The principle is therefore applied to the
    range-projected data with the noise norm scaled to
    ``noise_level * sqrt(unknowns / rows)``: the smallest rank whose projected
    residual is at most ``tau`` times that.
    """
    M, d = product_system(dtn1, dtn2, scn1, scn2)
    nrow, ncol = M.shape
    if nrow < ncol and not allow_underdetermined:
        raise ValidationError(
            f"product system is underdetermined ({nrow} rows < {ncol} unknowns); "
            "enlarge the patches or pass allow_underdetermined=True"
        )
    U, sv, Vt = np.linalg.svd(M, full_matrices=False)
    coef = U.T @ d
    numerical_rank = int((sv > rcond * sv[0]).sum()) if sv.size and sv[0] > 0 else 0
    if rank is not None:
        k = int(rank)
    elif noise_level is not None:
        tail = np.sqrt(np.maximum(coef @ coef - np.concatenate([[0.0], np.cumsum(coef**2)]), 0.0))
        projected = noise_level * np.sqrt(min(1.0, ncol / nrow))
        ok = np.flatnonzero(tail[: numerical_rank + 1] <= tau * projected)
        k = int(ok[0]) if ok.size else numerical_rank
    else:
        k = numerical_rank
    if not 0 <= k <= sv.size:
        raise ValidationError(f"truncation rank {k} out of range")
    dq = Vt[:k].T @ (coef[:k] / sv[:k])
    part = scn1.partition
    full = np.zeros(part.grid.size)
    full[part.annulus] = dq
    cond = {
        "sigma_max": float(sv[0]) if sv.size else 0.0,
        "sigma_min": float(sv[-1]) if sv.size else 0.0,
        "condition_number": float(sv[0] / sv[-1]) if sv.size and sv[-1] > 0 else float("inf"),
        "numerical_rank": numerical_rank,
        "rows": nrow,
        "unknowns": ncol,
    }
    return PotentialRecovery(dq, full, float(np.linalg.norm(M @ dq - d)), k, cond)
