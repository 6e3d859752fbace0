"""Local elliptic operator, its fractional power and the nonlocal kernel.

The local operator ``-div(A grad)`` is assembled from a cell-wise energy on
the grid extended by one ring of ghost nodes held at zero.  In every cell the
diagonal coefficients act on the edge differences (averaged over the parallel
edges of the cell) and the off-diagonal coefficients act on the cell-averaged
gradient.  For ``A = I`` this reduces to the standard (2n+1)-point Laplacian
and the cell energy is bounded below by ``gamma`` times the Laplacian energy,
so the matrix is symmetric positive definite.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
from scipy.special import gamma as gamma_fn

from .errors import EllipticityError, QuadratureError, SpectralError, ValidationError
from .geometry import DomainPartition, Grid

__all__ = [
    "EllipticTensorField",
    "FractionalOperator",
    "KernelMatrix",
    "LocalOperator",
    "SpectralFactorization",
    "assemble_local_operator",
    "bilinear_form",
    "extract_kernel",
    "fractional_laplacian_constant",
    "heat_quadrature_fractional_apply",
    "heat_semigroup_apply",
    "hs_norm",
    "kernel_pairs",
    "kernel_power_law",
    "spectral_factorization",
    "spectral_fractional_power",
]

NEGATIVE_EIG_TOL = 1e-10


# -- tensor fields -----------------------------------------------------------


@dataclass(frozen=True, eq=False)
class EllipticTensorField:
    """Symmetric matrix field ``A(x)`` with ellipticity constant ``gamma``.

    ``func`` maps a ``(k, n)`` array of points to a ``(k, n, n)`` array.
    """

    func: Callable[[np.ndarray], np.ndarray]
    gamma: float
    n: int
    name: str = "custom"
    params: dict = field(default_factory=dict)

    def __call__(self, points: np.ndarray) -> np.ndarray:
        points = np.atleast_2d(np.asarray(points, dtype=float))
        vals = np.asarray(self.func(points), dtype=float)
        if vals.shape != (len(points), self.n, self.n):
            raise ValidationError(
                f"tensor field returned shape {vals.shape}, expected {(len(points), self.n, self.n)}"
            )
        return vals

    def check(self, points: np.ndarray, sym_tol: float = 1e-12, eig_tol: float = 1e-12) -> None:
        """Raise EllipticityError unless gamma <= eig(A(x)) <= 1/gamma at every point.

        Both bounds get a relative slack of ``eig_tol`` to absorb round-off.
        """
        vals = self(points)
        scale = max(1.0, float(np.abs(vals).max()))
        asym = np.abs(vals - vals.transpose(0, 2, 1)).max()
        if asym > sym_tol * scale:
            raise EllipticityError(f"tensor field is not symmetric (max asymmetry {asym:.3g})")
        eig = np.linalg.eigvalsh(vals)
        lo, hi = float(eig.min()), float(eig.max())
        if lo < self.gamma * (1 - eig_tol) or hi > (1 + eig_tol) / self.gamma:
            raise EllipticityError(
                f"eigenvalues of A lie in [{lo:.6g}, {hi:.6g}], outside "
                f"[{self.gamma:.6g}, {1.0 / self.gamma:.6g}]"
            )

    @classmethod
    def constant(cls, matrix, gamma: float | None = None) -> "EllipticTensorField":
        A = np.array(matrix, dtype=float)
        if A.ndim != 2 or A.shape[0] != A.shape[1]:
            raise ValidationError(f"constant tensor must be square, got shape {A.shape}")
        if not np.array_equal(A, A.T):
            raise EllipticityError("constant tensor is not symmetric")
        if gamma is None:
            gamma = _infer_gamma(np.linalg.eigvalsh(A))
        _check_gamma(gamma)
        A.setflags(write=False)
        return cls(
            func=lambda pts: np.broadcast_to(A, (len(pts),) + A.shape).copy(),
            gamma=float(gamma),
            n=A.shape[0],
            name="constant",
            params={"matrix": A.tolist()},
        )

    @classmethod
    def named(cls, name: str, n: int, params: Mapping | None = None,
              gamma: float | None = None) -> "EllipticTensorField":
        try:
            factory = NAMED_FIELDS[name]
        except KeyError:
            raise ValidationError(f"unknown tensor field {name!r}; known: {sorted(NAMED_FIELDS)}")
        params = dict(params or {})
        func, bounds = factory(n, **params)
        if gamma is None:
            gamma = _infer_gamma(np.array(bounds))
        _check_gamma(gamma)
        return cls(func=func, gamma=float(gamma), n=n, name=name, params=params)


def _check_gamma(gamma: float) -> None:
    if not 0.0 < gamma <= 1.0:
        raise ValidationError(f"ellipticity constant must lie in (0, 1], got {gamma}")


def _infer_gamma(eigs: np.ndarray) -> float:
    lo, hi = float(np.min(eigs)), float(np.max(eigs))
    if lo <= 0:
        raise EllipticityError(f"tensor has non-positive eigenvalue {lo:.6g}")
    return min(1.0, lo, 1.0 / hi)


def _rotated_field(n, a=1.0, b=3.0, angle=0.0, twist=0.0):
    """diag(a, b, b...) rotated in the (x0, x1) plane by ``angle + twist * x0``."""
    diag = np.array([a] + [b] * (n - 1), dtype=float)

    def func(pts):
        theta = angle + twist * pts[:, 0]
        c, s_ = np.cos(theta), np.sin(theta)
        Q = np.broadcast_to(np.eye(n), (len(pts), n, n)).copy()
        Q[:, 0, 0], Q[:, 0, 1], Q[:, 1, 0], Q[:, 1, 1] = c, -s_, s_, c
        return np.einsum("kij,j,klj->kil", Q, diag, Q)

    return func, (min(a, b), max(a, b))


def _bump_scalar_field(n, base=1.0, amplitude=0.5, width=0.5, center=None):
    """(base + amplitude * exp(-|x-c|^2 / width^2)) * I."""
    c = np.zeros(n) if center is None else np.asarray(center, dtype=float)

    def func(pts):
        w = base + amplitude * np.exp(-((pts - c) ** 2).sum(axis=1) / width**2)
        return w[:, None, None] * np.eye(n)

    return func, (min(base, base + amplitude), max(base, base + amplitude))


NAMED_FIELDS = {"rotated": _rotated_field, "bump_scalar": _bump_scalar_field}


# -- local operator ----------------------------------------------------------


@dataclass(frozen=True, eq=False)
class LocalOperator:
    """Dense symmetric matrix of ``-div(A grad)`` on all grid nodes (zero outside the box)."""

    matrix: np.ndarray
    grid: Grid
    tensor: EllipticTensorField | None = None

    @property
    def h(self) -> float:
        return self.grid.h

    @property
    def size(self) -> int:
        return self.matrix.shape[0]

    def apply(self, v: np.ndarray) -> np.ndarray:
        return self.matrix @ v


def _cell_centers(grid: Grid) -> np.ndarray:
    cells = np.indices((grid.m + 1,) * grid.n).reshape(grid.n, -1).T
    return -grid.R - grid.h / 2 + grid.h * cells


def assemble_local_operator(grid: Grid, A: EllipticTensorField) -> LocalOperator:
    """Assemble the symmetric finite-difference matrix of ``-div(A grad)``."""
    if A.n != grid.n:
        raise ValidationError(f"tensor field is {A.n}D, grid is {grid.n}D")
    n, m, h = grid.n, grid.m, grid.h
    centers = _cell_centers(grid)
    A.check(grid.nodes)
    A.check(centers)
    coef = A(centers)

    ncell_axis = m + 1
    cells = np.indices((ncell_axis,) * n).reshape(n, -1).T
    ncells = len(cells)
    rows = np.arange(ncells)

    def column(ext_idx):
        # extended index e in [0, m+1]; real node index e-1 when 1 <= e <= m
        real = np.all((ext_idx >= 1) & (ext_idx <= m), axis=1)
        col = np.full(len(ext_idx), -1)
        col[real] = np.ravel_multi_index(tuple((ext_idx[real] - 1).T), (m,) * n)
        return col

    def edge_matrix(k, offset):
        lo = cells + offset
        hi = lo.copy()
        hi[:, k] += 1
        c_lo, c_hi = column(lo), column(hi)
        r = np.concatenate([rows[c_hi >= 0], rows[c_lo >= 0]])
        c = np.concatenate([c_hi[c_hi >= 0], c_lo[c_lo >= 0]])
        v = np.concatenate([np.ones((c_hi >= 0).sum()), -np.ones((c_lo >= 0).sum())])
        return sp.csr_matrix((v, (r, c)), shape=(ncells, grid.size))

    w = 1.0 / 2 ** (n - 1)
    L = sp.csr_matrix((grid.size, grid.size))
    grads = []
    for k in range(n):
        others = [j for j in range(n) if j != k]
        G = sp.csr_matrix((ncells, grid.size))
        for bits in itertools.product((0, 1), repeat=n - 1):
            offset = np.zeros(n, dtype=int)
            offset[others] = bits
            E = edge_matrix(k, offset)
            L = L + w * (E.T @ sp.diags(coef[:, k, k]) @ E)
            G = G + w * E
        grads.append(G)
    for k in range(n):
        for j in range(n):
            if j != k and np.any(coef[:, k, j] != 0):
                L = L + grads[k].T @ sp.diags(coef[:, k, j]) @ grads[j]
    dense = L.toarray() / h**2
    dense = 0.5 * (dense + dense.T)
    dense.setflags(write=False)
    return LocalOperator(matrix=dense, grid=grid, tensor=A)


# -- spectral calculus -------------------------------------------------------


@dataclass(frozen=True, eq=False)
class SpectralFactorization:
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray

    def function(self, fn) -> np.ndarray:
        """Dense symmetric matrix ``V diag(fn(lambda)) V^T``."""
        V = self.eigenvectors
        M = (V * fn(self.eigenvalues)) @ V.T
        return 0.5 * (M + M.T)


def spectral_factorization(L: LocalOperator | np.ndarray) -> SpectralFactorization:
    M = L.matrix if isinstance(L, LocalOperator) else np.asarray(L, dtype=float)
    if not np.array_equal(M, M.T):
        raise ValidationError("operator matrix is not symmetric")
    try:
        lam, V = sla.eigh(M)
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise SpectralError(f"eigendecomposition failed: {exc}") from exc
    top = float(np.abs(lam).max()) if lam.size else 0.0
    if lam.size and lam[0] < -NEGATIVE_EIG_TOL * top:
        raise SpectralError(f"operator has negative eigenvalue {lam[0]:.6g} (max {top:.6g})")
    lam = np.clip(lam, 0.0, None)
    lam.setflags(write=False)
    V.setflags(write=False)
    return SpectralFactorization(lam, V)


@dataclass(frozen=True, eq=False)
class FractionalOperator:
    s: float
    matrix: np.ndarray
    factorization: SpectralFactorization
    local: LocalOperator | None = None

    @property
    def grid(self) -> Grid | None:
        return self.local.grid if self.local is not None else None

    @property
    def eigenvalues(self) -> np.ndarray:
        return self.factorization.eigenvalues**self.s

    def apply(self, v: np.ndarray) -> np.ndarray:
        return self.matrix @ v


def spectral_fractional_power(L: LocalOperator | np.ndarray, s: float,
                              factorization: SpectralFactorization | None = None) -> FractionalOperator:
    """``L^s`` by full symmetric eigendecomposition; the factorization is kept."""
    if not 0.0 < s < 1.0:
        raise ValidationError(f"exponent s must lie in (0, 1), got {s}")
    fact = factorization if factorization is not None else spectral_factorization(L)
    Ls = fact.function(lambda lam: lam**s)
    Ls.setflags(write=False)
    local = L if isinstance(L, LocalOperator) else None
    return FractionalOperator(s=float(s), matrix=Ls, factorization=fact, local=local)


def heat_semigroup_apply(L: LocalOperator | np.ndarray, t: float, v: np.ndarray,
                         factorization: SpectralFactorization | None = None) -> np.ndarray:
    """``exp(-t L) v`` through the eigendecomposition."""
    if t < 0:
        raise ValidationError(f"heat semigroup needs t >= 0, got {t}")
    v = np.asarray(v, dtype=float)
    if t == 0:
        return v.copy()
    fact = factorization if factorization is not None else spectral_factorization(L)
    V = fact.eigenvectors
    decay = np.exp(-t * fact.eigenvalues)
    coeffs = V.T @ v
    return V @ (decay[:, None] * coeffs if coeffs.ndim == 2 else decay * coeffs)


def _trapezoid_fractional(L, s, v, nodes, fact):
    lam = fact.eigenvalues
    lam_max = float(lam.max())
    positive = lam[lam > 1e-14 * lam_max]
    if positive.size != lam.size:
        raise QuadratureError("heat quadrature needs a positive definite operator")
    lam_min = float(positive.min())
    tau = np.linspace(np.log(1e-6 / lam_max), np.log(40.0 / lam_min), nodes)
    step = tau[1] - tau[0]
    t = np.exp(tau)

    acc = np.zeros_like(v)
    for tk in t:
        acc += (step * tk**-s) * (heat_semigroup_apply(L, tk, v, fact) - v)
    # Outside the window the integrand is a sum of exponentials in tau, so the
    # trapezoid sum over the rest of the infinite tau grid is geometric.
    # Right tail: -v exp(-s tau), since exp(-t L) < e^-40 there.
    acc -= v * step * t[-1] ** -s / np.expm1(s * step)
    # Left tail: exp(-t L) - I = -t L + t^2 L^2 / 2 + O((t lambda_max)^3).
    Lmat = L.matrix if isinstance(L, LocalOperator) else np.asarray(L)
    Lv = Lmat @ v
    acc -= Lv * step * t[0] ** (1 - s) / np.expm1((1 - s) * step)
    acc += 0.5 * (Lmat @ Lv) * step * t[0] ** (2 - s) / np.expm1((2 - s) * step)
    return acc / gamma_fn(-s)


def heat_quadrature_fractional_apply(L: LocalOperator | np.ndarray, s: float, v: np.ndarray,
                                     nodes: int = 400,
                                     factorization: SpectralFactorization | None = None,
                                     check: bool = True) -> np.ndarray:
    """``L^s v`` from the heat-semigroup integral, trapezoid rule in ``log t``.

    The window is ``t in [1e-6 / lambda_max, 40 / lambda_min]``; both tails are
    added in closed form. With ``check`` the result is compared with the
    half-resolution rule and a QuadratureError is raised if refinement moved
    it by more than half its norm.
    """
    if not 0.0 < s < 1.0:
        raise ValidationError(f"exponent s must lie in (0, 1), got {s}")
    if nodes < 16:
        raise ValidationError(f"heat quadrature needs at least 16 nodes, got {nodes}")
    v = np.asarray(v, dtype=float)
    fact = factorization if factorization is not None else spectral_factorization(L)
    out = _trapezoid_fractional(L, s, v, nodes, fact)
    if not np.all(np.isfinite(out)):
        raise QuadratureError("heat quadrature produced non-finite values")
    if check:
        coarse = _trapezoid_fractional(L, s, v, max(8, nodes // 2), fact)
        if np.linalg.norm(out - coarse) > 0.5 * np.linalg.norm(out):
            raise QuadratureError("heat quadrature did not settle under refinement")
    return out


# -- kernel ------------------------------------------------------------------


def fractional_laplacian_constant(n: int, s: float) -> float:
    """Normalising constant of ``(-Delta)^s`` as a principal-value integral."""
    return float(gamma_fn(n / 2 + s) * 4**s / (abs(gamma_fn(-s)) * np.pi ** (n / 2)))


@dataclass(frozen=True, eq=False)
class KernelMatrix:
    """Operator kernel: ``(L^s v)_i = sum_j K_ij (v_i - v_j) h^n + (row-sum term) v_i``.

    The diagonal is set to zero. The symmetric double-integral form of the
    bilinear pairing carries ``K / 2``.
    """

    values: np.ndarray
    grid: Grid
    s: float

    def distances(self) -> np.ndarray:
        pts = self.grid.nodes
        return np.sqrt(((pts[:, None, :] - pts[None, :, :]) ** 2).sum(axis=-1))


def extract_kernel(Ls: FractionalOperator, grid: Grid) -> KernelMatrix:
    if Ls.matrix.shape[0] != grid.size:
        raise ValidationError("fractional operator does not match the grid")
    K = -Ls.matrix / grid.cell_measure
    np.fill_diagonal(K, 0.0)
    K.setflags(write=False)
    return KernelMatrix(values=K, grid=grid, s=Ls.s)


def kernel_pairs(kernel: KernelMatrix, min_separation: float = 4.0,
                 boundary_margin: float | None = None,
                 anchors: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Distances and kernel values of the well-separated interior pairs.

    Pairs need ``|x - z| > min_separation * h``. A node qualifies when its
    distance to the box boundary exceeds ``boundary_margin * h`` and also
    exceeds the pair distance (default ``boundary_margin = min_separation``).
    Only pairs whose first node is in ``anchors`` are used when given;
    otherwise every unordered pair is counted once.
    """
    grid = kernel.grid
    h = grid.h
    margin = min_separation if boundary_margin is None else boundary_margin
    bd = grid.boundary_distance() * h
    pts = grid.nodes
    first = np.flatnonzero(bd > margin * h) if anchors is None else np.asarray(anchors)
    K = kernel.values
    r_all, k_all = [], []
    for i in first:
        r = np.sqrt(((pts - pts[i]) ** 2).sum(axis=1))
        ok = (r > min_separation * h) & (bd > margin * h) & (bd >= r) & (bd[i] >= r)
        if anchors is None:
            ok[: i + 1] = False
        r_all.append(r[ok])
        k_all.append(K[i, ok])
    r = np.concatenate(r_all) if r_all else np.empty(0)
    k = np.concatenate(k_all) if k_all else np.empty(0)
    return r, k


def kernel_power_law(kernel: KernelMatrix, min_separation: float = 4.0,
                     boundary_margin: float | None = None,
                     anchors: np.ndarray | None = None) -> dict:
    """Fit ``K(x, z) ~ c |x - z|^p`` over the pairs of :func:`kernel_pairs`.

    Returns slope, median prefactor ``K r^(n+2s)``, its min (``c1``) and max
    (``c2``), and the pair count.
    """
    grid, s = kernel.grid, kernel.s
    r, k = kernel_pairs(kernel, min_separation, boundary_margin, anchors)
    if r.size < 2:
        raise ValidationError("no separated pairs available for the kernel fit")
    p = grid.n + 2 * s
    scaled = k * r**p
    positive = k > 0
    out = {
        "n_pairs": int(r.size),
        "all_positive": bool(positive.all()),
        "c1": float(scaled.min()),
        "c2": float(scaled.max()),
        "prefactor": float(np.median(scaled)),
        "expected_slope": -p,
        "reference_constant": fractional_laplacian_constant(grid.n, s),
    }
    if positive.sum() >= 2:
        slope, intercept = np.polyfit(np.log(r[positive]), np.log(k[positive]), 1)
        out["slope"] = float(slope)
        out["fit_prefactor"] = float(np.exp(intercept))
    else:
        out["slope"] = float("nan")
        out["fit_prefactor"] = float("nan")
    return out


# -- forms and norms ---------------------------------------------------------


def _annulus_potential(q, part: DomainPartition) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    if q.ndim == 0:
        return np.full(part.annulus.size, float(q))
    if q.shape == (part.grid.size,):
        return q[part.annulus]
    if q.shape == (part.annulus.size,):
        return q
    raise ValidationError(f"potential has shape {q.shape}; expected a node field or annulus field")


def bilinear_form(Ls: FractionalOperator, q, part: DomainPartition,
                  v: np.ndarray, w: np.ndarray) -> float:
    """Discrete ``B_q(v, w) = int (L^s v) w + int_{annulus} q v w``."""
    N = Ls.matrix.shape[0]
    v, w = np.asarray(v, dtype=float), np.asarray(w, dtype=float)
    if v.shape != (N,) or w.shape != (N,):
        raise ValidationError(f"vectors must have length {N}")
    qa = _annulus_potential(q, part)
    if not np.all(np.isfinite(qa)):
        raise ValidationError("potential is not finite on the annulus")
    hn = part.grid.cell_measure
    ann = part.annulus
    return float((v @ (Ls.matrix @ w)) * hn + (qa * v[ann] * w[ann]).sum() * hn)


def hs_norm(Ls: FractionalOperator, v: np.ndarray, cell_measure: float | None = None) -> float:
    """``sqrt(||v||^2 + v^T L^s v)`` with ``h^n``-weighted sums."""
    v = np.asarray(v, dtype=float)
    if cell_measure is None:
        if Ls.grid is None:
            raise ValidationError("cell measure unknown: pass cell_measure or a grid-backed operator")
        cell_measure = Ls.grid.cell_measure
    quad = float(v @ (Ls.matrix @ v))
    scale = float(Ls.eigenvalues.max()) * float(v @ v) if v.size else 0.0
    if quad < -1e-12 * scale:
        raise SpectralError(f"negative fractional quadratic form {quad:.3g}")
    return float(np.sqrt((float(v @ v) + max(quad, 0.0)) * cell_measure))
