"""Exterior Dirichlet-to-Neumann map ``g -> (L^s u_g)|_exterior`` and its patch matrix.

Pairings between exterior fields are ``h^n``-weighted Euclidean sums.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ValidationError
from .forward import Scenario, solve_exterior_problem

__all__ = [
    "DtnMatrix",
    "apply_dtn",
    "assemble_dtn_matrix",
    "integral_identity_check",
    "integral_identity_sides",
    "pairing",
    "patch_datum",
]


def pairing(a: np.ndarray, b: np.ndarray, cell_measure: float) -> float:
    return float(np.dot(a, b) * cell_measure)


def apply_dtn(scn: Scenario, g) -> np.ndarray:
    """``(L^s u_g)`` on the exterior nodes (ordered as ``partition.exterior``)."""
    sol = solve_exterior_problem(scn, g, f=0.0)
    return sol.Lsu[scn.partition.exterior]


def patch_datum(scn: Scenario, patch: str, values) -> np.ndarray:
    """Node field carrying ``values`` on patch ``o1``/``o2`` and zero elsewhere.

    ``values`` is either a patch vector or a full node field (then cut to the patch).
    """
    part = scn.partition
    idx = getattr(part, patch)
    v = np.asarray(values, dtype=float)
    out = np.zeros(part.grid.size)
    if v.shape == (idx.size,):
        out[idx] = v
    elif v.shape == (part.grid.size,):
        out[idx] = v[idx]
    else:
        raise ValidationError(f"datum on {patch} has shape {v.shape}")
    return out


@dataclass(frozen=True, eq=False)
class DtnMatrix:
    """Rows follow ``o2``, columns follow ``o1`` (both as node indices)."""

    values: np.ndarray
    o1: np.ndarray
    o2: np.ndarray
    cell_measure: float
    meta: dict = field(default_factory=dict)

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def header(self) -> dict:
        return {
            "format": "fracdtn.dtn/1",
            "shape": list(self.values.shape),
            "dtype": "<f8",
            "order": "row-major",
            "cell_measure": self.cell_measure,
            "o1": self.o1.tolist(),
            "o2": self.o2.tolist(),
            "meta": self.meta,
        }

    def save(self, stem: str | Path) -> tuple[Path, Path]:
        """Write ``<stem>.json`` (header) and ``<stem>.bin`` (payload)."""
        stem = Path(stem)
        head, body = stem.with_suffix(".json"), stem.with_suffix(".bin")
        hdr = self.header()
        hdr["payload"] = body.name
        head.write_text(json.dumps(hdr, indent=2, sort_keys=True) + "\n")
        body.write_bytes(np.ascontiguousarray(self.values, dtype="<f8").tobytes())
        return head, body

    @classmethod
    def load(cls, stem: str | Path) -> "DtnMatrix":
        stem = Path(stem)
        hdr = json.loads(stem.with_suffix(".json").read_text())
        if hdr.get("format") != "fracdtn.dtn/1":
            raise ValidationError(f"unrecognised DtN header format {hdr.get('format')!r}")
        raw = (stem.parent / hdr["payload"]).read_bytes()
        vals = np.frombuffer(raw, dtype="<f8").reshape(hdr["shape"]).astype(float)
        return cls(vals, np.array(hdr["o1"], dtype=int), np.array(hdr["o2"], dtype=int),
                   float(hdr["cell_measure"]), hdr.get("meta", {}))

    def to_csv(self, path: str | Path) -> Path:
        path = Path(path)
        np.savetxt(path, self.values, delimiter=",", fmt="%.17g")
        return path


def assemble_dtn_matrix(scn: Scenario, threads: int = 1) -> DtnMatrix:
    """One exterior solve per node of ``o1``; keep the trace on ``o2``."""
    part = scn.partition
    rows = np.searchsorted(part.exterior, part.o2)
    N = part.grid.size

    def column(node):
        g = np.zeros(N)
        g[node] = 1.0
        return apply_dtn(scn, g)[rows]

    scn.eigenvalue_report  # factor once before any worker touches it
    scn._lu
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            cols = list(pool.map(column, part.o1))
    else:
        cols = [column(node) for node in part.o1]
    vals = np.column_stack(cols) if cols else np.zeros((part.o2.size, 0))
    return DtnMatrix(vals, part.o1.copy(), part.o2.copy(), part.grid.cell_measure,
                     {"kind": scn.kind, "s": scn.operator.s, "label": scn.label, "basis": "nodal"})


def _check_same_obstacle(scn1: Scenario, scn2: Scenario) -> None:
    if not scn1.partition.same_as(scn2.partition) or scn1.kind != scn2.kind:
        raise ValidationError("integral identity needs scenarios with the same obstacle and partition")
    if scn1.operator is not scn2.operator and not np.array_equal(
        scn1.operator.matrix, scn2.operator.matrix
    ):
        raise ValidationError("integral identity needs scenarios sharing the fractional operator")


def integral_identity_sides(scn1: Scenario, scn2: Scenario, g1, g2) -> tuple[float, float]:
    """Both sides of ``<(Lambda_1 - Lambda_2) g1, g2> = int_annulus (q1 - q2) u1 u2``.

    ``g1`` lives on ``o1`` and ``g2`` on ``o2``, so the exterior pairing reduces
    to a sum over ``o2``.
    """
    _check_same_obstacle(scn1, scn2)
    part = scn1.partition
    hn = part.grid.cell_measure
    G1 = patch_datum(scn1, "o1", g1)
    G2 = patch_datum(scn1, "o2", g2)
    rows = np.searchsorted(part.exterior, part.o2)
    diff = apply_dtn(scn1, G1)[rows] - apply_dtn(scn2, G1)[rows]
    lhs = pairing(diff, G2[part.o2], hn)
    u1 = solve_exterior_problem(scn1, G1, f=0.0).u
    u2 = solve_exterior_problem(scn2, G2, f=0.0).u
    ann = part.annulus
    rhs = float(((scn1.q[ann] - scn2.q[ann]) * u1[ann] * u2[ann]).sum() * hn)
    return lhs, rhs


def integral_identity_check(scn1: Scenario, scn2: Scenario, g1, g2, eps: float = 1e-300) -> float:
    """Relative mismatch ``|lhs - rhs| / (|lhs| + |rhs| + eps)`` of the integral identity."""
    lhs, rhs = integral_identity_sides(scn1, scn2, g1, g2)
    return abs(lhs - rhs) / (abs(lhs) + abs(rhs) + eps)
