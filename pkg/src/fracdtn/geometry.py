"""Truncated computational grid and the region partition of its nodes.

Nodes are ordered in C order over the axes (``np.indices`` with ``ij``
indexing), so node ``k`` of a 2D grid sits at row ``k // m``, column ``k % m``.
Region membership uses a strict interior test: a node lying exactly on a
shape boundary belongs to the outer region.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from functools import cached_property
from typing import Mapping, Sequence, Union

import numpy as np

from .errors import GeometryError, ValidationError

__all__ = [
    "Ball",
    "Box",
    "DomainPartition",
    "Grid",
    "Shape",
    "ShapeUnion",
    "build_grid",
    "partition",
    "shape_from_dict",
]


@dataclass(frozen=True)
class Grid:
    n: int
    R: float
    m: int

    @property
    def h(self) -> float:
        return 2.0 * self.R / (self.m - 1)

    @property
    def cell_measure(self) -> float:
        return self.h**self.n

    @property
    def size(self) -> int:
        return self.m**self.n

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.m,) * self.n

    @cached_property
    def axis(self) -> np.ndarray:
        return np.linspace(-self.R, self.R, self.m)

    @cached_property
    def nodes(self) -> np.ndarray:
        """``(m**n, n)`` array of node coordinates."""
        idx = np.indices(self.shape).reshape(self.n, -1).T
        pts = self.axis[idx]
        pts.setflags(write=False)
        return pts

    def index(self, multi_index: Sequence[int]) -> int:
        return int(np.ravel_multi_index(tuple(multi_index), self.shape))

    def boundary_distance(self) -> np.ndarray:
        """Distance of every node to the box boundary, in units of h."""
        idx = np.indices(self.shape).reshape(self.n, -1)
        return np.minimum(idx, self.m - 1 - idx).min(axis=0)


def build_grid(n: int, R: float, m: int) -> Grid:
    if n not in (2, 3):
        raise ValidationError(f"dimension must be 2 or 3, got {n}")
    if int(m) != m or m < 3:
        raise ValidationError(f"need at least 3 nodes per axis, got m={m}")
    if not np.isfinite(R) or R <= 0:
        raise ValidationError(f"box half-width must be positive, got R={R}")
    return Grid(n=int(n), R=float(R), m=int(m))


# -- shapes -----------------------------------------------------------------


@dataclass(frozen=True)
class Ball:
    center: tuple[float, ...]
    radius: float

    def __post_init__(self):
        if not self.radius > 0:
            raise ValidationError(f"ball radius must be positive, got {self.radius}")

    @property
    def dim(self) -> int:
        return len(self.center)

    def contains(self, points: np.ndarray) -> np.ndarray:
        d2 = ((points - np.asarray(self.center)) ** 2).sum(axis=1)
        return d2 < self.radius**2

    def to_dict(self) -> dict:
        return {"type": "ball", "center": list(self.center), "radius": self.radius}


@dataclass(frozen=True)
class Box:
    lo: tuple[float, ...]
    hi: tuple[float, ...]

    def __post_init__(self):
        if len(self.lo) != len(self.hi):
            raise ValidationError("box corners have different dimensions")
        if any(a >= b for a, b in zip(self.lo, self.hi)):
            raise ValidationError(f"box needs lo < hi on every axis, got {self.lo}, {self.hi}")

    @property
    def dim(self) -> int:
        return len(self.lo)

    def contains(self, points: np.ndarray) -> np.ndarray:
        return np.all((points > np.asarray(self.lo)) & (points < np.asarray(self.hi)), axis=1)

    def corners(self) -> np.ndarray:
        return np.array(list(itertools.product(*zip(self.lo, self.hi))))

    def to_dict(self) -> dict:
        return {"type": "box", "lo": list(self.lo), "hi": list(self.hi)}


@dataclass(frozen=True)
class ShapeUnion:
    parts: tuple[Union[Ball, Box], ...]

    def __post_init__(self):
        if not self.parts:
            raise ValidationError("union needs at least one part")
        if len({p.dim for p in self.parts}) != 1:
            raise ValidationError("union parts have different dimensions")

    @property
    def dim(self) -> int:
        return self.parts[0].dim

    def contains(self, points: np.ndarray) -> np.ndarray:
        mask = np.zeros(len(points), dtype=bool)
        for p in self.parts:
            mask |= p.contains(points)
        return mask

    def to_dict(self) -> dict:
        return {"type": "union", "parts": [p.to_dict() for p in self.parts]}


Shape = Union[Ball, Box, ShapeUnion]


def shape_from_dict(spec: Mapping) -> Shape:
    kind = spec.get("type")
    if kind == "ball":
        return Ball(tuple(float(c) for c in spec["center"]), float(spec["radius"]))
    if kind == "box":
        return Box(tuple(float(c) for c in spec["lo"]), tuple(float(c) for c in spec["hi"]))
    if kind == "union":
        return ShapeUnion(tuple(shape_from_dict(p) for p in spec["parts"]))
    raise ValidationError(f"unknown shape type {kind!r}")


def _parts(shape: Shape) -> tuple:
    return shape.parts if isinstance(shape, ShapeUnion) else (shape,)


def _point_box_distance(x: np.ndarray, box: Box) -> float:
    lo, hi = np.asarray(box.lo), np.asarray(box.hi)
    return float(np.linalg.norm(np.maximum(0.0, np.maximum(lo - x, x - hi))))


def _simple_within(a, b) -> bool:
    """Closure of ``a`` lies in the open set ``b`` (both simple shapes)."""
    if isinstance(b, Ball):
        c = np.asarray(b.center)
        if isinstance(a, Ball):
            return np.linalg.norm(np.asarray(a.center) - c) + a.radius < b.radius
        return bool(np.all(np.linalg.norm(a.corners() - c, axis=1) < b.radius))
    lo, hi = np.asarray(b.lo), np.asarray(b.hi)
    if isinstance(a, Ball):
        c = np.asarray(a.center)
        return bool(np.all(c - a.radius > lo) and np.all(c + a.radius < hi))
    return bool(np.all(np.asarray(a.lo) > lo) and np.all(np.asarray(a.hi) < hi))


def _simple_disjoint(a, b) -> bool:
    """Closures of two simple shapes do not meet."""
    if isinstance(a, Box) and isinstance(b, Ball):
        a, b = b, a
    if isinstance(a, Ball) and isinstance(b, Ball):
        d = np.linalg.norm(np.asarray(a.center) - np.asarray(b.center))
        return d > a.radius + b.radius
    if isinstance(a, Ball):
        return _point_box_distance(np.asarray(a.center), b) > a.radius
    return any(ah < bl or bh < al for al, ah, bl, bh in zip(a.lo, a.hi, b.lo, b.hi))


def compactly_within(inner: Shape, outer: Shape) -> bool:
    """Conservative test for ``closure(inner) ⊂ outer``.

    A union part is accepted when it sits inside a single part of ``outer``;
    parts straddling two overlapping outer parts are rejected.
    """
    return all(any(_simple_within(a, b) for b in _parts(outer)) for a in _parts(inner))


def closures_disjoint(a: Shape, b: Shape) -> bool:
    return all(_simple_disjoint(x, y) for x in _parts(a) for y in _parts(b))


# -- partition --------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class DomainPartition:
    """Index sets of the grid regions; all arrays are sorted node indices."""

    grid: Grid
    omega: np.ndarray
    obstacle: np.ndarray
    annulus: np.ndarray
    exterior: np.ndarray
    o1: np.ndarray
    o2: np.ndarray
    shapes: dict = field(default_factory=dict, repr=False)

    @property
    def has_obstacle(self) -> bool:
        return self.obstacle.size > 0

    def mask(self, name: str) -> np.ndarray:
        out = np.zeros(self.grid.size, dtype=bool)
        out[getattr(self, name)] = True
        return out

    def same_as(self, other: "DomainPartition") -> bool:
        if self.grid != other.grid:
            return False
        names = ("omega", "obstacle", "annulus", "exterior", "o1", "o2")
        return all(np.array_equal(getattr(self, k), getattr(other, k)) for k in names)

    def check(self) -> None:
        """Raise GeometryError if an index-level invariant fails."""
        N = self.grid.size
        om, d, ann, ext = (self.mask(k) for k in ("omega", "obstacle", "annulus", "exterior"))
        if self.omega.size == 0:
            raise GeometryError("Omega contains no grid nodes")
        if np.any(d & ~om):
            raise GeometryError("obstacle nodes outside Omega")
        if d.sum() >= om.sum():
            raise GeometryError("obstacle must be a strict subset of Omega (annulus is empty)")
        if np.any(ann & d) or np.any(om & ext):
            raise GeometryError("regions overlap")
        if (ann.sum() + d.sum() + ext.sum()) != N or not np.all(ann | d | ext):
            raise GeometryError("annulus, obstacle and exterior do not cover the grid")
        for name in ("o1", "o2"):
            idx = getattr(self, name)
            if idx.size == 0:
                raise GeometryError(f"patch {name} contains no grid nodes")
            if np.any(om[idx]):
                raise GeometryError(f"patch {name} intersects Omega")


def _as_shape(spec) -> Shape | None:
    if spec is None or isinstance(spec, (Ball, Box, ShapeUnion)):
        return spec
    return shape_from_dict(spec)


def partition(grid: Grid, omega, obstacle=None, o1=None, o2=None) -> DomainPartition:
    """Split the grid nodes into Omega, obstacle D, annulus, exterior and the patches.

    Shapes may be given as shape objects or as their dict form. ``obstacle=None``
    means no obstacle. A patch of ``None`` stands for the whole exterior.
    """
    omega, obstacle, o1, o2 = (_as_shape(s) for s in (omega, obstacle, o1, o2))
    if omega is None:
        raise ValidationError("omega shape is required")
    for name, s in (("omega", omega), ("obstacle", obstacle), ("o1", o1), ("o2", o2)):
        if s is not None and s.dim != grid.n:
            raise ValidationError(f"{name} has dimension {s.dim}, grid has {grid.n}")
    if obstacle is not None and not compactly_within(obstacle, omega):
        raise GeometryError("obstacle is not compactly contained in Omega")
    for name, s in (("o1", o1), ("o2", o2)):
        if s is not None and not closures_disjoint(s, omega):
            raise GeometryError(f"patch {name} touches or overlaps the closure of Omega")

    pts = grid.nodes
    in_omega = omega.contains(pts)
    in_d = obstacle.contains(pts) & in_omega if obstacle is not None else np.zeros_like(in_omega)
    ext = np.flatnonzero(~in_omega)

    def patch(s):
        if s is None:
            return ext.copy()
        return np.flatnonzero(s.contains(pts) & ~in_omega)

    part = DomainPartition(
        grid=grid,
        omega=np.flatnonzero(in_omega),
        obstacle=np.flatnonzero(in_d),
        annulus=np.flatnonzero(in_omega & ~in_d),
        exterior=ext,
        o1=patch(o1),
        o2=patch(o2),
        shapes={"omega": omega, "obstacle": obstacle, "o1": o1, "o2": o2},
    )
    for arr in (part.omega, part.obstacle, part.annulus, part.exterior, part.o1, part.o2):
        arr.setflags(write=False)
    part.check()
    return part
