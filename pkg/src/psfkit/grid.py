"""Regular 2D tensor grid with bilinear Lagrange elements.

Nodes are numbered row-major with x varying fastest: ``i = iy * nx + ix``.
Cells are numbered the same way on the ``(nx - 1) x (ny - 1)`` cell lattice.
"""
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

SNAP_TOL = 1e-12


@dataclass(frozen=True)
class Grid:
    nx: int
    ny: int
    x_min: float = 0.0
    x_max: float = 1.0
    y_min: float = 0.0
    y_max: float = 1.0

    def __post_init__(self):
        if self.nx < 2 or self.ny < 2:
            raise ValueError(f"grid needs at least 2 nodes per axis, got {self.nx}x{self.ny}")
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise ValueError("grid bounds must satisfy x_min < x_max and y_min < y_max")

    @property
    def hx(self) -> float:
        return (self.x_max - self.x_min) / (self.nx - 1)

    @property
    def hy(self) -> float:
        return (self.y_max - self.y_min) / (self.ny - 1)

    @property
    def n_nodes(self) -> int:
        return self.nx * self.ny

    @property
    def area(self) -> float:
        return (self.x_max - self.x_min) * (self.y_max - self.y_min)

    @property
    def shape(self):
        """(ny, nx); reshaping a nodal vector with this gives a [iy, ix] array."""
        return (self.ny, self.nx)

    @cached_property
    def coords(self) -> np.ndarray:
        """(N, 2) array of node coordinates."""
        xs = np.linspace(self.x_min, self.x_max, self.nx)
        ys = np.linspace(self.y_min, self.y_max, self.ny)
        X, Y = np.meshgrid(xs, ys)
        return np.column_stack([X.ravel(), Y.ravel()])

    def node(self, i: int) -> np.ndarray:
        if not 0 <= i < self.n_nodes:
            raise IndexError(f"node index {i} out of range")
        return self.coords[i].copy()

    def node_index(self, ix: int, iy: int) -> int:
        return iy * self.nx + ix

    def contains(self, points) -> np.ndarray:
        """Boolean mask of points inside the closed domain (with snap tolerance)."""
        p = np.atleast_2d(np.asarray(points, dtype=float))
        tol = SNAP_TOL * max(self.hx, self.hy)
        return ((p[:, 0] >= self.x_min - tol) & (p[:, 0] <= self.x_max + tol)
                & (p[:, 1] >= self.y_min - tol) & (p[:, 1] <= self.y_max + tol))

    def locate(self, points):
        """Vectorized cell location.

        Returns ``(cx, cy, s, t, inside)`` where ``(cx, cy)`` is the lower-left
        node of the containing cell and ``(s, t)`` are local coordinates in
        [0, 1]^2. Entries where ``inside`` is False are meaningless.
        """
        p = np.atleast_2d(np.asarray(points, dtype=float))
        inside = self.contains(p)
        u = (np.clip(p[:, 0], self.x_min, self.x_max) - self.x_min) / self.hx
        v = (np.clip(p[:, 1], self.y_min, self.y_max) - self.y_min) / self.hy
        cx = np.minimum(np.floor(u).astype(np.int64), self.nx - 2)
        cy = np.minimum(np.floor(v).astype(np.int64), self.ny - 2)
        s = np.clip(u - cx, 0.0, 1.0)
        t = np.clip(v - cy, 0.0, 1.0)
        return cx, cy, s, t, inside

    def interpolate(self, values, points, outside=np.nan) -> np.ndarray:
        """Bilinear interpolation of nodal ``values`` at ``points``.

        ``values`` may be (N,) or (N, m) for several fields at once. Points
        outside the domain get ``outside``.
        """
        vals = np.asarray(values, dtype=float)
        cx, cy, s, t, inside = self.locate(points)
        i00 = cy * self.nx + cx
        i10 = i00 + 1
        i01 = i00 + self.nx
        i11 = i01 + 1
        w00 = (1 - s) * (1 - t)
        w10 = s * (1 - t)
        w01 = (1 - s) * t
        w11 = s * t
        if vals.ndim == 2:
            w00, w10, w01, w11 = (w[:, None] for w in (w00, w10, w01, w11))
        out = w00 * vals[i00] + w10 * vals[i10] + w01 * vals[i01] + w11 * vals[i11]
        if not inside.all():
            out = np.array(out, copy=True)
            out[~inside] = outside
        return out


def locate_cell(grid: Grid, p):
    """Cell index and local coordinates of point ``p``, or None if outside."""
    cx, cy, s, t, inside = grid.locate(np.asarray(p, dtype=float)[None, :])
    if not inside[0]:
        return None
    return int(cy[0] * (grid.nx - 1) + cx[0]), (float(s[0]), float(t[0]))


def bilinear_weights(grid: Grid, p):
    """Node indices and weights of the four basis functions active at ``p``."""
    hit = locate_cell(grid, p)
    if hit is None:
        raise ValueError(f"point {tuple(p)} is outside the domain")
    cell, (s, t) = hit
    cx, cy = cell % (grid.nx - 1), cell // (grid.nx - 1)
    i00 = grid.node_index(cx, cy)
    idx = np.array([i00, i00 + 1, i00 + grid.nx, i00 + grid.nx + 1])
    w = np.array([(1 - s) * (1 - t), s * (1 - t), (1 - s) * t, s * t])
    return idx, w


@dataclass(frozen=True)
class GridFunction:
    grid: Grid
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        if vals.shape != (self.grid.n_nodes,):
            raise ValueError(f"expected {self.grid.n_nodes} nodal values, got shape {vals.shape}")
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)

    @classmethod
    def from_function(cls, grid, func):
        """Nodal interpolant of ``func(x, y)``."""
        xy = grid.coords
        return cls(grid, func(xy[:, 0], xy[:, 1]))

    def __call__(self, p):
        return eval_at(self, p)

    def at(self, points, outside=np.nan):
        return self.grid.interpolate(self.values, points, outside=outside)


def eval_at(f: GridFunction, p) -> float:
    """Evaluate a grid function at a single point inside the domain."""
    idx, w = bilinear_weights(f.grid, p)
    return float(w @ f.values[idx])


@dataclass(frozen=True)
class LumpedMass:
    grid: Grid
    weights: np.ndarray = field(repr=False)

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        if w.shape != (self.grid.n_nodes,) or np.any(w <= 0):
            raise ValueError("lumped mass weights must be positive, one per node")
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)

    def apply(self, u):
        """Primal coefficients -> dual vector."""
        return self.weights * u

    def riesz(self, rho):
        """Dual vector -> Riesz representative coefficients."""
        return rho / self.weights


def lumped_mass(grid: Grid) -> LumpedMass:
    wx = np.full(grid.nx, grid.hx)
    wx[[0, -1]] *= 0.5
    wy = np.full(grid.ny, grid.hy)
    wy[[0, -1]] *= 0.5
    return LumpedMass(grid, np.outer(wy, wx).ravel())
