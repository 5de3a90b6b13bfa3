"""Structured Q1 finite elements for the parabolic flow equation.

Nodes are numbered lexicographically with x fastest, cells likewise.  Cell
``(i, j)`` owns the local nodes ``[a, a + 1, a + nx + 1, a + nx + 2]`` with
``a = j * (nx + 1) + i``, i.e. the reference corners (0,0), (1,0), (0,1),
(1,1).  All matrices are ``scipy.sparse`` CSR.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Optional, Sequence, Union

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import NumericalFailure

# 2-point Gauss rule on [0, 1]
_GAUSS_X = np.array([0.5 - 0.5 / np.sqrt(3.0), 0.5 + 0.5 / np.sqrt(3.0)])
_GAUSS_W = np.array([0.5, 0.5])


def _shape(xi, eta):
    return np.array([(1 - xi) * (1 - eta), xi * (1 - eta), (1 - xi) * eta, xi * eta])


def _reference_matrices():
    kx = np.zeros((4, 4))
    ky = np.zeros((4, 4))
    m = np.zeros((4, 4))
    for xi, wx in zip(_GAUSS_X, _GAUSS_W):
        for eta, wy in zip(_GAUSS_X, _GAUSS_W):
            w = wx * wy
            n = _shape(xi, eta)
            dxi = np.array([-(1 - eta), 1 - eta, -eta, eta])
            deta = np.array([-(1 - xi), -xi, 1 - xi, xi])
            kx += w * np.outer(dxi, dxi)
            ky += w * np.outer(deta, deta)
            m += w * np.outer(n, n)
    return kx, ky, m


_REF_KX, _REF_KY, _REF_M = _reference_matrices()


@dataclass(frozen=True)
class StructuredGrid:
    nx: int
    ny: int
    x0: float = 0.0
    x1: float = 1.0
    y0: float = 0.0
    y1: float = 1.0

    def __post_init__(self):
        if self.nx < 1 or self.ny < 1:
            raise ValueError(f"grid needs at least one cell per axis, got {self.nx}x{self.ny}")
        if not (self.x1 > self.x0 and self.y1 > self.y0):
            raise ValueError("domain rectangle is empty")

    @property
    def hx(self) -> float:
        return (self.x1 - self.x0) / self.nx

    @property
    def hy(self) -> float:
        return (self.y1 - self.y0) / self.ny

    @property
    def n_nodes(self) -> int:
        return (self.nx + 1) * (self.ny + 1)

    @property
    def n_cells(self) -> int:
        return self.nx * self.ny

    @property
    def area(self) -> float:
        return (self.x1 - self.x0) * (self.y1 - self.y0)

    def node_index(self, i, j):
        return np.asarray(j) * (self.nx + 1) + np.asarray(i)

    @cached_property
    def nodes(self) -> np.ndarray:
        """Node coordinates, shape ``(n_nodes, 2)``."""
        xs = np.linspace(self.x0, self.x1, self.nx + 1)
        ys = np.linspace(self.y0, self.y1, self.ny + 1)
        X, Y = np.meshgrid(xs, ys)
        return np.column_stack([X.ravel(), Y.ravel()])

    @cached_property
    def cells(self) -> np.ndarray:
        """Cell-to-node connectivity, shape ``(n_cells, 4)``."""
        i, j = np.meshgrid(np.arange(self.nx), np.arange(self.ny))
        a = (j * (self.nx + 1) + i).ravel()
        return np.column_stack([a, a + 1, a + self.nx + 1, a + self.nx + 2])

    @cached_property
    def cell_centers(self) -> np.ndarray:
        xs = self.x0 + (np.arange(self.nx) + 0.5) * self.hx
        ys = self.y0 + (np.arange(self.ny) + 0.5) * self.hy
        X, Y = np.meshgrid(xs, ys)
        return np.column_stack([X.ravel(), Y.ravel()])

    def boundary_nodes(self, edge: str) -> np.ndarray:
        """Node ids on ``edge`` ordered by increasing edge coordinate."""
        if edge == "left":
            return self.node_index(0, np.arange(self.ny + 1))
        if edge == "right":
            return self.node_index(self.nx, np.arange(self.ny + 1))
        if edge == "bottom":
            return self.node_index(np.arange(self.nx + 1), 0)
        if edge == "top":
            return self.node_index(np.arange(self.nx + 1), self.ny)
        raise ValueError(f"unknown edge {edge!r}")

    def contains(self, points, tol: float = 1e-12) -> np.ndarray:
        p = np.atleast_2d(points)
        return ((p[:, 0] >= self.x0 - tol) & (p[:, 0] <= self.x1 + tol)
                & (p[:, 1] >= self.y0 - tol) & (p[:, 1] <= self.y1 + tol))

    def interpolation_matrix(self, points) -> sp.csr_matrix:
        """Sparse matrix evaluating the bilinear interpolant at ``points``."""
        p = np.atleast_2d(np.asarray(points, dtype=float))
        if not np.all(self.contains(p)):
            raise ValueError("interpolation point outside the grid domain")
        sx = (p[:, 0] - self.x0) / self.hx
        sy = (p[:, 1] - self.y0) / self.hy
        i = np.clip(np.floor(sx).astype(int), 0, self.nx - 1)
        j = np.clip(np.floor(sy).astype(int), 0, self.ny - 1)
        xi = np.clip(sx - i, 0.0, 1.0)
        eta = np.clip(sy - j, 0.0, 1.0)
        a = self.node_index(i, j)
        cols = np.column_stack([a, a + 1, a + self.nx + 1, a + self.nx + 2])
        vals = _shape(xi, eta).T
        rows = np.repeat(np.arange(len(p)), 4)
        return sp.csr_matrix((vals.ravel(), (rows, cols.ravel())), shape=(len(p), self.n_nodes))

    @cached_property
    def quadrature_points(self) -> np.ndarray:
        """2x2 Gauss points of every cell, shape ``(4 * n_cells, 2)``, cell-major."""
        pts = []
        for eta in _GAUSS_X:
            for xi in _GAUSS_X:
                pts.append((xi, eta))
        pts = np.array(pts)
        base = self.nodes[self.cells[:, 0]]
        x = base[:, None, 0] + pts[None, :, 0] * self.hx
        y = base[:, None, 1] + pts[None, :, 1] * self.hy
        return np.column_stack([x.ravel(), y.ravel()])

    @cached_property
    def load_operator(self) -> sp.csr_matrix:
        """Maps source values at :attr:`quadrature_points` to the load vector."""
        vals = []
        for eta, wy in zip(_GAUSS_X, _GAUSS_W):
            for xi, wx in zip(_GAUSS_X, _GAUSS_W):
                vals.append(wx * wy * self.hx * self.hy * _shape(xi, eta))
        vals = np.array(vals)  # (4 points, 4 local nodes)
        nq = 4
        cols = (np.arange(self.n_cells)[:, None] * nq + np.arange(nq)[None, :])
        rows = np.repeat(self.cells[:, None, :], nq, axis=1)  # (cell, q, node)
        cols = np.repeat(cols[:, :, None], 4, axis=2)
        data = np.broadcast_to(vals[None], rows.shape)
        return sp.csr_matrix((data.ravel(), (rows.ravel(), cols.ravel())),
                             shape=(self.n_nodes, nq * self.n_cells))

    def edge_quadrature(self, edge: str):
        """Gauss points along ``edge`` as (edge coordinate, operator to nodes)."""
        nodes = self.boundary_nodes(edge)
        if edge in ("left", "right"):
            lo, h, nseg = self.y0, self.hy, self.ny
        else:
            lo, h, nseg = self.x0, self.hx, self.nx
        s = lo + (np.arange(nseg)[:, None] + _GAUSS_X[None, :]) * h
        rows, cols, data = [], [], []
        for q, (g, w) in enumerate(zip(_GAUSS_X, _GAUSS_W)):
            col = np.arange(nseg) * 2 + q
            rows += [nodes[:-1], nodes[1:]]
            cols += [col, col]
            data += [np.full(nseg, w * h * (1 - g)), np.full(nseg, w * h * g)]
        op = sp.csr_matrix((np.concatenate(data), (np.concatenate(rows), np.concatenate(cols))),
                           shape=(self.n_nodes, 2 * nseg))
        return s.ravel(), op


def build_grid(nx: int, ny: int, domain=((0.0, 1.0), (0.0, 1.0))) -> StructuredGrid:
    (x0, x1), (y0, y1) = domain
    return StructuredGrid(int(nx), int(ny), float(x0), float(x1), float(y0), float(y1))


def check_cell_field(grid: StructuredGrid, k) -> np.ndarray:
    k = np.asarray(k, dtype=float).ravel()
    if k.size != grid.n_cells:
        raise ValueError(f"cell field has {k.size} values, grid has {grid.n_cells} cells")
    if not np.all(k > 0):
        raise ValueError("conductivity must be strictly positive")
    return k


def _assemble_cellwise(grid: StructuredGrid, coef: np.ndarray, ref: np.ndarray) -> sp.csr_matrix:
    cells = grid.cells
    rows = np.repeat(cells, 4, axis=1).ravel()
    cols = np.tile(cells, (1, 4)).ravel()
    data = (coef[:, None, None] * ref[None]).ravel()
    return sp.csr_matrix((data, (rows, cols)), shape=(grid.n_nodes, grid.n_nodes))


def stiffness_matrix(grid: StructuredGrid, k) -> sp.csr_matrix:
    k = check_cell_field(grid, k)
    ref = grid.hy / grid.hx * _REF_KX + grid.hx / grid.hy * _REF_KY
    return _assemble_cellwise(grid, k, ref)


def mass_matrix(grid: StructuredGrid, weight=None) -> sp.csr_matrix:
    """Mass matrix, optionally weighted by a per-cell coefficient."""
    w = np.ones(grid.n_cells) if weight is None else check_cell_field(grid, weight)
    return _assemble_cellwise(grid, w, grid.hx * grid.hy * _REF_M)


def assemble(grid: StructuredGrid, k):
    """Return the mass matrix ``B`` and the stiffness matrix ``K`` for ``k``."""
    return mass_matrix(grid), stiffness_matrix(grid, k)


@dataclass(frozen=True)
class EdgeCondition:
    kind: str = "neumann"
    flux: Optional[Callable] = None  # p(s, t), s the coordinate along the edge

    def __post_init__(self):
        if self.kind not in ("neumann", "dirichlet"):
            raise ValueError(f"unknown boundary kind {self.kind!r}")
        if self.kind == "dirichlet" and self.flux is not None:
            raise ValueError("only homogeneous Dirichlet data is supported")


def neumann(flux: Optional[Callable] = None) -> EdgeCondition:
    return EdgeCondition("neumann", flux)


def dirichlet() -> EdgeCondition:
    return EdgeCondition("dirichlet")


EDGES = ("left", "right", "bottom", "top")


@dataclass(frozen=True)
class BoundarySpec:
    left: EdgeCondition = field(default_factory=neumann)
    right: EdgeCondition = field(default_factory=neumann)
    bottom: EdgeCondition = field(default_factory=neumann)
    top: EdgeCondition = field(default_factory=neumann)

    def dirichlet_nodes(self, grid: StructuredGrid) -> np.ndarray:
        ids = [grid.boundary_nodes(e) for e in EDGES if getattr(self, e).kind == "dirichlet"]
        if not ids:
            return np.zeros(0, dtype=int)
        return np.unique(np.concatenate(ids))


def _evaluate(fn, *args):
    return np.asarray(fn(*args), dtype=float)


def assemble_load(grid: StructuredGrid, f: Optional[Callable], bc: BoundarySpec = BoundarySpec(),
                  t: float = 0.0) -> np.ndarray:
    """Load vector at time ``t``.

    ``f(x, y, t)`` and edge fluxes ``p(s, t)`` may return arrays with a trailing
    batch axis; the load then has shape ``(n_nodes, batch)``.
    """
    parts = []
    if f is not None:
        q = grid.quadrature_points
        vals = _evaluate(f, q[:, 0], q[:, 1], t)
        vals = np.broadcast_to(vals, (len(q),) + vals.shape[1:]) if vals.ndim <= 1 else vals
        parts.append(grid.load_operator @ vals)
    for edge in EDGES:
        cond = getattr(bc, edge)
        if cond.kind == "neumann" and cond.flux is not None:
            s, op = grid.edge_quadrature(edge)
            vals = _evaluate(cond.flux, s, t)
            vals = np.broadcast_to(vals, (len(s),) + vals.shape[1:]) if vals.ndim <= 1 else vals
            parts.append(op @ vals)
    if not parts:
        return np.zeros(grid.n_nodes)
    shape = np.broadcast_shapes(*(p.shape for p in parts))
    F = np.zeros(shape)
    for p in parts:
        F = F + p
    F[bc.dirichlet_nodes(grid)] = 0.0
    return F


def apply_dirichlet(B, K, nodes):
    """Eliminate homogeneous Dirichlet ``nodes`` symmetrically.

    Constrained rows and columns are zeroed; ``B`` gets a unit diagonal there
    and ``K`` a zero one, so ``B + dt K`` stays SPD and constrained values
    are carried unchanged from the (zero) initial state.
    """
    nodes = np.asarray(nodes, dtype=int)
    if nodes.size == 0:
        return B.tocsr(), K.tocsr()
    keep = np.ones(B.shape[0])
    keep[nodes] = 0.0
    D = sp.diags(keep)
    E = sp.diags(1.0 - keep)
    return (D @ B @ D + E).tocsr(), (D @ K @ D).tocsr()


@dataclass(frozen=True)
class TimeGrid:
    dt: float
    T: float

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("time step must be positive")
        n = self.T / self.dt
        if abs(n - round(n)) > 1e-8 * max(1.0, n) or round(n) < 1:
            raise ValueError(f"T={self.T} is not an integer multiple of dt={self.dt}")

    @property
    def levels(self) -> int:
        return int(round(self.T / self.dt))

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.levels + 1) * self.dt

    def level_of(self, t) -> np.ndarray:
        t = np.atleast_1d(np.asarray(t, dtype=float))
        n = t / self.dt
        lv = np.rint(n).astype(int)
        if np.any(np.abs(n - lv) > 1e-8 * np.maximum(1.0, n)) or np.any(lv < 0) or np.any(lv > self.levels):
            raise ValueError(f"times {t} are not levels of the time grid (dt={self.dt}, T={self.T})")
        return lv


@dataclass
class Trajectory:
    """Nodal states at the stored time levels (all levels unless thinned).

    ``values`` has shape ``(n_stored, n_nodes)`` or, for batched solves,
    ``(n_stored, n_nodes, batch)``.
    """

    values: np.ndarray
    levels: np.ndarray
    dt: float

    @property
    def times(self) -> np.ndarray:
        return self.levels * self.dt

    def at_level(self, level: int) -> np.ndarray:
        idx = np.flatnonzero(self.levels == level)
        if idx.size == 0:
            raise KeyError(f"level {level} was not stored")
        return self.values[idx[0]]

    def to_csv(self, path) -> None:
        if self.values.ndim != 2:
            raise ValueError("only unbatched trajectories can be exported")
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["level", "node", "value"])
            nodes = np.arange(self.values.shape[1])
            for lv, row in zip(self.levels, self.values):
                for n, v in zip(nodes, row):
                    w.writerow([int(lv), int(n), repr(float(v))])


LoadLike = Union[None, np.ndarray, Callable[[float], np.ndarray]]


def _load_at(load: LoadLike, t: float, n: int):
    if load is None:
        return 0.0
    if callable(load):
        return load(t)
    return load


class FullOrderSolver:
    """Backward Euler on the fine grid with a single sparse LU of ``B + dt K``."""

    def __init__(self, B, K, dt: float):
        self.B = B.tocsr()
        self.K = K.tocsr()
        self.dt = float(dt)
        A = (self.B + self.dt * self.K).tocsc()
        try:
            self._lu = spla.splu(A)
        except RuntimeError as exc:
            raise NumericalFailure(f"B + dt K could not be factorized: {exc}") from exc
        self.n_solves = 0

    @property
    def size(self) -> int:
        return self.B.shape[0]

    def _solve(self, rhs):
        x = self._lu.solve(np.asarray(rhs, dtype=float))
        if not np.all(np.isfinite(x)):
            raise NumericalFailure("non-finite solution, system matrix is singular")
        return x

    def solve(self, load: LoadLike, u0, n_levels: int, keep: Optional[Sequence[int]] = None) -> Trajectory:
        self.n_solves += 1
        u = np.array(u0, dtype=float)
        keep = np.arange(n_levels + 1) if keep is None else np.asarray(keep, dtype=int)
        out = np.empty((len(keep),) + u.shape)
        slot = {int(lv): i for i, lv in enumerate(keep)}
        if 0 in slot:
            out[slot[0]] = u
        for n in range(1, n_levels + 1):
            F = _load_at(load, n * self.dt, self.size)
            if sp.issparse(F):
                F = F.toarray()
            u = self._solve(self.B @ u + self.dt * F)
            if n in slot:
                out[slot[n]] = u
        return Trajectory(out, keep, self.dt)

    def observation_load_operator(self, obs: sp.spmatrix, levels: Sequence[int]) -> np.ndarray:
        """Dense ``O`` with ``observe(solve(F, 0)) = O @ F`` for time-constant ``F``.

        Rows are ordered level-major, then by row of ``obs``.  Built from
        transposed sweeps, so its cost is one solve per sensor instead of one
        per load.
        """
        levels = np.asarray(levels, dtype=int)
        Y = self._solve(obs.T.toarray())
        acc = np.zeros_like(Y)
        blocks = {}
        for n in range(1, levels.max() + 1):
            acc += Y
            if n in levels:
                blocks[n] = self.dt * acc.T.copy()
            Y = self._solve(self.B @ Y)
        return np.vstack([blocks[int(n)] if n > 0 else np.zeros((obs.shape[0], self.size))
                          for n in levels])


def solve_forward_full(B, K, load: LoadLike, u0, time: TimeGrid,
                       keep: Optional[Sequence[int]] = None) -> Trajectory:
    return FullOrderSolver(B, K, time.dt).solve(load, u0, time.levels, keep)


@dataclass(frozen=True)
class SensorSet:
    points: np.ndarray
    times: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "points", np.atleast_2d(np.asarray(self.points, dtype=float)))
        object.__setattr__(self, "times", np.atleast_1d(np.asarray(self.times, dtype=float)))

    @property
    def n_d(self) -> int:
        return len(self.points) * len(self.times)

    def levels(self, time: TimeGrid) -> np.ndarray:
        return time.level_of(self.times)

    def rows(self) -> np.ndarray:
        """(x, y, t) for each observation in canonical order."""
        t = np.repeat(self.times, len(self.points))
        p = np.tile(self.points, (len(self.times), 1))
        return np.column_stack([p, t])


def uniform_sensors(nx: int, ny: int, times, domain=((0.0, 1.0), (0.0, 1.0))) -> SensorSet:
    """Cell-centred ``nx`` x ``ny`` sensor network."""
    (x0, x1), (y0, y1) = domain
    xs = x0 + (np.arange(nx) + 0.5) * (x1 - x0) / nx
    ys = y0 + (np.arange(ny) + 0.5) * (y1 - y0) / ny
    X, Y = np.meshgrid(xs, ys)
    return SensorSet(np.column_stack([X.ravel(), Y.ravel()]), np.asarray(times, dtype=float))


def observe(traj: Trajectory, grid: StructuredGrid, sensors: SensorSet) -> np.ndarray:
    """Sensor readings, time-major then sensor-major."""
    P = grid.interpolation_matrix(sensors.points)
    lv = np.rint(sensors.times / traj.dt).astype(int)
    chunks = [P @ traj.at_level(int(n)) for n in lv]
    return np.concatenate(chunks, axis=0)


def load_permeability(path, grid: StructuredGrid) -> np.ndarray:
    """Read an ``ny`` x ``nx`` whitespace matrix, first row at y = 0."""
    arr = np.loadtxt(path, ndmin=2)
    if arr.shape != (grid.ny, grid.nx):
        raise ValueError(f"permeability file has shape {arr.shape}, expected {(grid.ny, grid.nx)}")
    return check_cell_field(grid, arr.ravel())


def save_permeability(path, grid: StructuredGrid, k) -> None:
    k = check_cell_field(grid, k)
    np.savetxt(path, k.reshape(grid.ny, grid.nx), fmt="%.17g")
