"""Generalized multiscale basis construction and the reduced backward Euler solver.

Offline: per coarse neighborhood a k-weighted Neumann eigenproblem, per coarse
element a k-harmonic partition of unity, products stacked into ``R``.
Online: Galerkin projection ``R^T B R``, ``R^T K R`` and dense stepping.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import List, Optional, Sequence, Union

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import NumericalFailure
from .mesh_fem import (LoadLike, StructuredGrid, Trajectory, _load_at, check_cell_field,
                       mass_matrix, stiffness_matrix)


@dataclass(frozen=True)
class Patch:
    """A rectangular block of fine cells: local grid plus global index maps."""

    grid: StructuredGrid
    nodes: np.ndarray  # global fine node ids in local lexicographic order
    cells: np.ndarray  # global fine cell ids in local lexicographic order


def _patch(fine: StructuredGrid, i0: int, i1: int, j0: int, j1: int) -> Patch:
    g = StructuredGrid(i1 - i0, j1 - j0,
                       fine.x0 + i0 * fine.hx, fine.x0 + i1 * fine.hx,
                       fine.y0 + j0 * fine.hy, fine.y0 + j1 * fine.hy)
    ni, nj = np.meshgrid(np.arange(i0, i1 + 1), np.arange(j0, j1 + 1))
    ci, cj = np.meshgrid(np.arange(i0, i1), np.arange(j0, j1))
    return Patch(g, fine.node_index(ni, nj).ravel(), (cj * fine.nx + ci).ravel())


@dataclass(frozen=True)
class CoarseGrid:
    fine: StructuredGrid
    Nx: int
    Ny: int

    def __post_init__(self):
        if self.Nx < 1 or self.Ny < 1:
            raise ValueError("coarse grid needs at least one cell per axis")
        if self.fine.nx % self.Nx or self.fine.ny % self.Ny:
            raise ValueError(f"fine grid {self.fine.nx}x{self.fine.ny} is not a refinement "
                             f"of coarse grid {self.Nx}x{self.Ny}")

    @property
    def rx(self) -> int:
        return self.fine.nx // self.Nx

    @property
    def ry(self) -> int:
        return self.fine.ny // self.Ny

    @property
    def n_nodes(self) -> int:
        return (self.Nx + 1) * (self.Ny + 1)

    @property
    def n_elements(self) -> int:
        return self.Nx * self.Ny

    def node_ij(self, node: int):
        return node % (self.Nx + 1), node // (self.Nx + 1)

    def neighborhood_elements(self, node: int) -> List[tuple]:
        I, J = self.node_ij(node)
        return [(a, b) for b in (J - 1, J) for a in (I - 1, I)
                if 0 <= a < self.Nx and 0 <= b < self.Ny]

    def neighborhood(self, node: int) -> Patch:
        """Union of the coarse cells touching ``node`` (truncated at the boundary)."""
        I, J = self.node_ij(node)
        i0, i1 = max(I - 1, 0) * self.rx, min(I + 1, self.Nx) * self.rx
        j0, j1 = max(J - 1, 0) * self.ry, min(J + 1, self.Ny) * self.ry
        return _patch(self.fine, i0, i1, j0, j1)

    def element(self, I: int, J: int) -> Patch:
        return _patch(self.fine, I * self.rx, (I + 1) * self.rx, J * self.ry, (J + 1) * self.ry)

    def element_corners(self, I: int, J: int) -> List[int]:
        a = J * (self.Nx + 1) + I
        return [a, a + 1, a + self.Nx + 1, a + self.Nx + 2]

    def hat_functions(self) -> sp.csc_matrix:
        """Standard bilinear coarse hats sampled at the fine nodes, ``(N_h, N_H)``."""
        coarse = StructuredGrid(self.Nx, self.Ny, self.fine.x0, self.fine.x1, self.fine.y0, self.fine.y1)
        return coarse.interpolation_matrix(self.fine.nodes).tocsc()


def build_coarse_grid(fine: StructuredGrid, Nx: int, Ny: int) -> CoarseGrid:
    return CoarseGrid(fine, int(Nx), int(Ny))


def _fix_signs(vecs: np.ndarray) -> np.ndarray:
    idx = np.argmax(np.abs(vecs), axis=0)
    signs = np.sign(vecs[idx, np.arange(vecs.shape[1])])
    signs[signs == 0] = 1.0
    return vecs * signs


def local_spectral_basis(patch: Patch, k, n_modes: int):
    """Smallest ``n_modes`` eigenpairs of ``A psi = lambda S psi`` on ``patch``.

    ``A`` is the k-stiffness and ``S`` the k-weighted mass with natural
    boundary conditions.  Eigenvectors are S-orthonormal, sign-normalised so
    the largest-magnitude entry is positive.
    """
    k_loc = check_cell_field(patch.grid, np.asarray(k, dtype=float)[patch.cells])
    n_dof = patch.grid.n_nodes
    if not 1 <= n_modes <= n_dof:
        raise ValueError(f"requested {n_modes} modes, local space has {n_dof}")
    A = stiffness_matrix(patch.grid, k_loc).toarray()
    S = mass_matrix(patch.grid, k_loc).toarray()
    try:
        lam, vecs = sla.eigh(A, S, subset_by_index=[0, n_modes - 1])
    except (sla.LinAlgError, ValueError) as exc:
        raise NumericalFailure(f"local eigensolve failed: {exc}") from exc
    lam = np.maximum(lam, 0.0)  # A is PSD; clip round-off below zero
    return lam, _fix_signs(vecs)


@dataclass
class PartitionOfUnity:
    coarse: CoarseGrid
    local: List[np.ndarray]  # chi_i on the fine nodes of neighborhood i

    @property
    def matrix(self) -> sp.csc_matrix:
        rows, cols, vals = [], [], []
        for i, v in enumerate(self.local):
            nodes = self.coarse.neighborhood(i).nodes
            nz = v != 0
            rows.append(nodes[nz])
            cols.append(np.full(nz.sum(), i))
            vals.append(v[nz])
        return sp.csc_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                             shape=(self.coarse.fine.n_nodes, self.coarse.n_nodes))


def partition_of_unity(coarse: CoarseGrid, k) -> PartitionOfUnity:
    """k-harmonic extensions of the coarse hat traces, one solve per coarse element."""
    fine = coarse.fine
    k = check_cell_field(fine, k)
    local = []
    offsets = []
    for node in range(coarse.n_nodes):
        nb = coarse.neighborhood(node)
        local.append(np.zeros(nb.grid.n_nodes))
        I, J = coarse.node_ij(node)
        offsets.append((max(I - 1, 0) * coarse.rx, max(J - 1, 0) * coarse.ry, nb.grid.nx + 1))
    for J in range(coarse.Ny):
        for I in range(coarse.Nx):
            el = coarse.element(I, J)
            g = el.grid
            Kl = stiffness_matrix(g, k[el.cells]).tocsr()
            li, lj = np.meshgrid(np.arange(g.nx + 1), np.arange(g.ny + 1))
            li, lj = li.ravel(), lj.ravel()
            bnd = (li == 0) | (li == g.nx) | (lj == 0) | (lj == g.ny)
            inn = ~bnd
            xi, eta = li / g.nx, lj / g.ny
            hats = np.column_stack([(1 - xi) * (1 - eta), xi * (1 - eta), (1 - xi) * eta, xi * eta])
            chi = hats.copy()
            if inn.any():
                Kii = Kl[inn][:, inn].tocsc()
                Kib = Kl[inn][:, bnd]
                try:
                    chi[inn] = spla.splu(Kii).solve(-(Kib @ hats[bnd]))
                except RuntimeError as exc:
                    raise NumericalFailure(f"partition of unity solve failed on element {(I, J)}") from exc
            gi = I * coarse.rx + li
            gj = J * coarse.ry + lj
            for c, node in enumerate(coarse.element_corners(I, J)):
                ox, oy, w = offsets[node]
                local[node][(gj - oy) * w + (gi - ox)] = chi[:, c]
    return PartitionOfUnity(coarse, local)


@dataclass
class MultiscaleBasis:
    coarse: CoarseGrid
    R: sp.csc_matrix
    eigenvalues: List[np.ndarray]
    counts: np.ndarray

    @property
    def n_basis(self) -> int:
        return int(self.counts.sum())

    def column_owner(self) -> np.ndarray:
        return np.repeat(np.arange(len(self.counts)), self.counts)


def build_basis(coarse: CoarseGrid, k, n_modes: Union[int, Sequence[int]],
                pou: Optional[PartitionOfUnity] = None) -> MultiscaleBasis:
    """Columns ``chi_i * psi_il``, node-major with eigen-index minor."""
    k = check_cell_field(coarse.fine, k)
    counts = np.broadcast_to(np.asarray(n_modes, dtype=int), (coarse.n_nodes,)).copy()
    if pou is None:
        pou = partition_of_unity(coarse, k)
    rows, cols, vals, eigs = [], [], [], []
    col = 0
    for node in range(coarse.n_nodes):
        nb = coarse.neighborhood(node)
        lam, psi = local_spectral_basis(nb, k, int(counts[node]))
        eigs.append(lam)
        chi = pou.local[node]
        for l in range(psi.shape[1]):
            v = chi * psi[:, l]
            nz = v != 0
            if not nz.any():
                raise NumericalFailure(f"basis function {l} of node {node} vanishes")
            rows.append(nb.nodes[nz])
            cols.append(np.full(nz.sum(), col))
            vals.append(v[nz])
            col += 1
    R = sp.csc_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                      shape=(coarse.fine.n_nodes, col))
    return MultiscaleBasis(coarse, R, eigs, counts)


def k_checksum(k) -> str:
    return hashlib.sha256(np.ascontiguousarray(k, dtype=float).tobytes()).hexdigest()


def save_basis(path, basis: MultiscaleBasis, k) -> None:
    R = basis.R.tocsc()
    np.savez_compressed(
        path, data=R.data, indices=R.indices, indptr=R.indptr,
        n_fine=R.shape[0], n_basis=R.shape[1],
        fine_dims=[basis.coarse.fine.nx, basis.coarse.fine.ny],
        coarse_dims=[basis.coarse.Nx, basis.coarse.Ny],
        counts=basis.counts, eigenvalues=np.concatenate(basis.eigenvalues),
        k_checksum=k_checksum(k))


def load_basis(path, coarse: CoarseGrid, k=None) -> MultiscaleBasis:
    with np.load(path) as z:
        if list(z["coarse_dims"]) != [coarse.Nx, coarse.Ny] or \
                list(z["fine_dims"]) != [coarse.fine.nx, coarse.fine.ny]:
            raise ValueError("basis cache was built for different grids")
        if k is not None and str(z["k_checksum"]) != k_checksum(k):
            raise ValueError("basis cache was built for a different permeability field")
        R = sp.csc_matrix((z["data"], z["indices"], z["indptr"]),
                          shape=(int(z["n_fine"]), int(z["n_basis"])))
        counts = z["counts"]
        eigs = np.split(z["eigenvalues"], np.cumsum(counts)[:-1])
    return MultiscaleBasis(coarse, R, list(eigs), counts)


@dataclass
class ReducedTrajectory:
    coeffs: np.ndarray  # (n_stored, M_v[, batch])
    levels: np.ndarray
    dt: float
    R: sp.spmatrix

    def reconstruct(self) -> Trajectory:
        vals = np.stack([self.R @ c for c in self.coeffs])
        return Trajectory(vals, self.levels, self.dt)


class ReducedOrderSolver:
    """Galerkin backward Euler in ``span(R)``.

    Rows of ``R`` at ``constrained`` (homogeneous Dirichlet) nodes are zeroed
    so the reduced space respects the essential condition.
    """

    def __init__(self, R, B, K, dt: float, constrained=None):
        R = sp.csc_matrix(R, dtype=float)
        if constrained is not None and len(constrained):
            keep = np.ones(R.shape[0])
            keep[np.asarray(constrained, dtype=int)] = 0.0
            R = (sp.diags(keep) @ R).tocsc()
            R.eliminate_zeros()
        self.R = R
        self.B = B.tocsr()
        self.K = K.tocsr()
        self.dt = float(dt)
        Bt = (R.T @ (self.B @ R)).toarray()
        Kt = (R.T @ (self.K @ R)).toarray()
        self.Bt = 0.5 * (Bt + Bt.T)
        self.Kt = 0.5 * (Kt + Kt.T)
        ev = np.linalg.eigvalsh(self.Bt)
        if ev[0] <= 1e-12 * ev[-1]:
            raise NumericalFailure(f"reduced mass matrix is rank deficient (min/max eig {ev[0]:.3e}/{ev[-1]:.3e}); "
                                   "the multiscale basis is redundant")
        self._mass = sla.cho_factor(self.Bt)
        self._step = sla.cho_factor(self.Bt + self.dt * self.Kt)
        self.n_solves = 0

    @property
    def n_basis(self) -> int:
        return self.R.shape[1]

    def project_initial(self, u0) -> np.ndarray:
        """B-orthogonal projection coefficients of ``u0`` onto ``span(R)``."""
        return sla.cho_solve(self._mass, self.R.T @ (self.B @ np.asarray(u0, dtype=float)))

    def solve(self, load: LoadLike, u0, n_levels: int, keep: Optional[Sequence[int]] = None) -> ReducedTrajectory:
        self.n_solves += 1
        u0 = np.asarray(u0, dtype=float)
        a = self.project_initial(u0) if np.any(u0) else np.zeros((self.n_basis,) + u0.shape[1:])
        keep = np.arange(n_levels + 1) if keep is None else np.asarray(keep, dtype=int)
        out = np.empty((len(keep),) + a.shape)
        slot = {int(lv): i for i, lv in enumerate(keep)}
        if 0 in slot:
            out[slot[0]] = a
        const = load is not None and not callable(load)
        Ft = self.R.T @ load if const else None
        for n in range(1, n_levels + 1):
            if const:
                rhs = self.Bt @ a + self.dt * Ft
            elif load is None:
                rhs = self.Bt @ a
            else:
                Fr = self.R.T @ _load_at(load, n * self.dt, 0)
                rhs = self.Bt @ a + self.dt * (Fr.toarray() if sp.issparse(Fr) else Fr)
            a = sla.cho_solve(self._step, rhs)
            if n in slot:
                out[slot[n]] = a
        return ReducedTrajectory(out, keep, self.dt, self.R)

    def observation_load_operator(self, obs: sp.spmatrix, levels: Sequence[int]) -> np.ndarray:
        """Dense ``O`` with reduced observations ``= O @ F`` for time-constant ``F``, zero start."""
        levels = np.asarray(levels, dtype=int)
        PR = np.asarray((obs @ self.R).todense())
        Y = sla.cho_solve(self._step, PR.T)
        acc = np.zeros_like(Y)
        blocks = {}
        for n in range(1, levels.max() + 1):
            acc += Y
            if n in levels:
                blocks[n] = self.dt * (self.R @ acc).T
            Y = sla.cho_solve(self._step, self.Bt @ Y)
        return np.vstack([blocks[int(n)] if n > 0 else np.zeros((obs.shape[0], self.R.shape[0]))
                          for n in levels])


def solve_forward_reduced(R, B, K, load: LoadLike, u0, time, keep=None, constrained=None):
    """Return the coarse coefficient trajectory and its fine reconstruction."""
    red = ReducedOrderSolver(R, B, K, time.dt, constrained).solve(load, u0, time.levels, keep)
    return red, red.reconstruct()
