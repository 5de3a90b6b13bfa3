"""Truncated Karhunen-Loeve expansions and lattice MRF precision matrices."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp


@dataclass(frozen=True)
class CovarianceKernel:
    """Stationary separable kernel on 2-D coordinates.

    ``form="gaussian"``: ``var * exp(-dx^2/2l1^2 - dy^2/2l2^2)``.
    ``form="exponential"``: ``var * exp(-|dx|/l1 - |dy|/l2)``.
    """

    variance: float = 2.0
    l1: float = 0.2
    l2: float = 0.2
    form: str = "gaussian"

    def __post_init__(self):
        if not (self.variance > 0 and self.l1 > 0 and self.l2 > 0):
            raise ValueError("kernel variance and correlation lengths must be positive")
        if self.form not in ("gaussian", "exponential"):
            raise ValueError(f"unknown kernel form {self.form!r}")

    def __call__(self, p, q):
        p = np.atleast_2d(p)
        q = np.atleast_2d(q)
        dx = p[:, None, 0] - q[None, :, 0]
        dy = p[:, None, 1] - q[None, :, 1]
        if self.form == "exponential":
            return self.variance * np.exp(-np.abs(dx) / self.l1 - np.abs(dy) / self.l2)
        return self.variance * np.exp(-dx ** 2 / (2 * self.l1 ** 2) - dy ** 2 / (2 * self.l2 ** 2))


def covariance_matrix(points, kernel: CovarianceKernel) -> np.ndarray:
    p = np.atleast_2d(np.asarray(points, dtype=float))
    if len(p) == 0:
        raise ValueError("need at least one point")
    C = kernel(p, p)
    return 0.5 * (C + C.T)


@dataclass
class KleModel:
    eigenvalues: np.ndarray  # all retained-spectrum values, descending
    modes: np.ndarray  # orthonormal eigenvectors, (m, m0)
    n_terms: int
    mean: np.ndarray

    @property
    def B(self) -> np.ndarray:
        """Coefficient map ``theta = mean + B @ eta``, shape ``(m, m0)``."""
        return self.modes * np.sqrt(self.eigenvalues[: self.n_terms])

    def energy(self, m0=None) -> float:
        m0 = self.n_terms if m0 is None else m0
        return float(self.eigenvalues[:m0].sum() / self.eigenvalues.sum())

    def field(self, eta) -> np.ndarray:
        eta = np.asarray(eta, dtype=float)
        out = self.B @ eta
        return out + (self.mean if out.ndim == 1 else self.mean[:, None])


def kle_truncate(C, e_target: float = 0.95, mean=None, rtol: float = 1e-10) -> KleModel:
    """Smallest expansion reaching the energy ratio ``e_target``.

    Eigenvalues with magnitude below ``rtol * zeta_1`` are treated as zero;
    more negative ones mean ``C`` is not a covariance.
    """
    if not 0 < e_target <= 1:
        raise ValueError("energy target must lie in (0, 1]")
    C = np.asarray(C, dtype=float)
    if C.ndim != 2 or C.shape[0] != C.shape[1]:
        raise ValueError("covariance must be square")
    if not np.allclose(C, C.T, rtol=1e-10, atol=1e-12 * np.abs(C).max()):
        raise ValueError("covariance must be symmetric")
    lam, vec = np.linalg.eigh(C)
    lam, vec = lam[::-1], vec[:, ::-1]
    top = lam[0]
    if top <= 0:
        raise ValueError("covariance has no positive eigenvalue")
    if lam[-1] < -rtol * top:
        raise ValueError(f"covariance is not positive semidefinite (eigenvalue {lam[-1]:.3e})")
    lam = np.where(np.abs(lam) <= rtol * top, 0.0, lam)
    cum = np.cumsum(lam)
    total = cum[-1]
    m0 = int(np.searchsorted(cum, e_target * total * (1 - 1e-12)) + 1)
    m0 = min(m0, int(np.count_nonzero(lam)))
    idx = np.argmax(np.abs(vec), axis=0)
    signs = np.sign(vec[idx, np.arange(vec.shape[1])])
    vec = vec * np.where(signs == 0, 1.0, signs)
    mean = np.zeros(C.shape[0]) if mean is None else np.broadcast_to(np.asarray(mean, float), (C.shape[0],)).copy()
    return KleModel(lam, vec[:, :m0], m0, mean)


def lattice_edges(rows: int, cols: int) -> np.ndarray:
    """Index pairs of 4-neighbours on a ``rows`` x ``cols`` lattice, column index fastest."""
    idx = np.arange(rows * cols).reshape(rows, cols)
    horiz = np.column_stack([idx[:, :-1].ravel(), idx[:, 1:].ravel()])
    vert = np.column_stack([idx[:-1, :].ravel(), idx[1:, :].ravel()])
    return np.vstack([horiz, vert])


def mrf_precision(rows: int, cols: int) -> sp.csr_matrix:
    """Graph Laplacian ``W`` of the 4-neighbour lattice."""
    if rows < 1 or cols < 1:
        raise ValueError("lattice needs at least one site per axis")
    m = rows * cols
    e = lattice_edges(rows, cols)
    A = sp.coo_matrix((np.ones(len(e)), (e[:, 0], e[:, 1])), shape=(m, m))
    A = (A + A.T).tocsr()
    deg = np.asarray(A.sum(axis=1)).ravel()
    return (sp.diags(deg) - A).tocsr()


def reduce_quadratic(W, B) -> np.ndarray:
    """``B^T W B``, symmetrised."""
    B = np.asarray(B, dtype=float)
    if W.shape[0] != W.shape[1] or W.shape[1] != B.shape[0]:
        raise ValueError(f"cannot form B^T W B with W {W.shape} and B {B.shape}")
    out = B.T @ (W @ B)
    return 0.5 * (out + out.T)


def save_kle(path, kle: KleModel, **meta) -> None:
    """CSV: ``#`` metadata lines, then the eigenvalue row, then the rows of ``B``."""
    with open(path, "w", newline="") as fh:
        fh.write(f"# n_points={kle.modes.shape[0]}\n# n_terms={kle.n_terms}\n")
        for key, val in meta.items():
            fh.write(f"# {key}={val}\n")
        w = csv.writer(fh)
        w.writerow([repr(float(v)) for v in kle.eigenvalues[: kle.n_terms]])
        for row in kle.B:
            w.writerow([repr(float(v)) for v in row])


def load_kle_matrix(path):
    """Return ``(zeta, B, meta)`` from a KLE cache file."""
    meta = {}
    with open(path) as fh:
        lines = fh.read().splitlines()
    body = []
    for ln in lines:
        if ln.startswith("#"):
            key, _, val = ln[1:].strip().partition("=")
            meta[key.strip()] = val.strip()
        elif ln.strip():
            body.append([float(v) for v in ln.split(",")])
    return np.array(body[0]), np.array(body[1:]), meta
