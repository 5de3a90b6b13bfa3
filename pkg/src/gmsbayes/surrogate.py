"""Least-squares stochastic collocation with orthonormal Legendre chaos.

Parameters live in a box and are mapped affinely to ``[-1, 1]^n``; the basis
is orthonormal for the uniform density there.  Multi-indices are ordered by
total degree, then in descending lexicographic order within a degree.
"""

from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass, field
from math import comb
from typing import Callable, Optional

import numpy as np
import scipy.linalg as sla

from .errors import IllConditionedDesign

MAX_CONDITION = 1e8


@dataclass(frozen=True)
class MultiIndexSet:
    n_z: int
    degree: int
    indices: np.ndarray  # (P, n_z)

    @property
    def size(self) -> int:
        return len(self.indices)


def multi_indices(n_z: int, degree: int) -> MultiIndexSet:
    if n_z < 1 or degree < 0:
        raise ValueError("need n_z >= 1 and degree >= 0")
    out = []
    for total in range(degree + 1):
        level = [c for c in itertools.product(range(total, -1, -1), repeat=n_z) if sum(c) == total]
        out.extend(level)
    idx = np.array(out, dtype=int).reshape(-1, n_z)
    assert len(idx) == comb(degree + n_z, n_z)
    return MultiIndexSet(n_z, degree, idx)


def legendre_table(degree: int, x) -> np.ndarray:
    """Orthonormal Legendre values ``sqrt(2m+1) P_m(x)``, shape ``x.shape + (degree+1,)``."""
    x = np.asarray(x, dtype=float)
    if np.any(np.abs(x) > 1 + 1e-12):
        raise ValueError("Legendre argument outside [-1, 1]")
    P = np.empty(x.shape + (degree + 1,))
    P[..., 0] = 1.0
    if degree >= 1:
        P[..., 1] = x
    for m in range(1, degree):
        P[..., m + 1] = ((2 * m + 1) * x * P[..., m] - m * P[..., m - 1]) / (m + 1)
    return P * np.sqrt(2 * np.arange(degree + 1) + 1)


def legendre_orthonormal(m: int, x):
    return legendre_table(m, x)[..., m]


def sample_count(n_z: int, degree: int, a: float = 3) -> int:
    if a < 1:
        raise ValueError("oversampling factor must be >= 1")
    # never fewer points than basis functions, which can happen for n_z >= 4 at small a
    return max(int(np.ceil(a * n_z * (degree + 1) ** 2)), comb(degree + n_z, n_z))


@dataclass(frozen=True)
class Box:
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.lower, dtype=float))
        hi = np.atleast_1d(np.asarray(self.upper, dtype=float))
        if lo.shape != hi.shape or np.any(hi <= lo):
            raise ValueError("box must have lower < upper in every coordinate")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @property
    def dim(self) -> int:
        return len(self.lower)

    def contains(self, z, tol: float = 0.0) -> np.ndarray:
        z = np.atleast_2d(z)
        return np.all((z >= self.lower - tol) & (z <= self.upper + tol), axis=1)

    def to_unit(self, z) -> np.ndarray:
        return 2.0 * (np.asarray(z, dtype=float) - self.lower) / (self.upper - self.lower) - 1.0

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return self.lower + (self.upper - self.lower) * rng.random((n, self.dim))


def unit_box(n_z: int) -> Box:
    return Box(np.zeros(n_z), np.ones(n_z))


def basis_matrix(z, index_set: MultiIndexSet, box: Box) -> np.ndarray:
    """``Phi_j(z_i)`` for a batch of points, shape ``(n, P)``."""
    z = np.atleast_2d(np.asarray(z, dtype=float))
    if z.shape[1] != index_set.n_z:
        raise ValueError(f"points have dimension {z.shape[1]}, basis expects {index_set.n_z}")
    if not np.all(box.contains(z, tol=1e-12)):
        raise ValueError("point outside the parameter box")
    u = np.clip(box.to_unit(z), -1.0, 1.0)
    tab = legendre_table(index_set.degree, u)  # (n, n_z, N+1)
    V = np.ones((len(z), index_set.size))
    for d in range(index_set.n_z):
        V *= tab[:, d, index_set.indices[:, d]]
    return V


@dataclass
class CollocationDesign:
    nodes: np.ndarray
    V: np.ndarray
    b: np.ndarray
    index_set: MultiIndexSet
    box: Box


def build_design(nodes, index_set: MultiIndexSet, box: Box, b=None,
                 max_condition: float = MAX_CONDITION) -> CollocationDesign:
    nodes = np.atleast_2d(np.asarray(nodes, dtype=float))
    if len(nodes) < index_set.size:
        raise IllConditionedDesign(f"{len(nodes)} nodes for {index_set.size} basis functions")
    V = basis_matrix(nodes, index_set, box)
    s = np.linalg.svd(V, compute_uv=False)
    if s[-1] <= 0 or s[0] / s[-1] > max_condition:
        cond = np.inf if s[-1] <= 0 else s[0] / s[-1]
        raise IllConditionedDesign(f"design matrix condition number {cond:.3e} exceeds {max_condition:.1e}")
    b = np.zeros((len(nodes), 0)) if b is None else np.asarray(b, dtype=float).reshape(len(nodes), -1)
    return CollocationDesign(nodes, V, b, index_set, box)


@dataclass
class GpcSurrogate:
    index_set: MultiIndexSet
    coef: np.ndarray  # (P, n_d)
    box: Box
    meta: dict = field(default_factory=dict)

    @property
    def n_d(self) -> int:
        return self.coef.shape[1]

    def __call__(self, z) -> np.ndarray:
        """Response for one point ``(n_z,)`` or a batch ``(n, n_z)``."""
        z = np.asarray(z, dtype=float)
        out = basis_matrix(z, self.index_set, self.box) @ self.coef
        return out[0] if z.ndim == 1 else out


def fit_ls(design: CollocationDesign) -> GpcSurrogate:
    """Columnwise least squares via a thin QR of ``V``."""
    Q, R = np.linalg.qr(design.V)
    d = np.abs(np.diag(R))
    if d.min() <= MAX_CONDITION ** -1 * d.max():
        raise IllConditionedDesign("design matrix is numerically rank deficient")
    coef = sla.solve_triangular(R, Q.T @ design.b)
    return GpcSurrogate(design.index_set, coef, design.box)


def eval_surrogate(s: GpcSurrogate, z) -> np.ndarray:
    return s(z)


def fit_residual_rms(design: CollocationDesign, s: GpcSurrogate) -> float:
    r = design.V @ s.coef - design.b
    return float(np.sqrt(np.mean(r ** 2)))


def fit_surrogate(response: Callable[[np.ndarray], np.ndarray], n_z: int, degree: int,
                  box: Optional[Box] = None, a: float = 3, seed: int = 0, n_nodes: Optional[int] = None):
    """Sample nodes from the uniform prior, evaluate ``response`` in one batch, fit.

    ``response`` maps ``(Q, n_z)`` nodes to ``(Q, n_d)`` outputs.  Returns the
    surrogate and its design.
    """
    box = unit_box(n_z) if box is None else box
    rng = np.random.default_rng(seed)
    Q = sample_count(n_z, degree, a) if n_nodes is None else int(n_nodes)
    nodes = box.sample(Q, rng)
    design = build_design(nodes, multi_indices(n_z, degree), box, np.asarray(response(nodes)))
    s = fit_ls(design)
    s.meta.update(seed=seed, n_nodes=Q)
    return s, design


@dataclass(frozen=True)
class L2Estimate:
    value: float
    stderr: float
    n_samples: int


def l2_piz_error(f: Callable[[np.ndarray], np.ndarray], s: GpcSurrogate, n_mc: int = 1000,
                 seed: int = 0) -> L2Estimate:
    """Monte Carlo ``sum_i ||f_i - s_i||^2`` in ``L^2`` of the uniform prior."""
    if n_mc < 100:
        raise ValueError("use at least 100 Monte Carlo samples")
    z = s.box.sample(n_mc, np.random.default_rng(seed))
    sq = np.sum((np.asarray(f(z)).reshape(n_mc, -1) - s(z)) ** 2, axis=1)
    return L2Estimate(float(sq.mean()), float(sq.std(ddof=1) / np.sqrt(n_mc)), n_mc)


def save_surrogate(path, s: GpcSurrogate) -> None:
    meta = {"n_z": s.index_set.n_z, "N": s.index_set.degree, "P": s.index_set.size, "n_d": s.n_d,
            "box_lower": " ".join(repr(float(v)) for v in s.box.lower),
            "box_upper": " ".join(repr(float(v)) for v in s.box.upper)}
    meta.update({k: v for k, v in s.meta.items() if k not in meta})
    with open(path, "w", newline="") as fh:
        for k, v in meta.items():
            fh.write(f"# {k}={v}\n")
        w = csv.writer(fh)
        for row in s.coef:
            w.writerow([repr(float(v)) for v in row])


def load_surrogate(path) -> GpcSurrogate:
    meta, rows = {}, []
    with open(path) as fh:
        for ln in fh:
            if ln.startswith("#"):
                k, _, v = ln[1:].strip().partition("=")
                meta[k.strip()] = v.strip()
            elif ln.strip():
                rows.append([float(x) for x in ln.split(",")])
    n_z, N = int(meta.pop("n_z")), int(meta.pop("N"))
    box = Box(np.array(meta.pop("box_lower").split(), float), np.array(meta.pop("box_upper").split(), float))
    coef = np.array(rows)
    if coef.shape != (int(meta.pop("P")), int(meta.pop("n_d"))):
        raise ValueError("coefficient block does not match the header")
    return GpcSurrogate(multi_indices(n_z, N), coef, box, meta)
