"""Posterior discrepancy estimates and field error norms."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .errors import NumericalFailure
from .mesh_fem import StructuredGrid, mass_matrix

N_BATCHES = 20
MIN_SAMPLES = 100


@dataclass(frozen=True)
class KlEstimate:
    value: float
    stderr: float
    n_samples: int

    def __post_init__(self):
        if self.n_samples < MIN_SAMPLES:
            raise ValueError(f"KL estimate needs at least {MIN_SAMPLES} samples, got {self.n_samples}")


def batch_means_stderr(x, n_batches: int = N_BATCHES) -> np.ndarray:
    """Standard error of the mean of a correlated series via nonoverlapping batch means."""
    x = np.asarray(x, dtype=float)
    n = len(x) // n_batches
    if n < 1:
        raise ValueError("fewer samples than batches")
    means = x[: n * n_batches].reshape((n_batches, n) + x.shape[1:]).mean(axis=1)
    return means.std(axis=0, ddof=1) / np.sqrt(n_batches)


def kl_from_log_ratios(log_ratio, n_batches: int = N_BATCHES) -> KlEstimate:
    """KL of the sampling posterior from the reference one.

    ``log_ratio[j] = log L(x_j) - log L_approx(x_j)`` over samples of the
    approximate posterior.  The estimate is ``-mean(log_ratio) +
    log mean exp(log_ratio)``; its standard error comes from batch means
    through the delta method.
    """
    r = np.asarray(log_ratio, dtype=float).ravel()
    n = r.size
    if n < MIN_SAMPLES:
        raise ValueError(f"KL estimate needs at least {MIN_SAMPLES} samples, got {n}")
    if not np.all(np.isfinite(r)):
        raise NumericalFailure("log-likelihood ratio is not finite")
    shift = r.max()
    w = np.exp(r - shift)
    mean_w = w.mean()
    lme = shift + np.log(mean_w)
    if not np.isfinite(lme):
        raise NumericalFailure("log-mean-exp overflowed")
    value = float(lme - r.mean())
    # linearised contribution of each sample: -r + w / mean(w)
    g = -r + w / mean_w
    se = float(batch_means_stderr(g, n_batches)) if n >= n_batches * 2 else float(g.std(ddof=1) / np.sqrt(n))
    return KlEstimate(value, se, n)


def kl_posterior_estimate(samples, loglik_full: Callable, loglik_reduced: Callable,
                          n_batches: int = N_BATCHES) -> KlEstimate:
    """KL from samples of the reduced posterior.

    The log-likelihoods take the whole sample array and return one value per
    sample; a scalar function is applied row by row instead.
    """
    x = np.asarray(samples, dtype=float)

    def _eval(fn):
        try:
            out = np.asarray(fn(x), dtype=float)
            if out.shape == (len(x),):
                return out
        except (ValueError, TypeError):
            pass
        return np.array([float(fn(row)) for row in x])

    return kl_from_log_ratios(_eval(loglik_full) - _eval(loglik_reduced), n_batches)


def relative_l2_error(true_field, est_field, grid: StructuredGrid, mass=None) -> float:
    """``||est - true|| / ||true||`` in the mass-matrix norm of ``grid``."""
    u = np.asarray(true_field, dtype=float)
    e = np.asarray(est_field, dtype=float) - u
    if u.shape != (grid.n_nodes,) or e.shape != u.shape:
        raise ValueError("fields must be nodal vectors of the grid")
    M = mass_matrix(grid) if mass is None else mass
    den = float(u @ (M @ u))
    if den <= 0:
        raise ValueError("true field has zero norm")
    return float(np.sqrt(max(float(e @ (M @ e)), 0.0) / den))


@dataclass(frozen=True)
class SweepRow:
    sweep_value: float
    e_l2: float
    e_l2_stderr: float
    d_kl: float
    d_kl_stderr: float


SWEEP_HEADER = ["sweep_value", "e_l2", "e_l2_stderr", "d_kl", "d_kl_stderr"]


def write_sweep_csv(path, rows: Iterable[SweepRow]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SWEEP_HEADER)
        for r in rows:
            w.writerow([r.sweep_value, repr(r.e_l2), repr(r.e_l2_stderr), repr(r.d_kl), repr(r.d_kl_stderr)])


def read_sweep_csv(path) -> list:
    with open(path) as fh:
        rd = csv.reader(fh)
        if next(rd) != SWEEP_HEADER:
            raise ValueError("not a sweep table")
        return [SweepRow(*map(float, row)) for row in rd if row]


def count_decreases(values: Sequence[float]) -> int:
    v = np.asarray(values, dtype=float)
    return int(np.sum(np.diff(v) < 0))


def central_interval(x, mass: float = 0.95) -> np.ndarray:
    """Equal-tailed interval per column."""
    x = np.asarray(x, dtype=float).reshape(len(x), -1)
    lo = (1 - mass) / 2
    return np.quantile(x, [lo, 1 - lo], axis=0).T
