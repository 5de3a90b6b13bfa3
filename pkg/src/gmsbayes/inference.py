"""Likelihoods, hierarchical MRF priors and linear parameter-to-observation maps."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .errors import NumericalFailure, RankDeficientSensitivity
from .mesh_fem import SensorSet
from .surrogate import Box


@dataclass
class ObservationData:
    d: np.ndarray
    sigma: float
    sensors: Optional[SensorSet] = None

    def __post_init__(self):
        self.d = np.asarray(self.d, dtype=float).ravel()
        if not self.sigma > 0:
            raise ValueError("noise standard deviation must be positive")
        if self.sensors is not None and self.sensors.n_d != self.d.size:
            raise ValueError(f"{self.d.size} observations for {self.sensors.n_d} sensor readings")

    @property
    def n_d(self) -> int:
        return self.d.size

    def to_csv(self, path) -> None:
        if self.sensors is None:
            raise ValueError("sensor layout required for export")
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["sensor_x", "sensor_y", "time", "value"])
            for (x, y, t), v in zip(self.sensors.rows(), self.d):
                w.writerow([repr(float(x)), repr(float(y)), repr(float(t)), repr(float(v))])

    @classmethod
    def from_csv(cls, path, sigma: float) -> "ObservationData":
        arr = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        times = np.unique(arr[:, 2])
        pts = arr[arr[:, 2] == times[0], :2]
        sensors = SensorSet(pts, times)
        if not np.allclose(sensors.rows(), arr[:, :3]):
            raise ValueError("observation file is not in time-major, sensor-minor order")
        return cls(arr[:, 3], sigma, sensors)


def gaussian_loglik(d, g, sigma: float):
    """``-(n_d/2) log(2 pi sigma^2) - ||d - g||^2 / (2 sigma^2)``; ``g`` may be a batch."""
    d = np.asarray(d, dtype=float)
    g = np.asarray(g, dtype=float)
    if g.shape[-1] != d.shape[-1]:
        raise ValueError(f"prediction length {g.shape[-1]} != data length {d.shape[-1]}")
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    n_d = d.shape[-1]
    return -0.5 * n_d * np.log(2 * np.pi * sigma ** 2) - np.sum((d - g) ** 2, axis=-1) / (2 * sigma ** 2)


@dataclass
class LinearForwardMap:
    """Affine observation map ``z -> H z + rest``."""

    H: np.ndarray
    rest: np.ndarray

    def __post_init__(self):
        self.H = np.asarray(self.H, dtype=float)
        self.rest = np.asarray(self.rest, dtype=float).ravel()
        if self.rest.size != self.H.shape[0]:
            raise ValueError("rest vector and sensitivity matrix disagree in length")

    def __call__(self, z):
        z = np.asarray(z, dtype=float)
        if z.ndim == 1:
            return self.H @ z + self.rest
        return z @ self.H.T + self.rest

    def compose(self, B) -> "LinearForwardMap":
        """Map of ``eta`` when ``z = B eta``."""
        return LinearForwardMap(self.H @ np.asarray(B, dtype=float), self.rest)


def build_sensitivity(respond: Callable[[np.ndarray], np.ndarray], n_inputs: int, rest=None,
                      chunk: int = 256, check_rank: bool = True, rtol: Optional[float] = None) -> LinearForwardMap:
    """Columns are responses to unit inputs.

    ``respond(E)`` maps an ``(n_inputs, b)`` block of unknown-input
    coefficients to ``(n_d, b)`` observations with every known input switched
    off; ``rest`` is the response to the known inputs alone.
    """
    cols = []
    eye = np.eye(n_inputs)
    for s in range(0, n_inputs, chunk):
        cols.append(np.asarray(respond(eye[:, s:s + chunk])).reshape(-1, min(chunk, n_inputs - s)))
    H = np.hstack(cols)
    rest = np.zeros(H.shape[0]) if rest is None else rest
    if check_rank:
        sv = np.linalg.svd(H, compute_uv=False)
        tol = sv[0] * max(H.shape) * np.finfo(float).eps if rtol is None else sv[0] * rtol
        rank = int(np.sum(sv > tol))
        if rank < n_inputs:
            raise RankDeficientSensitivity(f"sensitivity matrix has rank {rank} < {n_inputs} "
                                           f"(condition {sv[0] / max(sv[-1], 1e-300):.3e})")
    return LinearForwardMap(H, rest)


@dataclass
class HierarchicalPrior:
    """``pi(x | gamma) ~ gamma^(m/2) exp(-gamma/2 x^T W x)``, ``gamma ~ Gamma(alpha, beta)`` (rate)."""

    W: np.ndarray
    alpha: float = 1e-3
    beta: float = 1e-3

    def __post_init__(self):
        W = np.asarray(self.W.toarray() if hasattr(self.W, "toarray") else self.W, dtype=float)
        if W.ndim != 2 or W.shape[0] != W.shape[1] or not np.allclose(W, W.T, atol=1e-10 * max(1.0, np.abs(W).max())):
            raise ValueError("MRF precision must be a symmetric square matrix")
        if not (self.alpha > 0 and self.beta > 0):
            raise ValueError("hyperprior shape and rate must be positive")
        self.W = W

    @property
    def dim(self) -> int:
        return self.W.shape[0]


def log_conditional_eta(eta, d, gamma: float, fmap: LinearForwardMap, prior: HierarchicalPrior, sigma: float) -> float:
    """Log of ``pi(eta | d, gamma)`` up to an additive constant."""
    eta = np.asarray(eta, dtype=float)
    if eta.shape != (prior.dim,) or fmap.H.shape[1] != prior.dim:
        raise ValueError("eta, map and prior dimensions disagree")
    r = np.asarray(d) - fmap(eta)
    return float(-r @ r / (2 * sigma ** 2) - 0.5 * gamma * eta @ prior.W @ eta)


def eta_posterior(d, gamma: float, fmap: LinearForwardMap, W, sigma: float):
    """Mean and covariance of the Gaussian ``pi(eta | d, gamma)``."""
    H = fmap.H
    prec = H.T @ H / sigma ** 2 + gamma * np.asarray(W)
    L = np.linalg.cholesky(prec)
    cov = np.linalg.inv(prec)
    mean = np.linalg.solve(L.T, np.linalg.solve(L, H.T @ (np.asarray(d) - fmap.rest) / sigma ** 2))
    return mean, 0.5 * (cov + cov.T)


def gamma_conditional_params(x, W, alpha: float, beta: float):
    """Shape and rate of the conjugate ``gamma`` conditional."""
    x = np.asarray(x, dtype=float)
    q = float(x @ (W @ x))
    if q < -1e-12 * max(1.0, float(x @ x)):
        raise NumericalFailure(f"negative MRF quadratic form {q:.3e}")
    return alpha + 0.5 * x.size, beta + 0.5 * max(q, 0.0)


def gibbs_gaussian_component(i: int, eta, d, gamma: float, H, W, rest, sigma: float):
    """Mean and standard deviation of ``eta_i`` given the other components.

    Written term by term in the factor-of-two form: the data residual
    excludes component ``i`` and ``varrho`` sums both off-diagonal halves of
    ``W``.
    """
    eta = np.asarray(eta, dtype=float)
    H = np.asarray(H)
    W = np.asarray(W)
    s2 = sigma ** 2
    others = np.arange(eta.size) != i
    h2 = np.sum(H[:, i] ** 2) / s2
    denom = h2 + gamma * W[i, i]
    if not denom > 0:
        raise NumericalFailure(f"component {i} is not identified (zero conditional precision)")
    varrho = W[others, i] @ eta[others] + W[i, others] @ eta[others]
    rho = np.asarray(d) - np.asarray(rest) - H[:, others] @ eta[others]
    mu = (2 * np.sum(rho * H[:, i]) / s2 - gamma * varrho) / (2 * denom)
    return float(mu), float(denom ** -0.5)


@dataclass
class JointModel:
    """``G(eta, z) = H2 @ eta + surrogate(z)``."""

    H2: np.ndarray
    surrogate: Callable[[np.ndarray], np.ndarray]
    box: Box

    def predict(self, eta, z) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        if not self.box.contains(z)[0]:
            raise ValueError(f"source location {z} outside the prior box")
        g = np.asarray(self.surrogate(z), dtype=float)
        if g.shape[-1] != self.H2.shape[0]:
            raise ValueError("linear and nonlinear blocks disagree in output length")
        return self.H2 @ np.asarray(eta, dtype=float) + g


def joint_logpost(eta, z, gamma: float, joint: JointModel, d, sigma: float, prior: HierarchicalPrior) -> float:
    """Log joint posterior density of ``(eta, z, gamma)`` up to a constant."""
    eta = np.asarray(eta, dtype=float)
    if not gamma > 0:
        return -np.inf
    g = joint.predict(eta, z)
    n0 = eta.size
    return float(gaussian_loglik(d, g, sigma)
                 + 0.5 * n0 * np.log(gamma) - 0.5 * gamma * eta @ prior.W @ eta
                 + (prior.alpha - 1) * np.log(gamma) - prior.beta * gamma)


def histogram_mode(samples, bins: int = 64) -> np.ndarray:
    """Marginal posterior mode per column: centre of the fullest histogram bin."""
    x = np.asarray(samples, dtype=float)
    x = x.reshape(len(x), -1)
    out = np.empty(x.shape[1])
    for j in range(x.shape[1]):
        counts, edges = np.histogram(x[:, j], bins=bins)
        k = int(np.argmax(counts))
        out[j] = 0.5 * (edges[k] + edges[k + 1])
    return out


def hierarchical_mode(fmap: LinearForwardMap, prior: HierarchicalPrior, d, sigma: float, gamma0: float = 1.0,
                      n_iter: int = 200, rtol: float = 1e-10):
    """Joint mode of ``(eta, gamma)`` by alternating the two conditional modes."""
    H = fmap.H
    r = np.asarray(d, dtype=float) - fmap.rest
    HtH = H.T @ H / sigma ** 2
    Htd = H.T @ r / sigma ** 2
    gamma = float(gamma0)
    shape = prior.alpha + 0.5 * prior.dim
    eta = np.zeros(prior.dim)
    for _ in range(n_iter):
        eta = np.linalg.solve(HtH + gamma * prior.W, Htd)
        q = max(float(eta @ prior.W @ eta), 0.0)
        new = max(shape - 1.0, 1e-12) / (prior.beta + 0.5 * q)
        if abs(new - gamma) <= rtol * gamma:
            gamma = new
            break
        gamma = new
    return eta, gamma


def joint_profile_start(joint: JointModel, prior: HierarchicalPrior, d, sigma: float, candidates,
                        gamma0: float = 1.0):
    """Best ``(eta, z, gamma)`` over candidate locations, each paired with its conditional ``(eta, gamma)`` mode."""
    best = None
    for z in np.atleast_2d(np.asarray(candidates, dtype=float)):
        fmap = LinearForwardMap(joint.H2, np.asarray(joint.surrogate(z), dtype=float).ravel())
        eta, gamma = hierarchical_mode(fmap, prior, d, sigma, gamma0)
        lp = joint_logpost(eta, z, gamma, joint, d, sigma, prior)
        if best is None or lp > best[0]:
            best = (lp, eta, z.copy(), gamma)
    if best is None or not np.isfinite(best[0]):
        raise NumericalFailure("no candidate location gives a finite joint posterior")
    return best[1], best[2], best[3]
