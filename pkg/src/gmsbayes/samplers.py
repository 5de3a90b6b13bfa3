"""Random-walk Metropolis-Hastings, conjugate Gibbs and the joint Metropolis-within-Gibbs scheme.

Every sampler derives three independent streams from its seed, one each for
the linear block ``eta``, the location block ``z`` and the precision
``gamma``, so that switching a block off leaves the other streams untouched.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable, Dict, Sequence

import numba
import numpy as np

from .errors import NumericalFailure
from .inference import HierarchicalPrior, JointModel, LinearForwardMap, histogram_mode

RESYNC_EVERY = 50


def _streams(seed: int):
    eta_ss, z_ss, gamma_ss = np.random.SeedSequence(seed).spawn(3)
    return np.random.default_rng(eta_ss), np.random.default_rng(z_ss), np.random.default_rng(gamma_ss)


@dataclass
class Chain:
    samples: Dict[str, np.ndarray]
    accepted: Dict[str, int]
    proposed: Dict[str, int]
    seed: int
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(next(iter(self.samples.values())))

    def acceptance_rate(self, block: str) -> float:
        p = self.proposed.get(block, 0)
        return self.accepted.get(block, 0) / p if p else float("nan")

    def retained(self, block: str, burn_in_fraction: float) -> np.ndarray:
        start = int(np.floor(burn_in_fraction * len(self)))
        return self.samples[block][start:]

    def to_csv(self, path, burn_in_fraction: float = 0.0) -> None:
        start = int(np.floor(burn_in_fraction * len(self)))
        names = list(self.samples)
        header = ["iteration"]
        for n in names:
            dim = self.samples[n].shape[1]
            header += [n] if dim == 1 else [f"{n}_{j}" for j in range(dim)]
        with open(path, "w", newline="") as fh:
            fh.write(f"# seed={self.seed}\n# length={len(self)}\n# burn_in={start}\n")
            for k, v in self.meta.items():
                fh.write(f"# {k}={v}\n")
            w = csv.writer(fh)
            w.writerow(header)
            block = np.hstack([self.samples[n][start:] for n in names])
            for it, row in zip(range(start, len(self)), block):
                w.writerow([it] + [repr(float(v)) for v in row])


def read_chain_csv(path):
    """Return ``(header, iterations, values, meta)`` of a chain file."""
    meta = {}
    with open(path) as fh:
        lines = fh.read().splitlines()
    body = [ln for ln in lines if not ln.startswith("#")]
    for ln in lines:
        if ln.startswith("#"):
            k, _, v = ln[1:].strip().partition("=")
            meta[k.strip()] = v.strip()
    header = body[0].split(",")
    arr = np.array([[float(x) for x in ln.split(",")] for ln in body[1:] if ln.strip()]).reshape(-1, len(header))
    return header[1:], arr[:, 0].astype(int), arr[:, 1:], meta


@dataclass
class Summary:
    mean: Dict[str, np.ndarray]
    variance: Dict[str, np.ndarray]
    mpm: Dict[str, np.ndarray]
    histograms: Dict[str, list]
    acceptance: Dict[str, float]
    n_retained: int


def summarize(chain: Chain, burn_in_fraction: float = 0.0, bins: int = 64) -> Summary:
    if not 0 <= burn_in_fraction < 1:
        raise ValueError("burn-in fraction must lie in [0, 1)")
    mean, var, mpm, hist = {}, {}, {}, {}
    n = 0
    for name in chain.samples:
        x = chain.retained(name, burn_in_fraction)
        n = len(x)
        if n == 0:
            raise ValueError("no samples left after burn-in")
        mean[name] = x.mean(axis=0)
        var[name] = x.var(axis=0)
        mpm[name] = histogram_mode(x, bins)
        hist[name] = [np.histogram(x[:, j], bins=bins) for j in range(x.shape[1])]
    acc = {b: chain.acceptance_rate(b) for b in chain.proposed}
    return Summary(mean, var, mpm, hist, acc, n)


@dataclass(frozen=True)
class RandomWalkProposal:
    """Uniform window ``z + U(-eps, eps)`` per component."""

    eps: np.ndarray

    def __post_init__(self):
        e = np.atleast_1d(np.asarray(self.eps, dtype=float))
        if np.any(e <= 0):
            raise ValueError("random-walk scale must be positive")
        object.__setattr__(self, "eps", e)

    def draw(self, z, rng: np.random.Generator):
        return z + rng.uniform(-1.0, 1.0, size=z.shape) * self.eps


def mh_random_walk(logpost: Callable[[np.ndarray], float], init, eps, n_steps: int, seed: int = 0) -> Chain:
    """Random-walk MH with a symmetric uniform window; acceptance in log space."""
    z = np.array(init, dtype=float).ravel()
    lp = float(logpost(z))
    if not np.isfinite(lp):
        raise ValueError("log posterior is not finite at the initial state")
    if n_steps < 1:
        raise ValueError("need at least one step")
    prop = RandomWalkProposal(np.broadcast_to(eps, z.shape))
    _, rng, _ = _streams(seed)
    out = np.empty((n_steps, z.size))
    acc = 0
    for j in range(n_steps):
        cand = prop.draw(z, rng)
        u = rng.random()
        lc = float(logpost(cand))
        if np.log(u) < lc - lp:
            z, lp = cand, lc
            acc += 1
        out[j] = z
    return Chain({"z": out}, {"z": acc}, {"z": n_steps}, seed, {"eps": float(prop.eps[0])})


@numba.njit(cache=True)
def _gibbs_sweep(eta, r, Ht, hsq, W, gamma, s2, normals):
    m = eta.size
    n = r.size
    for i in range(m):
        old = eta[i]
        dot = 0.0
        for k in range(n):
            r[k] += Ht[i, k] * old
            dot += Ht[i, k] * r[k]
        off = 0.0
        for j in range(m):
            if j != i:
                off += W[i, j] * eta[j]
        prec = hsq[i] / s2 + gamma * W[i, i]
        if not prec > 0.0:
            return i
        new = (dot / s2 - gamma * off) / prec + normals[i] / np.sqrt(prec)
        eta[i] = new
        for k in range(n):
            r[k] -= Ht[i, k] * new
    return -1


class _EtaUpdater:
    """Component-wise conjugate sweep with an incrementally updated residual."""

    def __init__(self, H, W, sigma: float):
        self.H = np.ascontiguousarray(H, dtype=float)
        self.Ht = np.ascontiguousarray(self.H.T)
        self.hsq = np.sum(self.H ** 2, axis=0)
        self.W = np.ascontiguousarray(W, dtype=float)
        self.s2 = float(sigma) ** 2

    def sweep(self, eta, target, gamma: float, normals, r=None):
        """One sweep for data ``target`` (data minus fixed contributions); returns the residual."""
        if r is None:
            r = target - self.H @ eta
        bad = _gibbs_sweep(eta, r, self.Ht, self.hsq, self.W, float(gamma), self.s2, normals)
        if bad >= 0:
            raise NumericalFailure(f"component {bad} has non-positive conditional precision")
        return r


def gibbs_hierarchical(fmap: LinearForwardMap, prior: HierarchicalPrior, d, sigma: float, init: dict,
                       n_steps: int, seed: int = 0, fixed_gamma: bool = False) -> Chain:
    """Gibbs over ``(eta, gamma)``: a component sweep of ``eta`` then a Gamma draw."""
    d = np.asarray(d, dtype=float)
    eta = np.array(init["eta"], dtype=float)
    gamma = float(init["gamma"])
    if eta.shape != (prior.dim,) or fmap.H.shape != (d.size, prior.dim):
        raise ValueError("initial state, map and prior dimensions disagree")
    eta_rng, _, gamma_rng = _streams(seed)
    upd = _EtaUpdater(fmap.H, prior.W, sigma)
    target = d - fmap.rest
    out_eta = np.empty((n_steps, eta.size))
    out_gamma = np.empty((n_steps, 1))
    r = None
    shape = prior.alpha + 0.5 * eta.size
    for j in range(n_steps):
        if j % RESYNC_EVERY == 0:
            r = None
        r = upd.sweep(eta, target, gamma, eta_rng.standard_normal(eta.size), r)
        if not fixed_gamma:
            q = max(float(eta @ prior.W @ eta), 0.0)
            gamma = gamma_rng.gamma(shape, 1.0 / (prior.beta + 0.5 * q))
        out_eta[j] = eta
        out_gamma[j] = gamma
    return Chain({"eta": out_eta, "gamma": out_gamma}, {"eta": n_steps, "gamma": n_steps},
                 {"eta": n_steps, "gamma": n_steps}, seed)


def joint_metropolis_within_gibbs(joint: JointModel, prior: HierarchicalPrior, d, sigma: float, init: dict,
                                  eps_z, n_steps: int, seed: int = 0, fixed: Sequence[str] = ()) -> Chain:
    """Per iteration: conjugate ``eta`` sweep, random-walk MH on ``z``, Gamma draw for ``gamma``.

    Blocks named in ``fixed`` keep their initial value.
    """
    d = np.asarray(d, dtype=float)
    eta = np.array(init["eta"], dtype=float)
    z = np.array(init["z"], dtype=float).ravel()
    gamma = float(init["gamma"])
    eta_rng, z_rng, gamma_rng = _streams(seed)
    prop = RandomWalkProposal(np.broadcast_to(eps_z, z.shape))
    upd = _EtaUpdater(joint.H2, prior.W, sigma)
    s2 = float(sigma) ** 2
    g_z = joint.predict(np.zeros_like(eta), z)
    out = {"eta": np.empty((n_steps, eta.size)), "z": np.empty((n_steps, z.size)), "gamma": np.empty((n_steps, 1))}
    acc_z = 0
    shape = prior.alpha + 0.5 * eta.size
    for j in range(n_steps):
        if "eta" not in fixed:
            upd.sweep(eta, d - g_z, gamma, eta_rng.standard_normal(eta.size))
        if "z" not in fixed:
            base = d - joint.H2 @ eta
            cand = prop.draw(z, z_rng)
            u = z_rng.random()
            if joint.box.contains(cand)[0]:
                g_c = joint.predict(np.zeros_like(eta), cand)
                r_old = base - g_z
                r_new = base - g_c
                if np.log(u) < -(r_new @ r_new - r_old @ r_old) / (2 * s2):
                    z, g_z = cand, g_c
                    acc_z += 1
        if "gamma" not in fixed:
            q = max(float(eta @ prior.W @ eta), 0.0)
            gamma = gamma_rng.gamma(shape, 1.0 / (prior.beta + 0.5 * q))
        out["eta"][j] = eta
        out["z"][j] = z
        out["gamma"][j] = gamma
    n_z = 0 if "z" in fixed else n_steps
    n_g = 0 if "eta" in fixed else n_steps
    return Chain(out, {"eta": n_g, "z": acc_z, "gamma": n_steps}, {"eta": n_g, "z": n_z, "gamma": n_steps},
                 seed, {"eps": float(prop.eps[0])})
