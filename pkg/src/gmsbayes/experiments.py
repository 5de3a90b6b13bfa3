"""End-to-end inversion pipelines: synthetic data, offline reduction, online sampling.

Three experiment kinds share one pipeline shape:

``initial``
    unknown initial state on a coarse bilinear lattice, fixed Gaussian source,
    insulated boundary; Gibbs sampling of KLE coefficients and the MRF
    precision.
``source``
    unknown source location, zero initial state; random-walk MH against a
    Legendre surrogate of the reduced model.
``joint``
    unknown boundary flux on the left edge plus unknown source location,
    zero Dirichlet data on the right and top edges; conjugate sweeps for the
    flux coefficients, MH for the location.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional

import numpy as np
import scipy.sparse as sp

from . import diagnostics as dg
from .config import ExperimentConfig
from .errors import ConfigError
from .gmsfem import (MultiscaleBasis, ReducedOrderSolver, build_basis, build_coarse_grid, load_basis,
                     save_basis)
from .inference import (HierarchicalPrior, JointModel, LinearForwardMap, ObservationData, build_sensitivity,
                        gaussian_loglik, hierarchical_mode, joint_profile_start)
from .mesh_fem import (BoundarySpec, FullOrderSolver, SensorSet, StructuredGrid, TimeGrid, apply_dirichlet,
                       assemble, assemble_load, build_grid, dirichlet, load_permeability, neumann,
                       uniform_sensors)
from .permeability import synthetic_permeability
from .random_field import CovarianceKernel, covariance_matrix, kle_truncate, mrf_precision, reduce_quadratic
from .samplers import (Chain, Summary, gibbs_hierarchical, joint_metropolis_within_gibbs, mh_random_walk,
                       read_chain_csv, summarize)
from .surrogate import Box, GpcSurrogate, fit_surrogate, l2_piz_error, load_surrogate, save_surrogate

log = logging.getLogger(__name__)

CONTOUR_SIZE = 50
PROFILE_SIZE = 20
CORNERS = {"00": (0, 0), "10": (1, 0), "11": (1, 1), "01": (0, 1)}


# ---------------------------------------------------------------- truths

def initial_truth(x, y):
    return np.cos(np.pi * x) * np.cos(np.pi * y) + 1.5


def initial_source(x, y, t=0.0):
    return 10.0 * np.exp(-((x - 0.2) ** 2 + (y - 0.4) ** 2) / (2 * 0.2 ** 2))


def initial_state_on_lattice(cfg, grid) -> np.ndarray:
    """True initial state as represented by the bilinear parameter lattice, at ``grid`` nodes."""
    lat = parameter_lattice(cfg)
    return lat.interpolation_matrix(grid.nodes) @ initial_truth(lat.nodes[:, 0], lat.nodes[:, 1])


def point_source(z, strength: float, width: float) -> Callable:
    """Gaussian bump centred at ``z``; ``z`` may be a batch ``(Q, 2)``."""
    z = np.asarray(z, dtype=float)
    c = strength / (2 * np.pi * width ** 2)

    def f(x, y, t=0.0):
        if z.ndim == 1:
            return c * np.exp(-((x - z[0]) ** 2 + (y - z[1]) ** 2) / (2 * width ** 2))
        xx, yy = np.asarray(x)[:, None], np.asarray(y)[:, None]
        return c * np.exp(-((xx - z[:, 0]) ** 2 + (yy - z[:, 1]) ** 2) / (2 * width ** 2))

    return f


def flux_truth(y, t):
    return np.sin(np.pi * y) * np.sin(10 * np.pi * t) + 5.0


def joint_boundary(flux=None) -> BoundarySpec:
    return BoundarySpec(left=neumann(flux), right=dirichlet(), bottom=neumann(), top=dirichlet())


# ---------------------------------------------------------------- problem setup

@dataclass
class Problem:
    cfg: ExperimentConfig
    grid: StructuredGrid
    k: np.ndarray
    B: sp.csr_matrix
    K: sp.csr_matrix
    bc: BoundarySpec
    sensors: SensorSet
    time: TimeGrid

    @property
    def constrained(self) -> np.ndarray:
        return self.bc.dirichlet_nodes(self.grid)

    @property
    def obs_levels(self) -> np.ndarray:
        return self.sensors.levels(self.time)

    @property
    def sensor_matrix(self):
        return self.grid.interpolation_matrix(self.sensors.points)

    def observe_batch(self, values_at_levels) -> np.ndarray:
        """Stack sensor readings of ``(n_levels, n_nodes[, batch])`` states, time-major."""
        P = self.sensor_matrix
        return np.concatenate([P @ v for v in values_at_levels], axis=0)


def permeability(cfg: ExperimentConfig, grid: StructuredGrid) -> np.ndarray:
    m = cfg.mesh_fem
    if m.permeability_file is not None:
        return load_permeability(cfg.resolve(m.permeability_file), grid)
    return synthetic_permeability(grid, seed=m.permeability_seed, contrast=m.contrast)


def setup_problem(cfg: ExperimentConfig, dt: Optional[float] = None) -> Problem:
    m = cfg.mesh_fem
    grid = build_grid(*m.fine)
    k = permeability(cfg, grid)
    B, K = assemble(grid, k)
    bc = joint_boundary() if cfg.kind == "joint" else BoundarySpec()
    B, K = apply_dirichlet(B, K, bc.dirichlet_nodes(grid))
    sensors = uniform_sensors(*m.sensors, m.obs_times)
    return Problem(cfg, grid, k, B, K, bc, sensors, TimeGrid(m.dt if dt is None else dt, m.T))


# ---------------------------------------------------------------- data generation

@dataclass
class SyntheticData:
    d: np.ndarray
    clean: np.ndarray
    sigma: float
    sensors: SensorSet
    seed: int

    def observations(self, sigma: Optional[float] = None) -> ObservationData:
        return ObservationData(self.d, self.sigma if sigma is None else sigma, self.sensors)

    def with_noise(self, sigma: float) -> "SyntheticData":
        """Same standard-normal draws, rescaled to another noise level."""
        z = np.random.default_rng(self.seed).standard_normal(self.clean.size)
        return SyntheticData(self.clean + sigma * z, self.clean, sigma, self.sensors, self.seed)

    def noise_to_signal(self) -> float:
        return float(self.sigma / np.abs(self.clean).max())


def clean_observations(cfg: ExperimentConfig) -> np.ndarray:
    """Noise-free readings from the full-order model at the data time step."""
    p = setup_problem(cfg, dt=cfg.mesh_fem.data_dt)
    g, inf = p.grid, cfg.inference
    solver = FullOrderSolver(p.B, p.K, p.time.dt)
    keep = np.concatenate([[0], p.obs_levels])
    if cfg.kind == "initial":
        u0 = initial_state_on_lattice(cfg, g)
        load = assemble_load(g, initial_source)
    elif cfg.kind == "source":
        u0 = np.zeros(g.n_nodes)
        load = assemble_load(g, point_source(inf.truth_z, inf.source_strength, inf.source_width))
    else:
        u0 = np.zeros(g.n_nodes)
        f = point_source(inf.truth_z, inf.source_strength, inf.source_width)
        bc = joint_boundary(flux_truth)
        load = lambda t: assemble_load(g, f, bc, t)  # noqa: E731
    traj = solver.solve(load, u0, p.time.levels, keep)
    return p.observe_batch([traj.at_level(int(n)) for n in p.obs_levels])


def generate_data(cfg: ExperimentConfig, out: Optional[str] = None) -> SyntheticData:
    cfg.validate()
    clean = clean_observations(cfg)
    sigma = cfg.inference.sigma
    seed = cfg.inference.data_seed
    noise = np.random.default_rng(seed).standard_normal(clean.size)
    sensors = uniform_sensors(*cfg.mesh_fem.sensors, cfg.mesh_fem.obs_times)
    data = SyntheticData(clean + sigma * noise, clean, sigma, sensors, seed)
    if out is not None:
        os.makedirs(out, exist_ok=True)
        if sigma > 0:
            data.observations().to_csv(os.path.join(out, "observations.csv"))
        else:
            ObservationData(data.d, 1.0, sensors).to_csv(os.path.join(out, "observations.csv"))
    return data


def read_data(cfg: ExperimentConfig, path: str) -> SyntheticData:
    obs = ObservationData.from_csv(path, max(cfg.inference.sigma, 1e-300))
    expected = uniform_sensors(*cfg.mesh_fem.sensors, cfg.mesh_fem.obs_times)
    if obs.n_d != expected.n_d:
        raise ConfigError(f"observation file has {obs.n_d} values, configuration expects {expected.n_d}")
    return SyntheticData(obs.d, obs.d.copy(), cfg.inference.sigma, expected, cfg.inference.data_seed)


# ---------------------------------------------------------------- offline stage

def coarse_grid(p: Problem):
    return build_coarse_grid(p.grid, *p.cfg.gmsfem.coarse)


def multiscale_basis(p: Problem, n_modes: Optional[int] = None, cache_dir: Optional[str] = None) -> MultiscaleBasis:
    M = p.cfg.gmsfem.n_modes if n_modes is None else n_modes
    coarse = coarse_grid(p)
    path = None if cache_dir is None else os.path.join(cache_dir, f"basis_M{M}.npz")
    if path is not None and os.path.exists(path):
        try:
            return load_basis(path, coarse, p.k)
        except ValueError:
            log.info("stale basis cache %s, rebuilding", path)
    basis = build_basis(coarse, p.k, M)
    if path is not None:
        os.makedirs(cache_dir, exist_ok=True)
        save_basis(path, basis, p.k)
    return basis


def reduced_solver(p: Problem, basis: MultiscaleBasis) -> ReducedOrderSolver:
    return ReducedOrderSolver(basis.R, p.B, p.K, p.time.dt, p.constrained)


def parameter_lattice(cfg: ExperimentConfig) -> StructuredGrid:
    rows, cols = cfg.random_field.lattice
    if cfg.kind == "joint":
        # space knots along x, time knots along y
        return build_grid(cols - 1, rows - 1, ((0.0, 1.0), (0.0, cfg.mesh_fem.T)))
    return build_grid(cols - 1, rows - 1)


def field_prior(cfg: ExperimentConfig):
    """KLE map ``B`` and the reduced MRF precision ``B^T W B``."""
    rf = cfg.random_field
    lat = parameter_lattice(cfg)
    pts = lat.nodes.copy()
    if cfg.kind == "joint":
        pts[:, 1] /= cfg.mesh_fem.T
    kernel = CovarianceKernel(rf.variance, rf.l1, rf.l2, rf.kernel)
    kle = kle_truncate(covariance_matrix(pts, kernel), rf.energy)
    W = mrf_precision(*rf.lattice)
    return kle, reduce_quadratic(W, kle.B)


def source_response_matrix(p: Problem, O: np.ndarray) -> np.ndarray:
    """``A`` with observations ``= A @ f(quadrature points)`` for a time-constant source."""
    mask = np.ones(p.grid.n_nodes)
    mask[p.constrained] = 0.0
    return (O * mask) @ p.grid.load_operator


def source_values(p: Problem, z) -> np.ndarray:
    inf = p.cfg.inference
    q = p.grid.quadrature_points
    return point_source(np.atleast_2d(z), inf.source_strength, inf.source_width)(q[:, 0], q[:, 1])


@dataclass
class SourceModel:
    """Linear-in-source observation map: ``G(z) = A @ f_z(quadrature points)``."""

    problem: Problem
    A: np.ndarray
    chunk: int = 512

    def __call__(self, z) -> np.ndarray:
        z = np.atleast_2d(np.asarray(z, dtype=float))
        out = np.empty((len(z), self.A.shape[0]))
        for s in range(0, len(z), self.chunk):
            out[s:s + self.chunk] = (self.A @ source_values(self.problem, z[s:s + self.chunk])).T
        return out


def flux_loads(p: Problem):
    """Edge load of each spatial hat on the left edge and the temporal hat weights."""
    lat = parameter_lattice(p.cfg)
    ys = lat.nodes[: lat.nx + 1, 0]
    ts = lat.nodes[:: lat.nx + 1, 1]
    s, op = p.grid.edge_quadrature("left")
    hats_y = _hat_matrix(ys, s)
    G = sp.csr_matrix(op @ hats_y)
    mask = np.ones(p.grid.n_nodes)
    mask[p.constrained] = 0.0
    G = sp.csr_matrix(sp.diags(mask) @ G)

    def load(t):
        w = _hat_matrix(ts, np.atleast_1d(t))[0]
        return sp.kron(sp.csr_matrix(w[None, :]), G, format="csr")

    return load


def _hat_matrix(knots, x) -> np.ndarray:
    """Piecewise-linear nodal basis on sorted ``knots`` evaluated at ``x``."""
    knots = np.asarray(knots, dtype=float)
    x = np.asarray(x, dtype=float)
    j = np.clip(np.searchsorted(knots, x, side="right") - 1, 0, len(knots) - 2)
    w = (x - knots[j]) / (knots[j + 1] - knots[j])
    H = np.zeros((len(x), len(knots)))
    H[np.arange(len(x)), j] = 1 - w
    H[np.arange(len(x)), j + 1] += w
    return H


@dataclass
class Offline:
    problem: Problem
    basis: MultiscaleBasis
    solver: ReducedOrderSolver
    parts: dict = field(default_factory=dict)


def offline_initial(p: Problem, basis: MultiscaleBasis, with_full: bool = True) -> Offline:
    red = reduced_solver(p, basis)
    lat = parameter_lattice(p.cfg)
    Xi = lat.interpolation_matrix(p.grid.nodes).toarray()
    F = assemble_load(p.grid, initial_source)
    lv = p.obs_levels

    def reduced_response(E):
        tr = red.solve(None, Xi @ E, p.time.levels, lv).reconstruct()
        return p.observe_batch(tr.values)

    rest_red = p.observe_batch(red.solve(F, np.zeros(p.grid.n_nodes), p.time.levels, lv).reconstruct().values)
    kle, Wr = field_prior(p.cfg)
    H_red = build_sensitivity(reduced_response, lat.n_nodes, rest_red, chunk=lat.n_nodes, check_rank=False)
    fmap = H_red.compose(kle.B)
    build_sensitivity(lambda E: fmap.H @ E, kle.n_terms, fmap.rest)  # rank check on the sampled map
    parts = dict(Xi=Xi, kle=kle, W=Wr, H_red=H_red, fmap=fmap, lattice=lat)
    if with_full:
        full = FullOrderSolver(p.B, p.K, p.time.dt)

        def full_response(E):
            return p.observe_batch(full.solve(None, Xi @ E, p.time.levels, lv).values)

        rest_full = p.observe_batch(full.solve(F, np.zeros(p.grid.n_nodes), p.time.levels, lv).values)
        parts["H_full"] = build_sensitivity(full_response, lat.n_nodes, rest_full, chunk=lat.n_nodes,
                                            check_rank=False)
        parts["full_solver"] = full
    return Offline(p, basis, red, parts)


def fit_source_surrogate(p: Problem, red: ReducedOrderSolver, degree: Optional[int] = None,
                         seed: Optional[int] = None):
    sc = p.cfg.surrogate
    A_red = source_response_matrix(p, red.observation_load_operator(p.sensor_matrix, p.obs_levels))
    reduced_model = SourceModel(p, A_red)
    box = Box(p.cfg.inference.box_lower, p.cfg.inference.box_upper)
    s, design = fit_surrogate(reduced_model, 2, sc.degree if degree is None else degree, box,
                              sc.oversampling, sc.seed if seed is None else seed)
    return s, design, reduced_model


def full_source_model(p: Problem) -> SourceModel:
    full = FullOrderSolver(p.B, p.K, p.time.dt)
    return SourceModel(p, source_response_matrix(p, full.observation_load_operator(p.sensor_matrix, p.obs_levels)))


def offline_source(p: Problem, basis: MultiscaleBasis, surrogate: Optional[GpcSurrogate] = None,
                   with_full: bool = True) -> Offline:
    red = reduced_solver(p, basis)
    parts = {}
    if surrogate is None:
        surrogate, design, reduced_model = fit_source_surrogate(p, red)
        parts.update(design=design, reduced_model=reduced_model)
    parts["surrogate"] = surrogate
    if with_full:
        parts["full_model"] = full_source_model(p)
    return Offline(p, basis, red, parts)


def offline_joint(p: Problem, basis: MultiscaleBasis, surrogate: Optional[GpcSurrogate] = None) -> Offline:
    off = offline_source(p, basis, surrogate, with_full=False)
    red = off.solver
    kle, Wr = field_prior(p.cfg)
    load = flux_loads(p)
    n_flux = parameter_lattice(p.cfg).n_nodes
    tr = red.solve(load, np.zeros((p.grid.n_nodes, n_flux)), p.time.levels, p.obs_levels).reconstruct()
    H2 = LinearForwardMap(p.observe_batch(tr.values), np.zeros(p.sensors.n_d))
    fmap = H2.compose(kle.B)
    build_sensitivity(lambda E: fmap.H @ E, kle.n_terms, fmap.rest)
    box = Box(p.cfg.inference.box_lower, p.cfg.inference.box_upper)
    off.parts.update(kle=kle, W=Wr, H2=H2, fmap=fmap, joint=JointModel(fmap.H, off.parts["surrogate"], box))
    return off


def full_flux_map(p: Problem) -> LinearForwardMap:
    """Full-order observation map of the flux lattice coefficients."""
    full = FullOrderSolver(p.B, p.K, p.time.dt)
    n_flux = parameter_lattice(p.cfg).n_nodes
    tr = full.solve(flux_loads(p), np.zeros((p.grid.n_nodes, n_flux)), p.time.levels, p.obs_levels)
    return LinearForwardMap(p.observe_batch(tr.values), np.zeros(p.sensors.n_d))


# ---------------------------------------------------------------- online stage

@dataclass
class RunResult:
    kind: str
    config_checksum: str
    chain: Chain
    summary: Summary
    metrics: Dict[str, float]
    fields: Dict[str, np.ndarray] = field(default_factory=dict)
    marginals: Dict[str, np.ndarray] = field(default_factory=dict)
    contour: Optional[np.ndarray] = None
    grid: Optional[StructuredGrid] = None


def _initial_z(cfg: ExperimentConfig) -> np.ndarray:
    box = Box(cfg.inference.box_lower, cfg.inference.box_upper)
    return box.sample(1, np.random.default_rng([cfg.samplers.seed, 17]))[0]


def _interior_lattice(box: Box, n: int) -> np.ndarray:
    """``n`` x ``n`` cell-centre points of the box."""
    u = (np.arange(n) + 0.5) / n
    U1, U2 = np.meshgrid(u, u)
    return box.lower + np.column_stack([U1.ravel(), U2.ravel()]) * (box.upper - box.lower)


def flux_relative_error(cfg: ExperimentConfig, theta, n_eval: int = 200) -> float:
    """Relative L2 error of the piecewise-bilinear flux over space x time (midpoint rule)."""
    lat = parameter_lattice(cfg)
    T = cfg.mesh_fem.T
    y = (np.arange(n_eval) + 0.5) / n_eval
    t = (np.arange(n_eval) + 0.5) * T / n_eval
    Y, Tt = np.meshgrid(y, t)
    pts = np.column_stack([Y.ravel(), Tt.ravel()])
    est = lat.interpolation_matrix(pts) @ np.asarray(theta)
    true = flux_truth(pts[:, 0], pts[:, 1])
    return float(np.linalg.norm(est - true) / np.linalg.norm(true))


def run_experiment(cfg: ExperimentConfig, data: Optional[SyntheticData] = None, out: Optional[str] = None,
                   offline: Optional[Offline] = None, kl: bool = True) -> RunResult:
    """Offline reduction followed by sampling; writes artifacts to ``out`` when given."""
    cfg.validate()
    s = cfg.samplers
    if data is None:
        path = None if out is None else os.path.join(out, "observations.csv")
        data = read_data(cfg, path) if path and os.path.exists(path) else generate_data(cfg, out)
    sigma = cfg.inference.sigma
    if not sigma > 0:
        raise ConfigError("inversion needs a positive noise level")
    if offline is None:
        p = setup_problem(cfg)
        basis = multiscale_basis(p, cache_dir=out)
        sur = _cached_surrogate(cfg, out) if cfg.kind != "initial" else None
        offline = {"initial": lambda: offline_initial(p, basis, with_full=kl),
                   "source": lambda: offline_source(p, basis, sur, with_full=kl),
                   "joint": lambda: offline_joint(p, basis, sur)}[cfg.kind]()
    p = offline.problem
    solves_before = offline.solver.n_solves
    parts = offline.parts
    d = data.d
    if cfg.kind == "initial":
        prior = HierarchicalPrior(parts["W"], cfg.inference.alpha, cfg.inference.beta)
        fmap = parts["fmap"]
        if s.init == "mode":
            eta0, g0 = hierarchical_mode(fmap, prior, d, sigma, s.gamma_init)
        else:
            eta0, g0 = np.zeros(prior.dim), s.gamma_init
        chain = gibbs_hierarchical(fmap, prior, d, sigma, {"eta": eta0, "gamma": g0}, s.n_steps, s.seed)
    elif cfg.kind == "source":
        sur = parts["surrogate"]
        box = sur.box

        def logpost(z):
            if not box.contains(z)[0]:
                return -np.inf
            return float(gaussian_loglik(d, sur(z), sigma))

        if s.init == "mode":
            cand = _interior_lattice(box, PROFILE_SIZE)
            z0 = cand[int(np.argmax(gaussian_loglik(d, sur(cand), sigma)))]
        else:
            z0 = _initial_z(cfg)
        chain = mh_random_walk(logpost, z0, s.eps, s.n_steps, s.seed)
    else:
        prior = HierarchicalPrior(parts["W"], cfg.inference.alpha, cfg.inference.beta)
        if s.init == "mode":
            box = parts["joint"].box
            cand = _interior_lattice(box, PROFILE_SIZE)
            eta0, z0, g0 = joint_profile_start(parts["joint"], prior, d, sigma, cand, s.gamma_init)
            init = {"eta": eta0, "z": z0, "gamma": g0}
        else:
            init = {"eta": np.zeros(prior.dim), "z": _initial_z(cfg), "gamma": s.gamma_init}
        chain = joint_metropolis_within_gibbs(parts["joint"], prior, d, sigma, init, s.eps, s.n_steps, s.seed)
    chain.meta.update(config=cfg.checksum(), kind=cfg.kind, burn_in_fraction=s.burn_in_fraction)
    online_solves = offline.solver.n_solves - solves_before
    summ = summarize(chain, s.burn_in_fraction, s.bins)
    metrics = {"online_pde_solves": float(online_solves), "n_retained": float(summ.n_retained),
               "noise_to_signal": data.noise_to_signal()}
    for b, a in summ.acceptance.items():
        metrics[f"acceptance_{b}"] = float(a)
    res = RunResult(cfg.kind, cfg.checksum(), chain, summ, metrics, grid=p.grid)
    burn = s.burn_in_fraction
    if cfg.kind == "initial":
        kle, Xi, lat = parts["kle"], parts["Xi"], parts["lattice"]
        z_hat = kle.field(summ.mean["eta"])
        g = p.grid
        u_true = initial_truth(g.nodes[:, 0], g.nodes[:, 1])
        u_hat = Xi @ z_hat
        res.fields.update(u0_true=u_true, u0_estimate=u_hat)
        metrics["relative_l2_error"] = dg.relative_l2_error(u_true, u_hat, g)
        eta = chain.retained("eta", burn)
        for name, (i, j) in CORNERS.items():
            node = lat.node_index(i * lat.nx, j * lat.ny)
            res.marginals[f"u0_corner_{name}"] = eta @ kle.B[node] + kle.mean[node]
        res.marginals["gamma"] = chain.retained("gamma", burn)[:, 0]
        if kl and "H_full" in parts:
            full_map = parts["H_full"].compose(kle.B)
            est = dg.kl_from_log_ratios(gaussian_loglik(d, full_map(eta), sigma)
                                        - gaussian_loglik(d, fmap(eta), sigma))
            metrics["d_kl"], metrics["d_kl_stderr"] = est.value, est.stderr
    else:
        zs = chain.retained("z", burn)
        metrics["z1_mean"], metrics["z2_mean"] = map(float, summ.mean["z"])
        ci = dg.central_interval(zs)
        metrics["z1_ci_width"], metrics["z2_ci_width"] = map(float, ci[:, 1] - ci[:, 0])
        res.marginals["z1"], res.marginals["z2"] = zs[:, 0], zs[:, 1]
        if cfg.kind == "source":
            sur = parts["surrogate"]
            full_model = parts.get("full_model")
            res.contour = likelihood_contour(d, sigma, sur, full_model)
            if kl and full_model is not None:
                est = dg.kl_from_log_ratios(gaussian_loglik(d, full_model(zs), sigma)
                                            - gaussian_loglik(d, sur(zs), sigma))
                metrics["d_kl"], metrics["d_kl_stderr"] = est.value, est.stderr
        else:
            kle = parts["kle"]
            theta = kle.field(summ.mean["eta"])
            res.fields["flux_estimate"] = theta
            lat = parameter_lattice(cfg)
            res.fields["flux_true"] = flux_truth(lat.nodes[:, 0], lat.nodes[:, 1])
            res.fields["flux_points"] = lat.nodes
            metrics["flux_relative_l2_error"] = flux_relative_error(cfg, theta)
            res.marginals["gamma"] = chain.retained("gamma", burn)[:, 0]
    if out is not None:
        write_bundle(res, out)
    return res


def _cached_surrogate(cfg: ExperimentConfig, out: Optional[str]) -> Optional[GpcSurrogate]:
    if out is None:
        return None
    path = os.path.join(out, "surrogate.csv")
    if not os.path.exists(path):
        return None
    s = load_surrogate(path)
    if s.meta.get("config") != cfg.checksum():
        log.info("surrogate cache %s belongs to another configuration, refitting", path)
        return None
    return s


def build_and_save_surrogate(cfg: ExperimentConfig, out: str) -> GpcSurrogate:
    if cfg.kind == "initial":
        raise ConfigError("the initial-state experiment has no nonlinear block to approximate")
    p = setup_problem(cfg)
    basis = multiscale_basis(p, cache_dir=out)
    s, design, _ = fit_source_surrogate(p, reduced_solver(p, basis))
    s.meta.update(config=cfg.checksum(), M=cfg.gmsfem.n_modes)
    os.makedirs(out, exist_ok=True)
    save_surrogate(os.path.join(out, "surrogate.csv"), s)
    return s


def likelihood_contour(d, sigma: float, surrogate: GpcSurrogate, full_model=None,
                       n: int = CONTOUR_SIZE) -> np.ndarray:
    """Columns ``z1, z2, loglik_full, loglik_surrogate`` on an ``n`` x ``n`` lattice over the box."""
    box = surrogate.box
    a = np.linspace(box.lower[0], box.upper[0], n)
    b = np.linspace(box.lower[1], box.upper[1], n)
    Z1, Z2 = np.meshgrid(a, b)
    z = np.column_stack([Z1.ravel(), Z2.ravel()])
    ls = gaussian_loglik(d, surrogate(z), sigma)
    lf = gaussian_loglik(d, full_model(z), sigma) if full_model is not None else np.full(len(z), np.nan)
    return np.column_stack([z, lf, ls])


# ---------------------------------------------------------------- sweeps

def convergence_sweep(cfg: ExperimentConfig, variable: str, values, data: Optional[SyntheticData] = None,
                      out: Optional[str] = None) -> List[dg.SweepRow]:
    """One diagnostics row per value of ``M`` (basis functions) or ``N`` (chaos degree).

    Data, seeds and all other settings are shared across rows.  For the
    initial-state experiment the model-error column is the relative
    Frobenius error of the reduced sensitivity matrix.
    """
    if variable not in ("M", "N"):
        raise ConfigError("sweep variable must be 'M' or 'N'")
    if variable == "N" and cfg.kind == "initial":
        raise ConfigError("the initial-state experiment has no chaos degree to sweep")
    if cfg.kind == "joint":
        raise ConfigError("sweeps are defined for the initial-state and source experiments")
    data = generate_data(cfg) if data is None else data
    p = setup_problem(cfg)
    full_model = full_source_model(p) if cfg.kind != "initial" else None
    full_H = None
    rows = []
    for v in values:
        c = cfg.replace("gmsfem", n_modes=int(v)) if variable == "M" else cfg.replace("surrogate", degree=int(v))
        basis = multiscale_basis(p, c.gmsfem.n_modes, cache_dir=out)
        if cfg.kind == "initial":
            off = offline_initial(p, basis, with_full=full_H is None)
            full_H = off.parts.get("H_full", full_H)
            off.parts["H_full"] = full_H
            res = run_experiment(c, data, offline=off)
            e = float(np.linalg.norm(off.parts["H_red"].H - full_H.H) / np.linalg.norm(full_H.H))
            rows.append(dg.SweepRow(float(v), e, 0.0, res.metrics["d_kl"], res.metrics["d_kl_stderr"]))
            continue
        s, _, _ = fit_source_surrogate(p, reduced_solver(p, basis), c.surrogate.degree, c.surrogate.seed)
        off = Offline(p, basis, reduced_solver(p, basis), {"surrogate": s, "full_model": full_model})
        res = run_experiment(c, data, offline=off)
        e = l2_piz_error(full_model, s, c.surrogate.n_mc, c.surrogate.seed)
        rows.append(dg.SweepRow(float(v), e.value, e.stderr, res.metrics["d_kl"], res.metrics["d_kl_stderr"]))
        log.info("sweep %s=%s: e_l2=%.3e d_kl=%.3e", variable, v, e.value, res.metrics["d_kl"])
    if out is not None:
        os.makedirs(out, exist_ok=True)
        dg.write_sweep_csv(os.path.join(out, f"sweep_{variable}.csv"), rows)
    return rows


# ---------------------------------------------------------------- diagnostics of a finished run

def chain_blocks(header, values) -> Dict[str, np.ndarray]:
    """Regroup chain-file columns ``name`` / ``name_j`` into blocks."""
    groups: Dict[str, list] = {}
    for j, col in enumerate(header):
        stem, _, idx = col.rpartition("_")
        name = stem if stem and idx.isdigit() else col
        groups.setdefault(name, []).append(j)
    return {k: values[:, cols] for k, cols in groups.items()}


def diagnose(cfg: ExperimentConfig, out: str) -> Dict[str, float]:
    """KL of the recorded reduced-model posterior from the full-model one, plus the model error.

    Reads ``chain.csv`` and ``observations.csv`` from ``out`` and writes
    ``diagnostics.json`` there.
    """
    cfg.validate()
    chain_path, data_path = os.path.join(out, "chain.csv"), os.path.join(out, "observations.csv")
    for path in (chain_path, data_path):
        if not os.path.exists(path):
            raise ConfigError(f"{path} not found; run gen-data and invert first")
    header, _, values, meta = read_chain_csv(chain_path)
    if meta.get("config") not in (None, cfg.checksum()):
        log.warning("chain in %s was produced by another configuration", out)
    blocks = chain_blocks(header, values)
    d = read_data(cfg, data_path).d
    sigma = cfg.inference.sigma
    p = setup_problem(cfg)
    basis = multiscale_basis(p, cache_dir=out)
    result: Dict[str, float] = {}
    if cfg.kind == "initial":
        off = offline_initial(p, basis, with_full=True)
        kle = off.parts["kle"]
        eta = blocks["eta"]
        red, full = off.parts["fmap"], off.parts["H_full"].compose(kle.B)
        est = dg.kl_from_log_ratios(gaussian_loglik(d, full(eta), sigma) - gaussian_loglik(d, red(eta), sigma))
        H_red, H_full = off.parts["H_red"].H, off.parts["H_full"].H
        result.update(e_l2=float(np.linalg.norm(H_red - H_full) / np.linalg.norm(H_full)), e_l2_stderr=0.0)
    else:
        sur = _cached_surrogate(cfg, out)
        if sur is None:
            sur, _, _ = fit_source_surrogate(p, reduced_solver(p, basis))
        full_src = full_source_model(p)
        z = blocks["z"]
        if cfg.kind == "source":
            g_full, g_red = full_src(z), sur(z)
        else:
            kle, _ = field_prior(cfg)
            eta = blocks["eta"]
            off = offline_joint(p, basis, sur)
            g_red = eta @ off.parts["fmap"].H.T + sur(z)
            g_full = eta @ full_flux_map(p).compose(kle.B).H.T + full_src(z)
        est = dg.kl_from_log_ratios(gaussian_loglik(d, g_full, sigma) - gaussian_loglik(d, g_red, sigma))
        e = l2_piz_error(full_src, sur, cfg.surrogate.n_mc, cfg.surrogate.seed)
        result.update(e_l2=e.value, e_l2_stderr=e.stderr)
    result.update(d_kl=est.value, d_kl_stderr=est.stderr, n_samples=float(est.n_samples))
    with open(os.path.join(out, "diagnostics.json"), "w") as fh:
        json.dump({"kind": cfg.kind, "config": cfg.checksum(), **result}, fh, indent=2, sort_keys=True)
    return result


# ---------------------------------------------------------------- output

def write_bundle(res: RunResult, out: str) -> None:
    os.makedirs(out, exist_ok=True)
    res.chain.to_csv(os.path.join(out, "chain.csv"), res.chain.meta.get("burn_in_fraction", 0.0))
    summary = {"kind": res.kind, "config": res.config_checksum, "metrics": res.metrics,
               "mean": {k: v.tolist() for k, v in res.summary.mean.items() if v.size <= 8},
               "mpm": {k: v.tolist() for k, v in res.summary.mpm.items() if v.size <= 8},
               "acceptance": res.summary.acceptance}
    with open(os.path.join(out, "summary.json"), "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
    emit_plotdata(res, os.path.join(out, "plotdata"))


def write_histogram(path, x, bins: int = 64) -> None:
    counts, edges = np.histogram(np.asarray(x, dtype=float), bins=bins)
    np.savetxt(path, np.column_stack([edges[:-1], edges[1:], counts]), delimiter=",",
               header="bin_left,bin_right,count", comments="", fmt=["%.17g", "%.17g", "%d"])


def emit_plotdata(res: RunResult, out: str, bins: int = 64) -> List[str]:
    """Per-figure CSV files; returns the written paths."""
    os.makedirs(out, exist_ok=True)
    written = []
    for name, x in res.marginals.items():
        path = os.path.join(out, f"hist_{name}.csv")
        write_histogram(path, x, bins)
        written.append(path)
    if "u0_true" in res.fields and res.grid is not None:
        path = os.path.join(out, "field_u0.csv")
        g = res.grid
        np.savetxt(path, np.column_stack([g.nodes, res.fields["u0_true"], res.fields["u0_estimate"]]),
                   delimiter=",", header="x,y,true,estimate", comments="", fmt="%.17g")
        written.append(path)
    if "flux_estimate" in res.fields:
        path = os.path.join(out, "field_flux.csv")
        np.savetxt(path, np.column_stack([res.fields["flux_points"], res.fields["flux_true"],
                                          res.fields["flux_estimate"]]),
                   delimiter=",", header="x2,t,true,estimate", comments="", fmt="%.17g")
        written.append(path)
    if res.contour is not None:
        path = os.path.join(out, "contour_loglik.csv")
        np.savetxt(path, res.contour, delimiter=",", header="z1,z2,loglik_full,loglik_surrogate",
                   comments="", fmt="%.17g")
        written.append(path)
    return written
