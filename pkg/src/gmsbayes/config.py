"""Experiment configuration: YAML files with one section per module."""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import os
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np
import yaml

from .errors import ConfigError

KINDS = ("initial", "source", "joint")


@dataclass
class MeshConfig:
    fine: Tuple[int, int] = (80, 80)
    T: float = 0.1
    dt: float = 0.002
    data_dt: float = 0.001
    permeability_file: Optional[str] = None
    permeability_seed: int = 1
    contrast: float = 1e3
    sensors: Tuple[int, int] = (6, 6)
    obs_times: List[float] = field(default_factory=lambda: [round(0.01 * i, 10) for i in range(1, 11)])


@dataclass
class GmsConfig:
    coarse: Tuple[int, int] = (8, 8)
    n_modes: int = 8


@dataclass
class FieldConfig:
    kernel: str = "exponential"
    variance: float = 2.0
    l1: float = 0.2
    l2: float = 0.2
    energy: float = 0.95
    # parameter lattice: rows x cols (y/time fastest-varying last)
    lattice: Tuple[int, int] = (11, 11)


@dataclass
class SurrogateConfig:
    degree: int = 8
    oversampling: float = 3.0
    seed: int = 11
    n_mc: int = 1000


@dataclass
class InferenceConfig:
    sigma: float = 0.01
    alpha: float = 1e-3
    beta: float = 1e-3
    box_lower: Tuple[float, float] = (0.0, 0.0)
    box_upper: Tuple[float, float] = (1.0, 1.0)
    truth_z: Tuple[float, float] = (0.25, 0.75)
    source_strength: float = 5.0
    source_width: float = 0.1
    data_seed: int = 7


@dataclass
class SamplerConfig:
    n_steps: int = 30000
    burn_in_fraction: float = 1 / 3
    eps: float = 0.005
    seed: int = 3
    gamma_init: float = 1.0
    # "mode": start at the best lattice location and the conditional mode of the linear blocks;
    # "prior": linear blocks at the prior mean, location drawn from the prior
    init: str = "mode"
    bins: int = 64


@dataclass
class ExperimentConfig:
    kind: str = "initial"
    name: str = "experiment"
    mesh_fem: MeshConfig = field(default_factory=MeshConfig)
    gmsfem: GmsConfig = field(default_factory=GmsConfig)
    random_field: FieldConfig = field(default_factory=FieldConfig)
    surrogate: SurrogateConfig = field(default_factory=SurrogateConfig)
    inference: InferenceConfig = field(default_factory=InferenceConfig)
    samplers: SamplerConfig = field(default_factory=SamplerConfig)
    base_dir: str = "."

    def validate(self) -> "ExperimentConfig":
        m, g = self.mesh_fem, self.gmsfem
        if self.kind not in KINDS:
            raise ConfigError(f"experiment kind must be one of {KINDS}, got {self.kind!r}")
        if min(m.fine) < 1 or min(g.coarse) < 1:
            raise ConfigError("grid sizes must be positive")
        if m.fine[0] % g.coarse[0] or m.fine[1] % g.coarse[1]:
            raise ConfigError(f"coarse grid {g.coarse} does not divide fine grid {m.fine}")
        if g.n_modes < 1:
            raise ConfigError("need at least one multiscale basis function per neighbourhood")
        if not (m.dt > 0 and m.data_dt > 0):
            raise ConfigError("time steps must be positive")
        if not m.data_dt < m.dt:
            raise ConfigError(f"data time step {m.data_dt} must be strictly finer than inversion step {m.dt} "
                              "(inverse-crime guard)")
        for dt in (m.dt, m.data_dt):
            for t in list(m.obs_times) + [m.T]:
                if abs(t / dt - round(t / dt)) > 1e-8:
                    raise ConfigError(f"time {t} is not a multiple of step {dt}")
        if max(m.obs_times) > m.T + 1e-12 or min(m.obs_times) <= 0:
            raise ConfigError("observation times must lie in (0, T]")
        if m.permeability_file is not None and not os.path.exists(self.resolve(m.permeability_file)):
            raise ConfigError(f"permeability file {m.permeability_file} not found")
        if not self.inference.sigma >= 0:
            raise ConfigError("sigma must be nonnegative")
        if not 0 < self.random_field.energy <= 1:
            raise ConfigError("energy ratio must lie in (0, 1]")
        s = self.samplers
        if s.n_steps < 1:
            raise ConfigError("sampler needs at least one step")
        if s.init not in ("mode", "prior"):
            raise ConfigError(f"sampler init must be 'mode' or 'prior', got {s.init!r}")
        if not 0 <= s.burn_in_fraction < 1 or s.eps <= 0:
            raise ConfigError("burn-in fraction must lie in [0, 1) and eps must be positive")
        lo, hi = np.asarray(self.inference.box_lower), np.asarray(self.inference.box_upper)
        if np.any(hi <= lo):
            raise ConfigError("prior box must have lower < upper")
        if self.kind != "initial" and not np.all((lo <= self.inference.truth_z) & (self.inference.truth_z <= hi)):
            raise ConfigError("true source location lies outside the prior box")
        return self

    def resolve(self, path: str) -> str:
        return path if os.path.isabs(path) else os.path.join(self.base_dir, path)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d.pop("base_dir")
        return _plain(d)

    def checksum(self) -> str:
        text = yaml.safe_dump(self.to_dict(), sort_keys=True)
        return hashlib.sha256(text.encode()).hexdigest()[:16]

    def with_seed(self, seed: int) -> "ExperimentConfig":
        """Copy with every random stream derived from one master seed."""
        c = copy.deepcopy(self)
        data, sur, smp = np.random.SeedSequence(seed).generate_state(3)
        c.inference.data_seed = int(data)
        c.surrogate.seed = int(sur)
        c.samplers.seed = int(smp)
        return c

    def replace(self, section: str, **kw) -> "ExperimentConfig":
        c = copy.deepcopy(self)
        setattr(c, section, dataclasses.replace(getattr(c, section), **kw))
        return c


def _plain(x):
    if isinstance(x, dict):
        return {k: _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    return x


_SECTIONS = {"mesh_fem": MeshConfig, "gmsfem": GmsConfig, "random_field": FieldConfig,
             "surrogate": SurrogateConfig, "inference": InferenceConfig, "samplers": SamplerConfig}


def config_from_dict(raw: dict, base_dir: str = ".") -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError("configuration must be a mapping")
    raw = dict(raw)
    kw = {"kind": raw.pop("kind", "initial"), "name": raw.pop("name", "experiment"), "base_dir": base_dir}
    for name, cls in _SECTIONS.items():
        sec = raw.pop(name, None)
        sec = {} if sec is None else sec
        if not isinstance(sec, dict):
            raise ConfigError(f"section {name} must be a mapping")
        known = {f.name: f for f in dataclasses.fields(cls)}
        unknown = set(sec) - set(known)
        if unknown:
            raise ConfigError(f"unknown keys in [{name}]: {sorted(unknown)}")
        vals = {}
        for k, v in sec.items():
            default = getattr(cls(), k)
            vals[k] = tuple(v) if isinstance(default, tuple) and isinstance(v, list) else v
        try:
            kw[name] = cls(**vals)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc
    if raw:
        raise ConfigError(f"unknown top-level keys: {sorted(raw)}")
    return ExperimentConfig(**kw).validate()


def load_config(path) -> ExperimentConfig:
    try:
        with open(path) as fh:
            raw = yaml.safe_load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"malformed config {path}: {exc}") from exc
    return config_from_dict(raw or {}, base_dir=os.path.dirname(os.path.abspath(path)))


def save_config(path, cfg: ExperimentConfig) -> None:
    with open(path, "w") as fh:
        yaml.safe_dump(cfg.to_dict(), fh, sort_keys=False)
