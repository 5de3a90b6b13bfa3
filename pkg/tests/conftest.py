import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


def checkerboard(grid, lo=1.0, hi=100.0):
    c = np.arange(grid.n_cells)
    i, j = c % grid.nx, c // grid.nx
    return np.where((i + j) % 2 == 0, lo, hi)


_TINY = {
    "initial": {"mesh_fem": {"fine": [8, 8], "dt": 0.02, "data_dt": 0.01, "sensors": [4, 4],
                             "obs_times": [0.02, 0.04, 0.06, 0.08, 0.1]},
                "gmsfem": {"coarse": [2, 2], "n_modes": 3},
                "random_field": {"lattice": [3, 3]}},
    "source": {"mesh_fem": {"fine": [8, 8], "dt": 0.02, "data_dt": 0.01, "sensors": [3, 3],
                            "obs_times": [0.04, 0.08]},
               "gmsfem": {"coarse": [2, 2], "n_modes": 3},
               "surrogate": {"degree": 3, "n_mc": 200},
               "inference": {"sigma": 0.05, "source_strength": 5.0, "truth_z": [0.3, 0.6]},
               "samplers": {"eps": 0.05}},
    "joint": {"mesh_fem": {"fine": [8, 8], "dt": 0.02, "data_dt": 0.01, "sensors": [4, 4],
                           "obs_times": [0.02, 0.04, 0.06, 0.08, 0.1]},
              "gmsfem": {"coarse": [2, 2], "n_modes": 3},
              "surrogate": {"degree": 3, "n_mc": 200},
              "random_field": {"lattice": [3, 3], "energy": 0.9},
              "inference": {"sigma": 0.05, "truth_z": [0.5, 0.5]},
              "samplers": {"eps": 0.05}},
}


def tiny_config(kind, **sections):
    """Small, fast experiment of the given kind; ``sections`` override individual keys."""
    from gmsbayes.config import config_from_dict

    raw = {"kind": kind, "name": f"tiny_{kind}", "samplers": {"n_steps": 400}}
    for sec, vals in list(_TINY[kind].items()) + list(sections.items()):
        raw.setdefault(sec, {}).update(vals)
    return config_from_dict(raw)
