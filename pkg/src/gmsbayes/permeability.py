"""Reproducible high-contrast conductivity fields."""

from __future__ import annotations

import numpy as np

from .mesh_fem import StructuredGrid


def synthetic_permeability(grid: StructuredGrid, seed: int = 0, contrast: float = 1e3,
                           n_channels: int = 2, n_inclusions: int = 8,
                           background: float = 1.0) -> np.ndarray:
    """Background value with sinuous high-conductivity channels and inclusions.

    Geometry is drawn in unit coordinates, so refining the grid samples the
    same field.
    """
    rng = np.random.default_rng(seed)
    c = grid.cell_centers
    x = (c[:, 0] - grid.x0) / (grid.x1 - grid.x0)
    y = (c[:, 1] - grid.y0) / (grid.y1 - grid.y0)
    high = np.zeros(len(c), dtype=bool)
    for _ in range(n_channels):
        y0 = rng.uniform(0.2, 0.8)
        amp = rng.uniform(0.05, 0.12)
        freq = rng.uniform(0.6, 1.4)
        phase = rng.uniform(0, 2 * np.pi)
        width = rng.uniform(0.04, 0.07)
        high |= np.abs(y - (y0 + amp * np.sin(2 * np.pi * freq * x + phase))) < width / 2
    for _ in range(n_inclusions):
        cx, cy = rng.uniform(0.1, 0.9, size=2)
        hx, hy = rng.uniform(0.02, 0.06, size=2)
        high |= (np.abs(x - cx) < hx) & (np.abs(y - cy) < hy)
    k = np.full(len(c), float(background))
    k[high] = background * contrast
    return k
