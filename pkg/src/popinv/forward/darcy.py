"""Closed-form steady porous-medium flow on (0, 1) with constant source.

With conductivity z > 0 and source f0 the solution of -(z u')' = f0,
u(0) = u(1) = 0 is u(x) = (f0 / (2 z)) x (1 - x); observations are pointwise
evaluations on the grid. The map is available in closed form, so inference
differentiates straight through it.
"""

from __future__ import annotations

import numpy as np

from .. import autodiff as ad
from ..errors import DomainError
from ..measures import midpoint_grid


class Darcy1DModel:
    """Parameter-to-observation map for the 1D Darcy problem."""

    name = "darcy"
    input_dim = 1

    def __init__(self, f0=10.0, d_y=50, grid=None):
        self.f0 = float(f0)
        self.d_y = int(d_y)
        self.grid = midpoint_grid(self.d_y) if grid is None else np.asarray(grid, dtype=np.float64)
        if self.grid.shape != (self.d_y,):
            raise DomainError(f"grid must hold d_y = {self.d_y} points, got shape {self.grid.shape}")
        self._profile = 0.5 * self.f0 * self.grid * (1.0 - self.grid)

    def solve(self, z):
        """Observation vector for a single conductivity z > 0."""
        z = float(z)
        if z <= 0.0:
            raise DomainError(f"darcy_solve needs z > 0, got z = {z}")
        return self._profile / z

    def solve_at(self, z, x):
        """Solution value u(x) at arbitrary points, same closed form."""
        z = float(z)
        if z <= 0.0:
            raise DomainError(f"darcy_solve needs z > 0, got z = {z}")
        x = np.asarray(x, dtype=np.float64)
        return 0.5 * self.f0 * x * (1.0 - x) / z

    def forward(self, z):
        """Differentiable batch map: (n, 1) conductivities to (n, d_y) observations."""
        zv = ad.as_variable(z)
        if zv.value.ndim != 2 or zv.value.shape[1] != 1:
            raise DomainError(f"darcy forward expects (n, 1) inputs, got shape {zv.value.shape}")
        if np.any(zv.value <= 0.0):
            raise DomainError("darcy forward received a nonpositive conductivity sample")
        return ad.mul(ad.power(zv, -1.0), self._profile)

    def forward_oracle(self, z_batch):
        """Non-differentiable batch evaluation used for surrogate pair acquisition."""
        z = np.asarray(z_batch, dtype=np.float64).reshape(-1)
        if np.any(z <= 0.0):
            raise DomainError("darcy oracle received a nonpositive conductivity sample")
        return self._profile[None, :] / z[:, None]


def darcy_solve(z, model=None):
    """Observations u(x_i) = (f0 / (2 z)) x_i (1 - x_i) on the model grid."""
    model = Darcy1DModel() if model is None else model
    return model.solve(z)
