from .darcy import Darcy1DModel, darcy_solve
from .lorenz import (
    GaussianInitMeasure,
    Lorenz96MultiScale,
    Lorenz96SingleScale,
    TimeAveragedObservable,
    clt_empirical_cov,
    feature_dim,
    g_tau,
    kernel_backend,
    pack_features,
    rk4_trajectory,
    unpack_features,
)

__all__ = [
    "Darcy1DModel",
    "darcy_solve",
    "GaussianInitMeasure",
    "Lorenz96MultiScale",
    "Lorenz96SingleScale",
    "TimeAveragedObservable",
    "clt_empirical_cov",
    "feature_dim",
    "g_tau",
    "kernel_backend",
    "pack_features",
    "rk4_trajectory",
    "unpack_features",
]
