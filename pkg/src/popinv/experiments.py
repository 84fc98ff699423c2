"""Experiment configurations: presets, serialization, and object builders.

A config fully describes one experiment: the physical model, the data
generating ground truth, the learnable measure families with their initial
values, the optimization schedule, optional surrogate settings, and which
quantities the run reports errors on. Every preset field can be overridden;
the whole config is serialized into each run's summary.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .forward import Darcy1DModel, Lorenz96MultiScale, Lorenz96SingleScale, feature_dim
from .measures import (
    CholeskyCov,
    DiagonalGaussianParams,
    LogNormalScalarParams,
    ScaledIdentityCov,
    WhittleMaternCov,
    midpoint_grid,
)

LOG_HALF = math.log(0.5)


@dataclass
class ExperimentConfig:
    name: str
    model: dict
    input_family: str
    noise_family: dict
    alpha_truth: dict
    noise_truth: dict
    init_values: dict
    data: dict
    learn: dict
    surrogate: dict | None = None
    report: list = field(default_factory=list)
    seed: int = 0

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, payload):
        try:
            known = {f.name for f in dataclasses.fields(cls)}
            extra = set(payload) - known
            if extra:
                raise ConfigError(f"unknown config fields: {sorted(extra)}")
            return cls(**payload)
        except TypeError as exc:
            raise ConfigError(f"malformed experiment config: {exc}") from None

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text):
        try:
            payload = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from None
        if not isinstance(payload, dict):
            raise ConfigError("config must be a JSON object")
        return cls.from_dict(payload)

    def config_hash(self):
        canonical = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode()).hexdigest()

    def override(self, **changes):
        """A copy with top-level or dotted nested fields replaced."""
        payload = json.loads(json.dumps(self.to_dict()))
        for key, value in changes.items():
            parts = key.split(".")
            target = payload
            for part in parts[:-1]:
                if part not in target or not isinstance(target[part], dict):
                    raise ConfigError(f"cannot override unknown field {key!r}")
                target = target[part]
            if parts[-1] not in target:
                raise ConfigError(f"cannot override unknown field {key!r}")
            target[parts[-1]] = value
        return ExperimentConfig.from_dict(payload)

    @property
    def d_y(self):
        kind = self.model["kind"]
        if kind == "darcy":
            return int(self.model["d_y"])
        if kind == "l96_single":
            return feature_dim(int(self.model["K"]))
        if kind == "l96_multi":
            return feature_dim(int(self.model["K"]) + 1)
        raise ConfigError(f"unknown model kind {kind!r}")

    @property
    def uses_surrogate(self):
        return self.surrogate is not None


def build_forward_model(config):
    spec = config.model
    kind = spec["kind"]
    if kind == "darcy":
        return Darcy1DModel(f0=spec.get("f0", 10.0), d_y=spec["d_y"])
    if kind == "l96_single":
        return Lorenz96SingleScale(
            K=spec["K"], dt=spec["dt"], tau=spec["tau"], burn_in=spec["burn_in"]
        )
    if kind == "l96_multi":
        return Lorenz96MultiScale(
            K=spec["K"], L=spec["L"], c=spec["c"], dt=spec["dt"],
            tau=spec["tau"], burn_in=spec["burn_in"],
        )
    raise ConfigError(f"unknown model kind {kind!r}")


def build_input_measure(config, values=None, learnable=True):
    """The mu(alpha) family at `values` (defaults to the config's init values)."""
    values = dict(config.init_values if values is None else values)
    if config.input_family == "lognormal":
        return LogNormalScalarParams(values["m"], values["log_sigma"], learnable=learnable)
    if config.input_family == "diag-gaussian":
        return DiagonalGaussianParams(
            np.asarray(values["m"], dtype=np.float64),
            np.asarray(values["log_sigma"], dtype=np.float64),
            learnable=learnable,
        )
    raise ConfigError(f"unknown input family {config.input_family!r}")


def build_noise_measure(config, values=None, learnable=True):
    """The eta(Gamma) family at `values` (defaults to the config's init values)."""
    values = dict(config.init_values if values is None else values)
    family = config.noise_family
    kind = family["kind"]
    d_y = config.d_y
    if kind == "scaled-identity":
        return ScaledIdentityCov(values["log_gamma"], d_y, learnable=learnable)
    if kind == "whittle-matern":
        measure = WhittleMaternCov(
            values["log_gamma"],
            values["log_ell"],
            family["upsilon"],
            grid=midpoint_grid(d_y),
            learnable=learnable,
        )
        if learnable and not family.get("learn_gamma", True):
            measure.log_gamma.requires_grad = False
            measure.log_gamma._leaf = False
        return measure
    if kind == "cholesky":
        if "strict_lower" in values or "log_diag" in values:
            return CholeskyCov(
                np.asarray(values["strict_lower"], dtype=np.float64),
                np.asarray(values["log_diag"], dtype=np.float64),
                learnable=learnable,
            )
        return CholeskyCov.identity(d_y, learnable=learnable)
    raise ConfigError(f"unknown noise family {kind!r}")


def build_truth_input_measure(config):
    truth = config.alpha_truth
    if config.input_family == "lognormal":
        return LogNormalScalarParams(truth["m"], math.log(truth["sigma"]), learnable=False)
    if config.input_family == "diag-gaussian":
        return DiagonalGaussianParams(
            np.asarray(truth["m"], dtype=np.float64),
            np.log(np.asarray(truth["sigma"], dtype=np.float64)),
            learnable=False,
        )
    raise ConfigError(f"unknown input family {config.input_family!r}")


def build_truth_noise_measure(config):
    truth = config.noise_truth
    kind = truth["kind"]
    if kind == "clt":
        return None
    if kind == "scaled-identity":
        return ScaledIdentityCov(math.log(truth["gamma"]), config.d_y, learnable=False)
    if kind == "whittle-matern":
        return WhittleMaternCov(
            math.log(truth["gamma"]),
            math.log(truth["ell"]),
            truth["upsilon"],
            grid=midpoint_grid(config.d_y),
            learnable=False,
        )
    raise ConfigError(f"unknown noise truth {kind!r}")


def _report(label, column, transform, truth):
    return {"label": label, "column": column, "transform": transform, "truth": truth}


def _darcy_base(name):
    return dict(
        name=name,
        model={"kind": "darcy", "d_y": 50, "f0": 10.0},
        input_family="lognormal",
        alpha_truth={"m": 0.5, "sigma": 0.25},
        data={"n": 10000},
        seed=0,
    )


def darcy_uncorrelated():
    base = _darcy_base("darcy_uncorrelated")
    return ExperimentConfig(
        **base,
        noise_family={"kind": "scaled-identity"},
        noise_truth={"kind": "scaled-identity", "gamma": 0.05},
        init_values={"m": 0.0, "log_sigma": LOG_HALF, "log_gamma": 0.0},
        learn={
            "n_samples": 10000, "n_slices": 100, "iterations": 2000,
            "lr": 0.1, "lr_halvings": 10, "gradient_mode": "cut",
            "epsilon_kappa": 0.0, "penalties": [], "window": 100,
        },
        report=[
            _report("m", "alpha_m", "identity", 0.5),
            _report("sigma", "alpha_log_sigma", "exp", 0.25),
            _report("gamma", "gamma_log_gamma", "exp", 0.05),
        ],
    )


def darcy_wm():
    base = _darcy_base("darcy_wm")
    return ExperimentConfig(
        **base,
        noise_family={"kind": "whittle-matern", "upsilon": 0.5, "learn_gamma": False},
        noise_truth={"kind": "whittle-matern", "gamma": 0.1, "ell": 0.25, "upsilon": 0.5},
        init_values={
            "m": 0.0, "log_sigma": LOG_HALF,
            "log_gamma": math.log(0.1), "log_ell": 0.0,
        },
        learn={
            "n_samples": 10000, "n_slices": 100, "iterations": 2000,
            "lr": 0.1, "lr_halvings": 10, "gradient_mode": "cut",
            "epsilon_kappa": 0.0, "penalties": [], "window": 100,
        },
        report=[
            _report("m", "alpha_m", "identity", 0.5),
            _report("sigma", "alpha_log_sigma", "exp", 0.25),
            _report("ell", "gamma_log_ell", "exp", 0.25),
        ],
    )


def darcy_combined():
    base = _darcy_base("darcy_combined")
    return ExperimentConfig(
        **base,
        noise_family={"kind": "whittle-matern", "upsilon": 0.5, "learn_gamma": True},
        noise_truth={"kind": "whittle-matern", "gamma": 0.1, "ell": 0.25, "upsilon": 0.5},
        init_values={"m": 0.0, "log_sigma": LOG_HALF, "log_gamma": 0.0, "log_ell": 0.0},
        learn={
            "n_samples": 10000, "n_slices": 100, "iterations": 2000,
            "lr": 0.1, "lr_halvings": 10, "gradient_mode": "cut",
            "epsilon_kappa": 0.0, "penalties": [], "window": 100,
        },
        report=[
            _report("sigma", "alpha_log_sigma", "exp", 0.25),
            _report("m", "alpha_m", "identity", 0.5),
            _report("gamma", "gamma_log_gamma", "exp", 0.1),
            _report("ell", "gamma_log_ell", "exp", 0.25),
        ],
    )


def darcy_surrogate():
    base = _darcy_base("darcy_surrogate")
    return ExperimentConfig(
        **base,
        noise_family={"kind": "scaled-identity"},
        noise_truth={"kind": "scaled-identity", "gamma": 0.05},
        init_values={"m": 0.0, "log_sigma": LOG_HALF, "log_gamma": 0.0},
        learn={
            "n_samples": 1000, "n_slices": 100, "iterations": 2000,
            "lr": 0.1, "lr_halvings": 8, "gradient_mode": "cut",
            "epsilon_kappa": 0.0, "penalties": [], "window": 100,
        },
        surrogate={
            "width": 100, "depth": 5, "lipschitz_bound": 10.0,
            "pretrain_steps": 1000, "inner_steps": 10, "acquire_until": 2000,
            "pretrain_pairs": 100, "batch_size": 100,
            "lr": 1e-3, "lr_halvings": 8, "acquisition_batch": 60,
        },
        report=[
            _report("m", "alpha_m", "identity", 0.5),
            _report("sigma", "alpha_log_sigma", "exp", 0.25),
            _report("gamma", "gamma_log_gamma", "exp", 0.05),
        ],
    )


def _l96_single_base(name, n_data, tau, iterations, acquire_until):
    return ExperimentConfig(
        name=name,
        model={"kind": "l96_single", "K": 6, "dt": 1e-2, "tau": tau, "burn_in": 20.0},
        input_family="diag-gaussian",
        noise_family={"kind": "cholesky"},
        alpha_truth={"m": [10.0], "sigma": [1.0]},
        noise_truth={"kind": "clt"},
        init_values={"m": [8.0], "log_sigma": [LOG_HALF]},
        data={"n": n_data, "init_std": 10.0},
        learn={
            "n_samples": 500, "n_slices": 100, "iterations": iterations,
            "lr": 1e-2, "lr_halvings": 0, "gradient_mode": "cut",
            "epsilon_kappa": 1e-5, "window": 1000, "infer_init_std": 8.0,
            "penalties": [
                {"param": "alpha.m", "anchor": [8.0], "weight": 1.0 / (2 * 5.0**2)},
                {"param": "alpha.log_sigma", "anchor": [LOG_HALF], "weight": 1.0 / (2 * 2.0**2)},
            ],
        },
        surrogate={
            "width": 100, "depth": 5, "lipschitz_bound": 10.0,
            "pretrain_steps": 1000, "inner_steps": 20, "acquire_until": acquire_until,
            "pretrain_pairs": 60, "batch_size": 60,
            "lr": 1e-3, "lr_halvings": 5, "acquisition_batch": 60,
        },
        report=[
            _report("m", "alpha_m_0", "identity", 10.0),
            _report("sigma", "alpha_log_sigma_0", "exp", 1.0),
        ],
        seed=0,
    )


def l96_single():
    return _l96_single_base("l96_single", n_data=10000, tau=100.0, iterations=15000, acquire_until=10000)


def l96_single_reduced():
    return _l96_single_base("l96_single_reduced", n_data=1000, tau=50.0, iterations=5000, acquire_until=5000)


def _l96_multi_base(name, big_k, big_l, n_data, iterations, acquire_until, lr_halvings):
    labels = ["F", "h", "b"]
    report = []
    for i, lab in enumerate(labels):
        report.append(_report(f"m_{lab}", f"alpha_m_{i}", "identity", [10.0, 0.8, 1.0][i]))
    for i, lab in enumerate(labels):
        report.append(_report(f"sigma_{lab}", f"alpha_log_sigma_{i}", "exp", [1.0, 0.1, 0.2][i]))
    return ExperimentConfig(
        name=name,
        model={
            "kind": "l96_multi", "K": big_k, "L": big_l, "c": 10.0,
            "dt": 1e-3, "tau": 100.0, "burn_in": 20.0,
        },
        input_family="diag-gaussian",
        noise_family={"kind": "cholesky"},
        alpha_truth={"m": [10.0, 0.8, 1.0], "sigma": [1.0, 0.1, 0.2]},
        noise_truth={"kind": "clt"},
        init_values={"m": [8.0, 2.0, 2.0], "log_sigma": [LOG_HALF] * 3},
        data={"n": n_data, "init_std": 5.0},
        learn={
            "n_samples": 500, "n_slices": 100, "iterations": iterations,
            "lr": 1e-2, "lr_halvings": lr_halvings, "gradient_mode": "cut",
            "epsilon_kappa": 1e-5, "window": 1000, "infer_init_std": 8.0,
            "penalties": [
                {"param": "alpha.m", "anchor": [8.0, 2.0, 2.0], "weight": 1.0 / (2 * 5.0**2)},
                {"param": "alpha.log_sigma", "anchor": [LOG_HALF] * 3, "weight": 1.0 / (2 * 2.0**2)},
            ],
        },
        surrogate={
            "width": 100, "depth": 5, "lipschitz_bound": 10.0,
            "pretrain_steps": 1000, "inner_steps": 20, "acquire_until": acquire_until,
            "pretrain_pairs": 100, "batch_size": 100,
            "lr": 1e-3, "lr_halvings": 10, "acquisition_batch": 60,
        },
        report=report,
        seed=0,
    )


def l96_multi():
    return _l96_multi_base("l96_multi", 9, 10, n_data=10000, iterations=15000, acquire_until=10000, lr_halvings=4)


def l96_multi_reduced():
    return _l96_multi_base("l96_multi_reduced", 4, 4, n_data=1000, iterations=4000, acquire_until=4000, lr_halvings=4)


PRESETS = {
    "darcy_uncorrelated": darcy_uncorrelated,
    "darcy_wm": darcy_wm,
    "darcy_combined": darcy_combined,
    "darcy_surrogate": darcy_surrogate,
    "l96_single": l96_single,
    "l96_single_reduced": l96_single_reduced,
    "l96_multi": l96_multi,
    "l96_multi_reduced": l96_multi_reduced,
}


def get_preset(name):
    if name not in PRESETS:
        raise ConfigError(f"unknown experiment {name!r}; available: {sorted(PRESETS)}")
    return PRESETS[name]()


def load_config(source):
    """Resolve a preset name or a JSON file path into an ExperimentConfig."""
    if source in PRESETS:
        return get_preset(source)
    try:
        with open(source) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {source!r}: {exc}") from None
    return ExperimentConfig.from_json(text)
