"""Empirical measures and weighted (sliced-)Wasserstein distances.

The squared 2-Wasserstein distance between two equal-size 1D point sets is
the mean squared difference of their sorted samples. The sliced variant
averages that quantity over random unit directions after applying a
weighting operator B^{-1/2} to both sample sets. Everything differentiable
runs through the autodiff tape, so gradients reach the model samples and
any weighting parameters that are live Variables.
"""

from __future__ import annotations

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import autodiff as ad
from .autodiff import Variable
from .errors import ContractViolation

EIGENVALUE_FLOOR = 1e-12


class EmpiricalMeasure:
    """A uniform mixture of point masses, one observation vector per row."""

    def __init__(self, samples):
        samples = np.asarray(samples, dtype=np.float64)
        if samples.ndim == 1:
            samples = samples[:, None]
        if samples.ndim != 2 or samples.shape[0] < 1:
            raise ContractViolation(f"EmpiricalMeasure needs an N x d matrix with N >= 1, got shape {samples.shape}")
        self.samples = samples

    @property
    def n(self):
        return self.samples.shape[0]

    @property
    def dim(self):
        return self.samples.shape[1]

    def subsample(self, n, rng):
        """Uniform without-replacement row subsample."""
        if n > self.n:
            raise ContractViolation(f"cannot subsample {n} rows from {self.n}")
        idx = rng.choice(self.n, size=n, replace=False)
        return EmpiricalMeasure(self.samples[idx])


class SliceSet:
    """Unit projection directions, drawn Gaussian and normalized."""

    def __init__(self, directions, seed=None):
        directions = np.asarray(directions, dtype=np.float64)
        if directions.ndim != 2 or directions.shape[0] < 1:
            raise ContractViolation(f"SliceSet needs an M x d matrix, got shape {directions.shape}")
        norms = np.linalg.norm(directions, axis=1)
        if not np.all(np.abs(norms - 1.0) <= 1e-12):
            raise ContractViolation("slice directions must be unit vectors to 1e-12")
        self.directions = directions
        self.seed = seed

    @property
    def m(self):
        return self.directions.shape[0]

    @classmethod
    def draw(cls, m, dim, rng_or_seed):
        if m < 1:
            raise ContractViolation("slice count M must be >= 1")
        if isinstance(rng_or_seed, np.random.Generator):
            rng = rng_or_seed
            seed = None
        else:
            seed = rng_or_seed
            rng = np.random.default_rng(seed)
        g = rng.standard_normal((m, dim))
        norms = np.linalg.norm(g, axis=1, keepdims=True)
        # a numerically zero Gaussian draw has probability ~0; redraw defensively
        while np.any(norms < 1e-12):
            bad = norms[:, 0] < 1e-12
            g[bad] = rng.standard_normal((int(bad.sum()), dim))
            norms = np.linalg.norm(g, axis=1, keepdims=True)
        return cls(g / norms, seed=seed)


class WeightingOperator:
    """Application of B^{-1/2} to sample rows, for B from a noise covariance.

    kinds:
      identity          x -> x
      scaled-identity   x -> x / gamma        (B = gamma^2 I)
      diagonal          x -> x * d            (d is the diagonal of B^{-1/2})
      eigen-factorized  x -> x Q L^{-1/2} Q^T (B = Q diag(L) Q^T, Q orthonormal)

    Parameters may be live tape Variables, in which case gradients flow
    through the weighting; detached Variables or plain arrays freeze it.
    """

    def __init__(self, kind, scale=None, diag_inv_sqrt=None, q=None, eigenvalues=None):
        self.kind = kind
        self.scale = scale
        self.diag_inv_sqrt = diag_inv_sqrt
        self.q = None if q is None else np.asarray(q, dtype=np.float64)
        self.eigenvalues = eigenvalues
        self._validate()

    @classmethod
    def identity(cls):
        return cls("identity")

    @classmethod
    def scaled_identity(cls, gamma):
        return cls("scaled-identity", scale=gamma)

    @classmethod
    def diagonal(cls, diag_inv_sqrt):
        return cls("diagonal", diag_inv_sqrt=diag_inv_sqrt)

    @classmethod
    def eigen_factorized(cls, q, eigenvalues):
        return cls("eigen-factorized", q=q, eigenvalues=eigenvalues)

    @staticmethod
    def _values(x):
        return x.value if isinstance(x, Variable) else np.asarray(x, dtype=np.float64)

    def _validate(self):
        if self.kind == "identity":
            return
        if self.kind == "scaled-identity":
            s = float(self._values(self.scale))
            if not np.isfinite(s) or s <= 0.0:
                raise ContractViolation(f"scaled-identity weighting needs gamma > 0, got {s}")
            return
        if self.kind == "diagonal":
            d = self._values(self.diag_inv_sqrt)
            if d.ndim != 1 or not np.all(np.isfinite(d)) or np.any(d <= 0.0):
                raise ContractViolation("diagonal weighting needs a finite positive vector")
            return
        if self.kind == "eigen-factorized":
            lam = self._values(self.eigenvalues)
            if self.q.ndim != 2 or self.q.shape[1] != lam.shape[0]:
                raise ContractViolation(f"eigen-factorized weighting shapes disagree: Q {self.q.shape}, eigenvalues {lam.shape}")
            qtq = self.q.T @ self.q
            if not np.allclose(qtq, np.eye(self.q.shape[1]), atol=1e-8):
                raise ContractViolation("eigen-factorized weighting needs orthonormal columns")
            if not np.all(np.isfinite(lam)) or np.any(lam <= 0.0):
                raise ContractViolation("eigen-factorized weighting needs positive eigenvalues")
            return
        raise ContractViolation(f"unknown weighting kind '{self.kind}'")

    def apply(self, samples):
        """Weight an N x d sample block (Variable or array); returns a Variable."""
        x = ad.as_variable(samples)
        if self.kind == "identity":
            return x
        if self.kind == "scaled-identity":
            return ad.div(x, self.scale)
        if self.kind == "diagonal":
            return ad.mul(x, self.diag_inv_sqrt)
        lam = self.eigenvalues
        inv_sqrt = ad.power(ad.clamp_min(lam, EIGENVALUE_FLOOR), -0.5)
        projected = ad.matmul(x, self.q)
        return ad.matmul(ad.mul(projected, inv_sqrt), self.q.T)


def wasserstein2_1d(a, b):
    """Squared 2-Wasserstein between equal-length 1D samples: sort and match."""
    av = ad.as_variable(a)
    bv = ad.as_variable(b)
    if av.value.ndim != 1 or bv.value.ndim != 1 or av.value.shape != bv.value.shape:
        raise ContractViolation(
            f"wasserstein2_1d expects equal-length 1D samples, got {av.value.shape} and {bv.value.shape}"
        )
    diff = ad.sub(ad.sort(av), ad.sort(bv))
    return ad.vmean(ad.power(diff, 2.0))


def sliced_w2(nu, mu_samples, weighting, slices):
    """Monte Carlo sliced squared 2-Wasserstein between two equal-size sample sets.

    ``nu`` must already be subsampled by the caller to the same row count as
    ``mu_samples``. Gradients flow into ``mu_samples`` and into live
    weighting parameters.
    """
    nu_samples = nu.samples if isinstance(nu, EmpiricalMeasure) else np.asarray(nu, dtype=np.float64)
    mu = ad.as_variable(mu_samples)
    if slices.m < 1:
        raise ContractViolation("sliced_w2 needs at least one slice")
    if nu_samples.shape != mu.value.shape:
        raise ContractViolation(
            f"sliced_w2 needs matching sample blocks, got {nu_samples.shape} and {mu.value.shape}"
        )
    if nu_samples.shape[1] != slices.directions.shape[1]:
        raise ContractViolation(
            f"slice dimension {slices.directions.shape[1]} does not match samples of dimension {nu_samples.shape[1]}"
        )
    theta_t = slices.directions.T  # (d, M); weighting applied to samples once, then all projections at once
    nu_w = weighting.apply(nu_samples)
    mu_w = weighting.apply(mu)
    nu_proj = ad.transpose(ad.matmul(nu_w, theta_t))  # (M, N)
    mu_proj = ad.transpose(ad.matmul(mu_w, theta_t))
    diff = ad.sub(ad.sort(nu_proj, axis=-1), ad.sort(mu_proj, axis=-1))
    return ad.vmean(ad.power(diff, 2.0))


def w2_exact_small(nu, mu):
    """Exact squared 2-Wasserstein by optimal assignment; test oracle only."""
    a = nu.samples if isinstance(nu, EmpiricalMeasure) else np.asarray(nu, dtype=np.float64)
    b = mu.samples if isinstance(mu, EmpiricalMeasure) else np.asarray(mu, dtype=np.float64)
    if a.ndim == 1:
        a = a[:, None]
    if b.ndim == 1:
        b = b[:, None]
    if a.shape != b.shape:
        raise ContractViolation(f"w2_exact_small expects matching sample blocks, got {a.shape} and {b.shape}")
    n = a.shape[0]
    if n > 10:
        raise ContractViolation(f"w2_exact_small is an oracle for N <= 10, got N = {n}")
    cost = ((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=2)
    rows, cols = linear_sum_assignment(cost)
    return float(cost[rows, cols].sum() / n)
