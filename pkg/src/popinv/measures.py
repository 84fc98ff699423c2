"""Parametric input measures and Gaussian noise covariances.

Input families are sampled by differentiable reparameterization (a fixed
standard-normal draw transformed by the parameters), so gradients reach the
distribution parameters through the samples. Scale-type parameters live in
log space; positivity holds unconditionally under gradient steps.

Covariance families provide three things: noise sampling, the dense
covariance matrix (for regularizers and reporting), and the weighting
operator B^{-1/2} used inside the sliced distance.
"""

from __future__ import annotations

import numpy as np
from scipy.special import gammaln

from . import autodiff as ad
from .autodiff import Variable
from .distances import WeightingOperator
from .errors import ContractViolation


def _leaf(value, learnable, name):
    return Variable(np.asarray(value, dtype=np.float64), requires_grad=learnable, name=name)


def _finite_or_raise(params, label):
    for name, var in params.items():
        if not np.all(np.isfinite(var.value)):
            raise ContractViolation(f"{label} parameter '{name}' is not finite")


class LogNormalScalarParams:
    """Scalar log-normal input family: z = exp(m + sigma * eps)."""

    kind = "lognormal"
    input_dim = 1

    def __init__(self, m, log_sigma, learnable=True):
        self.m = m if isinstance(m, Variable) else _leaf(m, learnable, "alpha.m")
        self.log_sigma = (
            log_sigma if isinstance(log_sigma, Variable) else _leaf(log_sigma, learnable, "alpha.log_sigma")
        )

    def parameters(self):
        return {"alpha.m": self.m, "alpha.log_sigma": self.log_sigma}

    def detach(self):
        return LogNormalScalarParams(ad.detach(self.m), ad.detach(self.log_sigma))

    def sample(self, n, rng):
        eps = rng.standard_normal((n, 1))
        sigma = ad.exp(self.log_sigma)
        return ad.exp(ad.add(self.m, ad.mul(sigma, eps)))

    def natural_values(self):
        return {"m": float(self.m.value), "sigma": float(np.exp(self.log_sigma.value))}


class DiagonalGaussianParams:
    """Diagonal Gaussian input family: z = m + sigma * eps, componentwise."""

    kind = "diag-gaussian"

    def __init__(self, m, log_sigma, learnable=True):
        m_arr = m.value if isinstance(m, Variable) else np.atleast_1d(np.asarray(m, dtype=np.float64))
        ls_arr = (
            log_sigma.value
            if isinstance(log_sigma, Variable)
            else np.atleast_1d(np.asarray(log_sigma, dtype=np.float64))
        )
        if m_arr.shape != ls_arr.shape:
            raise ContractViolation(f"mean and log-sigma shapes disagree: {m_arr.shape} vs {ls_arr.shape}")
        self.m = m if isinstance(m, Variable) else _leaf(m_arr, learnable, "alpha.m")
        self.log_sigma = log_sigma if isinstance(log_sigma, Variable) else _leaf(ls_arr, learnable, "alpha.log_sigma")
        self.input_dim = int(m_arr.shape[0])

    def parameters(self):
        return {"alpha.m": self.m, "alpha.log_sigma": self.log_sigma}

    def detach(self):
        return DiagonalGaussianParams(ad.detach(self.m), ad.detach(self.log_sigma))

    def sample(self, n, rng):
        eps = rng.standard_normal((n, self.input_dim))
        return ad.add(self.m, ad.mul(ad.exp(self.log_sigma), eps))

    def natural_values(self):
        out = {}
        for i, v in enumerate(np.atleast_1d(self.m.value)):
            out[f"m{i}"] = float(v)
        for i, v in enumerate(np.exp(np.atleast_1d(self.log_sigma.value))):
            out[f"sigma{i}"] = float(v)
        return out


class ScaledIdentityCov:
    """Gamma = gamma^2 I."""

    kind = "scaled-identity"

    def __init__(self, log_gamma, dim, learnable=True):
        self.log_gamma = (
            log_gamma if isinstance(log_gamma, Variable) else _leaf(log_gamma, learnable, "gamma.log_gamma")
        )
        self.dim = int(dim)

    def parameters(self):
        return {"gamma.log_gamma": self.log_gamma}

    def detach(self):
        return ScaledIdentityCov(ad.detach(self.log_gamma), self.dim)

    def sample(self, n, rng):
        eps = rng.standard_normal((n, self.dim))
        return ad.mul(ad.exp(self.log_gamma), eps)

    def gamma_matrix(self):
        return ad.mul(ad.exp(ad.mul(self.log_gamma, 2.0)), np.eye(self.dim))

    def weighting(self):
        _finite_or_raise(self.parameters(), "scaled-identity covariance")
        return WeightingOperator.scaled_identity(ad.exp(self.log_gamma))

    def natural_values(self):
        return {"gamma": float(np.exp(self.log_gamma.value))}


def midpoint_grid(d_y):
    """Equally spaced cell-midpoint observation grid on (0, 1)."""
    return (np.arange(d_y) + 0.5) / d_y


class WhittleMaternCov:
    """Whittle-Matern covariance on a 1D interval or a 2D space-time box.

    Eigenpairs of the Laplacian with zero-flux boundaries give the
    Karhunen-Loeve expansion; the amplitude constant is
    sigma = gamma^2 2^d pi^{d/2} G(upsilon + d/2) / G(upsilon) and the mode
    eigenvalues are sigma ell^d (ell^2 w pi^2 + 1)^(-upsilon - d/2) where w is
    j^2 (1D) or j^2 + k^2 (2D). The roughness upsilon is never learned.

    Sampling excludes the constant mode (the field has spatial mean zero);
    the weighting operator keeps every grid mode so B stays SPD.
    """

    kind = "whittle-matern"

    def __init__(self, log_gamma, log_ell, upsilon, grid=None, modes=None, grid_shape=None, learnable=True):
        self.log_gamma = (
            log_gamma if isinstance(log_gamma, Variable) else _leaf(log_gamma, learnable, "gamma.log_gamma")
        )
        self.log_ell = log_ell if isinstance(log_ell, Variable) else _leaf(log_ell, learnable, "gamma.log_ell")
        self.upsilon = float(upsilon)
        if grid_shape is None:
            self.d = 1
            self.grid = midpoint_grid(50) if grid is None else np.asarray(grid, dtype=np.float64)
            self.dim = self.grid.shape[0]
            self.modes = self.dim if modes is None else int(modes)
            js = np.arange(1, self.modes + 1)
            self._sample_freq = (js * np.pi) ** 2
            # normalized cosine eigenfunctions evaluated on the grid, one row per mode
            self._sample_psi = np.sqrt(2.0) * np.cos(np.outer(js, np.pi * self.grid))
            all_j = np.arange(self.dim)
            self._weight_freq = (all_j * np.pi) ** 2
            q = np.cos(np.outer(self.grid, all_j * np.pi)) * np.sqrt(2.0 / self.dim)
            q[:, 0] = np.sqrt(1.0 / self.dim)
            self._weight_q = q
        else:
            self.d = 2
            n1, n2 = grid_shape
            self.grid_shape = (int(n1), int(n2))
            x1 = midpoint_grid(n1)
            x2 = midpoint_grid(n2)
            self.grid = np.stack(np.meshgrid(x1, x2, indexing="ij"), axis=-1).reshape(-1, 2)
            self.dim = n1 * n2
            j_max, k_max = (n1 - 1, n2 - 1) if modes is None else modes
            jj, kk = np.meshgrid(np.arange(j_max + 1), np.arange(k_max + 1), indexing="ij")
            pairs = np.stack([jj.ravel(), kk.ravel()], axis=1)
            keep = ~((pairs[:, 0] == 0) & (pairs[:, 1] == 0))
            sample_pairs = pairs[keep]
            self._sample_freq = (sample_pairs[:, 0] ** 2 + sample_pairs[:, 1] ** 2) * np.pi**2
            norm1 = np.where(sample_pairs[:, 0] == 0, 1.0, np.sqrt(2.0))
            norm2 = np.where(sample_pairs[:, 1] == 0, 1.0, np.sqrt(2.0))
            psi = (
                np.cos(np.outer(sample_pairs[:, 0], np.pi * self.grid[:, 0]))
                * np.cos(np.outer(sample_pairs[:, 1], np.pi * self.grid[:, 1]))
                * (norm1 * norm2)[:, None]
            )
            self._sample_psi = psi
            wj, wk = np.meshgrid(np.arange(n1), np.arange(n2), indexing="ij")
            self._weight_freq = (wj.ravel() ** 2 + wk.ravel() ** 2) * np.pi**2
            q1 = np.cos(np.outer(x1, np.arange(n1) * np.pi)) * np.sqrt(2.0 / n1)
            q1[:, 0] = np.sqrt(1.0 / n1)
            q2 = np.cos(np.outer(x2, np.arange(n2) * np.pi)) * np.sqrt(2.0 / n2)
            q2[:, 0] = np.sqrt(1.0 / n2)
            self._weight_q = np.kron(q1, q2)
            self.modes = int(self._sample_freq.shape[0])

    def parameters(self):
        return {"gamma.log_gamma": self.log_gamma, "gamma.log_ell": self.log_ell}

    def detach(self):
        out = object.__new__(WhittleMaternCov)
        out.__dict__.update(self.__dict__)
        out.log_gamma = ad.detach(self.log_gamma)
        out.log_ell = ad.detach(self.log_ell)
        return out

    def _amplitude(self):
        # sigma = gamma^2 2^d pi^{d/2} G(upsilon + d/2) / G(upsilon)
        const = 2.0**self.d * np.pi ** (self.d / 2.0) * np.exp(gammaln(self.upsilon + self.d / 2.0) - gammaln(self.upsilon))
        return ad.mul(ad.exp(ad.mul(self.log_gamma, 2.0)), const)

    def _eigenvalues(self, freq):
        ell = ad.exp(self.log_ell)
        amp = ad.mul(self._amplitude(), ad.power(ell, float(self.d)))
        base = ad.add(ad.mul(ad.power(ell, 2.0), freq), 1.0)
        return ad.mul(amp, ad.power(base, -(self.upsilon + self.d / 2.0)))

    def sample_eigenvalues(self):
        return self._eigenvalues(self._sample_freq)

    def weight_eigenvalues(self):
        return self._eigenvalues(self._weight_freq)

    def sample(self, n, rng):
        eps = rng.standard_normal((n, self.modes))
        coeff = ad.mul(eps, ad.sqrt(self.sample_eigenvalues()))
        return ad.matmul(coeff, self._sample_psi)

    def gamma_matrix(self):
        lam = self.sample_eigenvalues()
        scaled = ad.mul(ad.transpose(Variable(self._sample_psi)), lam)
        return ad.matmul(scaled, self._sample_psi)

    def weighting(self):
        _finite_or_raise(self.parameters(), "whittle-matern covariance")
        return WeightingOperator.eigen_factorized(self._weight_q, self.weight_eigenvalues())

    def natural_values(self):
        return {"gamma": float(np.exp(self.log_gamma.value)), "ell": float(np.exp(self.log_ell.value))}


class CholeskyCov:
    """Full covariance Gamma = L L^T with positive diagonal via log parameters."""

    kind = "cholesky"

    def __init__(self, strict_lower, log_diag, learnable=True):
        ld = log_diag.value if isinstance(log_diag, Variable) else np.asarray(log_diag, dtype=np.float64)
        d = ld.shape[0]
        n_strict = d * (d - 1) // 2
        sl = strict_lower.value if isinstance(strict_lower, Variable) else np.asarray(strict_lower, dtype=np.float64)
        if sl.shape != (n_strict,):
            raise ContractViolation(f"strict lower triangle needs {n_strict} entries for dim {d}, got {sl.shape}")
        self.strict_lower = (
            strict_lower if isinstance(strict_lower, Variable) else _leaf(sl, learnable, "gamma.strict_lower")
        )
        self.log_diag = log_diag if isinstance(log_diag, Variable) else _leaf(ld, learnable, "gamma.log_diag")
        self.dim = int(d)
        self._strict_rows, self._strict_cols = np.tril_indices(d, k=-1)
        self._diag_idx = np.arange(d)

    @classmethod
    def identity(cls, dim, learnable=True):
        return cls(np.zeros(dim * (dim - 1) // 2), np.zeros(dim), learnable=learnable)

    def parameters(self):
        return {"gamma.strict_lower": self.strict_lower, "gamma.log_diag": self.log_diag}

    def detach(self):
        return CholeskyCov(ad.detach(self.strict_lower), ad.detach(self.log_diag))

    def cholesky_factor(self):
        strict = ad.scatter_matrix(self.strict_lower, self._strict_rows, self._strict_cols, (self.dim, self.dim))
        diag = ad.scatter_matrix(ad.exp(self.log_diag), self._diag_idx, self._diag_idx, (self.dim, self.dim))
        return ad.add(strict, diag)

    def sample(self, n, rng):
        eps = rng.standard_normal((n, self.dim))
        return ad.matmul(eps, ad.transpose(self.cholesky_factor()))

    def gamma_matrix(self):
        factor = self.cholesky_factor()
        return ad.matmul(factor, ad.transpose(factor))

    def weighting(self):
        # diagonal preconditioner from Gamma = L_u D L_u^T: D^{-1/2} is the
        # reciprocal of the Cholesky diagonal
        _finite_or_raise(self.parameters(), "cholesky covariance")
        return WeightingOperator.diagonal(ad.exp(ad.mul(self.log_diag, -1.0)))

    def natural_values(self):
        return {f"ldiag{i}": float(v) for i, v in enumerate(np.exp(self.log_diag.value))}


def sample_inputs(alpha, n, rng):
    """Draw n reparameterized input samples from mu(alpha); rows are samples."""
    if n < 1:
        raise ContractViolation("sample count must be >= 1")
    return alpha.sample(n, rng)


def sample_noise(cov, n, rng):
    """Draw n reparameterized noise vectors from eta(Gamma(beta))."""
    if n < 1:
        raise ContractViolation("sample count must be >= 1")
    return cov.sample(n, rng)


def weighting_of(cov):
    """The weighting operator B^{-1/2} induced by a covariance parameterization."""
    return cov.weighting()
