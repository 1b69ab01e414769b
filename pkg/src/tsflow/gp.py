"""Gaussian-process kernels, priors and GP-regression conditional priors.

Times are normalized so that one seasonal period spans ``pi``; the periodic
kernel then repeats exactly once per period.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular

KINDS = ("isotropic", "SE", "OU", "PE")
DEFAULT_LENGTH_SCALE = {"isotropic": 1.0, "SE": math.sqrt(0.5), "OU": 1.0, "PE": math.sqrt(2.0)}
DEFAULT_JITTER = 1e-6
MAX_JITTER = 1e-2


class CovarianceError(np.linalg.LinAlgError):
    pass


@dataclass(frozen=True)
class KernelSpec:
    kind: str = "isotropic"
    length_scale: float | None = None
    white_noise: float = DEFAULT_JITTER

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown kernel kind {self.kind!r}; expected one of {KINDS}")
        if self.length_scale is None:
            object.__setattr__(self, "length_scale", DEFAULT_LENGTH_SCALE[self.kind])
        if not self.length_scale > 0:
            raise ValueError(f"length_scale must be > 0, got {self.length_scale}")
        if self.white_noise < 0:
            raise ValueError(f"white_noise must be >= 0, got {self.white_noise}")


@dataclass(frozen=True)
class CovMatrix:
    matrix: np.ndarray
    chol: np.ndarray
    jitter: float = 0.0

    @property
    def n(self) -> int:
        return self.matrix.shape[0]


@dataclass(frozen=True)
class GaussianDist:
    mean: np.ndarray
    factor: np.ndarray

    @property
    def cov(self) -> np.ndarray:
        return self.factor @ self.factor.T


def normalize_times(indices, period: int) -> np.ndarray:
    if period < 1:
        raise ValueError(f"period must be >= 1, got {period}")
    return np.asarray(indices, dtype=np.float64) * math.pi / period


def kernel_eval(spec: KernelSpec, d):
    """Kernel value at lag ``d`` (scalar or array), without white noise."""
    d = np.asarray(d, dtype=np.float64)
    ell = spec.length_scale
    if spec.kind == "isotropic":
        out = (d == 0).astype(np.float64)
    elif spec.kind == "SE":
        out = np.exp(-(d**2) / (2 * ell**2))
    elif spec.kind == "OU":
        out = np.exp(-np.abs(d) / ell)
    else:
        out = np.exp(-(2 / ell**2) * np.sin(d) ** 2)
    return float(out) if out.ndim == 0 else out


def kernel_matrix(spec: KernelSpec, t1, t2) -> np.ndarray:
    t1 = np.asarray(t1, dtype=np.float64)
    t2 = np.asarray(t2, dtype=np.float64)
    return kernel_eval(spec, t1[:, None] - t2[None, :])


def _cholesky_with_jitter(k: np.ndarray, jitter: float) -> tuple[np.ndarray, np.ndarray, float]:
    eye = np.eye(k.shape[0])
    while True:
        mat = k + jitter * eye
        try:
            return mat, np.linalg.cholesky(mat), jitter
        except np.linalg.LinAlgError:
            if jitter >= MAX_JITTER:
                raise CovarianceError(
                    f"covariance not positive definite after jitter escalation to {jitter:g}"
                ) from None
            jitter = min(max(jitter * 10, DEFAULT_JITTER), MAX_JITTER)


def build_cov(spec: KernelSpec, times) -> CovMatrix:
    """Kernel Gram matrix on ``times`` with white noise on the diagonal.

    If the Cholesky factorization fails the diagonal jitter is raised tenfold
    (up to 1e-2) before giving up.
    """
    times = np.asarray(times, dtype=np.float64)
    if times.ndim != 1 or times.size < 1:
        raise ValueError("times must be a nonempty vector")
    k = kernel_matrix(spec, times, times)
    mat, chol, jitter = _cholesky_with_jitter(k, spec.white_noise)
    return CovMatrix(mat, chol, jitter)


def gp_sample(cov: CovMatrix, count: int, seed=None) -> np.ndarray:
    """Draw ``count`` samples ``L z`` as rows of a ``(count, n)`` matrix."""
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((count, cov.n))
    return z @ cov.chol.T


def gp_logpdf_score(cov: CovMatrix, x) -> tuple:
    """Log-density and score ``-Sigma^{-1} x`` of the zero-mean GP.

    ``x`` may be a vector or a batch of row vectors.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != cov.n:
        raise ValueError(f"dimension mismatch: x has {x.shape[-1]}, covariance {cov.n}")
    rows = np.atleast_2d(x)
    w = solve_triangular(cov.chol, rows.T, lower=True)
    alpha = solve_triangular(cov.chol.T, w, lower=False)
    logdet = 2.0 * np.log(np.diag(cov.chol)).sum()
    logp = -0.5 * (w * w).sum(axis=0) - 0.5 * logdet - 0.5 * cov.n * math.log(2 * math.pi)
    score = -alpha.T
    if x.ndim == 1:
        return float(logp[0]), score[0]
    return logp, score


def _psd_factor(sigma: np.ndarray) -> np.ndarray:
    sigma = 0.5 * (sigma + sigma.T)
    try:
        return np.linalg.cholesky(sigma)
    except np.linalg.LinAlgError:
        pass
    evals, evecs = np.linalg.eigh(sigma)
    root = np.sqrt(np.clip(evals, 0.0, None))[:, None] * evecs.T
    # lower-triangular factor with the same Gram matrix
    r = np.linalg.qr(root, mode="r")
    signs = np.where(np.diag(r) < 0, -1.0, 1.0)
    return (signs[:, None] * r).T


class GPRPrior:
    """Conditional prior for a fixed (past, future) time grid.

    The projection ``Sigma_fp Sigma_pp^{-1}`` and the posterior factor are
    computed once; conditioning a new observation is one matrix product.
    """

    def __init__(self, spec: KernelSpec, past_times, future_times):
        past_times = np.asarray(past_times, dtype=np.float64)
        future_times = np.asarray(future_times, dtype=np.float64)
        self.spec = spec
        self.pp = build_cov(spec, past_times)
        ff = kernel_matrix(spec, future_times, future_times)
        ff = ff + spec.white_noise * np.eye(len(future_times))
        fp = kernel_matrix(spec, future_times, past_times)
        a = solve_triangular(self.pp.chol, fp.T, lower=True)
        self.projection = solve_triangular(self.pp.chol.T, a, lower=False).T
        self.cov = ff - a.T @ a
        self.factor = _psd_factor(self.cov)

    @property
    def context_len(self) -> int:
        return self.projection.shape[1]

    @property
    def pred_len(self) -> int:
        return self.projection.shape[0]

    def condition(self, y_p) -> GaussianDist:
        return GaussianDist(self.projection @ np.asarray(y_p, dtype=np.float64), self.factor)

    def sample(self, y_p, rng: np.random.Generator) -> np.ndarray:
        """Draw ``x0 = (y_p + eps_p, mu_f|p + L eps_f)`` for a batch of rows."""
        y_p = np.atleast_2d(np.asarray(y_p, dtype=np.float64))
        z = rng.standard_normal((y_p.shape[0], self.context_len + self.pred_len))
        past = y_p + z[:, : self.context_len]
        future = y_p @ self.projection.T + z[:, self.context_len :] @ self.factor.T
        return np.concatenate([past, future], axis=1)


def gpr_condition(spec: KernelSpec, past_times, future_times, y_p) -> GaussianDist:
    """Gaussian-process regression of the future block on the observed past."""
    return GPRPrior(spec, past_times, future_times).condition(y_p)


def cond_prior_sample(gpr: GaussianDist, y_p, seed=None) -> np.ndarray:
    """One draw of ``x0``: past block from ``N(y_p, I)``, future from ``gpr``."""
    y_p = np.asarray(y_p, dtype=np.float64)
    rng = np.random.default_rng(seed)
    z = rng.standard_normal(len(y_p) + len(gpr.mean))
    past = y_p + z[: len(y_p)]
    future = gpr.mean + gpr.factor @ z[len(y_p) :]
    return np.concatenate([past, future])
