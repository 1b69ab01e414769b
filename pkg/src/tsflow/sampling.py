"""Generation: Euler integration, flow maps, conditional prior sampling, guidance."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from tsflow.data import NormStats
from tsflow.gp import CovMatrix, GPRPrior, gp_logpdf_score, gp_sample
from tsflow.net import VectorFieldModel

Field = Callable[[float, np.ndarray], np.ndarray]

MODES = ("cond-direct", "uncond-cps-guided")

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SamplerConfig:
    ode_steps: int = 32
    langevin_iterations: int = 4
    langevin_step: float = 1e-3
    langevin_noise: float = 0.01
    inner_ode_steps: int = 4
    guidance_scale: float = 4.0
    # a number in (0, 1), or "uniform" for one draw per sample from kappa_range
    quantile: float | str = "uniform"
    kappa_range: tuple[float, float] = (0.1, 0.9)
    n_samples: int = 100
    seed: int = 0

    def __post_init__(self):
        if self.ode_steps < 1 or self.inner_ode_steps < 1:
            raise ValueError("ode step counts must be >= 1")
        if not self.langevin_step > 0:
            raise ValueError("langevin_step must be > 0")
        if self.guidance_scale < 0:
            raise ValueError("guidance_scale must be >= 0")
        if self.quantile != "uniform" and not 0 < float(self.quantile) < 1:
            raise ValueError(f"quantile must be in (0, 1) or 'uniform', got {self.quantile!r}")


def euler_integrate(field: Field, x0, steps: int, t0: float = 0.0, t1: float = 1.0):
    """Explicit Euler on ``[t0, t1]``: ``x <- x + h field(t0 + k h, x)``."""
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    x = np.asarray(x0, dtype=np.float64)
    h = (t1 - t0) / steps
    for k in range(steps):
        x = x + h * field(t0 + k * h, x)
        if not np.isfinite(x).all():
            raise FloatingPointError(f"non-finite ODE state after Euler step {k}")
    return x


def model_field(model: VectorFieldModel, c=None) -> Field:
    return lambda t, x: model.forward(t, x, c)


def flow_map(model: VectorFieldModel, x, c=None, steps: int = 4, t: float = 0.0):
    """Push ``x`` from time ``t`` to 1 with ``steps`` Euler steps of the model field."""
    return euler_integrate(model_field(model, c), x, steps, t0=t, t1=1.0)


def flow_map_grad(model: VectorFieldModel, x, objective, c=None, steps: int = 4, t: float = 0.0):
    """Input gradient of ``objective(flow_map(x))`` by backprop through every step.

    ``objective(y)`` returns ``(value, dvalue/dy)`` for row batches.
    Returns ``(y, value, grad_x)``.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    h = (1.0 - t) / steps
    stores = []
    for k in range(steps):
        out, store = model.forward(t + k * h, x, c, cache=True)
        stores.append(store)
        x = x + h * out
    value, g = objective(x)
    for store in reversed(stores):
        _, dx = model.backward_from(store, g, want_params=False)
        g = g + h * dx
    return x, value, g


def ald_loglik_grad(y_p, y_hat, kappa):
    """Unit-scale asymmetric-Laplace log-likelihood of ``y_p`` around ``y_hat``.

    Only the first ``C = len(y_p)`` entries of ``y_hat`` are compared.  The
    gradient is the subgradient ``kappa - 1{y < y_hat}``; ties take ``kappa``.
    Rows are handled independently; ``kappa`` may be per row.
    """
    y_p = np.asarray(y_p, dtype=np.float64)
    y_hat = np.asarray(y_hat, dtype=np.float64)
    C = y_p.shape[-1]
    kappa = np.asarray(kappa, dtype=np.float64)
    if kappa.ndim == 1:
        kappa = kappa[:, None]
    if np.any((kappa <= 0) | (kappa >= 1)):
        raise ValueError("kappa must lie in (0, 1)")
    q = y_hat[..., :C]
    slope = kappa - (y_p < q)
    loglik = -(slope * (y_p - q)).sum(axis=-1)
    grad = np.zeros_like(y_hat)
    grad[..., :C] = slope
    return loglik, grad


def _draw_kappa(cfg: SamplerConfig, n: int, rng: np.random.Generator) -> np.ndarray:
    if cfg.quantile == "uniform":
        lo, hi = cfg.kappa_range
        return rng.uniform(lo, hi, size=n)
    return np.full(n, float(cfg.quantile))


def conditional_prior_sampling(
    model: VectorFieldModel,
    prior_cov: CovMatrix,
    y_p,
    cfg: SamplerConfig,
    rng=None,
    *,
    n: int | None = None,
    kappa=None,
    x0=None,
):
    """Langevin ascent on ``log q1(y_p | flow(x0)) + log q0(x0)``.

    ``y_p`` is one observation or a batch of rows (one per chain).
    """
    rng = np.random.default_rng(rng)
    y_p = np.atleast_2d(np.asarray(y_p, dtype=np.float64))
    if n is None:
        n = y_p.shape[0]
    if x0 is None:
        x0 = gp_sample(prior_cov, n, rng)
    x0 = np.array(x0, dtype=np.float64, copy=True)
    if kappa is None:
        kappa = _draw_kappa(cfg, n, rng)
    tau = cfg.langevin_step
    noise = cfg.langevin_noise * math.sqrt(2 * tau)
    # explicit steps on the Gaussian part are stable only for tau * lambda_max(Sigma^-1) < 2
    stiffness = tau / np.linalg.eigvalsh(prior_cov.matrix)[0]
    if stiffness >= 2:
        logger.warning(
            "Langevin step %g is unstable for this prior (tau / lambda_min(Sigma) = %.3g); "
            "raise the kernel white noise or lower the step", tau, stiffness,
        )

    def objective(y):
        return ald_loglik_grad(y_p, y, kappa)

    for i in range(cfg.langevin_iterations):
        _, _, lik_grad = flow_map_grad(model, x0, objective, steps=cfg.inner_ode_steps)
        _, prior_score = gp_logpdf_score(prior_cov, x0)
        x0 = x0 + tau * (lik_grad + prior_score) + noise * rng.standard_normal(x0.shape)
        if not np.isfinite(x0).all():
            raise FloatingPointError(f"non-finite Langevin iterate at iteration {i}")
    return x0


def guided_field(model: VectorFieldModel, y_p, s: float, kappa, inner_steps: int = 4) -> Field:
    """Vector field nudged toward trajectories whose endpoint matches ``y_p``.

    Returns ``u(t, x) + s * grad_x log ALD(y_p | flow_map(x from t))``; with
    ``s = 0`` this is exactly the model field.
    """
    y_p = np.atleast_2d(np.asarray(y_p, dtype=np.float64))

    def objective(y):
        return ald_loglik_grad(y_p, y, kappa)

    def field(t, x):
        u = model.forward(t, x)
        if s == 0:
            return u
        _, _, g = flow_map_grad(model, x, objective, steps=inner_steps, t=t)
        return u + s * g

    return field


def build_condition(y_p, pred_len: int, lag_features=None) -> np.ndarray:
    """Condition rows ``[y_p, 0...0 | mask | lags]`` for the conditional model.

    ``lag_features`` are per-row flattened lag values, or None.
    """
    y_p = np.atleast_2d(np.asarray(y_p, dtype=np.float64))
    n, C = y_p.shape
    padded = np.concatenate([y_p, np.zeros((n, pred_len))], axis=1)
    mask = np.broadcast_to(np.r_[np.ones(C), np.zeros(pred_len)], (n, C + pred_len))
    parts = [padded, mask]
    if lag_features is not None:
        parts.append(np.asarray(lag_features, dtype=np.float64).reshape(n, -1))
    return np.concatenate(parts, axis=1)


def forecast_batch(
    model: VectorFieldModel,
    y_p,
    n_samples: int,
    mode: str,
    cfg: SamplerConfig,
    *,
    prior: GPRPrior | CovMatrix,
    lag_features=None,
    seed=None,
) -> np.ndarray:
    """Forecast samples ``(W, n_samples, P)`` in normalized space for ``W`` windows."""
    if mode not in MODES:
        raise ValueError(f"unknown forecast mode {mode!r}")
    if mode == "cond-direct" and not model.conditional:
        raise ValueError("mode 'cond-direct' needs a conditional model")
    if mode == "uncond-cps-guided" and model.conditional:
        raise ValueError("mode 'uncond-cps-guided' needs an unconditional model")
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    y_p = np.atleast_2d(np.asarray(y_p, dtype=np.float64))
    W, C = y_p.shape
    L = model.config.length
    P = L - C
    rows = np.repeat(y_p, n_samples, axis=0)
    if n_samples == 0 or W == 0:
        return np.zeros((W, n_samples, P))
    if mode == "cond-direct":
        if not isinstance(prior, GPRPrior):
            raise TypeError("cond-direct forecasting needs a GPRPrior")
        lags = None
        if lag_features is not None:
            lags = np.repeat(np.asarray(lag_features).reshape(W, -1), n_samples, axis=0)
        c = build_condition(rows, P, lags)
        x0 = prior.sample(rows, rng)
        x1 = euler_integrate(model_field(model, c), x0, cfg.ode_steps)
    else:
        if not isinstance(prior, CovMatrix):
            raise TypeError("uncond-cps-guided forecasting needs a prior CovMatrix")
        kappa = _draw_kappa(cfg, rows.shape[0], rng)
        x0 = conditional_prior_sampling(model, prior, rows, cfg, rng, kappa=kappa)
        field = guided_field(model, rows, cfg.guidance_scale, kappa, cfg.inner_ode_steps)
        x1 = euler_integrate(field, x0, cfg.ode_steps)
    return x1[:, C:].reshape(W, n_samples, P)


def forecast(
    model: VectorFieldModel,
    y_p,
    n_samples: int = 100,
    mode: str = "cond-direct",
    cfg: SamplerConfig | None = None,
    *,
    prior: GPRPrior | CovMatrix,
    stats: NormStats | None = None,
    start_index: int = 0,
    lag_features=None,
    seed=None,
) -> np.ndarray:
    """``(n_samples, P)`` forecast for one normalized observation ``y_p``.

    With ``stats`` the samples are mapped back to the original scale;
    ``start_index`` is the absolute time index of ``y_p[0]``.
    """
    cfg = cfg or SamplerConfig()
    y_p = np.asarray(y_p, dtype=np.float64)
    lags = None if lag_features is None else np.asarray(lag_features)[None]
    out = forecast_batch(
        model, y_p[None], n_samples, mode, cfg, prior=prior, lag_features=lags, seed=seed
    )[0]
    if stats is not None:
        out = stats.invert(out, start_index + len(y_p))
    return out
