"""Forecast scoring (pinball, CRPS, LPS) and the prior-to-data Wasserstein study."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from tsflow import ot
from tsflow.gp import KernelSpec, build_cov, gp_sample, normalize_times

QUANTILE_LEVELS = np.arange(1, 10) / 10.0
LPS_RIDGE = 1e-6


def pinball(q, y, kappa):
    """Quantile loss ``(kappa - 1{y < q}) (y - q)``, elementwise."""
    q = np.asarray(q, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    out = (kappa - (y < q)) * (y - q)
    return float(out) if np.ndim(out) == 0 else out


@dataclass(frozen=True)
class QuantileForecast:
    levels: np.ndarray
    quantiles: np.ndarray  # (n_levels, P)

    def __post_init__(self):
        q = np.asarray(self.quantiles, dtype=np.float64)
        # crossing quantiles are sorted away before scoring
        object.__setattr__(self, "quantiles", np.sort(q, axis=0))
        object.__setattr__(self, "levels", np.asarray(self.levels, dtype=np.float64))

    @classmethod
    def from_samples(cls, samples, levels=QUANTILE_LEVELS) -> "QuantileForecast":
        samples = np.asarray(samples, dtype=np.float64)
        if samples.ndim == 1:
            samples = samples[:, None]
        if samples.shape[0] == 0:
            raise ValueError("cannot compute quantiles of an empty sample set")
        return cls(levels, np.quantile(samples, levels, axis=0, method="linear"))


def _as_quantiles(forecast) -> QuantileForecast:
    if isinstance(forecast, QuantileForecast):
        return forecast
    return QuantileForecast.from_samples(forecast)


def quantile_losses(forecast, y) -> np.ndarray:
    """``2 * pinball`` per (level, horizon), shape ``(n_levels, P)``."""
    qf = _as_quantiles(forecast)
    y = np.atleast_1d(np.asarray(y, dtype=np.float64))
    return 2.0 * pinball(qf.quantiles, y[None, :], qf.levels[:, None])


def crps(forecast, y) -> float:
    """Quantile-approximated CRPS averaged over the horizon.

    ``forecast`` is a ``(S, P)`` sample matrix or a ``QuantileForecast``.
    """
    return float(quantile_losses(forecast, y).mean())


def weighted_crps(forecasts: Sequence, ys: Sequence) -> float:
    """Dataset-level score: summed quantile losses over all points / sum |y|.

    Averaged over the quantile levels (the mean weighted quantile loss).
    """
    num = 0.0
    den = 0.0
    for f, y in zip(forecasts, ys):
        num += quantile_losses(f, y).mean(axis=0).sum()
        den += np.abs(np.asarray(y, dtype=np.float64)).sum()
    return float(num / max(den, 1e-12))


def fit_linear(past, future, ridge: float = LPS_RIDGE) -> np.ndarray:
    """Ridge-stabilized least squares ``[past, 1] @ W ~ future``."""
    past = np.asarray(past, dtype=np.float64)
    future = np.asarray(future, dtype=np.float64)
    X = np.hstack([past, np.ones((past.shape[0], 1))])
    gram = X.T @ X + ridge * np.eye(X.shape[1])
    return np.linalg.solve(gram, X.T @ future)


def predict_linear(coef, past) -> np.ndarray:
    past = np.atleast_2d(np.asarray(past, dtype=np.float64))
    return np.hstack([past, np.ones((past.shape[0], 1))]) @ coef


def lps(synthetic, real_past, real_future, context_len: int, pred_len: int) -> float:
    """Linear Predictive Score.

    ``synthetic`` is an ``(N, >= C+P)`` array of generated sequences; the
    first ``C`` columns train a linear model for the next ``P``, which is then
    scored on the real test windows (point forecasts, weighted CRPS).
    """
    synthetic = np.asarray(synthetic, dtype=np.float64)
    C, P = context_len, pred_len
    if synthetic.ndim != 2 or synthetic.shape[1] < C + P:
        raise ValueError(f"synthetic samples need >= {C + P} columns")
    coef = fit_linear(synthetic[:, :C], synthetic[:, C : C + P])
    preds = predict_linear(coef, real_past)
    return weighted_crps([p[None, :] for p in preds], list(np.asarray(real_future)))


def seasonal_naive(past, pred_len: int, period: int) -> np.ndarray:
    """Repeat the last observed season; rows of ``past`` are windows."""
    past = np.atleast_2d(np.asarray(past, dtype=np.float64))
    if past.shape[1] < period:
        raise ValueError("seasonal naive needs at least one full period of context")
    idx = past.shape[1] - period + (np.arange(pred_len) % period)
    return past[:, idx]


# -- Wasserstein study -------------------------------------------------------


def _data_windows(values: Sequence[np.ndarray], length: int) -> list[tuple[int, int]]:
    index = []
    for k, v in enumerate(values):
        index.extend((k, o) for o in range(len(v) - length + 1))
    return index


def wasserstein_study(
    values: Sequence[np.ndarray],
    period: int,
    kernels: Sequence[KernelSpec],
    multiples: Sequence[int],
    batch: int = 64,
    trials: int = 8,
    seed: int = 0,
) -> list[dict]:
    """Mini-batch W2^2 between GP prior batches and data windows of ``m * period``.

    ``values`` are (normalized) training series.  Data batches are shared
    across kernels for a given (multiple, trial) so rows are comparable.
    Each row reports mean W2^2, the random-coupling baseline and their ratio.
    """
    rows = []
    for mi, m in enumerate(multiples):
        length = m * period
        index = _data_windows(values, length)
        if len(index) < batch:
            raise ValueError(
                f"insufficient data: {len(index)} windows of length {length}, need {batch}"
            )
        data_batches = []
        for trial in range(trials):
            rng = np.random.default_rng([seed, mi, trial, 0])
            pick = rng.choice(len(index), size=batch, replace=False)
            data_batches.append(np.stack([values[k][o : o + length] for k, o in (index[i] for i in pick)]))
        times = normalize_times(np.arange(length), period)
        for spec in kernels:
            cov = build_cov(spec, times)
            w2s, base = [], []
            for trial, y in enumerate(data_batches):
                # same normal draws for every kernel: only the covariance differs
                x0 = gp_sample(cov, batch, np.random.default_rng([seed, mi, trial, 1]))
                w2s.append(ot.batch_w2(x0, y))
                base.append(ot.random_coupling_cost(x0, y))
            w2, rnd = float(np.mean(w2s)), float(np.mean(base))
            rows.append(
                {
                    "kernel": spec.kind,
                    "length_scale": spec.length_scale,
                    "multiple": m,
                    "length": length,
                    "w2": w2,
                    "random": rnd,
                    "ratio": w2 / rnd if rnd > 0 else 0.0,
                }
            )
    return rows
