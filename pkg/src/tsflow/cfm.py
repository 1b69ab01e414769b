"""Conditional flow matching training (unconditional with OT coupling, conditional with GPR prior)."""

from __future__ import annotations

import copy
import dataclasses
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from tsflow import net, ot
from tsflow.data import Dataset, NormStats, fit_normalizer, make_windows
from tsflow.gp import GPRPrior, KernelSpec, build_cov, normalize_times
from tsflow.metrics import weighted_crps
from tsflow.sampling import SamplerConfig, build_condition, forecast_batch

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    sigma_min: float = 1e-4
    batch_size: int = 64
    epochs: int = 400
    batches_per_epoch: int = 128
    seed: int = 0
    prior: KernelSpec = field(default_factory=KernelSpec)
    # "independent" or "ot" for unconditional training; "gpr" for conditional
    coupling: str = "ot"
    lr: float = 1e-3
    clip: float = 0.5
    hidden_dim: int = 64
    num_blocks: int = 3
    time_embed_dim: int = 64
    ema_momentum: float = 0.9999
    normalization: str = "mean-scale"
    norm_scope: str = "dataset"
    lags: tuple[int, ...] = ()
    # unconditional windows use this context length (None: the dataset's)
    uncond_context: int | None = None
    val_every: int = 10
    val_samples: int = 8

    def __post_init__(self):
        if not self.sigma_min > 0:
            raise ValueError("sigma_min must be > 0")
        if self.coupling not in ("independent", "ot", "gpr"):
            raise ValueError(f"unknown coupling {self.coupling!r}")
        if self.coupling == "ot" and self.batch_size < 2:
            raise ValueError("OT coupling needs batch_size >= 2")
        if self.batch_size < 1 or self.epochs < 0 or self.batches_per_epoch < 1:
            raise ValueError("batch_size, batches_per_epoch must be >= 1 and epochs >= 0")


@dataclass
class TrainResult:
    model: net.VectorFieldModel
    opt: net.OptimState
    history: list[dict]
    stats: list[NormStats]


def sample_path_point(x0, x1, t, sigma_min: float, seed=None):
    """``x_t = t x1 + (1 - t) x0 + sigma_min z`` with ``z ~ N(0, I)``."""
    x0 = np.asarray(x0, dtype=np.float64)
    x1 = np.asarray(x1, dtype=np.float64)
    rng = np.random.default_rng(seed)
    t = np.asarray(t, dtype=np.float64)
    if t.ndim == 1:
        t = t[:, None]
    return t * x1 + (1 - t) * x0 + sigma_min * rng.standard_normal(x0.shape)


def cfm_loss_batch(model: net.VectorFieldModel, x0, x1, sigma_min: float, rng, c=None):
    """Regress the field onto ``x1 - x0`` at one random time per example."""
    rng = np.random.default_rng(rng)
    x0 = np.atleast_2d(np.asarray(x0, dtype=np.float64))
    x1 = np.atleast_2d(np.asarray(x1, dtype=np.float64))
    if x0.shape != x1.shape:
        raise ValueError(f"x0 {x0.shape} and x1 {x1.shape} differ in shape")
    t = rng.random(x0.shape[0])
    xt = t[:, None] * x1 + (1 - t[:, None]) * x0 + sigma_min * rng.standard_normal(x0.shape)
    return net.backward(model, t, xt, x1 - x0, c)


def normalized_series(dataset: Dataset, stats: list[NormStats], split: str = "train"):
    view = dataset.view(split)
    return [st.apply(s.values, s.start_index) for s, st in zip(view.series, stats)]


def _windows_array(values, length: int):
    rows = [np.lib.stride_tricks.sliding_window_view(v, length) for v in values if len(v) >= length]
    if not rows:
        raise ValueError(f"no training window of length {length}")
    return np.concatenate(rows, axis=0)


def _make_model(dataset, config, length, cond_dim):
    cfg = net.ModelConfig(
        length=length,
        cond_dim=cond_dim,
        hidden_dim=config.hidden_dim,
        num_blocks=config.num_blocks,
        time_embed_dim=config.time_embed_dim,
        ema_momentum=config.ema_momentum,
    )
    return net.VectorFieldModel.init(cfg, seed=config.seed)


def train_uncond(dataset: Dataset, config: TrainConfig) -> TrainResult:
    """Unconditional training on whole windows with a GP prior.

    Prior batches are paired to data batches by exact mini-batch OT
    (``coupling="ot"``) or by index (``"independent"``).
    """
    if config.coupling == "gpr":
        raise ValueError("unconditional training uses 'ot' or 'independent' coupling")
    C = config.uncond_context or dataset.context_len
    L = C + dataset.pred_len
    stats = fit_normalizer(dataset, config.normalization, config.norm_scope)
    windows = _windows_array(normalized_series(dataset, stats), L)
    chol = build_cov(config.prior, normalize_times(np.arange(L), dataset.period)).chol
    model = _make_model(dataset, config, L, 0)
    opt = net.OptimState.for_model(model, lr=config.lr, clip=config.clip)
    rng = np.random.default_rng(config.seed)
    B = config.batch_size
    history = []
    for epoch in range(1, config.epochs + 1):
        losses = []
        for _ in range(config.batches_per_epoch):
            y = windows[rng.integers(len(windows), size=B)]
            x0 = rng.standard_normal((B, L)) @ chol.T
            if config.coupling == "ot":
                y = y[ot.assign(ot.cost_matrix(x0, y)).perm]
            loss, grads = cfm_loss_batch(model, x0, y, config.sigma_min, rng)
            net.opt_step(model, opt, grads)
            losses.append(loss)
        history.append({"epoch": epoch, "loss": float(np.mean(losses)), "val_crps": math.nan})
        logger.info("epoch %d loss %.5f", epoch, history[-1]["loss"])
    return TrainResult(model, opt, history, stats)


class CondBatcher:
    """Normalized training windows plus their condition inputs."""

    def __init__(self, dataset: Dataset, stats: list[NormStats], lags=()):
        C, P = dataset.context_len, dataset.pred_len
        self.context_len, self.pred_len = C, P
        norm = normalized_series(dataset, stats)
        max_lag = max(lags, default=0)
        past, fut, lag_rows = [], [], []
        for v in norm:
            for o in range(max_lag, len(v) - C - P + 1):
                past.append(v[o : o + C])
                fut.append(v[o + C : o + C + P])
                if lags:
                    lag_rows.append(np.concatenate([v[o - lag : o - lag + C] for lag in lags]))
        if not past:
            raise ValueError("no training windows; series too short")
        self.past = np.asarray(past)
        self.future = np.asarray(fut)
        self.lags = np.asarray(lag_rows) if lags else None

    def __len__(self):
        return len(self.past)

    def batch(self, idx):
        yp = self.past[idx]
        y = np.concatenate([yp, self.future[idx]], axis=1)
        lags = None if self.lags is None else self.lags[idx]
        return yp, y, build_condition(yp, self.pred_len, lags)


def make_gpr_prior(spec: KernelSpec, context_len: int, pred_len: int, period: int) -> GPRPrior:
    t = normalize_times(np.arange(context_len + pred_len), period)
    return GPRPrior(spec, t[:context_len], t[context_len:])


def eval_windows(dataset: Dataset, stats: list[NormStats], split: str, lags=()):
    """Normalized past blocks, raw futures and phase anchors for ``split`` windows."""
    windows = make_windows(dataset, 1, split, lags)
    by_id = {s.id: k for k, s in enumerate(dataset.series)}
    past, lag_rows, futures, anchors, norms = [], [], [], [], []
    for w in windows:
        st = stats[by_id[w.series_id]]
        past.append(st.apply(w.past, w.start_index))
        if lags:
            lag_rows.append(
                np.concatenate(
                    [st.apply(w.lag_features[i], w.start_index - lag) for i, lag in enumerate(lags)]
                )
            )
        futures.append(w.future)
        anchors.append(w.start_index + dataset.context_len)
        norms.append(st)
    lag_arr = np.asarray(lag_rows) if lags else None
    return windows, np.asarray(past), lag_arr, futures, anchors, norms


def evaluate_cond(model, dataset, stats, prior, split, n_samples, sampler, lags=(), seed=0):
    """Weighted CRPS of conditional forecasts on the ``split`` windows."""
    _, past, lag_arr, futures, anchors, norms = eval_windows(dataset, stats, split, lags)
    cfg = dataclasses.replace(sampler, seed=seed)
    samples = forecast_batch(
        model, past, n_samples, "cond-direct", cfg, prior=prior, lag_features=lag_arr
    )
    preds = [st.invert(s, a) for s, st, a in zip(samples, norms, anchors)]
    return weighted_crps(preds, futures), preds, futures


def train_cond(dataset: Dataset, config: TrainConfig, sampler: SamplerConfig | None = None) -> TrainResult:
    """Conditional training with a GP-regression conditional prior.

    An isotropic ``config.prior`` gives the plain conditional baseline.
    Every ``val_every`` epochs the EMA model is scored on the validation
    windows; the best EMA weights are kept.
    """
    sampler = sampler or SamplerConfig()
    C, P = dataset.context_len, dataset.pred_len
    stats = fit_normalizer(dataset, config.normalization, config.norm_scope)
    batcher = CondBatcher(dataset, stats, config.lags)
    prior = make_gpr_prior(config.prior, C, P, dataset.period)
    cond_dim = 2 * (C + P) + len(config.lags) * C
    model = _make_model(dataset, config, C + P, cond_dim)
    opt = net.OptimState.for_model(model, lr=config.lr, clip=config.clip)
    rng = np.random.default_rng(config.seed)
    B = config.batch_size
    history = []
    best = (math.inf, None)
    for epoch in range(1, config.epochs + 1):
        losses = []
        for _ in range(config.batches_per_epoch):
            yp, y, c = batcher.batch(rng.integers(len(batcher), size=B))
            x0 = prior.sample(yp, rng)
            loss, grads = cfm_loss_batch(model, x0, y, config.sigma_min, rng, c)
            net.opt_step(model, opt, grads)
            losses.append(loss)
        val = math.nan
        if config.val_every and epoch % config.val_every == 0:
            val, _, _ = evaluate_cond(
                model.inference_view(), dataset, stats, prior, "val",
                config.val_samples, sampler, config.lags, seed=config.seed,
            )
            if val < best[0]:
                best = (val, copy.deepcopy(model.ema_params))
        history.append({"epoch": epoch, "loss": float(np.mean(losses)), "val_crps": val})
        logger.info("epoch %d loss %.5f val_crps %.5f", epoch, history[-1]["loss"], val)
    if best[1] is not None:
        model.ema_params = best[1]
    return TrainResult(model, opt, history, stats)
