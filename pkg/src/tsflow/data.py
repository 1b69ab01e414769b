"""Time-series ingestion, windowing, normalization and synthetic datasets."""

from __future__ import annotations

import csv
import json
import logging
import math
import warnings
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

logger = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")
STD_FLOOR = 1e-8
SCALE_FLOOR = 1e-8


class DataError(ValueError):
    """Raised for malformed or unusable input data."""


@dataclass(frozen=True)
class TimeSeries:
    id: str
    values: np.ndarray
    period: int
    start_index: int = 0

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 1:
            raise DataError(f"series {self.id!r}: values must be one-dimensional")
        bad = np.flatnonzero(~np.isfinite(values))
        if bad.size:
            raise DataError(
                f"series {self.id!r}: non-finite value at index {self.start_index + int(bad[0])}"
            )
        if self.period < 1:
            raise DataError(f"series {self.id!r}: period must be >= 1, got {self.period}")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    def __len__(self):
        return len(self.values)


@dataclass(frozen=True)
class Window:
    past: np.ndarray
    future: np.ndarray
    series_id: str
    offset: int
    # absolute time index of past[0]; fixes the seasonal phase
    start_index: int = 0
    lag_features: np.ndarray | None = None


@dataclass(frozen=True)
class Dataset:
    """A collection of series sharing one period.

    ``split`` states how much of each series is visible: a ``test`` dataset
    holds full series, ``val`` drops the last ``pred_len`` points and
    ``train`` drops the last ``2 * pred_len``.
    """

    series: tuple[TimeSeries, ...]
    context_len: int
    pred_len: int
    split: str = "test"

    def __post_init__(self):
        object.__setattr__(self, "series", tuple(self.series))
        if self.split not in SPLITS:
            raise DataError(f"unknown split {self.split!r}")
        if self.context_len < 1 or self.pred_len < 1:
            raise DataError("context_len and pred_len must be >= 1")
        periods = {s.period for s in self.series}
        if len(periods) > 1:
            raise DataError(f"all series must share one period, got {sorted(periods)}")

    @property
    def period(self) -> int:
        return self.series[0].period

    def view(self, split: str) -> "Dataset":
        """Truncate every series to the range visible in ``split``."""
        if split not in SPLITS:
            raise DataError(f"unknown split {split!r}")
        drop = (SPLITS.index(self.split) - SPLITS.index(split)) * self.pred_len
        if drop < 0:
            raise DataError(f"cannot view a {self.split!r} dataset as {split!r}")
        if drop == 0:
            return self
        series = tuple(replace(s, values=s.values[: len(s) - drop]) for s in self.series)
        return replace(self, series=series, split=split)


def _check_lengths(series: Sequence[TimeSeries], context_len: int, pred_len: int):
    need = context_len + 3 * pred_len
    for s in series:
        if len(s) < need:
            raise DataError(
                f"series {s.id!r} too short: length {len(s)} < context_len + 3*pred_len = {need}"
            )


def load_dataset(path, format: str, period: int, context_len: int, pred_len: int) -> Dataset:
    """Read a CSV or JSONL file of series into a full (``test``-split) dataset."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"dataset file not found: {path}")
    if format == "csv":
        series = _read_csv(path, period)
    elif format == "jsonl":
        series = _read_jsonl(path, period)
    else:
        raise DataError(f"unknown dataset format {format!r}")
    if not series:
        raise DataError(f"{path}: no series found")
    _check_lengths(series, context_len, pred_len)
    return Dataset(tuple(series), context_len, pred_len, split="test")


def _parse_float(token: str, where: str) -> float:
    try:
        value = float(token)
    except ValueError:
        raise DataError(f"{where}: cannot parse {token!r} as a number") from None
    if not math.isfinite(value):
        raise DataError(f"{where}: non-finite value {token!r}")
    return value


def _read_csv(path: Path, period: int) -> list[TimeSeries]:
    rows: dict[str, list[tuple[int, float]]] = {}
    order: list[str] = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["id", "timestamp_index", "value"]:
            raise DataError(f"{path}:1: expected header 'id,timestamp_index,value'")
        for row in reader:
            line = reader.line_num
            if not row:
                continue
            if len(row) != 3:
                raise DataError(f"{path}:{line}: expected 3 fields, got {len(row)}")
            sid, idx, val = (x.strip() for x in row)
            try:
                index = int(idx)
            except ValueError:
                raise DataError(f"{path}:{line}: bad timestamp_index {idx!r}") from None
            value = _parse_float(val, f"{path}:{line}")
            if sid not in rows:
                if order and sid in order:
                    raise DataError(f"{path}:{line}: rows for id {sid!r} are not grouped")
                rows[sid] = []
                order.append(sid)
            elif order[-1] != sid:
                raise DataError(f"{path}:{line}: rows for id {sid!r} are not grouped")
            prev = rows[sid][-1][0] if rows[sid] else None
            if prev is not None and index != prev + 1:
                raise DataError(
                    f"{path}:{line}: series {sid!r} index {index} does not follow {prev}"
                )
            rows[sid].append((index, value))
    return [
        TimeSeries(sid, np.array([v for _, v in rows[sid]]), period, rows[sid][0][0])
        for sid in order
    ]


def _read_jsonl(path: Path, period: int) -> list[TimeSeries]:
    out = []
    with open(path) as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{line_no}: invalid JSON ({exc.msg})") from None
            if not isinstance(obj, dict) or "id" not in obj or "values" not in obj:
                raise DataError(f"{path}:{line_no}: object needs 'id' and 'values'")
            values = []
            for k, v in enumerate(obj["values"]):
                if isinstance(v, bool) or not isinstance(v, (int, float)):
                    raise DataError(f"{path}:{line_no}: values[{k}] is not a number")
                if not math.isfinite(v):
                    raise DataError(f"{path}:{line_no}: non-finite value at index {k}")
                values.append(float(v))
            start = obj.get("start_index", 0)
            if not isinstance(start, int) or isinstance(start, bool):
                raise DataError(f"{path}:{line_no}: start_index must be an integer")
            out.append(TimeSeries(str(obj["id"]), np.array(values), period, start))
    return out


def write_jsonl(dataset: Dataset, path) -> None:
    with open(path, "w") as fh:
        for s in dataset.series:
            rec = {"id": s.id, "values": s.values.tolist(), "start_index": s.start_index}
            fh.write(json.dumps(rec) + "\n")


def write_csv(dataset: Dataset, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "timestamp_index", "value"])
        for s in dataset.series:
            for k, v in enumerate(s.values):
                w.writerow([s.id, s.start_index + k, repr(float(v))])


# -- normalization -----------------------------------------------------------


@dataclass(frozen=True)
class NormStats:
    kind: str
    scale: float = 1.0
    phase_mean: np.ndarray | None = None
    phase_std: np.ndarray | None = None

    def _phase(self, n: int, start_index: int) -> np.ndarray:
        return (start_index + np.arange(n)) % len(self.phase_mean)

    def apply(self, values, start_index: int = 0) -> np.ndarray:
        values = np.asarray(values, dtype=np.float64)
        if self.kind == "none":
            return values.copy()
        if self.kind == "mean-scale":
            return values / self.scale
        ph = self._phase(values.shape[-1], start_index)
        return (values - self.phase_mean[ph]) / self.phase_std[ph]

    def invert(self, values, start_index: int = 0) -> np.ndarray:
        values = np.asarray(values, dtype=np.float64)
        if self.kind == "none":
            return values.copy()
        if self.kind == "mean-scale":
            return values * self.scale
        ph = self._phase(values.shape[-1], start_index)
        return values * self.phase_std[ph] + self.phase_mean[ph]


def _floored_scale(mean: float) -> float:
    if abs(mean) >= SCALE_FLOOR:
        return mean
    logger.info("mean-scale statistic %.3g floored to %g", mean, SCALE_FLOOR)
    return SCALE_FLOOR


def mean_scale(series, hist) -> tuple[np.ndarray, NormStats]:
    """Divide ``series`` by the mean of ``hist`` (floored away from zero)."""
    hist = np.asarray(hist, dtype=np.float64)
    if hist.size == 0:
        raise DataError("mean_scale needs a nonempty history")
    stats = NormStats("mean-scale", scale=_floored_scale(float(hist.mean())))
    return stats.apply(series), stats


def fit_freq_zscore(segments: Sequence[tuple[np.ndarray, int]], period: int) -> NormStats:
    """Per-phase mean/std pooled over ``(values, start_index)`` segments.

    Phase of a point is its absolute time index modulo ``period``.
    """
    sums = np.zeros(period)
    counts = np.zeros(period)
    for values, start in segments:
        ph = (start + np.arange(len(values))) % period
        sums += np.bincount(ph, weights=values, minlength=period)
        counts += np.bincount(ph, minlength=period)
    if counts.min() < 2:
        raise DataError(f"every phase needs >= 2 observations (period {period})")
    mean = sums / counts
    sq = np.zeros(period)
    for values, start in segments:
        ph = (start + np.arange(len(values))) % period
        sq += np.bincount(ph, weights=(values - mean[ph]) ** 2, minlength=period)
    std = np.sqrt(sq / counts)
    if (std < STD_FLOOR).any():
        warnings.warn(
            f"{int((std < STD_FLOOR).sum())} constant phase(s); std floored to {STD_FLOOR}",
            RuntimeWarning,
            stacklevel=2,
        )
        std = np.maximum(std, STD_FLOOR)
    return NormStats("freq-zscore", phase_mean=mean, phase_std=std)


def freq_zscore(series, period: int, start_index: int = 0) -> tuple[np.ndarray, NormStats]:
    """Standardize each seasonal phase of ``series`` to zero mean, unit std."""
    series = np.asarray(series, dtype=np.float64)
    if len(series) < 2 * period:
        raise DataError(f"freq_zscore needs length >= 2*period = {2 * period}")
    stats = fit_freq_zscore([(series, start_index)], period)
    return stats.apply(series, start_index), stats


def fit_normalizer(dataset: Dataset, kind: str, scope: str = "dataset") -> list[NormStats]:
    """Fit one ``NormStats`` per series on the training range.

    ``scope="dataset"`` pools freq-zscore statistics across all series (the
    returned list then repeats one object); ``"series"`` fits each alone.
    """
    train = dataset.view("train") if dataset.split != "train" else dataset
    if kind == "none":
        return [NormStats("none")] * len(train.series)
    if kind == "mean-scale":
        return [mean_scale(s.values[:1], s.values)[1] for s in train.series]
    if kind != "freq-zscore":
        raise DataError(f"unknown normalization {kind!r}")
    if scope == "dataset":
        stats = fit_freq_zscore([(s.values, s.start_index) for s in train.series], train.period)
        return [stats] * len(train.series)
    if scope == "series":
        return [fit_freq_zscore([(s.values, s.start_index)], s.period) for s in train.series]
    raise DataError(f"unknown normalization scope {scope!r}")


# -- windowing ---------------------------------------------------------------


def make_windows(
    dataset: Dataset, stride: int = 1, split: str = "train", lags: Sequence[int] = ()
) -> list[Window]:
    """Cut (past, future) windows from the range of each series visible in ``split``.

    Training windows slide with ``stride``; validation and test use the one
    window per series whose future is the reserved last ``pred_len`` points.
    Lag features (one row per lag, aligned with the past block) need
    ``max(lags)`` extra points before the window.
    """
    if stride < 1:
        raise DataError(f"stride must be >= 1, got {stride}")
    view = dataset.view(split)
    C, P = view.context_len, view.pred_len
    max_lag = max(lags, default=0)
    out = []
    for s in view.series:
        n = len(s)
        if split == "train":
            offsets = range(max_lag, n - C - P + 1, stride)
        else:
            offsets = [n - C - P] if n - C - P >= max_lag else []
        for o in offsets:
            lag_feats = None
            if lags:
                lag_feats = np.stack([s.values[o - lag : o - lag + C] for lag in lags])
            out.append(
                Window(
                    past=s.values[o : o + C],
                    future=s.values[o + C : o + C + P],
                    series_id=s.id,
                    offset=o,
                    start_index=s.start_index + o,
                    lag_features=lag_feats,
                )
            )
    return out


def stack_windows(windows: Sequence[Window]) -> tuple[np.ndarray, np.ndarray]:
    past = np.stack([w.past for w in windows])
    future = np.stack([w.future for w in windows])
    return past, future


# -- synthetic data ----------------------------------------------------------


@dataclass(frozen=True)
class SyntheticSpec:
    kind: str = "sine-mix"
    n_series: int = 8
    length: int = 480
    period: int = 24
    noise_std: float = 0.1
    seed: int = 0
    context_len: int = 24
    pred_len: int = 24
    length_scale: float = 1.0
    ar_coef: float = 0.9


def gen_synthetic(spec: SyntheticSpec) -> Dataset:
    """Generate a deterministic synthetic dataset.

    * ``sine-mix``: unit-amplitude fundamental of period ``period`` plus a
      second harmonic with amplitude in [0, 0.5], random phases per series.
    * ``ar1``: stationary AR(1) with coefficient ``ar_coef`` (0.9) and
      innovation std ``noise_std``.
    * ``ou-path``: exact samples of the OU Gaussian process on normalized
      times (kernel ``exp(-|d|/length_scale)``), plus observation noise.
    """
    if spec.length < spec.context_len + 3 * spec.pred_len:
        raise DataError(
            f"length {spec.length} < context_len + 3*pred_len = "
            f"{spec.context_len + 3 * spec.pred_len}"
        )
    rng = np.random.default_rng(spec.seed)
    n, p = spec.length, spec.period
    t = np.arange(n)
    series = []
    for k in range(spec.n_series):
        if spec.kind == "sine-mix":
            ph1, ph2 = rng.uniform(0, 2 * np.pi, size=2)
            a2 = rng.uniform(0.0, 0.5)
            x = np.sin(2 * np.pi * t / p + ph1) + a2 * np.sin(4 * np.pi * t / p + ph2)
            x = x + spec.noise_std * rng.standard_normal(n)
        elif spec.kind == "ar1":
            phi = spec.ar_coef
            eps = spec.noise_std * rng.standard_normal(n)
            x = np.empty(n)
            x[0] = eps[0] / math.sqrt(1 - phi**2)
            for i in range(1, n):
                x[i] = phi * x[i - 1] + eps[i]
        elif spec.kind == "ou-path":
            rho = math.exp(-(math.pi / p) / spec.length_scale)
            z = rng.standard_normal(n)
            x = np.empty(n)
            x[0] = z[0]
            c = math.sqrt(1 - rho**2)
            for i in range(1, n):
                x[i] = rho * x[i - 1] + c * z[i]
            x = x + spec.noise_std * rng.standard_normal(n)
        else:
            raise DataError(f"unknown synthetic kind {spec.kind!r}")
        series.append(TimeSeries(f"{spec.kind}-{k}", x, p, 0))
    return Dataset(tuple(series), spec.context_len, spec.pred_len, split="test")
