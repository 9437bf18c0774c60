"""Price series generation, CSV ingestion and supervised feature engineering."""

import csv
import math
from dataclasses import dataclass

import numpy as np

STEP = np.timedelta64(15, "m")
STEPS_PER_DAY = 96
LAGS = tuple(range(1, 21))
MA_WINDOWS = (4, 12, 96)
TIME_FEATURES = ("hour", "day", "month", "weekday")
FEATURE_NAMES = TIME_FEATURES + tuple(f"lag_{k}" for k in LAGS) + tuple(f"ma_{w}" for w in MA_WINDOWS)
SIG_DIGITS = 12


@dataclass
class PriceSeries:
    timestamps: np.ndarray  # datetime64[m]
    prices: np.ndarray

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype="datetime64[m]")
        self.prices = np.asarray(self.prices, dtype=np.float64)
        if self.timestamps.shape != self.prices.shape:
            raise ValueError("timestamps and prices must have equal length")

    def __len__(self):
        return len(self.prices)


@dataclass
class SyntheticConfig:
    base: float = 50.0
    daily_amplitude: float = 20.0
    weekly_amplitude: float = 5.0
    noise_std: float = 0.2
    ar_coef: float = 0.9
    spike_prob: float = 0.005
    spike_scale: float = 15.0
    start: str = "2023-01-01T00:00"


def _round_sig(values, digits=SIG_DIGITS):
    return np.array([float(f"{v:.{digits}g}") for v in values])


def seasonal_component(t, cfg):
    """Deterministic daily + weekly sinusoid at integer step indices ``t``."""
    t = np.asarray(t, dtype=np.float64)
    daily = cfg.daily_amplitude * np.sin(2.0 * np.pi * (t / STEPS_PER_DAY) - np.pi / 2.0)
    weekly = cfg.weekly_amplitude * np.sin(2.0 * np.pi * t / (7 * STEPS_PER_DAY))
    return cfg.base + daily + weekly


def generate_synthetic_series(seed, days=365, cfg=None):
    """Seeded 15-minute price series: seasonal sinusoids, AR(1) noise and sparse positive spikes.

    Values are rounded to 12 significant digits so a CSV round trip is exact.
    """
    if days < 2:
        raise ValueError(f"days must be >= 2, got {days}")
    cfg = cfg or SyntheticConfig()
    rng = np.random.default_rng(seed)
    n = days * STEPS_PER_DAY
    t = np.arange(n)
    shocks = rng.standard_normal(n) * cfg.noise_std
    spike_hits = rng.random(n) < cfg.spike_prob
    spike_sizes = rng.exponential(cfg.spike_scale, n) if cfg.spike_scale > 0 else np.zeros(n)
    noise = np.empty(n)
    level = 0.0
    for i in range(n):
        level = cfg.ar_coef * level + shocks[i]
        noise[i] = level
    prices = seasonal_component(t, cfg) + noise + np.where(spike_hits, spike_sizes, 0.0)
    start = np.datetime64(cfg.start, "m")
    return PriceSeries(start + t * STEP, _round_sig(prices))


def write_csv(series, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["timestamp", "price"])
        for ts, p in zip(series.timestamps, series.prices):
            w.writerow([str(ts), f"{p:.{SIG_DIGITS}g}"])


def load_csv(path):
    """Read a ``timestamp,price`` file; interior 15-minute gaps are linearly interpolated."""
    stamps, prices = [], []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["timestamp", "price"]:
            raise ValueError(f"{path}:1: expected header 'timestamp,price', got {header}")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 2:
                raise ValueError(f"{path}:{lineno}: expected 2 fields, got {len(row)}")
            try:
                ts = np.datetime64(row[0].strip().replace(" ", "T"), "m")
                price = float(row[1])
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: malformed row {row!r}: {exc}") from None
            if not math.isfinite(price):
                raise ValueError(f"{path}:{lineno}: non-finite price {row[1]!r}")
            if stamps and ts == stamps[-1]:
                raise ValueError(f"{path}:{lineno}: duplicate timestamp {row[0]}")
            if stamps and ts < stamps[-1]:
                raise ValueError(f"{path}:{lineno}: timestamps are not increasing")
            stamps.append(ts)
            prices.append(price)
    if not stamps:
        raise ValueError(f"{path}: no data rows")
    stamps = np.array(stamps, dtype="datetime64[m]")
    prices = np.array(prices)
    offsets = (stamps - stamps[0]) / STEP
    if np.any(offsets != np.round(offsets)):
        raise ValueError(f"{path}: timestamps are not on a 15-minute grid")
    offsets = offsets.astype(np.int64)
    grid = np.arange(offsets[-1] + 1)
    filled = np.interp(grid, offsets, prices)
    return PriceSeries(stamps[0] + grid * STEP, filled)


def time_features(timestamps):
    """hour (0-23), day of month (1-31), month (1-12), weekday (Mon=0)."""
    ts = np.asarray(timestamps, dtype="datetime64[m]")
    days = ts.astype("datetime64[D]")
    months = ts.astype("datetime64[M]")
    hour = ((ts - days) // np.timedelta64(1, "h")).astype(np.int64)
    day = (days - months).astype(np.int64) + 1
    month = months.astype(np.int64) % 12 + 1
    weekday = (days.astype(np.int64) + 3) % 7  # 1970-01-01 was a Thursday
    return np.stack([hour, day, month, weekday], axis=1).astype(np.float64)


@dataclass
class FeatureMatrix:
    features: np.ndarray     # (rows, 27)
    targets: np.ndarray      # (rows, horizon)
    timestamps: np.ndarray   # origin time of each row
    columns: tuple = FEATURE_NAMES

    def __len__(self):
        return len(self.features)

    def subset(self, rows):
        return FeatureMatrix(self.features[rows], self.targets[rows], self.timestamps[rows],
                             self.columns)


def engineer_features(series, horizon=20):
    """Rows t = 96 .. n - horizon - 1: time features, lags, trailing means, next ``horizon`` prices."""
    p = series.prices
    n = len(p)
    warm = max(MA_WINDOWS)
    if n <= warm + horizon:
        raise ValueError(f"series of length {n} is too short; need > {warm + horizon}")
    rows = np.arange(warm, n - horizon)
    lags = np.stack([p[rows - k] for k in LAGS], axis=1)
    csum = np.concatenate([[0.0], np.cumsum(p)])
    mas = np.stack([(csum[rows + 1] - csum[rows + 1 - w]) / w for w in MA_WINDOWS], axis=1)
    feats = np.hstack([time_features(series.timestamps[rows]), lags, mas])
    targets = p[rows[:, None] + np.arange(1, horizon + 1)]
    return FeatureMatrix(feats, targets, series.timestamps[rows])


@dataclass
class ScalerParams:
    feature_min: np.ndarray
    feature_max: np.ndarray
    target_min: float
    target_max: float

    @staticmethod
    def _scale(x, lo, hi):
        span = hi - lo
        safe = np.where(span > 0, span, 1.0)
        return np.where(span > 0, (x - lo) / safe, 0.0)

    def transform_features(self, x):
        return self._scale(x, self.feature_min, self.feature_max)

    def transform_targets(self, y):
        return self._scale(y, self.target_min, self.target_max)

    def inverse_targets(self, y):
        return y * (self.target_max - self.target_min) + self.target_min


def fit_scaler(train):
    if len(train) == 0:
        raise ValueError("cannot fit a scaler on zero rows")
    return ScalerParams(train.features.min(axis=0), train.features.max(axis=0),
                        float(train.targets.min()), float(train.targets.max()))


def fit_apply_scaler(train, test):
    """Min-max scaling fitted on ``train`` only and applied to both splits (no clipping)."""
    sc = fit_scaler(train)
    scaled = [FeatureMatrix(sc.transform_features(m.features), sc.transform_targets(m.targets),
                            m.timestamps, m.columns) for m in (train, test)]
    return scaled[0], scaled[1], sc


def split_index(n, test_fraction):
    if not 0.0 < test_fraction < 1.0:
        raise ValueError(f"test_fraction must lie in (0, 1), got {test_fraction}")
    n_test = math.ceil(n * test_fraction)
    return n - n_test


def train_test_split(matrix, test_fraction=0.2):
    """Chronological split; the last ceil(n * fraction) rows form the test set."""
    cut = split_index(len(matrix), test_fraction)
    return matrix.subset(slice(0, cut)), matrix.subset(slice(cut, len(matrix)))


def write_feature_csv(matrix, path):
    horizon = matrix.targets.shape[1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["timestamp", *matrix.columns, *[f"target_{h}" for h in range(1, horizon + 1)]])
        for ts, f, t in zip(matrix.timestamps, matrix.features, matrix.targets):
            w.writerow([str(ts), *(repr(float(v)) for v in f), *(repr(float(v)) for v in t)])
