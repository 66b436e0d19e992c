"""Station series ingestion, synthetic stations, samples and splits."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd
from scipy.signal import lfilter

from .exceptions import ContractError, DataError, SchemaError

logger = logging.getLogger(__name__)

CHANNELS = ("PM2.5", "PM10", "SO2", "NO2", "CO", "O3", "TEMP", "PRES", "DEWP", "RAIN")
N_CHANNELS = len(CHANNELS)
PM25 = CHANNELS.index("PM2.5")
TIMESTAMP = "timestamp"
HOUR = np.timedelta64(1, "h")
MISSING_WARN_FRACTION = 0.2

PROTOCOLS = ("long_term", "few_shot", "zero_shot_source")


@dataclass
class LoadReport:
    """Data-quality summary produced by :func:`load_csv`."""

    rows_read: int
    rows_synthesized: int
    rows_dropped_leading: int
    missing_fraction: dict[str, float]
    warnings: list[str] = field(default_factory=list)


@dataclass(eq=False)
class StationSeries:
    """Hourly multivariate record of one monitoring station.

    ``values`` columns follow :data:`CHANNELS`. ``missing_mask`` stays true
    wherever the source had no value, even after imputation.
    """

    station_id: str
    timestamps: np.ndarray
    values: np.ndarray
    missing_mask: np.ndarray
    report: LoadReport | None = None

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype="datetime64[s]")
        self.values = np.asarray(self.values, dtype=np.float64)
        self.missing_mask = np.asarray(self.missing_mask, dtype=bool)
        if self.values.ndim != 2 or self.values.shape[1] != N_CHANNELS:
            raise ContractError(f"station series needs {N_CHANNELS} columns, got shape {self.values.shape}")
        if self.missing_mask.shape != self.values.shape:
            raise ContractError("missing_mask shape differs from values")
        if self.timestamps.shape != (len(self.values),):
            raise ContractError("one timestamp per row is required")
        if len(self.timestamps) > 1 and not (np.diff(self.timestamps) == HOUR).all():
            raise ContractError("timestamps must advance in exact one-hour steps")

    def __len__(self):
        return len(self.values)


@dataclass(frozen=True, eq=False)
class ForecastSample:
    """One lookback window and its raw PM2.5 horizon target."""

    window: np.ndarray
    target: np.ndarray
    origin_time: np.datetime64
    origin_index: int
    station_id: str

    @property
    def span(self) -> tuple[int, int]:
        """Half-open row interval covering window and target."""
        return self.origin_index - len(self.window) + 1, self.origin_index + len(self.target) + 1


# -- CSV ------------------------------------------------------------------
def default_schema() -> dict[str, str]:
    return {name: name for name in (TIMESTAMP,) + CHANNELS}


def load_csv(path, schema: dict[str, str] | None = None, station_id: str | None = None) -> StationSeries:
    """Read a station CSV onto a regular hourly grid.

    Gaps (absent cells or absent hours) are forward-filled and flagged in the
    mask. Leading rows that cannot be filled are dropped. A variable missing in
    more than 20% of hours is reported in ``series.report.warnings``.
    """
    path = Path(path)
    mapping = default_schema()
    if schema:
        mapping.update(schema)
    try:
        frame = pd.read_csv(path, float_precision="round_trip")
    except FileNotFoundError:
        raise
    except Exception as exc:  # pandas raises several parser errors
        raise DataError(f"cannot parse {path}: {exc}") from exc
    for canonical, source in mapping.items():
        if source not in frame.columns:
            raise SchemaError(f"column {source!r} (for {canonical}) missing from {path.name}")

    try:
        stamps = pd.to_datetime(frame[mapping[TIMESTAMP]], format="ISO8601")
    except (ValueError, TypeError) as exc:
        raise DataError(f"unparseable timestamp in {path.name}: {exc}") from exc
    if (stamps != stamps.dt.floor("h")).any():
        raise DataError(f"timestamps in {path.name} are not on the hour")

    data = frame[[mapping[c] for c in CHANNELS]].apply(pd.to_numeric, errors="coerce")
    data.columns = list(CHANNELS)
    data.index = pd.DatetimeIndex(stamps)
    data = data[~data.index.duplicated(keep="first")].sort_index()
    rows_read = len(data)
    if rows_read == 0:
        raise DataError(f"{path.name} holds no data rows")

    grid = pd.date_range(data.index[0], data.index[-1], freq="h")
    data = data.reindex(grid)
    mask = data.isna().to_numpy()
    missing = {c: float(mask[:, i].mean()) for i, c in enumerate(CHANNELS)}
    filled = data.ffill().to_numpy(dtype=np.float64)

    complete = ~np.isnan(filled).any(axis=1)
    first = int(np.argmax(complete)) if complete.any() else len(filled)
    if first == len(filled):
        raise DataError(f"{path.name}: no row can be completed by forward fill")

    warnings = [
        f"{c}: {frac:.1%} of hours missing" for c, frac in missing.items() if frac > MISSING_WARN_FRACTION
    ]
    for w in warnings:
        logger.warning("%s: %s", path.name, w)
    report = LoadReport(
        rows_read=rows_read,
        rows_synthesized=len(grid) - rows_read,
        rows_dropped_leading=first,
        missing_fraction=missing,
        warnings=warnings,
    )
    return StationSeries(
        station_id=station_id or path.stem,
        timestamps=grid.to_numpy()[first:],
        values=filled[first:],
        missing_mask=mask[first:],
        report=report,
    )


def write_csv(series: StationSeries, path) -> Path:
    """Write ``series`` in the ingestion format; masked cells are left blank."""
    path = Path(path)
    stamps = np.datetime_as_string(series.timestamps, unit="s")
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow((TIMESTAMP,) + CHANNELS)
        for stamp, row, miss in zip(stamps, series.values, series.missing_mask):
            writer.writerow([stamp] + ["" if m else repr(float(v)) for v, m in zip(row, miss)])
    return path


# -- synthetic stations ---------------------------------------------------
@dataclass(frozen=True)
class SynthConfig:
    hours: int = 4000
    seed: int = 7
    station_shift: float = 0.0
    noise_std: float = 1.0
    station_id: str = "synthetic"
    lookback: int = 36
    horizon: int = 24
    start: str = "2013-03-01T00:00:00"


# base level, annual amplitude, diurnal amplitude, noise scale, phase offset
CHANNEL_PROFILE = np.array([
    [80.0, 15.0, 10.0, 12.0, 0.0],     # PM2.5 own component, blended below
    [100.0, 20.0, 15.0, 15.0, 0.4],    # PM10
    [15.0, 8.0, 3.0, 3.0, 1.1],        # SO2
    [50.0, 10.0, 12.0, 6.0, 2.0],      # NO2
    [1200.0, 400.0, 200.0, 150.0, 0.9],  # CO
    [55.0, 25.0, 30.0, 8.0, 3.1],      # O3
    [13.0, 12.0, 5.0, 1.5, 3.5],       # TEMP
    [1012.0, 10.0, 1.5, 1.0, 0.3],     # PRES
    [2.0, 13.0, 2.0, 1.5, 3.3],        # DEWP
    [-1.5, 0.5, 0.3, 1.0, 1.7],        # RAIN, clipped at zero
])
AR_COEF = 0.8
PM_LAG = 0.6
PM_TEMP_WEIGHT = -1.5
PM_DEWP_WEIGHT = 2.0
TEMP, DEWP, RAIN = CHANNELS.index("TEMP"), CHANNELS.index("DEWP"), CHANNELS.index("RAIN")


def channel_signals(hours: int, station_shift: float) -> np.ndarray:
    """Deterministic part of every channel: base + annual + diurnal sinusoids."""
    t = np.arange(hours, dtype=np.float64)[:, None]
    base, annual, diurnal, _, phase = CHANNEL_PROFILE.T
    ch = np.arange(N_CHANNELS)
    phase = phase + station_shift * (0.3 + 0.1 * ch)
    base = base * (1.0 + 0.05 * station_shift * np.where(ch % 2 == 0, 1.0, -1.0))
    diurnal = diurnal * (1.0 + 0.1 * station_shift)
    return (base
            + annual * np.sin(2 * np.pi * t / 8760.0 + phase)
            + diurnal * np.sin(2 * np.pi * t / 24.0 + 2.0 * phase))


def generate_synthetic(config: SynthConfig) -> StationSeries:
    """Seeded synthetic station in the layout of :data:`CHANNELS`.

    Every channel is base + annual sinusoid + diurnal sinusoid + AR(1) noise.
    PM2.5 then follows ``pm[t] = 0.6 pm[t-1] + 0.4 (own[t] - 1.5 TEMP[t] +
    2.0 DEWP[t])`` started at its steady state, so meteorology carries real
    signal about future PM2.5.
    """
    need = config.lookback + config.horizon + 1
    if config.hours < need:
        raise ContractError(f"hours={config.hours} is too short; need at least {need} (T + horizon + 1)")
    rng = np.random.default_rng(config.seed)
    eps = rng.standard_normal((config.hours, N_CHANNELS))
    scale = config.noise_std * CHANNEL_PROFILE[:, 3]
    # stationary AR(1): e[0] already has the marginal variance scale**2
    shocks = eps * scale * math.sqrt(1 - AR_COEF ** 2)
    shocks[0] = eps[0] * scale
    noise = lfilter([1.0], [1.0, -AR_COEF], shocks, axis=0)

    values = channel_signals(config.hours, config.station_shift) + noise
    drive = values[:, PM25] + PM_TEMP_WEIGHT * values[:, TEMP] + PM_DEWP_WEIGHT * values[:, DEWP]
    values[:, PM25] = lfilter([1.0 - PM_LAG], [1.0, -PM_LAG], drive, zi=[PM_LAG * drive[0]])[0]
    values[:, RAIN] = np.maximum(values[:, RAIN], 0.0)

    start = np.datetime64(config.start, "s")
    stamps = start + np.arange(config.hours) * HOUR
    return StationSeries(config.station_id, stamps, values, np.zeros_like(values, dtype=bool))


def synthetic_stations(n: int, hours: int, seed: int, shift_step: float = 0.5, noise_std: float = 1.0,
                       lookback: int = 36, horizon: int = 24) -> list[StationSeries]:
    """``n`` stations; station k uses seed ``seed + k`` and shift ``k * shift_step``."""
    return [
        generate_synthetic(SynthConfig(hours=hours, seed=seed + k, station_shift=k * shift_step,
                                       noise_std=noise_std, station_id=f"station_{k}",
                                       lookback=lookback, horizon=horizon))
        for k in range(n)
    ]


# -- samples --------------------------------------------------------------
def make_samples(series: StationSeries, lookback: int, horizon: int) -> list[ForecastSample]:
    """All stride-1 (window, target) pairs free of masked cells, in time order."""
    n = len(series)
    if lookback < 1 or horizon < 1:
        raise ContractError("lookback and horizon must be positive")
    if n < lookback + horizon:
        return []
    bad_row = np.concatenate([[0], np.cumsum(series.missing_mask.any(axis=1))])
    bad_pm = np.concatenate([[0], np.cumsum(series.missing_mask[:, PM25])])
    out = []
    for o in range(lookback - 1, n - horizon):
        lo = o - lookback + 1
        if bad_row[o + 1] - bad_row[lo] or bad_pm[o + horizon + 1] - bad_pm[o + 1]:
            continue
        out.append(ForecastSample(
            window=series.values[lo:o + 1],
            target=series.values[o + 1:o + horizon + 1, PM25],
            origin_time=series.timestamps[o],
            origin_index=o,
            station_id=series.station_id,
        ))
    return out


def stack_samples(samples: list[ForecastSample]) -> tuple[np.ndarray, np.ndarray]:
    """Windows ``[n, T, d]`` and targets ``[n, horizon]`` as dense arrays."""
    if not samples:
        raise ContractError("no samples to stack")
    return np.stack([s.window for s in samples]), np.stack([s.target for s in samples])


# -- splits ---------------------------------------------------------------
@dataclass(frozen=True)
class SplitPlan:
    """Half-open row intervals ``(start, stop)`` for train, validation and test."""

    train_range: tuple[int, int]
    val_range: tuple[int, int]
    test_range: tuple[int, int]
    few_shot_fraction: float = 0.1

    def __post_init__(self):
        ranges = [tuple(int(v) for v in r) for r in (self.train_range, self.val_range, self.test_range)]
        object.__setattr__(self, "train_range", ranges[0])
        object.__setattr__(self, "val_range", ranges[1])
        object.__setattr__(self, "test_range", ranges[2])
        for lo, hi in ranges:
            if lo < 0 or hi < lo:
                raise ContractError(f"invalid interval {(lo, hi)}")
        for (_, hi), (lo, _) in zip(ranges, ranges[1:]):
            if lo < hi:
                raise ContractError("split intervals overlap or are out of chronological order")
        if not 0.0 < self.few_shot_fraction <= 1.0:
            raise ContractError(f"few_shot_fraction must lie in (0, 1], got {self.few_shot_fraction}")

    @classmethod
    def chronological(cls, n_hours: int, test_hours: int | None = None, test_fraction: float = 0.25,
                      val_fraction: float = 0.1, few_shot_fraction: float = 0.1) -> "SplitPlan":
        """Train, then validation (last ``val_fraction`` of training time), then test."""
        n_test = int(test_hours) if test_hours is not None else int(round(n_hours * test_fraction))
        fit_end = n_hours - n_test
        if fit_end <= 0 or n_test < 0:
            raise ContractError(f"cannot carve {n_test} test hours from {n_hours}")
        val_start = fit_end - int(round(fit_end * val_fraction))
        return cls((0, val_start), (val_start, fit_end), (fit_end, n_hours), few_shot_fraction)

    def to_dict(self) -> dict:
        return {"train_range": list(self.train_range), "val_range": list(self.val_range),
                "test_range": list(self.test_range), "few_shot_fraction": self.few_shot_fraction}


def _within(sample: ForecastSample, interval: tuple[int, int]) -> bool:
    lo, hi = sample.span
    return interval[0] <= lo and hi <= interval[1]


def most_recent(samples: list, fraction: float) -> list:
    """Chronologically last ``fraction`` of ``samples`` (at least one when non-empty)."""
    if not samples:
        return []
    k = max(1, int(round(fraction * len(samples))))
    return samples[-k:]


def split(samples: list[ForecastSample], plan: SplitPlan, protocol: str = "long_term",
          n_hours: int | None = None):
    """Assign samples whose whole span lies inside each interval.

    ``few_shot`` keeps the most recent ``plan.few_shot_fraction`` of both the
    training and validation lists; ``zero_shot_source`` returns an empty test
    list because evaluation happens on another station.
    """
    if protocol not in PROTOCOLS:
        raise ContractError(f"unknown protocol {protocol!r}; expected one of {PROTOCOLS}")
    if n_hours is not None and plan.test_range[1] > n_hours:
        raise ContractError(f"plan reaches row {plan.test_range[1]} but series has {n_hours}")
    train = [s for s in samples if _within(s, plan.train_range)]
    val = [s for s in samples if _within(s, plan.val_range)]
    test = [s for s in samples if _within(s, plan.test_range)]
    if protocol == "few_shot":
        train = most_recent(train, plan.few_shot_fraction)
        val = most_recent(val, plan.few_shot_fraction)
    elif protocol == "zero_shot_source":
        test = []
    return train, val, test
