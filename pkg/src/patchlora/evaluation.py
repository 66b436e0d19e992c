"""Metrics, per-horizon result tables and the rank-ablation sweep."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import preprocess as pp
from .data import PM25, ForecastSample, stack_samples
from .exceptions import ContractError, DimensionError, NumericError
from .model import ModelBundle, ModelConfig, adapter_fraction, predict_normalized, trainable_fraction

logger = logging.getLogger(__name__)

DEFAULT_RANKS = (4, 8, 16, 32, 64)


def mse_mae(pred, target) -> tuple[float, float]:
    """Mean squared and mean absolute error over every entry."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise DimensionError(f"mse_mae: prediction {pred.shape} vs target {target.shape}")
    if pred.size == 0:
        raise ContractError("mse_mae needs at least one sample")
    err = pred - target
    return float(np.mean(err * err)), float(np.mean(np.abs(err)))


def fingerprint(*parts) -> str:
    """Short stable hash of JSON-serialisable configuration parts."""
    blob = json.dumps(parts, sort_keys=True, default=str, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:12]


@dataclass
class MetricsReport:
    mse: float
    mae: float
    n_samples: int
    horizon: int
    station: str = ""
    protocol: str = ""
    rank: int | None = None
    raw_mse: float | None = None
    raw_mae: float | None = None
    fingerprint: str = ""

    def __post_init__(self):
        for mse, mae in ((self.mse, self.mae), (self.raw_mse, self.raw_mae)):
            if mse is None:
                continue
            if not (np.isfinite(mse) and np.isfinite(mae)):
                raise NumericError(f"non-finite metrics mse={mse} mae={mae}")
            if mse < 0 or mae < 0 or mae * mae > mse * (1 + 1e-12):
                raise NumericError(f"inconsistent metrics mse={mse} mae={mae}")

    def to_dict(self) -> dict:
        return asdict(self)


def evaluate(bundle: ModelBundle, samples: list[ForecastSample], station: str = "", protocol: str = "",
             fingerprint: str = "") -> MetricsReport:
    """Inference-mode metrics on normalized and raw PM2.5 scales."""
    if not samples:
        raise ContractError("cannot evaluate on an empty sample set")
    windows, targets = stack_samples(samples)
    pred, stats = predict_normalized(bundle, windows)
    y = pp.normalize_target(targets, stats.mu, stats.sigma, PM25)
    mse, mae = mse_mae(pred, y)
    raw_mse, raw_mae = mse_mae(pp.denormalize_pm25(pred, stats.mu, stats.sigma, PM25), targets)
    rank = bundle.config.rank if bundle.config.use_lora else None
    return MetricsReport(mse, mae, len(samples), bundle.config.horizon, station or samples[0].station_id,
                         protocol, rank, raw_mse, raw_mae, fingerprint)


def persistence_forecast(windows: np.ndarray, horizon: int, eps: float = pp.NORM_EPS) -> np.ndarray:
    """Last observed normalized PM2.5, repeated over the horizon."""
    values, _, _ = pp.normalize_batch(np.asarray(windows, dtype=np.float64), eps)
    return np.repeat(values[:, -1, PM25][:, None], horizon, axis=1)


def persistence_report(samples: list[ForecastSample], station: str = "") -> MetricsReport:
    windows, targets = stack_samples(samples)
    horizon = targets.shape[1]
    _, mu, sigma = pp.normalize_batch(windows)
    pred = persistence_forecast(windows, horizon)
    mse, mae = mse_mae(pred, pp.normalize_target(targets, mu, sigma, PM25))
    raw = np.repeat(windows[:, -1, PM25][:, None], horizon, axis=1)
    raw_mse, raw_mae = mse_mae(raw, targets)
    return MetricsReport(mse, mae, len(samples), horizon, station or samples[0].station_id, "persistence",
                         None, raw_mse, raw_mae)


# -- tables -----------------------------------------------------------------
@dataclass
class HorizonTable:
    rows: list[dict]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=["station", "horizon", "mse", "mae"], lineterminator="\n")
        w.writeheader()
        for r in self.rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
        return buf.getvalue()

    def to_text(self, reference: dict | None = None) -> str:
        width = max(14, 2 + max(len(str(r["station"])) for r in self.rows))
        lines = [f"{'station':<{width}}{'horizon':>8}{'MSE':>10}{'MAE':>10}"]
        for r in self.rows:
            lines.append(f"{r['station']:<{width}}{str(r['horizon']):>8}{r['mse']:>10.4f}{r['mae']:>10.4f}")
        if reference:
            lines.append(f"reference (not reproduced): {reference}")
        return "\n".join(lines) + "\n"

    def all_avg(self) -> dict:
        return next(r for r in self.rows if r["station"] == "All" and r["horizon"] == "Avg")


def horizon_table(reports: dict[tuple[str, int], MetricsReport]) -> HorizonTable:
    """Rows per (station, horizon), an ``Avg`` row per station, then ``All Avg``.

    Station averages are plain means over horizons; the final row is the mean
    of station averages.
    """
    if not reports:
        raise ContractError("no reports to tabulate")
    stations = sorted({s for s, _ in reports})
    horizons = sorted({h for _, h in reports})
    rows = []
    station_avgs = []
    for st in stations:
        if any((st, h) not in reports for h in horizons):
            raise ContractError(f"station {st} lacks some horizons of {horizons}")
        mses = [reports[(st, h)].mse for h in horizons]
        maes = [reports[(st, h)].mae for h in horizons]
        rows.extend({"station": st, "horizon": h, "mse": m, "mae": a} for h, m, a in zip(horizons, mses, maes))
        avg = {"station": st, "horizon": "Avg", "mse": float(np.mean(mses)), "mae": float(np.mean(maes))}
        rows.append(avg)
        station_avgs.append(avg)
    rows.append({"station": "All", "horizon": "Avg",
                 "mse": float(np.mean([a["mse"] for a in station_avgs])),
                 "mae": float(np.mean([a["mae"] for a in station_avgs]))})
    return HorizonTable(rows)


# shown next to few-shot tables for orientation only
REFERENCE_FEW_SHOT_ALL_AVG = {"mse": 0.686, "mae": 0.442}


# -- rank ablation ----------------------------------------------------------
@dataclass
class AblationCell:
    rank: int
    report: MetricsReport
    adapter_fraction: float
    trainable_fraction: float
    grad_norms: list[float] = field(default_factory=list)
    adapter_grad_norms: list[float] = field(default_factory=list)


@dataclass
class AblationGrid:
    ranks: list[int]
    cells: list[AblationCell]
    base_config: dict

    def mse_by_rank(self) -> dict[int, float]:
        return {c.rank: c.report.mse for c in self.cells}

    def best_rank(self) -> int:
        return min(self.cells, key=lambda c: (c.report.mse, c.rank)).rank

    def mse_csv(self) -> str:
        return "rank,mse\n" + "".join(f"{c.rank},{c.report.mse!r}\n" for c in self.cells)

    def fraction_csv(self) -> str:
        return "rank,trainable_fraction\n" + "".join(f"{c.rank},{c.adapter_fraction!r}\n" for c in self.cells)

    def to_rows(self) -> list[dict]:
        return [{"rank": c.rank, "station": c.report.station, "horizon": c.report.horizon,
                 "mse": c.report.mse, "mae": c.report.mae, "adapter_fraction": c.adapter_fraction,
                 "trainable_fraction": c.trainable_fraction} for c in self.cells]


def rank_sweep(base_config: ModelConfig, ranks, run, splits, station: str = "",
               backbone: dict | None = None) -> AblationGrid:
    """Train a fresh model per rank under ``run`` and evaluate on the test split.

    Every cell shares the base config and seeds; only ``rank`` changes.
    Ranks that exceed an adapter's dimensions are skipped unless the config
    allows over-complete adapters.
    """
    from .model import adapter_shapes, build
    from .train import train_protocol

    ranks = list(ranks)
    if not ranks:
        raise ContractError("rank sweep needs at least one rank")
    train, val, test = splits
    limit = min(min(s) for s in adapter_shapes(base_config).values())
    cells = []
    for r in sorted(ranks):
        if r > limit and not base_config.allow_overcomplete_rank:
            logger.warning("skipping rank %d: exceeds smallest adapter dimension %d", r, limit)
            continue
        cfg = base_config.replace(rank=int(r), use_lora=True)
        bundle, done = train_protocol(run.fresh(), (train, val, test), build(cfg, backbone=backbone))
        report = evaluate(bundle, test, station=station, protocol=run.protocol)
        cells.append(AblationCell(
            rank=int(r), report=report,
            adapter_fraction=adapter_fraction(cfg), trainable_fraction=trainable_fraction(cfg),
            grad_norms=[h["grad_norm"] for h in done.history],
            adapter_grad_norms=[h["adapter_grad_norm"] for h in done.history],
        ))
    return AblationGrid([c.rank for c in cells], cells, base_config.to_dict())
