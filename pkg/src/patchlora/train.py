"""Adam, the horizon-averaged squared loss, and the training protocols."""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import preprocess as pp
from .data import PM25, ForecastSample, stack_samples
from .evaluation import MetricsReport, evaluate
from .exceptions import ContractError, DimensionError, NumericError, ProvenanceError
from .model import ModelBundle, forward, predict_normalized
from .tensor import Tensor, backward, mul, no_grad, reduce, sub

logger = logging.getLogger(__name__)

PROTOCOLS = ("long_term", "few_shot", "zero_shot")
STREAM_SHUFFLE, STREAM_DROPOUT = 11, 12


def loss(pred: Tensor, target: Tensor) -> Tensor:
    """Batch mean of ``(1/horizon) * sum_k (y_k - yhat_k)^2``."""
    if pred.shape != target.shape:
        raise DimensionError(f"loss: prediction {pred.shape} vs target {target.shape}")
    err = sub(pred, target)
    return reduce("mean", mul(err, err))


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(state: AdamState, params: dict[str, Tensor], trainable, frozen=()) -> None:
    """One bias-corrected Adam update of the ``trainable`` names.

    A gradient present on any ``frozen`` name means the partition leaked and
    raises before anything is modified.
    """
    for name in frozen:
        if params[name].grad is not None:
            raise ContractError(f"frozen parameter {name} carries a gradient")
    state.step += 1
    bc1 = 1.0 - state.beta1 ** state.step
    bc2 = 1.0 - state.beta2 ** state.step
    for name in trainable:
        p = params[name]
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        m = state.m.setdefault(name, np.zeros_like(p.data))
        v = state.v.setdefault(name, np.zeros_like(p.data))
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p.data -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


@dataclass
class TrainRun:
    protocol: str = "long_term"
    epochs: int = 10
    batch_size: int = 16
    lr: float = 1e-4
    patience: int = 3
    seed: int = 0
    few_shot_fraction: float = 0.1
    source_station: str | None = None
    target_station: str | None = None
    max_grad_norm: float | None = None
    max_steps: int | None = None
    history: list[dict] = field(default_factory=list)
    provenance: dict = field(default_factory=dict)
    best_epoch: int | None = None
    steps: int = 0

    def __post_init__(self):
        if self.protocol not in PROTOCOLS:
            raise ContractError(f"unknown protocol {self.protocol!r}; expected one of {PROTOCOLS}")
        if self.epochs < 0 or self.batch_size < 1 or self.patience < 1 or self.lr < 0:
            raise ContractError("epochs >= 0, batch_size >= 1, patience >= 1 and lr >= 0 are required")

    def settings(self) -> dict:
        d = dataclasses.asdict(self)
        for k in ("history", "provenance", "best_epoch", "steps"):
            d.pop(k)
        return d

    def fresh(self) -> "TrainRun":
        return TrainRun(**self.settings())

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


class EarlyStopping:
    """Tracks the best validation loss; signals a stop after ``patience`` misses."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = math.inf
        self.best_epoch: int | None = None
        self.wait = 0

    def update(self, epoch: int, value: float) -> bool:
        """Record ``value``; return True when it is a new best."""
        if value < self.best:
            self.best, self.best_epoch, self.wait = value, epoch, 0
            return True
        self.wait += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.wait >= self.patience


def validation_loss(bundle: ModelBundle, windows: np.ndarray, targets: np.ndarray) -> float:
    pred, stats = predict_normalized(bundle, windows)
    err = pred - pp.normalize_target(targets, stats.mu, stats.sigma, PM25)
    return float(np.mean(err * err))


def provenance_intervals(samples: list[ForecastSample]) -> dict[str, list[list[int]]]:
    """Merged row intervals touched by ``samples``, per station."""
    spans: dict[str, list[list[int]]] = {}
    for s in sorted(samples, key=lambda s: (s.station_id, s.span)):
        lo, hi = s.span
        ivs = spans.setdefault(s.station_id, [])
        if ivs and lo <= ivs[-1][1]:
            ivs[-1][1] = max(ivs[-1][1], hi)
        else:
            ivs.append([lo, hi])
    return spans


def _global_norm(grads) -> float:
    return math.sqrt(sum(float(np.sum(g * g)) for g in grads if g is not None))


def fit_arrays(bundle: ModelBundle, run: TrainRun, windows: np.ndarray, targets: np.ndarray,
               val_windows: np.ndarray | None = None, val_targets: np.ndarray | None = None) -> TrainRun:
    """Minibatch Adam on dense arrays with early stopping on validation loss."""
    n = len(windows)
    if n == 0:
        raise ContractError("training set is empty")
    cfg = bundle.config
    if targets.shape[1] != cfg.horizon:
        raise DimensionError(f"targets have horizon {targets.shape[1]}, model predicts {cfg.horizon}")
    has_val = val_windows is not None and len(val_windows) > 0
    shuffle_rng = np.random.default_rng([run.seed, STREAM_SHUFFLE])
    dropout_rng = np.random.default_rng([run.seed, STREAM_DROPOUT])
    state = AdamState(lr=run.lr)
    stopper = EarlyStopping(run.patience)
    best = bundle.snapshot()
    adapter_names = [nm for nm in bundle.trainable if ".lora." in nm]
    bs = run.batch_size

    for epoch in range(1, run.epochs + 1):
        perm = shuffle_rng.permutation(n)
        batches = [perm[i:i + bs] for i in range(0, n - bs + 1, bs)] or [perm]
        losses, norms, adapter_norms = [], [], []
        for bi, idx in enumerate(batches):
            bundle.zero_grad()
            pred, stats = forward(bundle, windows[idx], train_mode=True, rng=dropout_rng)
            y = pp.normalize_target(targets[idx], stats.mu, stats.sigma, PM25).astype(pred.dtype)
            batch_loss = loss(pred, Tensor(y))
            value = batch_loss.item()
            if not math.isfinite(value):
                raise NumericError(f"non-finite loss {value} at epoch {epoch}, batch {bi}")
            backward(batch_loss)
            grads = [bundle.params[nm].grad for nm in bundle.trainable]
            gnorm = _global_norm(grads)
            if run.max_grad_norm is not None and gnorm > run.max_grad_norm:
                factor = run.max_grad_norm / gnorm
                for nm in bundle.trainable:
                    if bundle.params[nm].grad is not None:
                        bundle.params[nm].grad *= factor
            adapter_norms.append(_global_norm(bundle.params[nm].grad for nm in adapter_names))
            adam_step(state, bundle.params, bundle.trainable, bundle.frozen)
            losses.append(value)
            norms.append(gnorm)
            run.steps += 1
            if run.max_steps is not None and run.steps >= run.max_steps:
                break
        bundle.zero_grad()
        val = validation_loss(bundle, val_windows, val_targets) if has_val else None
        run.history.append({
            "epoch": epoch,
            "train_loss": float(np.mean(losses)),
            "val_loss": val,
            "grad_norm": float(np.mean(norms)),
            "adapter_grad_norm": float(np.mean(adapter_norms)),
            "steps": run.steps,
        })
        logger.info("epoch %d train %.5f val %s", epoch, np.mean(losses), val)
        if has_val:
            if stopper.update(epoch, val):
                best = bundle.snapshot()
            if stopper.should_stop:
                logger.info("early stop after epoch %d (best epoch %d)", epoch, stopper.best_epoch)
                break
        if run.max_steps is not None and run.steps >= run.max_steps:
            break

    if has_val and stopper.best_epoch is not None:
        bundle.restore(best)
        run.best_epoch = stopper.best_epoch
    else:
        run.best_epoch = run.history[-1]["epoch"] if run.history else None
    return run


def train_protocol(run: TrainRun, data, bundle: ModelBundle) -> tuple[ModelBundle, TrainRun]:
    """Train ``bundle`` on ``data = (train, val, test)`` sample lists.

    The split already reflects the protocol (few-shot subsetting happens in
    :func:`patchlora.data.split`); ``test`` is not touched here.
    """
    train, val, _ = data
    if not train:
        raise ContractError("training split is empty")
    windows, targets = stack_samples(train)
    vw, vt = stack_samples(val) if val else (None, None)
    run.provenance = {"train": provenance_intervals(train), "val": provenance_intervals(val or [])}
    logger.info("%s: %d training samples, %d validation samples", run.protocol, len(train), len(val or []))
    fit_arrays(bundle, run, windows, targets, vw, vt)
    bundle.metadata["provenance"] = run.provenance
    bundle.metadata["train_run"] = run.settings()
    return bundle, run


def audit_provenance(provenance: dict, samples: list[ForecastSample]) -> None:
    """Raise if any sample overlaps rows that reached training or validation."""
    for part in ("train", "val"):
        for s in samples:
            lo, hi = s.span
            for a, b in provenance.get(part, {}).get(s.station_id, []):
                if lo < b and a < hi:
                    raise ProvenanceError(
                        f"{s.station_id} rows {lo}-{hi} overlap {part} rows {a}-{b}; evaluation data was seen in training")


def zero_shot_eval(bundle: ModelBundle, target_samples: list[ForecastSample], provenance: dict | None = None,
                   fingerprint: str = "") -> MetricsReport:
    """Evaluate a source-trained model on another station without any update."""
    provenance = provenance if provenance is not None else bundle.metadata.get("provenance")
    if provenance is None:
        raise ProvenanceError("no training provenance recorded; cannot audit a zero-shot evaluation")
    audit_provenance(provenance, target_samples)
    with no_grad():
        return evaluate(bundle, target_samples, protocol="zero_shot", fingerprint=fingerprint)
