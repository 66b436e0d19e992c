"""Local backbone pretraining by next-patch regression on synthetic series."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import preprocess as pp
from .checkpoint import save_checkpoint
from .data import SynthConfig, generate_synthetic
from .exceptions import ContractError, NumericError, ProvenanceError
from .model import ModelConfig, backbone_forward, backbone_shapes, build, embed
from .tensor import Tensor, backward, matmul, mul, parameter, reduce, sub
from .train import AdamState, adam_step

logger = logging.getLogger(__name__)

STREAM_READOUT, STREAM_ORDER, STREAM_DROP = 21, 22, 23


@dataclass(frozen=True)
class PretrainConfig:
    corpus_hours: int = 2000
    epochs: int = 5
    lr: float = 1e-3
    seed: int = 11
    batch_size: int = 16
    window_stride: int = 1

    def to_dict(self) -> dict:
        return asdict(self)


def check_disjoint_seeds(corpus_seed: int, downstream_seeds) -> None:
    """Refuse a backbone whose corpus seed is reused by downstream data."""
    clash = sorted({int(s) for s in downstream_seeds} & {int(corpus_seed)})
    if clash:
        raise ProvenanceError(f"pretraining corpus seed {corpus_seed} is also used by downstream data")


def corpus_windows(config: PretrainConfig, model_config: ModelConfig) -> np.ndarray:
    T = model_config.lookback
    if config.corpus_hours < T + model_config.horizon + 1:
        raise ContractError(f"corpus_hours={config.corpus_hours} is shorter than T + horizon + 1")
    series = generate_synthetic(SynthConfig(hours=config.corpus_hours, seed=config.seed,
                                            station_id="pretrain_corpus", lookback=T,
                                            horizon=model_config.horizon))
    windows = np.lib.stride_tricks.sliding_window_view(series.values, T, axis=0)
    return np.ascontiguousarray(windows.transpose(0, 2, 1)[::config.window_stride])


def pretrain_backbone(config: PretrainConfig, model_config: ModelConfig, path=None):
    """Train the backbone to predict each next raw patch from the tokens before it.

    Returns ``(backbone weights, per-epoch losses, checkpoint path or None)``.
    The saved checkpoint holds only backbone tensors.
    """
    mc = model_config.replace(use_lora=False, causal_mask=True)
    if mc.n_patches < 2:
        raise ContractError("next-patch regression needs at least two patches per window")
    if config.epochs < 0 or config.batch_size < 1:
        raise ContractError("epochs >= 0 and batch_size >= 1 are required")
    bundle = build(mc)
    windows = corpus_windows(config, mc)
    values, _, _ = pp.normalize_batch(windows, mc.norm_eps)
    tokens = pp.patchify_batch(values, mc.patch_len, mc.stride)

    width = mc.patch_len * mc.n_vars
    bound = 1.0 / math.sqrt(mc.d_model)
    readout = parameter(np.random.default_rng([config.seed, STREAM_READOUT])
                        .uniform(-bound, bound, size=(mc.d_model, width)))
    params = dict(bundle.params)
    params["readout"] = readout
    names = list(backbone_shapes(mc)) + ["proj.weight", "proj.bias", "pos.base", "readout"]
    names = [n for n in names if n in params]
    for n in names:
        params[n].requires_grad = True

    order_rng = np.random.default_rng([config.seed, STREAM_ORDER])
    drop_rng = np.random.default_rng([config.seed, STREAM_DROP])
    state = AdamState(lr=config.lr)
    bs = config.batch_size
    history = []
    for epoch in range(1, config.epochs + 1):
        perm = order_rng.permutation(len(windows))
        batches = [perm[i:i + bs] for i in range(0, len(perm) - bs + 1, bs)] or [perm]
        losses = []
        for bi, idx in enumerate(batches):
            for n in names:
                params[n].grad = None
            h0, _ = embed(bundle, windows[idx])
            hl = backbone_forward(bundle, h0, train_mode=True, rng=drop_rng)
            pred = matmul(hl[:, :-1, :], readout)
            err = sub(pred, Tensor(tokens[idx, 1:, :]))
            loss = reduce("mean", mul(err, err))
            value = loss.item()
            if not math.isfinite(value):
                raise NumericError(f"non-finite pretraining loss at epoch {epoch}, batch {bi}")
            backward(loss)
            adam_step(state, params, names)
            losses.append(value)
        history.append(float(np.mean(losses)))
        logger.info("pretrain epoch %d loss %.5f", epoch, history[-1])

    for n in names:
        params[n].grad = None
    bundle.metadata.update({"pretrain": config.to_dict(), "pretrain_history": history})
    backbone = {n: bundle.params[n].data.copy() for n in backbone_shapes(mc)}
    out = save_checkpoint(bundle, Path(path), backbone_only=True) if path is not None else None
    return backbone, history, out
