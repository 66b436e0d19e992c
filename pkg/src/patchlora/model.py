"""Patch-token forecaster: projection, adapted positions, frozen decoder, head.

Parameters live in one ordered name -> :class:`Tensor` mapping. The bundle
keeps an explicit partition of those names into frozen and trainable lists;
frozen tensors are created with ``requires_grad=False`` so no gradient can
ever be recorded for them.
"""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import preprocess as pp
from .data import PM25
from .exceptions import ContractError, DimensionError
from .rslora import LoraAdapter, create_adapter, trainable_param_count
from .tensor import (Tensor, add, dropout, gelu, layer_norm, matmul, no_grad, reduce, resolve_dtype, scale,
                     softmax)

logger = logging.getLogger(__name__)

# independent random streams fanned out from the single model seed
STREAM_BACKBONE, STREAM_PROJ, STREAM_POS, STREAM_HEAD, STREAM_POS_LORA, STREAM_OUT_LORA, STREAM_DROPOUT = range(1, 8)

POS_ADAPTER = "pos"
OUT_ADAPTER = "head.out"


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 128
    dropout: float = 0.2
    lookback: int = 36
    patch_len: int = 24
    stride: int = 4
    n_vars: int = 10
    horizon: int = 24
    rank: int = 32
    alpha: float = 32.0
    init_std: float = 0.02
    causal_mask: bool = True
    train_pos_base: bool = True
    use_lora: bool = True
    proj_bias: bool = True
    head_depth: int = 2
    gelu: str = "erf"
    norm_eps: float = pp.NORM_EPS
    ln_eps: float = 1e-5
    backbone_std: float = 0.02
    allow_overcomplete_rank: bool = True
    dtype: str = "float64"
    seed: int = 0

    def __post_init__(self):
        self.validate()

    @classmethod
    def full_scale(cls, horizon: int = 24, **overrides) -> "ModelConfig":
        """Table-level reference sizes (768 wide, 6 layers, 4 heads, rank 32)."""
        base = dict(d_model=768, n_layers=6, n_heads=4, d_ff=768, dropout=0.2, lookback=36, patch_len=24,
                    horizon=horizon, rank=32, alpha=32.0)
        base.update(overrides)
        return cls(**base)

    @property
    def n_patches(self) -> int:
        return pp.patch_count(self.lookback, self.patch_len, self.stride)

    def validate(self) -> None:
        for name in ("d_model", "n_layers", "n_heads", "d_ff", "lookback", "patch_len", "stride", "n_vars",
                     "horizon", "rank", "head_depth"):
            if getattr(self, name) < 1:
                raise ContractError(f"{name} must be positive")
        if self.d_model % self.n_heads:
            raise ContractError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if not 0.0 <= self.dropout < 1.0:
            raise ContractError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.gelu not in ("erf", "tanh"):
            raise ContractError(f"gelu must be 'erf' or 'tanh', got {self.gelu!r}")
        if self.alpha <= 0 or self.init_std <= 0:
            raise ContractError("alpha and init_std must be positive")
        resolve_dtype(self.dtype)
        self.n_patches  # raises on an impossible patch geometry
        if self.use_lora and not self.allow_overcomplete_rank:
            for name, (a, b) in adapter_shapes(self).items():
                if self.rank > min(a, b):
                    raise ContractError(f"rank {self.rank} exceeds adapter {name} dims {(a, b)}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)


def adapter_shapes(cfg: ModelConfig) -> dict[str, tuple[int, int]]:
    return {POS_ADAPTER: (cfg.n_patches, cfg.d_model), OUT_ADAPTER: (cfg.d_model, cfg.horizon)}


def backbone_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    D, F = cfg.d_model, cfg.d_ff
    shapes: dict[str, tuple[int, ...]] = {}
    for i in range(cfg.n_layers):
        p = f"backbone.h{i}."
        shapes.update({
            p + "ln_1.gamma": (D,), p + "ln_1.beta": (D,),
            p + "attn.qkv.weight": (D, 3 * D), p + "attn.qkv.bias": (3 * D,),
            p + "attn.out.weight": (D, D), p + "attn.out.bias": (D,),
            p + "ln_2.gamma": (D,), p + "ln_2.beta": (D,),
            p + "mlp.fc.weight": (D, F), p + "mlp.fc.bias": (F,),
            p + "mlp.out.weight": (F, D), p + "mlp.out.bias": (D,),
        })
    shapes["backbone.ln_f.gamma"] = (D,)
    shapes["backbone.ln_f.beta"] = (D,)
    return shapes


def parameter_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Every parameter name and shape, in canonical order, without allocating."""
    D = cfg.d_model
    shapes: dict[str, tuple[int, ...]] = {"proj.weight": (cfg.patch_len * cfg.n_vars, D)}
    if cfg.proj_bias:
        shapes["proj.bias"] = (D,)
    shapes["pos.base"] = (cfg.n_patches, D)
    shapes.update(backbone_shapes(cfg))
    for j in range(cfg.head_depth - 1):
        shapes[f"head.fc{j}.weight"] = (D, D)
        shapes[f"head.fc{j}.bias"] = (D,)
    shapes["head.out.weight"] = (D, cfg.horizon)
    shapes["head.out.bias"] = (cfg.horizon,)
    if cfg.use_lora:
        for name, (a, b) in adapter_shapes(cfg).items():
            shapes[f"{name}.lora.X"] = (cfg.rank, b)
            shapes[f"{name}.lora.Y"] = (a, cfg.rank)
    return shapes


def is_frozen(name: str, cfg: ModelConfig) -> bool:
    if name.startswith("backbone."):
        return True
    if name == "head.out.weight":
        # base of the head adapter; only the low-rank delta moves
        return cfg.use_lora
    return name == "pos.base" and not cfg.train_pos_base


def partition(cfg: ModelConfig) -> tuple[list[str], list[str]]:
    names = list(parameter_shapes(cfg))
    frozen = [n for n in names if is_frozen(n, cfg)]
    trainable = [n for n in names if not is_frozen(n, cfg)]
    return frozen, trainable


def _numel(shape) -> int:
    return int(np.prod(shape)) if shape else 1


def count_parameters(cfg: ModelConfig) -> dict[str, int]:
    """Analytic parameter counts for a configuration.

    ``base`` excludes adapter factors; ``adapter`` is the sum of r(a + b).
    """
    shapes = parameter_shapes(cfg)
    frozen, trainable = partition(cfg)
    adapter = sum(_numel(s) for n, s in shapes.items() if ".lora." in n)
    total = sum(_numel(s) for s in shapes.values())
    return {
        "total": total,
        "base": total - adapter,
        "adapter": adapter,
        "frozen": sum(_numel(shapes[n]) for n in frozen),
        "trainable": sum(_numel(shapes[n]) for n in trainable),
    }


def adapter_fraction(cfg: ModelConfig) -> float:
    """Adapter parameters as a share of the unadapted model's parameters."""
    c = count_parameters(cfg)
    return c["adapter"] / c["base"]


def trainable_fraction(cfg: ModelConfig) -> float:
    c = count_parameters(cfg)
    return c["trainable"] / c["total"]


class NormStats(NamedTuple):
    mu: np.ndarray
    sigma: np.ndarray


class ModelBundle:
    """Assembled model with its frozen/trainable partition."""

    def __init__(self, config: ModelConfig, params: dict[str, Tensor], adapters: dict[str, LoraAdapter],
                 metadata: dict | None = None):
        self.config = config
        self.params = params
        self.adapters = adapters
        self.frozen, self.trainable = partition(config)
        self.metadata = dict(metadata or {})
        expected = parameter_shapes(config)
        if list(params) != list(expected):
            raise ContractError("parameter names do not match the configuration")
        for name, shape in expected.items():
            if params[name].shape != shape:
                raise DimensionError(f"{name}: expected {shape}, got {params[name].shape}")
        for name in self.frozen:
            params[name].requires_grad = False
        for name in self.trainable:
            params[name].requires_grad = True

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def snapshot(self, names=None) -> dict[str, np.ndarray]:
        names = self.trainable if names is None else names
        return {n: self.params[n].data.copy() for n in names}

    def restore(self, snap: dict[str, np.ndarray]) -> None:
        for n, arr in snap.items():
            self.params[n].data[...] = arr

    def counts(self) -> dict[str, int]:
        return count_parameters(self.config)

    def adapter_param_count(self) -> int:
        return sum(trainable_param_count(a) for a in self.adapters.values())

    def backbone_state(self) -> dict[str, np.ndarray]:
        return {n: self.params[n].data for n in self.params if n.startswith("backbone.")}


def _torch_linear_init(rng, fan_in, shape, dtype):
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def build(config: ModelConfig, backbone: dict[str, np.ndarray] | None = None) -> ModelBundle:
    """Fresh bundle; backbone weights are seeded Gaussian unless ``backbone`` is given."""
    dt = resolve_dtype(config.dtype)
    seed = config.seed

    def stream(k):
        return np.random.default_rng([seed, k])

    shapes = parameter_shapes(config)
    arrays: dict[str, np.ndarray] = {}

    rng = stream(STREAM_PROJ)
    fan_in = config.patch_len * config.n_vars
    arrays["proj.weight"] = _torch_linear_init(rng, fan_in, shapes["proj.weight"], dt)
    if config.proj_bias:
        arrays["proj.bias"] = _torch_linear_init(rng, fan_in, shapes["proj.bias"], dt)
    arrays["pos.base"] = stream(STREAM_POS).normal(0.0, 0.02, size=shapes["pos.base"]).astype(dt)

    bb_shapes = backbone_shapes(config)
    if backbone is None:
        rng = stream(STREAM_BACKBONE)
        for name, shape in bb_shapes.items():
            if name.endswith(".gamma"):
                arrays[name] = np.ones(shape, dtype=dt)
            elif name.endswith((".beta", ".bias")):
                arrays[name] = np.zeros(shape, dtype=dt)
            else:
                arrays[name] = rng.normal(0.0, config.backbone_std, size=shape).astype(dt)
    else:
        for name, shape in bb_shapes.items():
            if name not in backbone:
                raise ContractError(f"backbone weights lack {name}")
            arr = np.asarray(backbone[name], dtype=dt)
            if arr.shape != shape:
                raise DimensionError(f"backbone {name}: expected {shape}, got {arr.shape}")
            arrays[name] = arr.copy()

    rng = stream(STREAM_HEAD)
    D = config.d_model
    for j in range(config.head_depth - 1):
        arrays[f"head.fc{j}.weight"] = _torch_linear_init(rng, D, (D, D), dt)
        arrays[f"head.fc{j}.bias"] = _torch_linear_init(rng, D, (D,), dt)
    arrays["head.out.weight"] = _torch_linear_init(rng, D, (D, config.horizon), dt)
    arrays["head.out.bias"] = _torch_linear_init(rng, D, (config.horizon,), dt)

    params = {name: Tensor(arrays[name]) for name in shapes if name in arrays}
    adapters: dict[str, LoraAdapter] = {}
    if config.use_lora:
        for name, (a, b), k in ((POS_ADAPTER, adapter_shapes(config)[POS_ADAPTER], STREAM_POS_LORA),
                                (OUT_ADAPTER, adapter_shapes(config)[OUT_ADAPTER], STREAM_OUT_LORA)):
            base_ref = "pos.base" if name == POS_ADAPTER else "head.out.weight"
            ad = create_adapter(a, b, config.rank, config.alpha, config.init_std, seed=stream(k),
                                base_ref=base_ref, allow_overcomplete=config.allow_overcomplete_rank, dtype=dt)
            params[f"{name}.lora.X"] = ad.X
            params[f"{name}.lora.Y"] = ad.Y
            adapters[name] = ad
    params = {name: params[name] for name in shapes}
    return ModelBundle(config, params, adapters)


def attach_adapters(bundle: ModelBundle) -> dict[str, LoraAdapter]:
    """Rebuild adapter views over the X/Y tensors already stored in ``params``."""
    cfg = bundle.config
    out = {}
    if cfg.use_lora:
        for name in (POS_ADAPTER, OUT_ADAPTER):
            base_ref = "pos.base" if name == POS_ADAPTER else "head.out.weight"
            out[name] = LoraAdapter(base_ref, bundle.params[f"{name}.lora.X"], bundle.params[f"{name}.lora.Y"],
                                    cfg.rank, cfg.alpha, cfg.init_std)
    bundle.adapters = out
    return out


# -- forward ----------------------------------------------------------------
def _adapted(bundle: ModelBundle, base_name: str, adapter_name: str) -> Tensor:
    base = bundle.params[base_name]
    ad = bundle.adapters.get(adapter_name)
    return base if ad is None else add(base, ad.delta())


def positional_embedding(bundle: ModelBundle) -> Tensor:
    return _adapted(bundle, "pos.base", POS_ADAPTER)


def causal_mask(n: int, dtype) -> np.ndarray:
    mask = np.zeros((n, n), dtype=dtype)
    mask[np.triu_indices(n, k=1)] = -np.inf
    return mask


def embed(bundle: ModelBundle, windows) -> tuple[Tensor, NormStats]:
    """Normalize, patch, project and add positions: returns ``H0`` of shape [B, N, D]."""
    cfg = bundle.config
    dt = resolve_dtype(cfg.dtype)
    windows = np.asarray(windows, dtype=np.float64)
    if windows.ndim != 3 or windows.shape[1:] != (cfg.lookback, cfg.n_vars):
        raise DimensionError(f"input: expected windows [B, {cfg.lookback}, {cfg.n_vars}], got {windows.shape}")
    values, mu, sigma = pp.normalize_batch(windows, cfg.norm_eps)
    tokens_raw = pp.patchify_batch(values, cfg.patch_len, cfg.stride).astype(dt)
    if tokens_raw.shape[1] != cfg.n_patches:
        raise DimensionError(f"patchify: produced {tokens_raw.shape[1]} patches, expected {cfg.n_patches}")
    z = pp.project(Tensor(tokens_raw), bundle.params["proj.weight"], bundle.params.get("proj.bias"))
    return add(z, positional_embedding(bundle)), NormStats(mu, sigma)


def _linear(x: Tensor, params: dict[str, Tensor], prefix: str) -> Tensor:
    return add(matmul(x, params[prefix + ".weight"]), params[prefix + ".bias"])


def _block(x: Tensor, bundle: ModelBundle, i: int, mask, train_mode: bool, rng) -> Tensor:
    cfg = bundle.config
    p = bundle.params
    pre = f"backbone.h{i}."
    B, N, D = x.shape
    H = cfg.n_heads
    dh = D // H

    h = layer_norm(x, p[pre + "ln_1.gamma"], p[pre + "ln_1.beta"], cfg.ln_eps)
    qkv = _linear(h, p, pre + "attn.qkv")

    def heads(t):
        return t.reshape(B, N, H, dh).transpose(0, 2, 1, 3)

    q, k, v = (heads(qkv[..., j * D:(j + 1) * D]) for j in range(3))
    att = scale(matmul(q, k.transpose(0, 1, 3, 2)), 1.0 / math.sqrt(dh))
    if mask is not None:
        att = add(att, Tensor(mask))
    att = softmax(att, axis=-1)
    if train_mode:
        att = dropout(att, cfg.dropout, rng)
    y = matmul(att, v).transpose(0, 2, 1, 3).reshape(B, N, D)
    x = add(x, _linear(y, p, pre + "attn.out"))

    h = layer_norm(x, p[pre + "ln_2.gamma"], p[pre + "ln_2.beta"], cfg.ln_eps)
    m = _linear(gelu(_linear(h, p, pre + "mlp.fc"), cfg.gelu), p, pre + "mlp.out")
    if train_mode:
        m = dropout(m, cfg.dropout, rng)
    return add(x, m)


def backbone_forward(bundle: ModelBundle, h0: Tensor, train_mode: bool = False, rng=None) -> Tensor:
    """Pre-norm decoder stack followed by the final layer norm."""
    cfg = bundle.config
    if h0.ndim != 3 or h0.shape[-1] != cfg.d_model:
        raise DimensionError(f"backbone: expected [B, N, {cfg.d_model}], got {h0.shape}")
    mask = causal_mask(h0.shape[1], h0.dtype) if cfg.causal_mask else None
    x = h0
    for i in range(cfg.n_layers):
        x = _block(x, bundle, i, mask, train_mode, rng)
    return layer_norm(x, bundle.params["backbone.ln_f.gamma"], bundle.params["backbone.ln_f.beta"], cfg.ln_eps)


def head_forward(bundle: ModelBundle, u: Tensor) -> Tensor:
    cfg = bundle.config
    p = bundle.params
    x = u
    for j in range(cfg.head_depth - 1):
        x = gelu(_linear(x, p, f"head.fc{j}"), cfg.gelu)
    w_out = _adapted(bundle, "head.out.weight", OUT_ADAPTER)
    return add(matmul(x, w_out), p["head.out.bias"])


def forward(bundle: ModelBundle, window, train_mode: bool = False,
            rng: np.random.Generator | None = None) -> tuple[Tensor, NormStats]:
    """Normalized PM2.5 forecast for one window [T, d] or a batch [B, T, d].

    Dropout is active only with ``train_mode``; its masks come from ``rng``
    (a stream derived from the model seed when omitted).
    """
    arr = np.asarray(window)
    single = arr.ndim == 2
    if single:
        arr = arr[None]
    if train_mode and rng is None:
        rng = np.random.default_rng([bundle.config.seed, STREAM_DROPOUT])
    h0, stats = embed(bundle, arr)
    hl = backbone_forward(bundle, h0, train_mode, rng)
    u = reduce("mean", hl, axis=1)
    pred = head_forward(bundle, u)
    if pred.shape[-1] != bundle.config.horizon:
        raise DimensionError(f"head: produced {pred.shape[-1]} steps, expected {bundle.config.horizon}")
    if single:
        return pred[0], NormStats(stats.mu[0], stats.sigma[0])
    return pred, stats


def predict_normalized(bundle: ModelBundle, windows, batch_size: int = 256) -> tuple[np.ndarray, NormStats]:
    """Inference-mode forecasts for many windows, batched."""
    windows = np.asarray(windows)
    preds, mus, sigmas = [], [], []
    with no_grad():
        for i in range(0, len(windows), batch_size):
            p, s = forward(bundle, windows[i:i + batch_size], train_mode=False)
            preds.append(p.data)
            mus.append(s.mu)
            sigmas.append(s.sigma)
    return np.concatenate(preds), NormStats(np.concatenate(mus), np.concatenate(sigmas))


def predict_raw(bundle: ModelBundle, window) -> np.ndarray:
    """Forecast in PM2.5 concentration units using the window's own statistics."""
    with no_grad():
        pred, stats = forward(bundle, window, train_mode=False)
    return pp.denormalize_pm25(pred.data, stats.mu, stats.sigma, PM25)
