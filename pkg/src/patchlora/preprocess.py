"""Per-window z-scoring, sliding-window patching and token projection."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import PM25
from .exceptions import ContractError, DimensionError, NumericError
from .tensor import Tensor, matmul

NORM_EPS = 1e-5


@dataclass(frozen=True)
class NormalizedWindow:
    values: np.ndarray
    mu: np.ndarray
    sigma: np.ndarray  # population std plus eps
    pm25_channel_index: int = PM25


@dataclass(frozen=True)
class PatchSequence:
    tokens_raw: np.ndarray
    n_patches: int
    patch_len: int
    stride: int


def patch_count(lookback: int, patch_len: int, stride: int) -> int:
    """Number of full patches of length ``patch_len`` taken every ``stride`` rows."""
    if not 1 <= patch_len <= lookback:
        raise ContractError(f"patch length {patch_len} must lie in [1, {lookback}]")
    if stride < 1:
        raise ContractError(f"stride must be positive, got {stride}")
    return (lookback - patch_len) // stride + 1


def patch_starts(lookback: int, patch_len: int, stride: int) -> np.ndarray:
    """Zero-based first row of each patch."""
    return np.arange(patch_count(lookback, patch_len, stride)) * stride


def normalize_window(window: np.ndarray, eps: float = NORM_EPS) -> NormalizedWindow:
    window = np.asarray(window, dtype=np.float64)
    if window.ndim != 2 or window.shape[0] < 2:
        raise ContractError(f"window must be [T >= 2, d], got shape {window.shape}")
    if not np.isfinite(window).all():
        raise NumericError("window contains non-finite values")
    mu = window.mean(axis=0)
    sigma = window.std(axis=0) + eps
    return NormalizedWindow((window - mu) / sigma, mu, sigma)


def denormalize(nw: NormalizedWindow) -> np.ndarray:
    return nw.values * nw.sigma + nw.mu


def denormalize_pm25(pred, mu: np.ndarray, sigma: np.ndarray, pm25_index: int = PM25) -> np.ndarray:
    """Map normalized PM2.5 predictions back to concentration units."""
    mu = np.asarray(mu)
    sigma = np.asarray(sigma)
    return np.asarray(pred) * sigma[..., pm25_index, None] + mu[..., pm25_index, None]


def normalize_target(target, mu: np.ndarray, sigma: np.ndarray, pm25_index: int = PM25) -> np.ndarray:
    """Express a raw PM2.5 target in the window's normalized units."""
    mu = np.asarray(mu)
    sigma = np.asarray(sigma)
    return (np.asarray(target) - mu[..., pm25_index, None]) / sigma[..., pm25_index, None]


def patchify(nw: NormalizedWindow, patch_len: int, stride: int) -> PatchSequence:
    """Cut overlapping patches and flatten each time-major, then by variable."""
    T, d = nw.values.shape
    starts = patch_starts(T, patch_len, stride)
    tokens = np.stack([nw.values[s:s + patch_len].reshape(-1) for s in starts])
    return PatchSequence(tokens, len(starts), patch_len, stride)


def unflatten_patch(tokens_raw: np.ndarray, i: int, patch_len: int) -> np.ndarray:
    return tokens_raw[i].reshape(patch_len, -1)


# batched forms used by the model; each row of the batch matches the functions above
def normalize_batch(windows: np.ndarray, eps: float = NORM_EPS):
    if windows.ndim != 3 or windows.shape[1] < 2:
        raise ContractError(f"windows must be [B, T >= 2, d], got shape {windows.shape}")
    if not np.isfinite(windows).all():
        raise NumericError("window contains non-finite values")
    mu = windows.mean(axis=1)
    sigma = windows.std(axis=1) + eps
    return (windows - mu[:, None, :]) / sigma[:, None, :], mu, sigma


def patchify_batch(values: np.ndarray, patch_len: int, stride: int) -> np.ndarray:
    B, T, d = values.shape
    starts = patch_starts(T, patch_len, stride)
    idx = starts[:, None] + np.arange(patch_len)[None, :]
    return values[:, idx, :].reshape(B, len(starts), patch_len * d)


def project(tokens_raw, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Token matrix ``tokens_raw @ weight (+ bias)``."""
    tokens = tokens_raw if isinstance(tokens_raw, Tensor) else Tensor(np.asarray(tokens_raw, dtype=weight.dtype))
    if tokens.shape[-1] != weight.shape[0]:
        raise DimensionError(f"project: patch width {tokens.shape[-1]} does not match weight {weight.shape}")
    z = matmul(tokens, weight)
    return z + bias if bias is not None else z
