"""Dense-array kernels shared by every other module.

Arrays are plain ``numpy.ndarray`` objects, float32 by default. The float64
path exists for gradient checking only. The loop-heavy image kernels
(resampling, smoothing, component labelling, threshold counting) come from
a compiled Cython extension when available and otherwise from
``_fallback``; set ``VIP2CLIP_BACKEND=python`` to force the fallback.
"""
import math
import os

import numpy as np

from vip2clip.errors import KTooLarge, NonFiniteTensor, ShapeMismatch, ValidationError, ZeroNorm
from vip2clip.numerics import _fallback

_backend = _fallback
BACKEND = "python"
if os.environ.get("VIP2CLIP_BACKEND", "").lower() not in ("python", "fallback"):
    try:
        from vip2clip.numerics import _kernels as _backend  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:  # extension not built
        _backend = _fallback

DTYPE = np.float32

__all__ = [
    "BACKEND",
    "DTYPE",
    "tensor",
    "matmul",
    "softmax",
    "cosine_sim",
    "l2_normalize",
    "upsample_bilinear",
    "interp_matrix",
    "gaussian_kernel",
    "gaussian_smooth",
    "top_k_indices",
    "label_components",
    "threshold_counts",
]


def tensor(data, dtype=DTYPE, checked: bool = True) -> np.ndarray:
    """Build an array of ``dtype``; with ``checked`` reject NaN/Inf."""
    arr = np.array(data, dtype=dtype)
    if checked and not np.all(np.isfinite(arr)):
        raise NonFiniteTensor("tensor contains NaN or Inf")
    return arr


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def softmax(x: np.ndarray, temperature: float = 1.0, axis: int = -1) -> np.ndarray:
    if not temperature > 0:
        raise ValidationError(f"temperature must be positive, got {temperature}")
    z = np.asarray(x) / temperature
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def cosine_sim(u: np.ndarray, v: np.ndarray) -> float:
    u = np.asarray(u, dtype=np.float64).ravel()
    v = np.asarray(v, dtype=np.float64).ravel()
    if u.shape != v.shape:
        raise ShapeMismatch(f"{u.shape} vs {v.shape}")
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0 or nv == 0:
        raise ZeroNorm("cosine similarity of a zero vector")
    return float(np.clip(np.dot(u, v) / (nu * nv), -1.0, 1.0))


def l2_normalize(x: np.ndarray, axis: int = -1, eps: float = 1e-12) -> np.ndarray:
    norm = np.sqrt(np.sum(x * x, axis=axis, keepdims=True))
    return x / np.maximum(norm, eps)


def interp_matrix(n_in: int, n_out: int, dtype=np.float64) -> np.ndarray:
    """Linear map taking a length-``n_in`` signal to its bilinear resample."""
    return _fallback.interp_matrix(n_in, n_out).astype(dtype)


def upsample_bilinear(m: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resample with half-pixel sample centers and edge clamping."""
    if m.ndim != 2 or min(m.shape) < 1 or out_h < 1 or out_w < 1:
        raise ShapeMismatch(f"bad upsample request {m.shape} -> ({out_h}, {out_w})")
    src = np.ascontiguousarray(m, dtype=np.float64)
    return _backend.upsample_bilinear(src, int(out_h), int(out_w)).astype(m.dtype, copy=False)


def gaussian_kernel(sigma: float) -> np.ndarray:
    """Discrete Gaussian truncated at radius ceil(3*sigma), normalized to sum 1."""
    if not sigma > 0:
        raise ValidationError(f"sigma must be positive, got {sigma}")
    radius = max(1, math.ceil(3 * sigma))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-(x * x) / (2 * sigma * sigma))
    return k / k.sum()


def gaussian_smooth(m: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur with symmetric (reflect) borders."""
    if m.ndim != 2:
        raise ShapeMismatch(f"expected a 2-D map, got {m.shape}")
    src = np.ascontiguousarray(m, dtype=np.float64)
    return _backend.gaussian_smooth(src, gaussian_kernel(sigma)).astype(m.dtype, copy=False)


def top_k_indices(scores: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest scores, descending; ties go to the lower index."""
    scores = np.asarray(scores).ravel()
    if not 1 <= k <= scores.size:
        raise KTooLarge(f"k={k} outside [1, {scores.size}]")
    return np.argsort(-scores, kind="stable")[:k]


def label_components(mask: np.ndarray) -> tuple[np.ndarray, int]:
    """4-connected component labels (int32, 0 = background) and the region count."""
    src = np.ascontiguousarray(np.asarray(mask) != 0, dtype=np.uint8)
    return _backend.label_components(src)


def threshold_counts(groups: np.ndarray, scores: np.ndarray, thresholds: np.ndarray,
                     n_groups: int) -> np.ndarray:
    """``out[g, t]`` = number of entries of group ``g`` with ``score >= thresholds[t]``.

    ``thresholds`` must be sorted ascending.
    """
    bins = np.searchsorted(thresholds, scores, side="right").astype(np.int64)
    groups = np.ascontiguousarray(groups, dtype=np.int64)
    return _backend.threshold_counts(groups, np.ascontiguousarray(bins), int(n_groups), len(thresholds))
