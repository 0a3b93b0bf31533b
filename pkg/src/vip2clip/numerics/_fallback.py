"""Pure numpy / Python implementations of the compiled kernels.

Used when the Cython extension is not built, or when forced with
``VIP2CLIP_BACKEND=python``. Signatures and conventions match ``_kernels.pyx``.
"""
from collections import deque

import numpy as np


def reflect_index(idx: np.ndarray, n: int) -> np.ndarray:
    period = 2 * n
    idx = np.mod(idx, period)
    return np.where(idx >= n, period - 1 - idx, idx)


def interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Row i holds the bilinear weights of output sample i over the n_in inputs."""
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(np.intp)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = src - i0
    a = np.zeros((n_out, n_in))
    rows = np.arange(n_out)
    np.add.at(a, (rows, i0), 1.0 - frac)
    np.add.at(a, (rows, i1), frac)
    return a


def upsample_bilinear(m: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    h, w = m.shape
    return interp_matrix(h, out_h) @ m @ interp_matrix(w, out_w).T


def gaussian_smooth(m: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    h, w = m.shape
    r = (len(kernel) - 1) // 2
    offsets = np.arange(-r, r + 1)
    cols = reflect_index(np.arange(w)[:, None] + offsets[None, :], w)
    tmp = m[:, cols] @ kernel
    rows = reflect_index(np.arange(h)[:, None] + offsets[None, :], h)
    return np.einsum("ijk,j->ik", tmp[rows], kernel)


def label_components(mask: np.ndarray) -> tuple[np.ndarray, int]:
    h, w = mask.shape
    labels = np.zeros((h, w), dtype=np.int32)
    count = 0
    for start in np.flatnonzero(mask):
        si, sj = divmod(int(start), w)
        if labels[si, sj]:
            continue
        count += 1
        labels[si, sj] = count
        queue = deque([(si, sj)])
        while queue:
            i, j = queue.popleft()
            for ni, nj in ((i - 1, j), (i + 1, j), (i, j - 1), (i, j + 1)):
                if 0 <= ni < h and 0 <= nj < w and mask[ni, nj] and not labels[ni, nj]:
                    labels[ni, nj] = count
                    queue.append((ni, nj))
    return labels, count


def threshold_counts(group: np.ndarray, bins: np.ndarray, n_groups: int, n_bins: int) -> np.ndarray:
    hist = np.bincount(group * (n_bins + 1) + bins, minlength=n_groups * (n_bins + 1))
    hist = hist.reshape(n_groups, n_bins + 1)
    return np.cumsum(hist[:, ::-1], axis=1)[:, ::-1][:, 1:].astype(np.int64)
