"""Separable bicubic resampling.

Follows the imresize convention used to build SR benchmarks: pixel-centre
alignment, kernel stretched by 1/scale when shrinking (antialiasing), symmetric
boundary reflection, rows of weights normalised to sum to one.
"""

from __future__ import annotations

import math

import numpy as np

A = -0.5


def cubic(x: np.ndarray, a: float = A) -> np.ndarray:
    x = np.abs(x)
    x2, x3 = x * x, x * x * x
    near = (a + 2) * x3 - (a + 3) * x2 + 1
    far = a * x3 - 5 * a * x2 + 8 * a * x - 4 * a
    return np.where(x <= 1, near, np.where(x < 2, far, 0.0))


def reflect_index(idx: np.ndarray, n: int) -> np.ndarray:
    """Symmetric (edge-repeating) reflection of arbitrary integer indices into [0, n)."""
    period = 2 * n
    m = np.mod(idx, period)
    return np.where(m < n, m, period - 1 - m)


def resize_weights(n_in: int, n_out: int, antialias: bool = True, a: float = A) -> np.ndarray:
    """Dense (n_out, n_in) matrix W so that out = W @ in along one axis."""
    scale = n_out / n_in
    stretch = scale < 1 and antialias
    width = 4.0 / scale if stretch else 4.0
    centers = (np.arange(n_out) + 0.5) / scale - 0.5
    taps = int(math.ceil(width)) + 2
    left = np.floor(centers - width / 2).astype(int)
    idx = left[:, None] + np.arange(taps)[None, :]
    dist = centers[:, None] - idx
    w = scale * cubic(dist * scale, a) if stretch else cubic(dist, a)
    w = w / w.sum(axis=1, keepdims=True)
    out = np.zeros((n_out, n_in))
    np.add.at(out, (np.repeat(np.arange(n_out), taps), reflect_index(idx, n_in).ravel()), w.ravel())
    return out


def bicubic_resize(img: np.ndarray, out_h: int, out_w: int, antialias: bool = True) -> np.ndarray:
    """Resize an (H, W) or (H, W, C) image. uint8 in -> rounded, clipped uint8 out."""
    if out_h <= 0 or out_w <= 0:
        raise ValueError(f"target size must be positive, got {out_h}x{out_w}")
    h, w = img.shape[:2]
    x = img.astype(np.float64)
    wh = resize_weights(h, out_h, antialias)
    ww = resize_weights(w, out_w, antialias)
    out = np.einsum("oh,hw...->ow...", wh, x)
    out = np.einsum("pw,ow...->op...", ww, out)
    if img.dtype == np.uint8:
        return np.clip(np.rint(out), 0, 255).astype(np.uint8)
    return out


def downscale(img: np.ndarray, r: int) -> np.ndarray:
    h, w = img.shape[:2]
    if h % r or w % r:
        raise ValueError(f"{h}x{w} image not divisible by scale factor {r}")
    return bicubic_resize(img, h // r, w // r)


def upscale(img: np.ndarray, r: int) -> np.ndarray:
    h, w = img.shape[:2]
    return bicubic_resize(img, h * r, w * r)
