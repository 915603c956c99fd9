"""RGB <-> YUV 4:2:0 conversion (BT.709, 8-bit limited range) and raw planar file I/O."""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

KR, KB = 0.2126, 0.0722
KG = 1.0 - KR - KB


@dataclass
class Yuv420:
    y: np.ndarray
    u: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        h, w = self.y.shape
        want = ((h + 1) // 2, (w + 1) // 2)
        if self.u.shape != want or self.v.shape != want:
            raise ValueError(f"chroma planes must be {want} for a {h}x{w} luma plane, "
                             f"got {self.u.shape} and {self.v.shape}")

    @property
    def height(self) -> int:
        return self.y.shape[0]

    @property
    def width(self) -> int:
        return self.y.shape[1]

    def planes(self):
        return self.y, self.u, self.v

    def copy(self) -> "Yuv420":
        return Yuv420(self.y.copy(), self.u.copy(), self.v.copy())


def _to_u8(x: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(x), 0, 255).astype(np.uint8)


def rgb_to_ycbcr_float(rgb: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    e = rgb.astype(np.float64) / 255.0
    luma = KR * e[..., 0] + KG * e[..., 1] + KB * e[..., 2]
    y = 16.0 + 219.0 * luma
    cb = 128.0 + 224.0 * (e[..., 2] - luma) / (2.0 * (1.0 - KB))
    cr = 128.0 + 224.0 * (e[..., 0] - luma) / (2.0 * (1.0 - KR))
    return y, cb, cr


def rgb_to_yuv420(rgb: np.ndarray) -> Yuv420:
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ValueError(f"expected an (H, W, 3) RGB image, got {rgb.shape}")
    h, w = rgb.shape[:2]
    if h % 2 or w % 2:
        raise ValueError(f"4:2:0 conversion needs even dimensions, got {h}x{w}")
    y, cb, cr = rgb_to_ycbcr_float(rgb)

    def box(c):
        return c.reshape(h // 2, 2, w // 2, 2).mean(axis=(1, 3))

    return Yuv420(_to_u8(y), _to_u8(box(cb)), _to_u8(box(cr)))


def yuv420_to_rgb(yuv: Yuv420) -> np.ndarray:
    h, w = yuv.height, yuv.width
    up_u = np.repeat(np.repeat(yuv.u, 2, axis=0), 2, axis=1)[:h, :w]
    up_v = np.repeat(np.repeat(yuv.v, 2, axis=0), 2, axis=1)[:h, :w]
    luma = (yuv.y.astype(np.float64) - 16.0) / 219.0
    pb = (up_u.astype(np.float64) - 128.0) / 224.0
    pr = (up_v.astype(np.float64) - 128.0) / 224.0
    r = luma + 2.0 * (1.0 - KR) * pr
    b = luma + 2.0 * (1.0 - KB) * pb
    g = (luma - KR * r - KB * b) / KG
    return _to_u8(np.stack([r, g, b], axis=-1) * 255.0)


def luma(rgb: np.ndarray) -> np.ndarray:
    """Full-range BT.709 luma in [0, 255] as float64. A 2-D input is taken as luma already."""
    if rgb.ndim == 2:
        return rgb.astype(np.float64)
    e = rgb.astype(np.float64)
    return KR * e[..., 0] + KG * e[..., 1] + KB * e[..., 2]


def write_yuv420(path: str | os.PathLike, yuv: Yuv420) -> None:
    """Raw planar 8-bit: Y, then U, then V. No header."""
    with open(path, "wb") as f:
        for plane in yuv.planes():
            f.write(np.ascontiguousarray(plane, dtype=np.uint8).tobytes())


def read_yuv420(path: str | os.PathLike, width: int, height: int) -> Yuv420:
    cw, ch = (width + 1) // 2, (height + 1) // 2
    want = width * height + 2 * cw * ch
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size < want:
        raise ValueError(f"{path}: expected {want} bytes for {width}x{height} 4:2:0, got {raw.size}")
    y = raw[:width * height].reshape(height, width)
    u = raw[width * height:width * height + cw * ch].reshape(ch, cw)
    v = raw[width * height + cw * ch:want].reshape(ch, cw)
    return Yuv420(y.copy(), u.copy(), v.copy())
