"""uint8 HWC images <-> normalised float CHW tensors."""

from __future__ import annotations

import numpy as np
import torch


def to_tensor(img: np.ndarray, dtype=torch.float32) -> torch.Tensor:
    """(H, W, 3) uint8 -> (3, H, W) in [0, 1]."""
    return torch.from_numpy(np.ascontiguousarray(img.transpose(2, 0, 1))).to(dtype) / 255.0


def to_batch(imgs, dtype=torch.float32) -> torch.Tensor:
    return torch.stack([to_tensor(i, dtype) for i in imgs])


def to_uint8(t: torch.Tensor) -> np.ndarray:
    """(3, H, W) float in [0, 1] -> (H, W, 3) uint8, clamped and rounded."""
    arr = t.detach().cpu().double().clamp(0.0, 1.0).mul(255.0).round().numpy()
    return arr.astype(np.uint8).transpose(1, 2, 0)
