"""Channel-averaged activations at chosen layers, exported as grayscale images."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from ..model import MTLNet, layer_taps
from ..priors import concat_prior, make_qp_map


@dataclass
class AverageMap:
    layer_id: str
    mean: np.ndarray   # raw channel mean, float64 (H, W)
    image: np.ndarray  # mean rescaled per map to [0, 255], uint8


def normalize_map(m: np.ndarray) -> np.ndarray:
    lo, hi = float(m.min()), float(m.max())
    if hi == lo:
        return np.zeros(m.shape, dtype=np.uint8)
    return np.rint((m - lo) / (hi - lo) * 255.0).astype(np.uint8)


@torch.no_grad()
def average_feature_maps(model: MTLNet, image: torch.Tensor, qp: int, layers: list[str],
                         use_qp_map: bool = True) -> list[AverageMap]:
    """`image` is a (3, H, W) tensor in [0, 1]; returns one map per requested layer."""
    taps = layer_taps(model)
    unknown = [l for l in layers if l not in taps]
    if unknown:
        raise KeyError(f"unknown layer ids {unknown}; valid ids: {', '.join(taps)}")
    h, w = image.shape[-2:]
    prior = make_qp_map(qp, h, w, image.dtype) if use_qp_map else torch.zeros((1, h, w), dtype=image.dtype)
    x = concat_prior(image, prior).unsqueeze(0)

    captured: dict[str, torch.Tensor] = {}
    handles = []
    for layer in dict.fromkeys(layers):
        def hook(_m, _inp, out, layer=layer):
            captured[layer] = out.detach().clone()
        handles.append(taps[layer].register_forward_hook(hook))
    try:
        model.eval()
        model(x)
    finally:
        for h_ in handles:
            h_.remove()

    out = []
    for layer in layers:
        mean = captured[layer][0].double().mean(dim=0).numpy()
        out.append(AverageMap(layer, mean, normalize_map(mean)))
    return out
