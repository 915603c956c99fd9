"""Co-located HR / LR / decoded-LR samples and patch cropping."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class SamplePair:
    id: str
    hr: np.ndarray
    lr: np.ndarray
    lr_decoded: np.ndarray
    qp: int
    degrader_id: str
    scale_factor: int = 2

    def __post_init__(self):
        r = self.scale_factor
        lh, lw = self.lr.shape[:2]
        if self.hr.shape[:2] != (r * lh, r * lw):
            raise ValueError(f"{self.id}: hr {self.hr.shape[:2]} is not {r}x lr {(lh, lw)}")
        if self.lr_decoded.shape != self.lr.shape:
            raise ValueError(f"{self.id}: decoded {self.lr_decoded.shape} != lr {self.lr.shape}")


@dataclass
class PatchTriple:
    hr: np.ndarray
    lr: np.ndarray
    lr_decoded: np.ndarray
    offset: tuple[int, int]  # (x, y) in low-resolution pixels


def patch_offsets(height: int, width: int, patch: int, count: int, seed: int | np.random.Generator,
                  mode: str = "random") -> list[tuple[int, int]]:
    """(x, y) top-left corners. `grid` tiles without overlap and ignores count/seed."""
    if patch > height or patch > width:
        raise ValueError(f"patch {patch} larger than image {height}x{width}")
    if mode == "grid":
        return [(x, y) for y in range(0, height - patch + 1, patch)
                for x in range(0, width - patch + 1, patch)]
    if mode != "random":
        raise ValueError(f"unknown patch mode {mode!r}")
    if count < 1:
        raise ValueError("count must be >= 1")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    xs = rng.integers(0, width - patch + 1, size=count)
    ys = rng.integers(0, height - patch + 1, size=count)
    return [(int(x), int(y)) for x, y in zip(xs, ys)]


def crop_triple(pair: SamplePair, x: int, y: int, patch: int) -> PatchTriple:
    r = pair.scale_factor
    return PatchTriple(
        hr=pair.hr[r * y:r * (y + patch), r * x:r * (x + patch)],
        lr=pair.lr[y:y + patch, x:x + patch],
        lr_decoded=pair.lr_decoded[y:y + patch, x:x + patch],
        offset=(x, y),
    )


def extract_patches(pair: SamplePair, patch: int, count: int, seed: int | np.random.Generator,
                    mode: str = "random") -> list[PatchTriple]:
    h, w = pair.lr.shape[:2]
    return [crop_triple(pair, x, y, patch) for x, y in patch_offsets(h, w, patch, count, seed, mode)]
