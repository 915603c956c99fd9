from __future__ import annotations

import sys
from pathlib import Path

import numpy as np
import pytest
import skimage.data
import torch

from mtlvqe.data import write_png

# crop windows on the bundled scikit-image photos: (image, row, col)
_SOURCES = ("astronaut", "coffee", "chelsea", "rocket", "immunohistochemistry", "hubble_deep_field", "retina")


def natural_crops(n: int, size: int, seed: int = 0) -> list[np.ndarray]:
    rng = np.random.default_rng(seed)
    imgs = [getattr(skimage.data, name)()[..., :3] for name in _SOURCES]
    out = []
    while len(out) < n:
        img = imgs[len(out) % len(imgs)]
        h, w = img.shape[:2]
        y, x = rng.integers(0, h - size), rng.integers(0, w - size)
        crop = np.ascontiguousarray(img[y:y + size, x:x + size])
        if crop.std() > 20:  # skip flat background crops
            out.append(crop)
    return out


def write_corpus(directory: Path, n: int, size: int, seed: int = 0) -> Path:
    directory.mkdir(parents=True, exist_ok=True)
    for i, img in enumerate(natural_crops(n, size, seed)):
        write_png(directory / f"img{i:02d}.png", img)
    return directory


@pytest.fixture
def corpus(tmp_path):
    return write_corpus(tmp_path / "src", 5, 64)


@pytest.fixture(autouse=True)
def _torch_seed():
    torch.manual_seed(0)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
