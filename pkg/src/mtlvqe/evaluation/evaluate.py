"""Run trained networks over a manifest split and score them against their anchors."""

from __future__ import annotations

import numpy as np
import torch

from ..data.manifest import DatasetManifest, ManifestEntry
from ..data.patches import SamplePair
from ..data.resize import upscale
from ..data.tensor import to_tensor, to_uint8
from ..model import QE, SR, MTLNet
from ..priors import concat_prior, make_qp_map, sequential_restore
from .metrics import psnr_luma, ssim_luma
from .report import ANCHORS, EvalReport, EvalRow


def model_input(img: np.ndarray, qp: int, use_qp_map: bool = True) -> torch.Tensor:
    x = to_tensor(img)
    h, w = x.shape[-2:]
    prior = make_qp_map(qp, h, w) if use_qp_map else torch.zeros((1, h, w))
    return concat_prior(x, prior)


@torch.no_grad()
def restore(model: MTLNet, lr_decoded: np.ndarray, qp: int, use_qp_map: bool = True) -> dict[str, np.ndarray]:
    """Both task outputs for one decoded LR image, as clamped uint8 RGB."""
    model.eval()
    out = model(model_input(lr_decoded, qp, use_qp_map).unsqueeze(0))
    return {task: to_uint8(t[0]) for task, t in out.items()}


@torch.no_grad()
def restore_sequential(qe_model: MTLNet, sr_model: MTLNet, lr_decoded: np.ndarray, qp: int,
                       use_qp_map: bool = True) -> dict[str, np.ndarray]:
    qe_model.eval()
    sr_model.eval()
    enhanced = restore(qe_model, lr_decoded, qp, use_qp_map)[QE]
    hr = sequential_restore(qe_model, sr_model, to_tensor(lr_decoded), qp, use_qp_map)
    return {SR: to_uint8(hr), QE: enhanced}


def anchors(pair: SamplePair) -> dict[str, np.ndarray]:
    return {SR: upscale(pair.lr_decoded, pair.scale_factor), QE: pair.lr_decoded}


def score_pair(pair: SamplePair, outputs: dict[str, np.ndarray], dataset: str = "", sequence: str = "",
               with_ssim: bool = True) -> list[EvalRow]:
    targets = {SR: pair.hr, QE: pair.lr}
    base = anchors(pair)
    rows = []
    for task, img in outputs.items():
        target, anchor = targets[task], base[task]
        psnr = psnr_luma(img, target)
        p_anchor = psnr_luma(anchor, target)
        d_psnr = 0.0 if psnr == p_anchor else psnr - p_anchor
        ssim = d_ssim = None
        if with_ssim:
            ssim = ssim_luma(img, target)
            d_ssim = ssim - ssim_luma(anchor, target)
        rows.append(EvalRow(image_id=pair.id, sequence=sequence or pair.id.rsplit("_qp", 1)[0],
                            dataset=dataset, qp=pair.qp, task=task, psnr=psnr, d_psnr=d_psnr,
                            ssim=ssim, d_ssim=d_ssim, anchor=ANCHORS[task]))
    return rows


def evaluate_pairs(restore_fn, pairs: list[SamplePair], dataset: str = "", with_ssim: bool = True) -> EvalReport:
    rows = []
    for pair in pairs:
        rows += score_pair(pair, restore_fn(pair), dataset=dataset, with_ssim=with_ssim)
    return EvalReport(rows)


def evaluate_model(model: MTLNet, manifest: DatasetManifest, split: str = "test",
                   entries: list[ManifestEntry] | None = None, use_qp_map: bool = True,
                   dataset: str = "", with_ssim: bool = True) -> EvalReport:
    entries = manifest.split(split) if entries is None else entries
    pairs = [manifest.load_pair(e) for e in entries]
    return evaluate_pairs(lambda p: restore(model, p.lr_decoded, p.qp, use_qp_map), pairs,
                          dataset=dataset, with_ssim=with_ssim)
