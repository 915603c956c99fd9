"""QP-map prior, input concatenation, losses, and the two-network sequential baseline."""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .model import MTLNet, ShapeError, forward_qe, forward_shared, forward_sr

QP_MAX = 63


def make_qp_map(qp: int, height: int, width: int, dtype=torch.float32) -> torch.Tensor:
    """Uniform (1, H, W) plane holding qp / 63."""
    if not 0 <= qp <= QP_MAX:
        raise ValueError(f"qp must lie in [0, {QP_MAX}], got {qp}")
    if height <= 0 or width <= 0:
        raise ValueError(f"qp map dims must be positive, got {height}x{width}")
    return torch.full((1, height, width), qp / QP_MAX, dtype=dtype)


def concat_prior(image: torch.Tensor, prior: torch.Tensor) -> torch.Tensor:
    """Append the prior plane as the last channel. Accepts (C,H,W) or batched (N,C,H,W)."""
    if image.shape[-2:] != prior.shape[-2:]:
        raise ShapeError(f"spatial mismatch: image {tuple(image.shape[-2:])} vs prior {tuple(prior.shape[-2:])}")
    if image.dim() == 4 and prior.dim() == 3:
        prior = prior.unsqueeze(0).expand(image.shape[0], -1, -1, -1)
    return torch.cat([image, prior.to(image.dtype)], dim=-3)


def prior_batch(qps, height: int, width: int, use_qp_map: bool = True,
                dtype=torch.float32) -> torch.Tensor:
    """(N, 1, H, W) stack of qp maps, or zeros when the prior is switched off."""
    if not use_qp_map:
        return torch.zeros((len(qps), 1, height, width), dtype=dtype)
    return torch.stack([make_qp_map(int(q), height, width, dtype) for q in qps])


def l1_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    if pred.shape != target.shape:
        raise ShapeError(f"l1_loss shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")
    return (pred - target).abs().mean()


@dataclass(frozen=True)
class LossBreakdown:
    loss_sr: float
    loss_qe: float
    loss_mtl: float
    alpha: float


def mtl_loss(loss_sr, loss_qe, alpha: float):
    """alpha * L_SR + (1 - alpha) * L_QE.

    Tensors in, tensor out (so it can be back-propagated); plain numbers in,
    a LossBreakdown out.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    combined = alpha * loss_sr + (1.0 - alpha) * loss_qe
    if isinstance(combined, torch.Tensor):
        return combined
    if loss_sr < 0 or loss_qe < 0:
        raise ValueError("losses must be nonnegative")
    return LossBreakdown(float(loss_sr), float(loss_qe), float(combined), float(alpha))


def sequential_restore(qe_model: MTLNet, sr_model: MTLNet, image: torch.Tensor, qp: int,
                       use_qp_map: bool = True) -> torch.Tensor:
    """QE network first, then the SR network on its output, re-attaching the same qp map."""
    if qe_model.config.out_channels + 1 != sr_model.config.in_channels:
        raise ShapeError(
            f"QE stage emits {qe_model.config.out_channels} channels but the SR stage expects "
            f"{sr_model.config.in_channels - 1} image channels"
        )
    h, w = image.shape[-2:]
    if use_qp_map:
        prior = make_qp_map(qp, h, w, image.dtype)
    else:
        prior = torch.zeros((1, h, w), dtype=image.dtype)
    enhanced = forward_qe(qe_model, forward_shared(qe_model, concat_prior(image, prior)))
    return forward_sr(sr_model, forward_shared(sr_model, concat_prior(enhanced, prior)))
