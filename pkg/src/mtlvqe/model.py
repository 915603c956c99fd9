"""Shared-trunk network with a super-resolution head and a quality-enhancement head."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch
import torch.nn as nn

SR = "SR"
QE = "QE"
GROUPS = ("trunk", "head_sr", "head_qe")


class ShapeError(ValueError):
    pass


@dataclass(frozen=True)
class NetworkConfig:
    num_blocks: int = 8
    trunk_width: int = 256
    kernel_size: int = 3
    scale_factor: int = 2
    in_channels: int = 4
    out_channels: int = 3
    heads: tuple[str, ...] = (SR, QE)
    alpha: float = 0.9
    init_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "heads", tuple(sorted(set(self.heads), key=(SR, QE).index)))
        problems = self.problems()
        if problems:
            raise ValueError("invalid NetworkConfig: " + "; ".join(problems))

    def problems(self) -> list[str]:
        out = []
        if self.num_blocks < 0:
            out.append(f"num_blocks must be >= 0, got {self.num_blocks}")
        if self.trunk_width <= 0:
            out.append(f"trunk_width must be > 0, got {self.trunk_width}")
        if self.kernel_size <= 0 or self.kernel_size % 2 == 0:
            out.append(f"kernel_size must be a positive odd integer, got {self.kernel_size}")
        if self.scale_factor < 1:
            out.append(f"scale_factor must be >= 1, got {self.scale_factor}")
        if self.in_channels <= 0 or self.out_channels <= 0:
            out.append("in_channels and out_channels must be positive")
        if not self.heads:
            out.append("heads must be a non-empty subset of {SR, QE}")
        unknown = set(self.heads) - {SR, QE}
        if unknown:
            out.append(f"unknown heads {sorted(unknown)}")
        if not 0.0 <= self.alpha <= 1.0:
            out.append(f"alpha must lie in [0, 1], got {self.alpha}")
        return out

    @property
    def effective_alpha(self) -> float:
        """Loss weight actually used; single-head models pin it to 1 (SR) or 0 (QE)."""
        if self.heads == (SR,):
            return 1.0
        if self.heads == (QE,):
            return 0.0
        return self.alpha

    def to_dict(self) -> dict:
        d = asdict(self)
        d["heads"] = list(self.heads)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        d = dict(d)
        if "heads" in d:
            d["heads"] = tuple(d["heads"])
        return cls(**d)


def conv(in_ch: int, out_ch: int, k: int) -> nn.Conv2d:
    return nn.Conv2d(in_ch, out_ch, k, padding=k // 2)


class ResBlock(nn.Module):
    """conv -> ReLU -> conv with an identity shortcut (no batch norm, no scaling)."""

    def __init__(self, width: int, k: int):
        super().__init__()
        self.conv1 = conv(width, width, k)
        self.act = nn.ReLU()
        self.conv2 = conv(width, width, k)

    def forward(self, x):
        return x + self.conv2(self.act(self.conv1(x)))


class Trunk(nn.Module):
    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        k, w = cfg.kernel_size, cfg.trunk_width
        self.conv_in = conv(cfg.in_channels, w, k)
        self.blocks = nn.Sequential(*[ResBlock(w, k) for _ in range(cfg.num_blocks)])
        self.conv_post = conv(w, w, k)

    def forward(self, x):
        x0 = self.conv_in(x)
        return x0 + self.conv_post(self.blocks(x0))


def _upscale_stages(r: int) -> list[int]:
    # powers of two are cascaded x2 stages, anything else is a single stage
    if r > 1 and r & (r - 1) == 0:
        return [2] * int(math.log2(r))
    return [r]


class SRHead(nn.Module):
    """Channel expansion to width*r^2, pixel shuffle, ReLU, reconstruction conv."""

    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        k, w = cfg.kernel_size, cfg.trunk_width
        self.scales = _upscale_stages(cfg.scale_factor)
        self.expand = nn.ModuleList(conv(w, w * s * s, k) for s in self.scales)
        self.act = nn.ReLU()
        self.conv_out = conv(w, cfg.out_channels, k)

    def forward(self, y):
        for s, layer in zip(self.scales, self.expand):
            y = pixel_shuffle(layer(y), s)
        return self.conv_out(self.act(y))


class QEHead(nn.Module):
    """Same layout as the SR head minus the upscaling: conv, ReLU, reconstruction conv."""

    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        k, w = cfg.kernel_size, cfg.trunk_width
        self.conv_mid = conv(w, w, k)
        self.act = nn.ReLU()
        self.conv_out = conv(w, cfg.out_channels, k)

    def forward(self, y):
        return self.conv_out(self.act(self.conv_mid(y)))


class MTLNet(nn.Module):
    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        self.config = cfg
        self.trunk = Trunk(cfg)
        self.head_sr = SRHead(cfg) if SR in cfg.heads else None
        self.head_qe = QEHead(cfg) if QE in cfg.heads else None

    def forward(self, x):
        y = forward_shared(self, x)
        out = {}
        if self.head_sr is not None:
            out[SR] = self.head_sr(y)
        if self.head_qe is not None:
            out[QE] = self.head_qe(y)
        return out


def init_parameters(module: nn.Module, seed: int) -> None:
    """Re-draw every conv of `module` with PyTorch's fan-in uniform scheme under a fixed seed."""
    gen = torch.Generator().manual_seed(seed)
    for m in module.modules():
        if isinstance(m, nn.Conv2d):
            fan_in = m.in_channels * m.kernel_size[0] * m.kernel_size[1]
            # kaiming_uniform(a=sqrt(5)) and the matching bias bound both reduce to 1/sqrt(fan_in)
            bound = 1.0 / math.sqrt(fan_in)
            with torch.no_grad():
                m.weight.copy_(torch.empty_like(m.weight).uniform_(-bound, bound, generator=gen))
                m.bias.copy_(torch.empty_like(m.bias).uniform_(-bound, bound, generator=gen))


def build_model(config: NetworkConfig, strict: bool = False) -> MTLNet:
    if strict and SR in config.heads and config.scale_factor == 1:
        raise ValueError("strict mode: an SR head needs scale_factor > 1")
    model = MTLNet(config)
    init_parameters(model, config.init_seed)
    return model


def reinit_head(model: MTLNet, head: str, seed: int) -> None:
    module = model.head_qe if head == QE else model.head_sr
    if module is None:
        raise ValueError(f"model has no {head} head")
    init_parameters(module, seed)


def _batched(x: torch.Tensor) -> tuple[torch.Tensor, bool]:
    if x.dim() == 3:
        return x.unsqueeze(0), True
    if x.dim() == 4:
        return x, False
    raise ShapeError(f"expected a (C, H, W) or (N, C, H, W) tensor, got {tuple(x.shape)}")


def _check_channels(x: torch.Tensor, expected: int, what: str) -> None:
    if x.shape[1] != expected:
        raise ShapeError(f"{what}: expected {expected} channels, got {x.shape[1]}")


def forward_shared(model: MTLNet, x: torch.Tensor) -> torch.Tensor:
    xb, single = _batched(x)
    _check_channels(xb, model.config.in_channels, "forward_shared")
    y = model.trunk(xb)
    return y[0] if single else y


def _forward_head(head: nn.Module | None, name: str, model: MTLNet, y: torch.Tensor):
    if head is None:
        raise ValueError(f"model was built without a {name} head")
    yb, single = _batched(y)
    _check_channels(yb, model.config.trunk_width, f"forward_{name.lower()}")
    out = head(yb)
    return out[0] if single else out


def forward_sr(model: MTLNet, y: torch.Tensor) -> torch.Tensor:
    return _forward_head(model.head_sr, SR, model, y)


def forward_qe(model: MTLNet, y: torch.Tensor) -> torch.Tensor:
    return _forward_head(model.head_qe, QE, model, y)


def pixel_shuffle(x: torch.Tensor, r: int) -> torch.Tensor:
    """Rearrange (C*r*r, H, W) into (C, r*H, r*W).

    out[c, h, w] = in[c*r*r + (h % r)*r + (w % r), h // r, w // r]
    """
    xb, single = _batched(x)
    n, c, h, w = xb.shape
    if c % (r * r):
        raise ShapeError(f"pixel_shuffle: {c} channels not divisible by r^2={r * r}")
    oc = c // (r * r)
    out = xb.reshape(n, oc, r, r, h, w).permute(0, 1, 4, 2, 5, 3).reshape(n, oc, h * r, w * r)
    return out[0] if single else out


def pixel_unshuffle(x: torch.Tensor, r: int) -> torch.Tensor:
    xb, single = _batched(x)
    n, c, h, w = xb.shape
    if h % r or w % r:
        raise ShapeError(f"pixel_unshuffle: spatial dims {(h, w)} not divisible by {r}")
    out = xb.reshape(n, c, h // r, r, w // r, r).permute(0, 1, 3, 5, 2, 4)
    out = out.reshape(n, c * r * r, h // r, w // r)
    return out[0] if single else out


def group_of(name: str) -> str:
    prefix = name.split(".", 1)[0]
    if prefix not in GROUPS:
        raise KeyError(f"parameter {name!r} belongs to no group")
    return prefix


def param_groups(model: MTLNet) -> dict[str, dict[str, torch.nn.Parameter]]:
    groups: dict[str, dict[str, torch.nn.Parameter]] = {g: {} for g in GROUPS}
    for name, p in model.named_parameters():
        groups[group_of(name)][name] = p
    return groups


def count_parameters(model: MTLNet, group: str = "all") -> int:
    if group == "all":
        return sum(p.numel() for p in model.parameters())
    if group not in GROUPS:
        raise KeyError(f"unknown parameter group {group!r}; choose from all, {', '.join(GROUPS)}")
    return sum(p.numel() for p in param_groups(model)[group].values())


def layer_taps(model: MTLNet) -> dict[str, nn.Module]:
    """Map layer ids to modules whose output is the activation of that layer.

    conv_i numbers every convolution in forward order starting at 1 (trunk first,
    then the SR head, then the QE head); conv_in is an alias for conv_1 and rb_k is
    the output of the k-th residual block.
    """
    taps: dict[str, nn.Module] = {"conv_in": model.trunk.conv_in}
    convs = [model.trunk.conv_in]
    for k, block in enumerate(model.trunk.blocks, start=1):
        taps[f"rb_{k}"] = block
        convs += [block.conv1, block.conv2]
    convs.append(model.trunk.conv_post)
    taps["conv_post"] = model.trunk.conv_post
    if model.head_sr is not None:
        convs += [*model.head_sr.expand, model.head_sr.conv_out]
    if model.head_qe is not None:
        convs += [model.head_qe.conv_mid, model.head_qe.conv_out]
    for i, m in enumerate(convs, start=1):
        taps[f"conv_{i}"] = m
    return taps
