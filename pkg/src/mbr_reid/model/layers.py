"""Building blocks for the per-branch stage 4: grouped bottlenecks and MHSA."""
from __future__ import annotations

from typing import Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

CONV = "conv"
ATTN = "attn"


class MHSA(nn.Module):
    """All-to-all multi-head self-attention over a 2D feature map.

    Positions are encoded with separate learnable height and width embeddings
    (BoTNet style). The attention logit between query position i and key
    position j is ``q_i . k_j + q_i . (r_h[j] + r_w[j])``.
    """

    def __init__(self, dim: int, height: int = 16, width: int = 16, heads: int = 4):
        super().__init__()
        if dim % heads != 0:
            raise ValueError(f"channel dim {dim} is not divisible by {heads} heads")
        self.dim = dim
        self.heads = heads
        self.head_dim = dim // heads
        self.height = height
        self.width = width
        self.scale = self.head_dim ** -0.5
        self.query = nn.Conv2d(dim, dim, kernel_size=1, bias=True)
        self.key = nn.Conv2d(dim, dim, kernel_size=1, bias=True)
        self.value = nn.Conv2d(dim, dim, kernel_size=1, bias=True)
        self.rel_h = nn.Parameter(torch.randn(heads, self.head_dim, height, 1) * self.scale)
        self.rel_w = nn.Parameter(torch.randn(heads, self.head_dim, 1, width) * self.scale)

    def attention_macs(self, n_positions: int) -> int:
        # content-content, content-position and attention-value products
        return 3 * n_positions * n_positions * self.dim

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, c, h, w = x.shape
        if (h, w) != (self.height, self.width) or c != self.dim:
            raise ValueError(
                f"MHSA expects (*, {self.dim}, {self.height}, {self.width}), got {tuple(x.shape)}"
            )
        n = h * w
        q = self.query(x).reshape(b, self.heads, self.head_dim, n)
        k = self.key(x).reshape(b, self.heads, self.head_dim, n)
        v = self.value(x).reshape(b, self.heads, self.head_dim, n)
        pos = (self.rel_h + self.rel_w).reshape(self.heads, self.head_dim, n)

        q = q * self.scale
        logits = q.transpose(-1, -2) @ k + q.transpose(-1, -2) @ pos
        attn = logits.softmax(dim=-1)
        out = v @ attn.transpose(-1, -2)
        return out.reshape(b, c, h, w)


class GroupMixer(nn.Module):
    """Spatial mixing step of a bottleneck, one module per channel group.

    ``kinds[g]`` chooses a 3x3 convolution or MHSA for channel slice g.
    Pure-convolution mixers collapse into a single grouped Conv2d.
    """

    def __init__(self, channels: int, kinds: Sequence[str], resolution=(16, 16), heads: int = 4):
        super().__init__()
        groups = len(kinds)
        if channels % groups != 0:
            raise ValueError(f"{channels} channels cannot be split into {groups} groups")
        self.kinds = tuple(kinds)
        self.width = channels // groups
        if all(k == CONV for k in self.kinds):
            self.conv = nn.Conv2d(channels, channels, 3, padding=1, groups=groups, bias=False)
            self.parts = None
        else:
            self.conv = None
            parts = []
            for kind in self.kinds:
                if kind == CONV:
                    parts.append(nn.Conv2d(self.width, self.width, 3, padding=1, bias=False))
                elif kind == ATTN:
                    parts.append(MHSA(self.width, resolution[0], resolution[1], heads))
                else:
                    raise ValueError(f"unknown block kind {kind!r}")
            self.parts = nn.ModuleList(parts)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if self.conv is not None:
            return self.conv(x)
        chunks = x.split(self.width, dim=1)
        return torch.cat([part(chunk) for part, chunk in zip(self.parts, chunks)], dim=1)


class GroupedBottleneck(nn.Module):
    """ResNet bottleneck whose convolutions all run in ``len(kinds)`` groups.

    With one group and ``kinds=("conv",)`` this is the standard torchvision
    Bottleneck (stride 1).
    """

    expansion = 4

    def __init__(
        self,
        in_channels: int,
        mid_channels: int,
        out_channels: int,
        kinds: Sequence[str] = (CONV,),
        resolution=(16, 16),
        heads: int = 4,
        downsample: bool | None = None,
        norm_layer=nn.BatchNorm2d,
    ):
        super().__init__()
        groups = len(kinds)
        for name, ch in (("input", in_channels), ("mid", mid_channels), ("output", out_channels)):
            if ch % groups != 0:
                raise ValueError(f"{name} channels {ch} not divisible by G={groups}")
        self.groups = groups
        self.conv1 = nn.Conv2d(in_channels, mid_channels, 1, groups=groups, bias=False)
        self.bn1 = norm_layer(mid_channels)
        self.conv2 = GroupMixer(mid_channels, kinds, resolution, heads)
        self.bn2 = norm_layer(mid_channels)
        self.conv3 = nn.Conv2d(mid_channels, out_channels, 1, groups=groups, bias=False)
        self.bn3 = norm_layer(out_channels)
        self.relu = nn.ReLU(inplace=True)
        if downsample is None:
            downsample = in_channels != out_channels
        if downsample:
            self.downsample = nn.Sequential(
                nn.Conv2d(in_channels, out_channels, 1, groups=groups, bias=False),
                norm_layer(out_channels),
            )
        else:
            self.downsample = None

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        identity = x if self.downsample is None else self.downsample(x)
        out = self.relu(self.bn1(self.conv1(x)))
        out = self.relu(self.bn2(self.conv2(out)))
        out = self.bn3(self.conv3(out))
        return self.relu(out + identity)


def make_stage(
    kinds: Sequence[str],
    in_channels: int = 1024,
    mid_channels: int = 512,
    out_channels: int = 2048,
    n_blocks: int = 3,
    resolution=(16, 16),
    heads: int = 4,
) -> nn.Sequential:
    """Stride-1 stage of ``n_blocks`` grouped bottlenecks (ResNet50 layer4 by default)."""
    blocks = []
    for i in range(n_blocks):
        blocks.append(
            GroupedBottleneck(
                in_channels if i == 0 else out_channels,
                mid_channels,
                out_channels,
                kinds=kinds,
                resolution=resolution,
                heads=heads,
                downsample=(i == 0),
            )
        )
    stage = nn.Sequential(*blocks)
    init_weights(stage)
    return stage


def init_weights(module: nn.Module) -> None:
    """torchvision ResNet initialisation; MHSA position embeddings keep their own init."""
    for m in module.modules():
        if isinstance(m, nn.Conv2d):
            nn.init.kaiming_normal_(m.weight, mode="fan_out", nonlinearity="relu")
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, (nn.BatchNorm2d, nn.BatchNorm1d, nn.GroupNorm)):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)
        elif isinstance(m, MHSA):
            nn.init.normal_(m.rel_h, std=m.scale)
            nn.init.normal_(m.rel_w, std=m.scale)


class IBN(nn.Module):
    """Instance-batch normalisation (IBN-a): InstanceNorm on the first half of
    the channels, BatchNorm on the rest. Same parameter count as BatchNorm2d."""

    def __init__(self, planes: int, ratio: float = 0.5):
        super().__init__()
        self.half = int(planes * ratio)
        self.IN = nn.InstanceNorm2d(self.half, affine=True)
        self.BN = nn.BatchNorm2d(planes - self.half)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        a, b = torch.split(x, [self.half, x.size(1) - self.half], dim=1)
        return torch.cat([self.IN(a.contiguous()), self.BN(b.contiguous())], dim=1)


def gap(x: torch.Tensor) -> torch.Tensor:
    return F.adaptive_avg_pool2d(x, 1).flatten(1)


def l2_normalize(v: torch.Tensor, eps: float = 1e-12) -> torch.Tensor:
    """Row-wise v / (||v||_2 + eps); a zero row stays zero."""
    return v / (v.norm(p=2, dim=-1, keepdim=True) + eps)


def conv_weight_count(module: nn.Module) -> int:
    return sum(m.weight.numel() for m in module.modules() if isinstance(m, nn.Conv2d))


__all__ = [
    "ATTN",
    "CONV",
    "GroupMixer",
    "GroupedBottleneck",
    "IBN",
    "MHSA",
    "conv_weight_count",
    "gap",
    "init_weights",
    "l2_normalize",
    "make_stage",
]
