"""Channel and spatial attention over backbone feature maps.

Channel attention pools the map globally (average and max), pushes both
pooled vectors through one shared bottleneck MLP, and gates channels with
the sigmoid of the sum. Spatial attention pools across channels (mean and
max), convolves the two-plane map with a 7x7 kernel, and gates positions.
Both gates are multiplicative and bounded by 1, so attended features never
exceed the input in magnitude. Disabled stages pass the tensor through
untouched.
"""
from __future__ import annotations

import torch
from torch import nn


class ChannelAttention(nn.Module):
    def __init__(self, channels: int, reduction: int = 8):
        super().__init__()
        if channels % reduction != 0:
            raise ValueError(f"channels {channels} not divisible by reduction {reduction}")
        self.mlp = nn.Sequential(
            nn.Linear(channels, channels // reduction),
            nn.ReLU(),
            nn.Linear(channels // reduction, channels),
        )

    def forward(self, feat: torch.Tensor) -> torch.Tensor:
        """Per-channel gate in (0, 1), shape (B, C)."""
        if feat.dim() != 4:
            raise ValueError(f"expected (B, C, H, W), got {tuple(feat.shape)}")
        avg = feat.mean(dim=(2, 3))
        peak = feat.amax(dim=(2, 3))
        return torch.sigmoid(self.mlp(avg) + self.mlp(peak))


class SpatialAttention(nn.Module):
    def __init__(self, kernel_size: int = 7, padding_mode: str = "zeros"):
        super().__init__()
        if kernel_size % 2 != 1:
            raise ValueError("kernel size must be odd")
        self.conv = nn.Conv2d(
            2, 1, kernel_size, padding=kernel_size // 2, padding_mode=padding_mode
        )

    def forward(self, feat: torch.Tensor) -> torch.Tensor:
        """Per-position gate in (0, 1), shape (B, 1, H, W)."""
        if feat.dim() != 4:
            raise ValueError(f"expected (B, C, H, W), got {tuple(feat.shape)}")
        pooled = torch.cat(
            [feat.mean(dim=1, keepdim=True), feat.amax(dim=1, keepdim=True)], dim=1
        )
        return torch.sigmoid(self.conv(pooled))


class CBAM(nn.Module):
    """Channel gate followed by spatial gate; either stage can be disabled."""

    def __init__(
        self,
        channels: int,
        reduction: int = 8,
        kernel_size: int = 7,
        *,
        use_channel: bool = True,
        use_spatial: bool = True,
        padding_mode: str = "zeros",
    ):
        super().__init__()
        self.use_channel = use_channel
        self.use_spatial = use_spatial
        self.channel = ChannelAttention(channels, reduction)
        self.spatial = SpatialAttention(kernel_size, padding_mode)

    def forward(self, feat: torch.Tensor) -> torch.Tensor:
        if self.use_channel:
            feat = feat * self.channel(feat)[:, :, None, None]
        if self.use_spatial:
            feat = feat * self.spatial(feat)
        return feat


def stack_views(features: list[torch.Tensor]) -> torch.Tensor:
    """Stack per-view feature maps (B, C, H, W) into (B, N, C, H, W)."""
    if not features:
        raise ValueError("no views to stack")
    shape = features[0].shape
    for f in features[1:]:
        if f.shape != shape:
            raise ValueError(f"view shapes differ: {tuple(f.shape)} vs {tuple(shape)}")
    return torch.stack(features, dim=1)
