"""Compact four-stage residual CNN producing hierarchical feature maps."""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .layers import Conv2d
from .numeric import DimensionError, gelu

NUM_STAGES = 4


@dataclass(frozen=True)
class BackboneConfig:
    channels: tuple[int, ...] = (16, 32, 64, 128)
    input_size: tuple[int, int] = (64, 64)

    def __post_init__(self) -> None:
        if len(self.channels) != NUM_STAGES:
            raise ValueError(f"backbone needs {NUM_STAGES} stage widths, got {self.channels}")
        check_input_size(*self.input_size)

    def stage_extents(self) -> list[tuple[int, int]]:
        h, w = self.input_size
        return [(h >> (l + 1), w >> (l + 1)) for l in range(NUM_STAGES)]


def check_input_size(h: int, w: int) -> None:
    if h % 16 or w % 16 or h <= 0 or w <= 0:
        raise DimensionError(f"input size {h}x{w} must be positive multiples of 16")


class ResidualBlock(nn.Module):
    def __init__(self, channels: int) -> None:
        super().__init__()
        self.conv = Conv2d(channels, channels)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return gelu(x + self.conv(x))


class Stage(nn.Module):
    def __init__(self, c_in: int, c_out: int) -> None:
        super().__init__()
        self.down = Conv2d(c_in, c_out, stride=2)
        self.blocks = nn.ModuleList([ResidualBlock(c_out), ResidualBlock(c_out)])

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = gelu(self.down(x))
        for block in self.blocks:
            x = block(x)
        return x


class Backbone(nn.Module):
    """Stride-2 convolution plus two residual blocks per stage.

    ``forward`` maps ``(B, 3, H, W)`` to four post-activation maps where stage
    ``l`` has extent ``(H / 2**(l+1), W / 2**(l+1))``.
    """

    def __init__(self, config: BackboneConfig = BackboneConfig()) -> None:
        super().__init__()
        self.config = config
        widths = (3, *config.channels)
        self.stages = nn.ModuleList(Stage(a, b) for a, b in zip(widths[:-1], widths[1:]))

    def forward(self, image: torch.Tensor) -> list[torch.Tensor]:
        squeeze = image.dim() == 3
        if squeeze:
            image = image.unsqueeze(0)
        check_input_size(image.shape[-2], image.shape[-1])
        feats = []
        x = image
        for stage in self.stages:
            x = stage(x)
            feats.append(x[0] if squeeze else x)
        return feats
