"""Transformer fusion of multi-granularity tokens and the four level heads."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch
from torch import nn

from .layers import MLP, LayerNorm, Linear, embedding
from .numeric import DimensionError, concat, cross_entropy_from_logits, softmax

NUM_TYPES = 4
NUM_LEVELS = 4


@dataclass(frozen=True)
class EncoderConfig:
    width: int = 256
    depth: int = 2
    heads: int = 4
    ffn_mult: int = 4

    def __post_init__(self) -> None:
        if self.width % self.heads:
            raise ValueError(f"width {self.width} not divisible by {self.heads} heads")
        if self.depth < 0:
            raise ValueError("depth must be nonnegative")


class SequenceAssembly(nn.Module):
    """Prepends four CLS tokens and adds one shared embedding per stage level.

    The CLS group gets its own shared embedding on top of its learnable tokens.
    """

    def __init__(self, width: int, stages: int = 4) -> None:
        super().__init__()
        self.width = width
        self.stages = stages
        self.cls = embedding(NUM_TYPES, width)
        self.cls_embed = embedding(width)
        self.level_embed = embedding(stages, width)

    def forward(self, reduced: Sequence[torch.Tensor]) -> torch.Tensor:
        if len(reduced) == 0:
            raise DimensionError("assemble needs at least one stage of tokens")
        if len(reduced) != self.stages:
            raise DimensionError(f"expected {self.stages} stages, got {len(reduced)}")
        parts = []
        for l, s in enumerate(reduced):
            if s.shape[-1] != self.width:
                raise DimensionError(
                    f"stage {l} tokens have width {s.shape[-1]}, model width is {self.width}"
                )
            parts.append(s + self.level_embed[l])
        lead = parts[0].shape[:-2]
        cls = (self.cls + self.cls_embed).expand(*lead, NUM_TYPES, self.width)
        return concat([cls, *parts], axis=-2)


class SelfAttention(nn.Module):
    def __init__(self, width: int, heads: int) -> None:
        super().__init__()
        self.heads = heads
        self.head_dim = width // heads
        self.qkv = Linear(width, 3 * width)
        self.proj = Linear(width, width)

    def forward(self, x: torch.Tensor, return_weights: bool = False):
        *lead, n, width = x.shape
        qkv = self.qkv(x).reshape(*lead, n, 3, self.heads, self.head_dim)
        q, k, v = qkv.unbind(dim=-3)
        # (..., heads, n, head_dim)
        q, k, v = (t.transpose(-2, -3) for t in (q, k, v))
        weights = softmax(q @ k.transpose(-1, -2) * self.head_dim**-0.5, axis=-1)
        out = (weights @ v).transpose(-2, -3).reshape(*lead, n, width)
        out = self.proj(out)
        return (out, weights) if return_weights else out


class EncoderLayer(nn.Module):
    """Pre-norm layer: attention and feed-forward sublayers with residuals."""

    def __init__(self, width: int, heads: int, ffn_mult: int = 4) -> None:
        super().__init__()
        self.norm1 = LayerNorm(width)
        self.attn = SelfAttention(width, heads)
        self.norm2 = LayerNorm(width)
        self.ffn = MLP(width, ffn_mult * width, width)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.norm1(x))
        return x + self.ffn(self.norm2(x))


class Encoder(nn.Module):
    def __init__(self, config: EncoderConfig = EncoderConfig()) -> None:
        super().__init__()
        self.config = config
        self.layers = nn.ModuleList(
            EncoderLayer(config.width, config.heads, config.ffn_mult) for _ in range(config.depth)
        )
        self.norm = LayerNorm(config.width) if config.depth else None

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        for layer in self.layers:
            x = layer(x)
        return self.norm(x) if self.norm is not None else x


class LevelHeads(nn.Module):
    """One two-layer perceptron per retouching type, each reading its own CLS slot.

    The output layers start ten times smaller than the other linear layers so
    that initial predictions are close to uniform over the four levels.
    """

    OUT_GAIN = 0.1

    def __init__(self, width: int) -> None:
        super().__init__()
        self.heads = nn.ModuleList(
            MLP(width, width, NUM_LEVELS, out_gain=self.OUT_GAIN) for _ in range(NUM_TYPES)
        )

    def forward(self, encoded: torch.Tensor) -> torch.Tensor:
        return torch.stack(
            [head(encoded[..., t, :]) for t, head in enumerate(self.heads)], dim=-2
        )


def level_loss(logits: torch.Tensor, truth) -> torch.Tensor:
    """Sum of the four per-type cross-entropies, averaged over any batch axes.

    ``logits`` is ``(..., 4 types, 4 levels)``; ``truth`` holds level classes
    ``(..., 4)``.
    """
    per_type = cross_entropy_from_logits(logits, truth)
    return per_type.sum(dim=-1).mean()
