"""Parameterized building blocks with seeded initialization.

Linear weights are zero-mean Gaussian with deviation ``fan_in ** -0.5``;
convolutions use ``(2 / fan_in) ** 0.5`` so activations keep their scale
through GELU stacks. Biases start at zero, embeddings at deviation 0.02 unless
the owner asks for another scale. Every module that owns parameters
implements ``reset_parameters(rng)`` and :func:`initialize` walks the tree so
that initialization depends only on the seed and parameter names.
"""

from __future__ import annotations

import torch
from torch import nn
import torch.nn.functional as F

from .numeric import DTYPE, RngStream, gelu, layer_norm, matmul

EMBED_STD = 0.02


def _gaussian(shape, std: float, rng: RngStream) -> torch.Tensor:
    return torch.from_numpy(rng.normal(size=tuple(shape), scale=std)).to(DTYPE)


def embedding(*shape: int, std: float = EMBED_STD) -> nn.Parameter:
    p = nn.Parameter(torch.zeros(*shape, dtype=DTYPE))
    p._init_std = std  # type: ignore[attr-defined]
    return p


class Linear(nn.Module):
    def __init__(self, d_in: int, d_out: int, bias: bool = True, gain: float = 1.0) -> None:
        super().__init__()
        self.d_in, self.d_out = d_in, d_out
        self.gain = gain
        self.weight = nn.Parameter(torch.zeros(d_in, d_out, dtype=DTYPE))
        self.bias = nn.Parameter(torch.zeros(d_out, dtype=DTYPE)) if bias else None

    def reset_parameters(self, rng: RngStream) -> None:
        with torch.no_grad():
            self.weight.copy_(_gaussian(self.weight.shape, self.gain * self.d_in**-0.5, rng))
            if self.bias is not None:
                self.bias.zero_()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        y = matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y


class Conv2d(nn.Module):
    def __init__(self, c_in: int, c_out: int, kernel: int = 3, stride: int = 1) -> None:
        super().__init__()
        self.stride = stride
        self.padding = kernel // 2
        self.weight = nn.Parameter(torch.zeros(c_out, c_in, kernel, kernel, dtype=DTYPE))
        self.bias = nn.Parameter(torch.zeros(c_out, dtype=DTYPE))

    def reset_parameters(self, rng: RngStream) -> None:
        fan_in = self.weight[0].numel()
        with torch.no_grad():
            self.weight.copy_(_gaussian(self.weight.shape, (2.0 / fan_in) ** 0.5, rng))
            self.bias.zero_()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return F.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class LayerNorm(nn.Module):
    def __init__(self, width: int) -> None:
        super().__init__()
        self.weight = nn.Parameter(torch.ones(width, dtype=DTYPE))
        self.bias = nn.Parameter(torch.zeros(width, dtype=DTYPE))

    def reset_parameters(self, rng: RngStream) -> None:
        with torch.no_grad():
            self.weight.fill_(1.0)
            self.bias.zero_()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return layer_norm(x, self.weight, self.bias)


class MLP(nn.Module):
    """Two linear layers with a GELU in between."""

    def __init__(self, d_in: int, hidden: int, d_out: int, out_gain: float = 1.0) -> None:
        super().__init__()
        self.fc1 = Linear(d_in, hidden)
        self.fc2 = Linear(hidden, d_out, gain=out_gain)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(gelu(self.fc1(x)))


def initialize(module: nn.Module, rng: RngStream) -> nn.Module:
    """Seeded initialization of every parameter in ``module``."""
    for name, sub in module.named_modules():
        sub_rng = rng.child(name or "root")
        if hasattr(sub, "reset_parameters") and isinstance(sub, (Linear, Conv2d, LayerNorm)):
            sub.reset_parameters(sub_rng)
        for pname, p in sub.named_parameters(recurse=False):
            std = getattr(p, "_init_std", None)
            if std is not None:
                with torch.no_grad():
                    p.copy_(_gaussian(p.shape, std, sub_rng.child(pname)))
    return module


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def check_finite(x: torch.Tensor, what: str) -> torch.Tensor:
    if not torch.isfinite(x).all():
        raise FloatingPointError(f"non-finite values in {what}")
    return x

