"""Stage-wise adaptive token clustering.

Each backbone stage is patchified with 1x1 windows into raster-ordered
tokens. Tokens are assigned to learnable cluster embeddings through
query/key attention over the clusters (optionally with Gumbel noise and a
straight-through hard argmax), and every cluster becomes one token: the
assignment-weighted mean of value-projected tokens, passed through a shared
output projection. Stages with rate 1 skip assignment and just map each token.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Sequence

import torch
from torch import nn

from .layers import Linear, embedding
from .numeric import RngStream, gumbel_noise, softmax

DEFAULT_RATES = (1 / 64, 1 / 16, 1 / 4, 1.0)
MEAN_EPS = 1e-8


class AssignMode(str, enum.Enum):
    TRAIN = "train-stochastic-hard"
    EVAL = "eval-deterministic-hard"
    SOFT = "soft"


@dataclass(frozen=True)
class ClusterConfig:
    rates: tuple[float, ...] = DEFAULT_RATES
    temperature: float = 1.0
    mode: AssignMode = AssignMode.EVAL

    def __post_init__(self) -> None:
        if any(not 0 < r <= 1 for r in self.rates):
            raise ValueError(f"clustering rates must lie in (0, 1], got {self.rates}")
        if not self.temperature > 0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")
        object.__setattr__(self, "mode", AssignMode(self.mode))


def stage_token_counts(height: int, width: int, stages: int = 4) -> list[int]:
    return [(height * width) >> (2 * (l + 1)) for l in range(stages)]


def cluster_counts(token_counts: Sequence[int], rates: Sequence[float]) -> list[int]:
    """``round(n * r)`` per stage, never below one (halves round up)."""
    if len(token_counts) != len(rates):
        raise ValueError(f"{len(token_counts)} stages but {len(rates)} rates")
    return [max(1, int(math.floor(n * r + 0.5))) for n, r in zip(token_counts, rates)]


def patchify(features: torch.Tensor) -> torch.Tensor:
    """``(..., C, H, W)`` to raster-ordered tokens ``(..., H*W, C)``."""
    return features.flatten(-2).transpose(-1, -2)


def unpatchify(tokens: torch.Tensor, height: int, width: int) -> torch.Tensor:
    return tokens.transpose(-1, -2).reshape(*tokens.shape[:-2], tokens.shape[-1], height, width)


def assignment_from_logits(
    logits: torch.Tensor,
    mode: AssignMode | str = AssignMode.EVAL,
    temperature: float = 1.0,
    rng: RngStream | None = None,
    noise: torch.Tensor | None = None,
) -> torch.Tensor:
    """Turn cluster-by-token logits ``(..., m, n)`` into an assignment matrix.

    Columns (one per token) are distributions over clusters. In the train
    mode the forward value is one-hot while gradients are those of the noisy
    soft column. Ties resolve to the lowest cluster index.
    """
    mode = AssignMode(mode)
    if mode is AssignMode.SOFT:
        return softmax(logits / temperature, axis=-2)
    if mode is AssignMode.EVAL:
        return _one_hot_columns(logits.detach())
    if noise is None:
        if rng is None:
            raise ValueError("stochastic assignment needs an RngStream")
        noise = gumbel_noise(logits.shape, rng)
    soft = softmax((logits + noise) / temperature, axis=-2)
    hard = _one_hot_columns(soft.detach())
    return hard + (soft - soft.detach())


def _one_hot_columns(scores: torch.Tensor) -> torch.Tensor:
    idx = scores.argmax(dim=-2, keepdim=True)
    return torch.zeros_like(scores).scatter_(-2, idx, 1.0)


def reduce_tokens(assignment: torch.Tensor, values: torch.Tensor, out_proj: nn.Module) -> torch.Tensor:
    """Per-cluster weighted mean of value tokens ``(..., n, D)``, then ``out_proj``."""
    weights = assignment.sum(dim=-1, keepdim=True)
    means = (assignment @ values) / (weights + MEAN_EPS)
    return out_proj(means)


def _bounded_surrogate(means: torch.Tensor, summed: torch.Tensor, weights: torch.Tensor) -> torch.Tensor:
    """Keep the forward value of ``means`` but backpropagate as if empty clusters held one token.

    With a one-hot forward value an empty cluster has weight 0, and the
    derivative of its mean with respect to the surrogate column entries is
    ``value / MEAN_EPS``. Those terms reach 1e8 and drown every other signal
    in the shared parameters. Occupied clusters keep their exact derivative.
    """
    empty = weights.detach() == 0
    surrogate = summed / torch.where(empty, torch.ones_like(weights), weights + MEAN_EPS)
    return means.detach() + (surrogate - surrogate.detach())


class ClusterStage(nn.Module):
    """Cluster embeddings plus query/key/value projections for one stage."""

    def __init__(self, channels: int, width: int, n_tokens: int, rate: float) -> None:
        super().__init__()
        self.n_tokens = n_tokens
        self.skip = rate >= 1.0
        self.m = n_tokens if self.skip else cluster_counts([n_tokens], [rate])[0]
        self.value = Linear(channels, width)
        if not self.skip:
            # unit scale so the initial logits, not the Gumbel noise, decide most assignments
            self.clusters = embedding(self.m, channels, std=1.0)
            self.query = Linear(channels, width, bias=False)
            self.key = Linear(channels, width, bias=False)

    def logits(self, tokens: torch.Tensor) -> torch.Tensor:
        # (W_Q c_i) . (W_K g_j) contracted as ((W_Q c_i) W_K^T) . g_j; never builds
        # the (n, width) key tensor
        q = self.query(self.clusters)
        return (q @ self.key.weight.transpose(0, 1)) @ tokens.transpose(-1, -2)

    def assign(
        self,
        tokens: torch.Tensor,
        mode: AssignMode | str,
        temperature: float = 1.0,
        rng: RngStream | None = None,
    ) -> torch.Tensor:
        return assignment_from_logits(self.logits(tokens), mode, temperature, rng)

    def forward(
        self,
        tokens: torch.Tensor,
        out_proj: nn.Module,
        mode: AssignMode | str,
        temperature: float = 1.0,
        rng: RngStream | None = None,
    ) -> tuple[torch.Tensor, torch.Tensor | None]:
        if self.skip:
            return out_proj(self.value(tokens)), None
        a = self.assign(tokens, mode, temperature, rng)
        # value projection commutes with the weighted sum over tokens
        weights = a.sum(dim=-1, keepdim=True)
        summed = (a @ tokens) @ self.value.weight + weights * self.value.bias
        means = summed / (weights + MEAN_EPS)
        if AssignMode(mode) is AssignMode.TRAIN:
            means = _bounded_surrogate(means, summed, weights)
        return out_proj(means), a


class ClusterBank(nn.Module):
    """Per-stage clustering with one output projection shared by all stages."""

    def __init__(
        self,
        channels: Sequence[int],
        token_counts: Sequence[int],
        width: int,
        config: ClusterConfig = ClusterConfig(),
    ) -> None:
        super().__init__()
        if not (len(channels) == len(token_counts) == len(config.rates)):
            raise ValueError("channels, token counts and rates must have one entry per stage")
        self.config = config
        self.stages = nn.ModuleList(
            ClusterStage(c, width, n, r) for c, n, r in zip(channels, token_counts, config.rates)
        )
        self.out = Linear(width, width)

    @property
    def counts(self) -> list[int]:
        return [s.m for s in self.stages]

    def forward(
        self,
        features: Sequence[torch.Tensor],
        mode: AssignMode | str | None = None,
        rng: RngStream | None = None,
    ) -> tuple[list[torch.Tensor], list[torch.Tensor | None]]:
        mode = AssignMode(mode or self.config.mode)
        reduced, assignments = [], []
        for l, (stage, f) in enumerate(zip(self.stages, features)):
            stage_rng = rng.child(f"stage{l}") if rng is not None else None
            s, a = stage(patchify(f), self.out, mode, self.config.temperature, stage_rng)
            reduced.append(s)
            assignments.append(a)
        return reduced, assignments
