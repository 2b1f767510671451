"""Backbone + multi-granularity attention module assembled into one network."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch import nn

from .backbone import Backbone, BackboneConfig
from .clustering import DEFAULT_RATES, AssignMode, ClusterBank, ClusterConfig, stage_token_counts
from .encoder import Encoder, EncoderConfig, LevelHeads, SequenceAssembly, level_loss
from .layers import initialize
from .numeric import DTYPE, RngStream


@dataclass(frozen=True)
class MamConfig:
    rates: tuple[float, ...] = DEFAULT_RATES
    temperature: float = 1.0
    width: int = 256
    depth: int = 2
    heads: int = 4
    channels: tuple[int, ...] = (16, 32, 64, 128)
    input_size: tuple[int, int] = (64, 64)

    def cluster(self, mode: AssignMode | str = AssignMode.EVAL) -> ClusterConfig:
        return ClusterConfig(tuple(self.rates), self.temperature, mode)

    def encoder(self) -> EncoderConfig:
        return EncoderConfig(self.width, self.depth, self.heads)

    def backbone(self) -> BackboneConfig:
        return BackboneConfig(tuple(self.channels), tuple(self.input_size))

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, doc: dict) -> "MamConfig":
        doc = dict(doc)
        for key in ("rates", "channels", "input_size"):
            if key in doc:
                doc[key] = tuple(doc[key])
        return cls(**doc)


class MamNet(nn.Module):
    def __init__(self, config: MamConfig = MamConfig(), seed: int = 0) -> None:
        super().__init__()
        self.config = config
        self.backbone = Backbone(config.backbone())
        counts = stage_token_counts(*config.input_size)
        self.clusters = ClusterBank(config.channels, counts, config.width, config.cluster())
        self.assembly = SequenceAssembly(config.width, len(counts))
        self.encoder = Encoder(config.encoder())
        self.heads = LevelHeads(config.width)
        initialize(self, RngStream(seed, "init"))

    def features_to_logits(
        self,
        features: list[torch.Tensor],
        mode: AssignMode | str = AssignMode.EVAL,
        rng: RngStream | None = None,
    ) -> torch.Tensor:
        reduced, _ = self.clusters(features, mode, rng)
        return self.heads(self.encoder(self.assembly(reduced)))

    def forward(
        self,
        images: torch.Tensor,
        mode: AssignMode | str = AssignMode.EVAL,
        rng: RngStream | None = None,
    ) -> torch.Tensor:
        """Logits ``(B, 4 types, 4 levels)`` for images ``(B, 3, H, W)``."""
        return self.features_to_logits(self.backbone(images), mode, rng)

    def loss(self, images, truth, mode=AssignMode.TRAIN, rng=None) -> torch.Tensor:
        return level_loss(self(images, mode, rng), torch.as_tensor(truth, dtype=torch.long))

    def parameter_groups(self) -> dict[str, list[tuple[str, nn.Parameter]]]:
        """Convolutional parameters vs. transformer/cluster/head parameters."""
        groups: dict[str, list] = {"cnn": [], "transformer": []}
        for name, p in self.named_parameters():
            groups["cnn" if name.startswith("backbone.") else "transformer"].append((name, p))
        return groups

    @torch.no_grad()
    def predict(self, images: torch.Tensor) -> np.ndarray:
        """Argmax level classes ``(B, 4)`` with deterministic hard clustering."""
        return self(images, AssignMode.EVAL).argmax(dim=-1).numpy()


def images_to_tensor(images: np.ndarray) -> torch.Tensor:
    """uint8 ``(B, H, W, 3)`` to float64 ``(B, 3, H, W)`` scaled to roughly [-1, 1]."""
    x = torch.from_numpy(np.ascontiguousarray(images)).to(DTYPE)
    return (x.permute(0, 3, 1, 2) / 127.5) - 1.0
