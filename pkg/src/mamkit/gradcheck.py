"""Finite-difference checks over every differentiable operation at toy sizes."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Iterable

import torch
from torch.func import functional_call

from . import numeric as nm
from .clustering import MEAN_EPS, AssignMode, ClusterStage, assignment_from_logits, patchify, reduce_tokens
from .encoder import EncoderLayer, LevelHeads, level_loss
from .layers import Linear, initialize
from .model import MamConfig, MamNet

TOLERANCE = 1e-4
EPS = 1e-5


@dataclass
class Check:
    name: str
    function: Callable[[torch.Tensor], torch.Tensor]
    point: torch.Tensor
    reference: Callable[[torch.Tensor], torch.Tensor] | None = None
    coords: list[int] | None = None


@dataclass
class CheckResult:
    name: str
    error: float
    coordinate: int
    seconds: float

    @property
    def passed(self) -> bool:
        return self.error < TOLERANCE

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name:32s} max rel err {self.error:.2e} (coord {self.coordinate}) {self.seconds:.2f}s"


TOY = MamConfig(width=8, depth=2, heads=2, channels=(2, 3, 3, 4), input_size=(32, 32))


def _rand(rng: nm.RngStream, *shape: int, scale: float = 1.0) -> torch.Tensor:
    return torch.from_numpy(rng.normal(size=shape, scale=scale))


def _weighted(out: torch.Tensor, w: torch.Tensor) -> torch.Tensor:
    return (out * w).sum()


def standard_checks(seed: int = 0) -> list[Check]:
    rng = nm.RngStream(seed, "gradcheck")
    r = lambda *s, scale=1.0: _rand(rng, *s, scale=scale)  # noqa: E731
    checks: list[Check] = []

    b, w = r(4, 3), r(5, 3)
    checks.append(Check("matmul (left)", lambda x: _weighted(nm.matmul(x, b), w), r(5, 4)))
    a = r(5, 4)
    checks.append(Check("matmul (right)", lambda x: _weighted(nm.matmul(a, x), w), r(4, 3)))
    c, w2 = r(3, 4), r(3, 4)
    checks.append(Check("add", lambda x: _weighted(nm.add(x, c) ** 2, w2), r(3, 4)))
    checks.append(Check("mul", lambda x: _weighted(nm.mul(x, c) * x, w2), r(3, 4)))
    w6 = r(6)
    checks.append(Check("softmax", lambda x: _weighted(nm.softmax(x, axis=0), w6), r(6)))
    w34 = r(3, 4)
    checks.append(Check("softmax (axis 0 of matrix)", lambda x: _weighted(nm.softmax(x, axis=0), w34), r(3, 4)))
    checks.append(Check("cross_entropy_from_logits", lambda x: nm.cross_entropy_from_logits(x, 2),
                        torch.tensor([1.0, 2.0, 3.0, 4.0], dtype=nm.DTYPE)))
    g, bb, w35 = r(5), r(5), r(3, 5)
    checks.append(Check("layer_norm", lambda x: _weighted(nm.layer_norm(x, g, bb), w35), r(3, 5)))
    checks.append(Check("gelu", lambda x: _weighted(nm.gelu(x), w35), r(3, 5)))
    w3 = r(3)
    checks.append(Check("mean", lambda x: _weighted(nm.mean(x, 1), w3), r(3, 5)))
    other, w75 = r(4, 5), r(7, 5)
    checks.append(Check("concat", lambda x: _weighted(nm.concat([x, other]) ** 2, w75), r(3, 5)))

    # assignment and reduction
    wa = r(3, 7)
    checks.append(Check("assignment (soft)",
                        lambda x: _weighted(assignment_from_logits(x, AssignMode.SOFT, 0.7), wa), r(3, 7)))
    noise = nm.gumbel_noise((3, 7), rng.child("noise"))
    checks.append(Check(
        "assignment (straight-through)",
        lambda x: _weighted(assignment_from_logits(x, AssignMode.TRAIN, 1.0, noise=noise), wa),
        r(3, 7),
        reference=lambda x: _weighted(nm.softmax(x + noise, axis=-2), wa),
    ))
    proj = initialize(Linear(6, 6), rng.child("proj"))
    vals, w36 = r(7, 6), r(3, 6)
    checks.append(Check("reduce (wrt logits)",
                        lambda x: _weighted(reduce_tokens(nm.softmax(x, axis=-2), vals, proj), w36), r(3, 7)))
    fixed_a = nm.softmax(r(3, 7), axis=-2)
    checks.append(Check("reduce (wrt values)",
                        lambda x: _weighted(reduce_tokens(fixed_a, x, proj), w36), r(7, 6)))

    stage = initialize(ClusterStage(channels=3, width=6, n_tokens=16, rate=0.25), rng.child("stage"))
    w_stage = r(4, 6)
    checks.append(Check("cluster stage (soft, tokens)",
                        lambda x: _weighted(stage(x, proj, AssignMode.SOFT)[0], w_stage), r(16, 3)))
    # The surrogate gradient is the true gradient of the map whose one-hot part
    # is frozen at the base point. Check it at a point where every cluster is
    # occupied and at one where some cluster is empty.
    noise_label = f"{seed}/stage-noise"
    noise_st = nm.gumbel_noise((4, 16), nm.RngStream(seed, noise_label))
    found: dict[bool, torch.Tensor] = {}
    while len(found) < 2:
        point = r(16, 3)
        with torch.no_grad():
            hard = assignment_from_logits(stage.logits(point), AssignMode.TRAIN, noise=noise_st)
        found.setdefault(bool((hard.sum(dim=-1) > 0).all()), point)
    for full, point in sorted(found.items(), reverse=True):
        with torch.no_grad():
            soft0 = nm.softmax(stage.logits(point) + noise_st, axis=-2)
            hard0 = assignment_from_logits(stage.logits(point), AssignMode.TRAIN, noise=noise_st)
        checks.append(Check(
            f"cluster stage (straight-through, {'all clusters used' if full else 'empty cluster'})",
            lambda x: _weighted(stage(x, proj, AssignMode.TRAIN, rng=nm.RngStream(seed, noise_label))[0], w_stage),
            point,
            reference=lambda x, h=hard0, s0=soft0: _weighted(_frozen_stage(stage, x, proj, noise_st, h, s0), w_stage),
        ))
    skip = initialize(ClusterStage(channels=3, width=6, n_tokens=4, rate=1.0), rng.child("skip"))
    w_skip = r(4, 6)
    checks.append(Check("cluster stage (skip path)",
                        lambda x: _weighted(skip(x, proj, AssignMode.SOFT)[0], w_skip), r(4, 3)))

    layer = initialize(EncoderLayer(width=8, heads=2), rng.child("layer"))
    w_layer = r(6, 8)
    checks.append(Check("encoder layer", lambda x: _weighted(layer(x), w_layer), r(6, 8)))
    heads = initialize(LevelHeads(width=8), rng.child("heads"))
    truth = torch.tensor([0, 2, 1, 3])
    checks.append(Check("heads + loss", lambda x: level_loss(heads(x), truth), r(6, 8)))

    model = _unit_gain_heads(MamNet(TOY, seed=seed))
    image = r(1, 3, 32, 32, scale=0.5)
    w_feat = [r(*f.shape) for f in model.backbone(image)[:2]]
    checks.append(Check(
        "backbone (two stages)",
        lambda x: sum(_weighted(f, wf) for f, wf in zip(model.backbone(x)[:2], w_feat)),
        image,
        coords=_sample(image.numel(), 150, rng.child("bb-coords")),
    ))
    y = torch.tensor([[1, 0, 3, 2]])
    checks.append(Check(
        "full pipeline (soft, image)",
        lambda x: level_loss(model(x, AssignMode.SOFT), y),
        image,
        coords=_sample(image.numel(), 150, rng.child("full-coords")),
    ))
    name = "clusters.stages.0.clusters"
    checks.append(Check(
        "full pipeline (soft, cluster embeddings)",
        lambda c: level_loss(functional_call(model, {name: c}, (image, AssignMode.SOFT)), y),
        model.get_parameter(name).detach().clone(),
    ))
    return checks


def _frozen_stage(stage, tokens, proj, noise, hard0, soft0):
    a = hard0 + nm.softmax(stage.logits(tokens) + noise, axis=-2) - soft0
    weights = a.sum(dim=-1, keepdim=True)
    empty = hard0.sum(dim=-1, keepdim=True) == 0
    return proj((a @ stage.value(tokens)) / torch.where(empty, torch.ones_like(weights), weights + MEAN_EPS))


def _unit_gain_heads(model: MamNet) -> MamNet:
    """Undo the small head-output init so upstream gradients sit well above roundoff."""
    with torch.no_grad():
        for head in model.heads.heads:
            head.fc2.weight.div_(head.fc2.gain)
    return model


def _sample(n: int, k: int, rng: nm.RngStream) -> list[int]:
    return sorted(int(i) for i in rng.permutation(n)[: min(k, n)])


def run_checks(checks: Iterable[Check], eps: float = EPS) -> list[CheckResult]:
    results = []
    for check in checks:
        start = time.perf_counter()
        err, coord = nm.grad_check_detail(
            check.function, check.point, eps, reference=check.reference, coords=check.coords
        )
        results.append(CheckResult(check.name, err, coord, time.perf_counter() - start))
    return results


def gradcheck_all(seed: int = 0, extra: Iterable[Check] = ()) -> list[CheckResult]:
    """Run every standard check plus ``extra``; inspect ``passed`` on each result."""
    return run_checks([*standard_checks(seed), *extra])

