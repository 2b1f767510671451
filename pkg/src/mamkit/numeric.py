"""Float64 tensor operations, seeded random streams and gradient checking.

Everything here runs on torch CPU tensors in double precision. Randomness
never touches torch's global generator; it comes from :class:`RngStream`,
a numpy PCG64 stream keyed by ``(seed, label)``.
"""

from __future__ import annotations

import hashlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

DTYPE = torch.float64
GUMBEL_CLAMP = 1e-12


class DimensionError(ValueError):
    pass


class LabelError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


def tensor(values, requires_grad: bool = False) -> torch.Tensor:
    t = torch.as_tensor(np.asarray(values, dtype=np.float64)).clone()
    return t.requires_grad_(requires_grad)


# ----------------------------------------------------------------------------
# random streams
# ----------------------------------------------------------------------------


def _label_words(label: str) -> list[int]:
    digest = hashlib.sha256(label.encode("utf-8")).digest()
    return [int.from_bytes(digest[i : i + 4], "little") for i in range(0, 16, 4)]


class RngStream:
    """Deterministic random stream identified by a 64-bit seed and a label.

    Two streams built from the same ``(seed, label)`` produce identical draws
    on every platform (PCG64 seeded through ``SeedSequence``).
    """

    def __init__(self, seed: int, label: str = "") -> None:
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.label = label
        self.draws = 0
        entropy = [self.seed & 0xFFFFFFFF, self.seed >> 32, *_label_words(label)]
        self._gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))

    def child(self, label: str) -> "RngStream":
        """Independent substream; depends only on the seed and the joined label."""
        return RngStream(self.seed, f"{self.label}/{label}" if self.label else label)

    def _count(self, size) -> None:
        self.draws += int(np.prod(size)) if size is not None else 1

    def uniform(self, size=None, low: float = 0.0, high: float = 1.0):
        self._count(size)
        return self._gen.uniform(low, high, size)

    def normal(self, size=None, scale: float = 1.0):
        self._count(size)
        return self._gen.normal(0.0, scale, size)

    def integers(self, low: int, high: int, size=None):
        """Integers in ``[low, high)``."""
        self._count(size)
        return self._gen.integers(low, high, size)

    def permutation(self, n: int) -> np.ndarray:
        self._count(n)
        return self._gen.permutation(n)

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, label={self.label!r}, draws={self.draws})"


# ----------------------------------------------------------------------------
# differentiable operations
# ----------------------------------------------------------------------------


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.dim() < 1 or b.dim() < 1 or a.shape[-1] != b.shape[-2 if b.dim() > 1 else 0]:
        raise DimensionError(
            f"matmul inner extents disagree: {tuple(a.shape)} x {tuple(b.shape)}"
        )
    return a @ b


def add(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return a + b


def mul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return a * b


def mean(x: torch.Tensor, axis: int) -> torch.Tensor:
    return x.mean(dim=axis)


def concat(tensors: Sequence[torch.Tensor], axis: int = -2) -> torch.Tensor:
    """Concatenate along the token axis (second to last by default)."""
    if not tensors:
        raise DimensionError("concat needs at least one tensor")
    return torch.cat(list(tensors), dim=axis)


def softmax(x: torch.Tensor, axis: int = -1) -> torch.Tensor:
    shifted = x - x.amax(dim=axis, keepdim=True).detach()
    e = torch.exp(shifted)
    return e / e.sum(dim=axis, keepdim=True)


def log_softmax(x: torch.Tensor, axis: int = -1) -> torch.Tensor:
    shifted = x - x.amax(dim=axis, keepdim=True).detach()
    return shifted - torch.log(torch.exp(shifted).sum(dim=axis, keepdim=True))


def cross_entropy_from_logits(logits: torch.Tensor, true_class) -> torch.Tensor:
    """``-log softmax(logits)[true_class]`` over a trailing axis of four levels.

    ``logits`` may carry leading batch axes; ``true_class`` then has the same
    leading shape. Returns an elementwise loss with the class axis removed.
    """
    if logits.shape[-1] != 4:
        raise DimensionError(f"expected 4 level logits, got shape {tuple(logits.shape)}")
    cls = torch.as_tensor(true_class, dtype=torch.long)
    if cls.numel() and (int(cls.min()) < 0 or int(cls.max()) > 3):
        raise LabelError(f"level class outside 0..3: {cls.tolist()}")
    logp = log_softmax(logits, axis=-1)
    return -torch.gather(logp, -1, cls.unsqueeze(-1)).squeeze(-1)


def gelu(x: torch.Tensor) -> torch.Tensor:
    """Exact (erf) GELU."""
    return F.gelu(x)


def layer_norm(
    x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor, eps: float = 1e-5
) -> torch.Tensor:
    """Normalize over the last axis (biased variance), then scale and shift."""
    return F.layer_norm(x, x.shape[-1:], weight, bias, eps)


def gumbel_from_uniform(u) -> torch.Tensor:
    u = np.clip(np.asarray(u, dtype=np.float64), GUMBEL_CLAMP, 1.0 - GUMBEL_CLAMP)
    return torch.from_numpy(-np.log(-np.log(u)))


def gumbel_noise(shape, rng: RngStream) -> torch.Tensor:
    """I.i.d. standard Gumbel samples ``-ln(-ln U)``."""
    return gumbel_from_uniform(rng.uniform(size=tuple(shape)))


# ----------------------------------------------------------------------------
# optimizer
# ----------------------------------------------------------------------------


class Adam:
    """Adam with bias correction over named parameter groups.

    ``groups`` is a list of ``(params, lr)`` pairs.
    """

    def __init__(
        self,
        groups: Iterable[tuple[Iterable[torch.Tensor], float]],
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
    ) -> None:
        self.groups = [(list(params), float(lr)) for params, lr in groups]
        self.betas = betas
        self.eps = eps
        self.step_count = 0
        self._m: dict[int, torch.Tensor] = {}
        self._v: dict[int, torch.Tensor] = {}

    def zero_grad(self) -> None:
        for params, _ in self.groups:
            for p in params:
                p.grad = None

    @torch.no_grad()
    def step(self) -> None:
        self.step_count += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1**self.step_count
        c2 = 1.0 - b2**self.step_count
        for params, lr in self.groups:
            for p in params:
                if p.grad is None:
                    continue
                key = id(p)
                m = self._m.setdefault(key, torch.zeros_like(p))
                v = self._v.setdefault(key, torch.zeros_like(p))
                m.mul_(b1).add_(p.grad, alpha=1.0 - b1)
                v.mul_(b2).addcmul_(p.grad, p.grad, value=1.0 - b2)
                denom = (v / c2).sqrt_().add_(self.eps)
                p.addcdiv_(m, denom, value=-lr / c1)


# ----------------------------------------------------------------------------
# gradient checking
# ----------------------------------------------------------------------------


def grad_check(
    function: Callable[[torch.Tensor], torch.Tensor],
    point: torch.Tensor,
    eps: float = 1e-5,
    *,
    reference: Callable[[torch.Tensor], torch.Tensor] | None = None,
    coords: Sequence[int] | None = None,
    floor: float = 1e-12,
) -> float:
    """Worst coordinate-wise relative error between reverse-mode and central differences.

    ``reference`` evaluates the finite differences when the differentiated
    function is a surrogate (straight-through estimators). ``coords`` limits
    the check to selected flat indices.
    """
    result = grad_check_detail(
        function, point, eps, reference=reference, coords=coords, floor=floor
    )
    return result[0]


def grad_check_detail(
    function: Callable[[torch.Tensor], torch.Tensor],
    point: torch.Tensor,
    eps: float = 1e-5,
    *,
    reference: Callable[[torch.Tensor], torch.Tensor] | None = None,
    coords: Sequence[int] | None = None,
    floor: float = 1e-12,
) -> tuple[float, int]:
    """Like :func:`grad_check` but also returns the worst flat coordinate."""
    x = point.detach().clone().to(DTYPE).requires_grad_(True)
    out = function(x)
    if out.numel() != 1:
        raise DimensionError(f"grad_check needs a scalar function, got shape {tuple(out.shape)}")
    if not torch.isfinite(out).all():
        raise NumericError("function value is not finite at the base point")
    (analytic,) = torch.autograd.grad(out, x, allow_unused=True)
    if analytic is None:
        analytic = torch.zeros_like(x)
    analytic = analytic.detach().reshape(-1)
    if not torch.isfinite(analytic).all():
        bad = int(torch.nonzero(~torch.isfinite(analytic))[0])
        raise NumericError(f"analytic gradient not finite at coordinate {bad}")

    ref = reference or function
    base = x.detach().reshape(-1)
    indices = range(base.numel()) if coords is None else coords
    worst, worst_at = 0.0, -1
    with torch.no_grad():
        for i in indices:
            i = int(i)
            plus = base.clone()
            plus[i] += eps
            minus = base.clone()
            minus[i] -= eps
            fp = float(ref(plus.reshape(x.shape)))
            fm = float(ref(minus.reshape(x.shape)))
            if not (math.isfinite(fp) and math.isfinite(fm)):
                raise NumericError(f"function not finite near coordinate {i}")
            numeric = (fp - fm) / (2.0 * eps)
            a = float(analytic[i])
            err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
            if err > worst or worst_at < 0:
                worst, worst_at = err, i
    return worst, worst_at
