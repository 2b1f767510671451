"""Lossy-operation augmentation: random motion blur, then PNG or JPEG round trip.

Every random choice is drawn from an explicit :class:`RngStream` and recorded
in an :class:`AugmentRecord`, which replays the transformation exactly.
"""

from __future__ import annotations

import io
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .numeric import RngStream

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp"}


class MediaError(RuntimeError):
    pass


@dataclass(frozen=True)
class AugmentConfig:
    blur_prob: float = 0.5
    kernel_sizes: tuple[int, ...] = (3, 4, 5, 6, 7)
    jpeg_prob: float = 0.5
    quality_range: tuple[int, int] = (80, 95)  # inclusive


@dataclass(frozen=True)
class AugmentRecord:
    blur: bool
    kernel_size: int | None
    angle: float | None
    format: str
    quality: int | None

    def to_json(self) -> dict:
        return asdict(self)


def motion_kernel(kernel_size: int, angle: float) -> np.ndarray:
    """Normalized line kernel of ``kernel_size`` taps through the kernel center.

    ``angle`` is in degrees, counter-clockwise from horizontal. Taps are spaced
    one pixel apart and bilinearly splatted onto the grid.
    """
    if not 3 <= kernel_size <= 7:
        raise ValueError(f"kernel size must be in 3..7, got {kernel_size}")
    k = kernel_size
    kernel = np.zeros((k, k), dtype=np.float64)
    center = (k - 1) / 2.0
    theta = math.radians(angle)
    dx, dy = math.cos(theta), -math.sin(theta)
    for i in range(k):
        t = i - center
        x, y = center + t * dx, center + t * dy
        x0, y0 = math.floor(x), math.floor(y)
        fx, fy = x - x0, y - y0
        for yy, wy in ((y0, 1 - fy), (y0 + 1, fy)):
            for xx, wx in ((x0, 1 - fx), (x0 + 1, fx)):
                w = wx * wy
                if w > 0 and 0 <= yy < k and 0 <= xx < k:
                    kernel[yy, xx] += w
    return kernel / kernel.sum()


def motion_blur(image: np.ndarray, kernel_size: int, angle: float = 0.0) -> np.ndarray:
    """Convolve with a motion kernel (reflected borders), clamped to [0, 255].

    uint8 input gives rounded uint8 output; float input stays float.
    """
    kernel = motion_kernel(kernel_size, angle)
    img = np.asarray(image)
    x = img.astype(np.float64)
    if x.ndim == 3:
        kernel = kernel[:, :, None]
    out = np.clip(ndimage.correlate(x, kernel, mode="reflect"), 0.0, 255.0)
    if img.dtype == np.uint8:
        return np.rint(out).astype(np.uint8)
    return out


def sample_record(rng: RngStream, cfg: AugmentConfig = AugmentConfig()) -> AugmentRecord:
    blur = bool(rng.uniform() < cfg.blur_prob)
    size = angle = None
    if blur:
        size = int(cfg.kernel_sizes[int(rng.integers(0, len(cfg.kernel_sizes)))])
        angle = float(rng.uniform(low=0.0, high=180.0))
    use_jpeg = bool(rng.uniform() < cfg.jpeg_prob)
    quality = None
    if use_jpeg:
        lo, hi = cfg.quality_range
        quality = int(rng.integers(lo, hi + 1))
    return AugmentRecord(blur, size, angle, "JPEG" if use_jpeg else "PNG", quality)


def encode_decode(image: np.ndarray, fmt: str, quality: int | None = None) -> np.ndarray:
    buf = io.BytesIO()
    try:
        pil = Image.fromarray(np.asarray(image, dtype=np.uint8))
        if fmt == "JPEG":
            # baseline sequential, 4:2:0 chroma, standard tables scaled by quality
            pil.save(buf, format="JPEG", quality=int(quality), subsampling=2, optimize=False)
        elif fmt == "PNG":
            pil.save(buf, format="PNG")
        else:
            raise MediaError(f"unsupported format {fmt!r}")
        buf.seek(0)
        decoded = Image.open(buf)
        decoded.load()
        out = np.asarray(decoded.convert(pil.mode))
    except (OSError, ValueError) as exc:
        raise MediaError(f"{fmt} round trip failed: {exc}") from exc
    return out


def apply_record(image: np.ndarray, record: AugmentRecord) -> np.ndarray:
    img = np.asarray(image, dtype=np.uint8)
    if record.blur:
        img = motion_blur(img, record.kernel_size, record.angle)
    return encode_decode(img, record.format, record.quality)


def lossy_roundtrip(
    image: np.ndarray, rng: RngStream, cfg: AugmentConfig = AugmentConfig()
) -> tuple[np.ndarray, AugmentRecord]:
    if np.asarray(image).dtype != np.uint8:
        raise MediaError("lossy_roundtrip expects an 8-bit image")
    record = sample_record(rng, cfg)
    return apply_record(image, record), record


def augment_directory(
    in_dir: str | Path, out_dir: str | Path, seed: int, cfg: AugmentConfig = AugmentConfig()
) -> list[dict]:
    """Augment every image under ``in_dir``; writes PNGs plus ``records.jsonl``.

    Each image draws from its own substream keyed by its relative path.
    """
    in_dir, out_dir = Path(in_dir), Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    files = sorted(p for p in in_dir.rglob("*") if p.suffix.lower() in IMAGE_SUFFIXES)
    for path in files:
        rel = path.relative_to(in_dir)
        try:
            with Image.open(path) as im:
                image = np.asarray(im.convert("RGB"))
        except OSError as exc:
            raise MediaError(f"cannot read {path}: {exc}") from exc
        out, record = lossy_roundtrip(image, RngStream(seed, f"augment/{rel.as_posix()}"), cfg)
        target = (out_dir / rel).with_suffix(".png")
        target.parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(out).save(target, format="PNG")
        rows.append({"image": rel.as_posix(), "output": target.relative_to(out_dir).as_posix(), **record.to_json()})
    with open(out_dir / "records.jsonl", "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row) + "\n")
    return rows
