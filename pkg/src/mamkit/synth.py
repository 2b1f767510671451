"""Procedural faces whose four latent factors follow the retouching levels.

A face is an ellipse head with two disc eyes and additive band-passed skin
texture. Level classes drive: skin-noise blur radius (Smooth), eye radius
scale (EyeEnlarge), head width scale (FaceLift) and skin brightness (Whiten).
Eyes sit at a fixed fraction of the head width, so eye size and face width are
judged relative to each other.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image
from scipy import ndimage

from .labels import (
    SPLIT_FRACTIONS,
    TYPES,
    Annotation,
    Api,
    ManifestRecord,
    assign_splits,
    subset_combinations,
    write_manifest,
)
from .numeric import RngStream

SUPERSAMPLE = 4


@dataclass(frozen=True)
class SyntheticSpec:
    canvas: int = 64
    eye_scale: tuple[float, ...] = (1.0, 1.15, 1.3, 1.45)
    face_scale: tuple[float, ...] = (1.0, 0.92, 0.84, 0.76)
    brightness: tuple[float, ...] = (0.0, 12.0, 24.0, 36.0)
    smooth_radius: tuple[float, ...] = (0.0, 0.75, 1.5, 2.25)
    # band-passed texture survives the JPEG round trip and is harder to mimic
    # with motion blur than white noise, so Smooth stays readable
    noise_std: float = 45.0
    # difference-of-Gaussians band (sigmas in pixels at 64); None keeps it white
    noise_band: tuple[float, float] | None = (0.6, 1.6)
    skin_tone: tuple[float, float, float] = (165.0, 125.0, 100.0)
    background: float = 70.0
    # base geometry in pixels of a 64-pixel canvas, scaled with the canvas
    head_half_width: float = 20.0
    head_half_height: float = 25.0
    eye_radius: float = 3.6


@dataclass(frozen=True)
class Identity:
    cx: float
    cy: float
    half_width: float
    half_height: float
    eye_radius: float
    skin: tuple[float, float, float]
    background: tuple[float, float, float]
    noise: np.ndarray


def identity(seed: int, image_id: int, spec: SyntheticSpec = SyntheticSpec()) -> Identity:
    """Per-person base geometry, colors and texture, jittered a few percent."""
    rng = RngStream(seed, f"identity/{image_id}")
    s = spec.canvas / 64.0
    u = lambda lo, hi: float(rng.uniform(low=lo, high=hi))  # noqa: E731
    cx = 32.0 * s + u(-1.5, 1.5) * s
    cy = 34.0 * s + u(-1.5, 1.5) * s
    half_width = spec.head_half_width * s * (1.0 + u(-0.03, 0.03))
    half_height = spec.head_half_height * s * (1.0 + u(-0.03, 0.03))
    eye_radius = spec.eye_radius * s * (1.0 + u(-0.04, 0.04))
    tone = u(-6.0, 6.0)
    skin = tuple(c + tone for c in spec.skin_tone)
    background = tuple(float(v) for v in spec.background + rng.uniform(size=3, low=-10.0, high=10.0))
    noise = rng.normal(size=(spec.canvas, spec.canvas))
    if spec.noise_band is not None:
        lo, hi = spec.noise_band
        noise = ndimage.gaussian_filter(noise, lo * s) - ndimage.gaussian_filter(noise, hi * s)
    noise *= spec.noise_std / noise.std()
    return Identity(cx, cy, half_width, half_height, eye_radius, skin, background, noise)


def _coverage(mask_fn, size: int) -> np.ndarray:
    g = (np.arange(size * SUPERSAMPLE) + 0.5) / SUPERSAMPLE
    yy, xx = np.meshgrid(g, g, indexing="ij")
    m = mask_fn(xx, yy).astype(np.float64)
    return m.reshape(size, SUPERSAMPLE, size, SUPERSAMPLE).mean(axis=(1, 3))


def render(person: Identity, annotation: Annotation, spec: SyntheticSpec = SyntheticSpec()) -> np.ndarray:
    """uint8 ``(canvas, canvas, 3)`` face with the annotation's factors applied."""
    s, e, l, w = annotation.levels
    n = spec.canvas
    a = person.half_width * spec.face_scale[l]
    b = person.half_height
    r = person.eye_radius * spec.eye_scale[e]
    eye_dx = 0.42 * a
    eye_y = person.cy - 0.18 * b

    head = _coverage(lambda x, y: ((x - person.cx) / a) ** 2 + ((y - person.cy) / b) ** 2 <= 1.0, n)
    eyes = _coverage(
        lambda x, y: ((x - person.cx + eye_dx) ** 2 + (y - eye_y) ** 2 <= r * r)
        | ((x - person.cx - eye_dx) ** 2 + (y - eye_y) ** 2 <= r * r),
        n,
    )
    radius = spec.smooth_radius[s]
    texture = ndimage.gaussian_filter(person.noise, radius, mode="reflect") if radius > 0 else person.noise

    bg = np.asarray(person.background)[None, None, :]
    skin = np.asarray(person.skin)[None, None, :] + spec.brightness[w] + texture[:, :, None]
    eye_color = np.array([40.0, 30.0, 30.0])[None, None, :]
    img = bg * (1.0 - head[:, :, None]) + skin * head[:, :, None]
    img = img * (1.0 - eyes[:, :, None]) + eye_color * eyes[:, :, None]
    return np.rint(np.clip(img, 0.0, 255.0)).astype(np.uint8)


def draw_annotation(rng: RngStream) -> Annotation:
    """Subset kind uniform over 0..4, combination uniform within it, positive levels uniform over 1..3."""
    kind = int(rng.integers(0, 5))
    levels = [0, 0, 0, 0]
    if kind:
        combos = subset_combinations(kind)
        combo = combos[int(rng.integers(0, len(combos)))]
        for t in combo:
            levels[TYPES.index(t)] = int(rng.integers(1, 4))
    return Annotation.from_levels(levels)


@dataclass
class SyntheticSet:
    images: np.ndarray
    records: list[ManifestRecord]

    def split(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        idx = [i for i, r in enumerate(self.records) if r.split == name and not r.exclusions]
        labels = np.array([self.records[i].annotation.levels for i in idx], dtype=np.int64).reshape(-1, 4)
        return self.images[idx], labels


def synth_generate(
    n: int,
    seed: int,
    spec: SyntheticSpec = SyntheticSpec(),
    fractions: Sequence[float] = SPLIT_FRACTIONS,
) -> SyntheticSet:
    if n <= 0:
        raise ValueError("n must be positive")
    splits = assign_splits(range(n), seed, fractions)
    images = np.empty((n, spec.canvas, spec.canvas, 3), dtype=np.uint8)
    records = []
    for i in range(n):
        ann = draw_annotation(RngStream(seed, f"annotation/{i}"))
        images[i] = render(identity(seed, i, spec), ann, spec)
        records.append(
            ManifestRecord(
                id=i,
                api=Api.MEGVII if ann.kind else Api.NONE,
                annotation=ann,
                path=f"images/{i:05d}.png",
                split=splits[i],
            )
        )
    return SyntheticSet(images, records)


def write_synthetic(data: SyntheticSet, out_dir: str | Path) -> Path:
    """Write PNG images and ``manifest.jsonl``; returns the manifest path."""
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    for img, rec in zip(data.images, data.records):
        Image.fromarray(img).save(out_dir / rec.path, format="PNG")
    manifest = out_dir / "manifest.jsonl"
    write_manifest(manifest, data.records)
    return manifest


def load_images(manifest_records: Sequence[ManifestRecord], root: str | Path) -> np.ndarray:
    root = Path(root)
    out = []
    for rec in manifest_records:
        with Image.open(root / rec.path) as im:
            out.append(np.asarray(im.convert("RGB")))
    return np.stack(out) if out else np.empty((0, 0, 0, 3), dtype=np.uint8)
