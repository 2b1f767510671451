"""Annotations, manifest records, data splits and manifest validation."""

from __future__ import annotations

import enum
import itertools
import json
import math
import re
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .numeric import RngStream

FFHQ_SIZE = 70_000
LEVEL_MAGNITUDES = (0, 30, 60, 90)
SPLITS = ("train", "val", "test")
SPLIT_FRACTIONS = (0.8, 0.1, 0.1)
REDUCED_KEEP = 1.0 / 3.0


class LevelError(ValueError):
    pass


class ManifestError(ValueError):
    pass


class RetouchType(enum.Enum):
    SMOOTH = "Smooth"
    EYE_ENLARGE = "EyeEnlarge"
    FACE_LIFT = "FaceLift"
    WHITEN = "Whiten"

    @property
    def field(self) -> str:
        return _FIELDS[self]

    @property
    def short(self) -> str:
        return _SHORT[self]


TYPES = tuple(RetouchType)
_FIELDS = dict(zip(TYPES, ("smooth", "eye_enlarge", "face_lift", "whiten")))
_SHORT = dict(zip(TYPES, "SELW"))


class Api(enum.Enum):
    MEGVII = "Megvii"
    TENCENT = "Tencent"
    ALIBABA = "Alibaba"
    NONE = "none"


class CleaningCategory(enum.Enum):
    BLUR_OR_BAD_LIGHTING = "BlurOrBadLighting"
    COSPLAY_FILTERED_OR_HEAVY_MAKEUP = "CosplayFilteredOrHeavyMakeup"
    INCOMPLETE_FACE = "IncompleteFace"
    INFANT_OR_BABY = "InfantOrBaby"
    FAKE_FACE = "FakeFace"


def level_from_magnitude(magnitude: int) -> int:
    if magnitude not in LEVEL_MAGNITUDES:
        raise LevelError(f"magnitude {magnitude!r} is not one of {LEVEL_MAGNITUDES}")
    return LEVEL_MAGNITUDES.index(magnitude)


def magnitude_of(level: int) -> int:
    _check_level(level)
    return LEVEL_MAGNITUDES[level]


def _check_level(level) -> int:
    if isinstance(level, bool) or not isinstance(level, (int, np.integer)) or not 0 <= level <= 3:
        raise LevelError(f"level class {level!r} outside 0..3")
    return int(level)


@dataclass(frozen=True, order=True)
class Annotation:
    """Level class (0..3) per retouching type."""

    smooth: int = 0
    eye_enlarge: int = 0
    face_lift: int = 0
    whiten: int = 0

    def __post_init__(self) -> None:
        for t in TYPES:
            object.__setattr__(self, t.field, _check_level(getattr(self, t.field)))

    @classmethod
    def from_levels(cls, levels: Sequence[int]) -> "Annotation":
        if len(levels) != 4:
            raise LevelError(f"need four levels, got {len(levels)}")
        return cls(*(int(v) if isinstance(v, np.integer) else v for v in levels))

    @classmethod
    def from_magnitudes(cls, magnitudes: Sequence[int]) -> "Annotation":
        return cls.from_levels([level_from_magnitude(m) for m in magnitudes])

    @property
    def levels(self) -> tuple[int, int, int, int]:
        return (self.smooth, self.eye_enlarge, self.face_lift, self.whiten)

    def __getitem__(self, t: RetouchType) -> int:
        return getattr(self, t.field)

    @property
    def kind(self) -> int:
        return sum(1 for v in self.levels if v)

    @property
    def combination(self) -> tuple[RetouchType, ...]:
        return tuple(t for t, v in zip(TYPES, self.levels) if v)

    def text(self) -> str:
        return annotation_decode(self)


def annotation_encode(levels: dict[RetouchType | str, int] | Sequence[int]) -> Annotation:
    """Build an :class:`Annotation` from per-type levels.

    Accepts a sequence in canonical order or a mapping keyed by
    :class:`RetouchType` or its name (``"EyeEnlarge"``); missing types are off.
    """
    if isinstance(levels, dict):
        values = [0, 0, 0, 0]
        for key, v in levels.items():
            t = key if isinstance(key, RetouchType) else RetouchType(key)
            values[TYPES.index(t)] = v
        return Annotation.from_levels(values)
    return Annotation.from_levels(list(levels))


def annotation_decode(annotation: Annotation) -> str:
    body = ", ".join(f"{t.value}: {annotation[t]}" for t in TYPES)
    return "{" + body + "}"


_TEXT_RE = re.compile(r"^\{\s*(.*?)\s*\}$")


def parse_annotation(text: str) -> Annotation:
    """Inverse of :func:`annotation_decode`."""
    m = _TEXT_RE.match(text.strip())
    if not m:
        raise LevelError(f"not an annotation: {text!r}")
    values: dict[str, int] = {}
    for part in m.group(1).split(","):
        name, _, raw = part.partition(":")
        name = name.strip()
        try:
            values[RetouchType(name).value] = int(raw.strip())
        except ValueError as exc:
            raise LevelError(f"bad annotation entry {part.strip()!r}") from exc
    if len(values) != 4:
        raise LevelError(f"annotation must list all four types: {text!r}")
    return annotation_encode(values)


def subset_combinations(kind: int) -> list[tuple[RetouchType, ...]]:
    """Type combinations retouched for a subset with ``kind`` operations."""
    if not 1 <= kind <= 4:
        raise ValueError(f"subset kind must be in 1..4, got {kind}")
    return list(itertools.combinations(TYPES, kind))


def versions_per_combination(kind: int) -> int:
    # the quad subset has fewer originals, so each gets two retouched versions
    return 2 if kind == 4 else 1


# ----------------------------------------------------------------------------
# manifest records
# ----------------------------------------------------------------------------


@dataclass(frozen=True)
class ManifestRecord:
    id: int
    api: Api
    annotation: Annotation
    path: str
    split: str
    exclusions: frozenset[CleaningCategory] = field(default_factory=frozenset)
    version: int = 0

    @property
    def kind(self) -> int:
        return self.annotation.kind

    @property
    def key(self) -> tuple:
        return (self.id, self.api.value, self.annotation.combination, self.version)

    @property
    def sort_key(self) -> tuple:
        return (self.id, self.api.value, [t.value for t in self.annotation.combination], self.version)

    def to_json(self) -> dict:
        row = {
            "id": self.id,
            "api": self.api.value,
            "kind": self.kind,
            **{t.field: self.annotation[t] for t in TYPES},
            "path": self.path,
            "split": self.split,
            "exclusions": sorted(c.value for c in self.exclusions),
            "version": self.version,
        }
        return row

    @classmethod
    def from_json(cls, row: dict) -> "ManifestRecord":
        """Parse one manifest row, enforcing every per-record invariant."""
        problems = record_problems(row)
        if problems:
            raise ManifestError("; ".join(problems))
        return cls(
            id=row["id"],
            api=Api(row["api"]),
            annotation=Annotation(*(row[t.field] for t in TYPES)),
            path=row["path"],
            split=row["split"],
            exclusions=frozenset(CleaningCategory(c) for c in row["exclusions"]),
            version=row["version"],
        )

    def with_split(self, split: str) -> "ManifestRecord":
        return ManifestRecord(
            self.id, self.api, self.annotation, self.path, split, self.exclusions, self.version
        )


FIELD_NAMES = (
    "id", "api", "kind", "smooth", "eye_enlarge", "face_lift", "whiten",
    "path", "split", "exclusions", "version",
)


def _is_int(v) -> bool:
    return isinstance(v, int) and not isinstance(v, bool)


def record_problems(row) -> list[str]:
    """Every invariant violation of a single decoded manifest row."""
    if not isinstance(row, dict):
        return ["record is not a JSON object"]
    problems = []
    missing = [k for k in FIELD_NAMES if k not in row]
    if missing:
        problems.append(f"missing fields: {', '.join(missing)}")
    extra = sorted(set(row) - set(FIELD_NAMES))
    if extra:
        problems.append(f"unknown fields: {', '.join(extra)}")
    if missing:
        return problems

    if not _is_int(row["id"]) or not 0 <= row["id"] < FFHQ_SIZE:
        problems.append(f"id {row['id']!r} outside 0..{FFHQ_SIZE - 1}")
    api = None
    try:
        api = Api(row["api"])
    except ValueError:
        problems.append(f"unknown api {row['api']!r}")
    levels = []
    for t in TYPES:
        v = row[t.field]
        if not _is_int(v) or not 0 <= v <= 3:
            problems.append(f"{t.field} level {v!r} outside 0..3")
        else:
            levels.append(v)
    kind = row["kind"]
    if not _is_int(kind) or not 0 <= kind <= 4:
        problems.append(f"kind {kind!r} outside 0..4")
    elif len(levels) == 4:
        nonzero = sum(1 for v in levels if v)
        if nonzero != kind:
            problems.append(f"kind {kind} but {nonzero} nonzero levels")
    if api is not None and _is_int(kind):
        if (api is Api.NONE) != (kind == 0):
            problems.append(f"api {api.value} inconsistent with kind {kind}")
        if api is Api.ALIBABA and kind > 1:
            problems.append(f"Alibaba record with kind {kind} > 1")
    if not isinstance(row["path"], str) or not row["path"]:
        problems.append("path must be a nonempty string")
    if row["split"] not in SPLITS:
        problems.append(f"split {row['split']!r} not one of {SPLITS}")
    exclusions = row["exclusions"]
    if not isinstance(exclusions, list):
        problems.append("exclusions must be a list")
    else:
        for c in exclusions:
            try:
                CleaningCategory(c)
            except ValueError:
                problems.append(f"unknown cleaning category {c!r}")
    if not _is_int(row["version"]) or row["version"] < 0:
        problems.append(f"version {row['version']!r} must be a nonnegative integer")
    return problems


@dataclass
class ValidationReport:
    records: int = 0
    errors: list[tuple[int, str]] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.errors

    def lines(self) -> list[str]:
        return [f"line {n}: {msg}" for n, msg in self.errors]


def validate_manifest(source: str | Path | Iterable[str]) -> ValidationReport:
    """Check every record invariant plus cross-record uniqueness and split inheritance."""
    lines = _read_lines(source)
    report = ValidationReport()
    seen: dict[tuple, int] = {}
    split_of_id: dict[int, tuple[str, int]] = {}
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        report.records += 1
        try:
            row = json.loads(line)
        except json.JSONDecodeError as exc:
            report.errors.append((lineno, f"malformed JSON: {exc.msg}"))
            continue
        problems = record_problems(row)
        if problems:
            report.errors.extend((lineno, p) for p in problems)
            continue
        rec = ManifestRecord.from_json(row)
        if rec.key in seen:
            report.errors.append(
                (lineno, f"duplicate (id, api, combination, version) of line {seen[rec.key]}")
            )
        else:
            seen[rec.key] = lineno
        if not rec.exclusions:
            prev = split_of_id.setdefault(rec.id, (rec.split, lineno))
            if prev[0] != rec.split:
                report.errors.append(
                    (lineno, f"id {rec.id} in split {rec.split} but line {prev[1]} has {prev[0]}")
                )
    return report


def _read_lines(source) -> list[str]:
    if isinstance(source, (str, Path)):
        return Path(source).read_text(encoding="utf-8").splitlines()
    return list(source)


def read_manifest(path: str | Path) -> list[ManifestRecord]:
    records = []
    for lineno, line in enumerate(_read_lines(path), start=1):
        if not line.strip():
            continue
        try:
            records.append(ManifestRecord.from_json(json.loads(line)))
        except (json.JSONDecodeError, ManifestError) as exc:
            raise ManifestError(f"{path}:{lineno}: {exc}") from exc
    return records


def write_manifest(path: str | Path, records: Iterable[ManifestRecord]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec.to_json(), sort_keys=False) + "\n")


# ----------------------------------------------------------------------------
# splits and sampling
# ----------------------------------------------------------------------------


def split_sizes(n: int, fractions: Sequence[float] = SPLIT_FRACTIONS) -> list[int]:
    sizes = [int(math.floor(n * f + 0.5)) for f in fractions[:-1]]
    sizes.append(n - sum(sizes))
    return sizes


def assign_splits(
    ids: Iterable[int], seed: int, fractions: Sequence[float] = SPLIT_FRACTIONS
) -> dict[int, str]:
    """Map each original id to a split via a seeded permutation of the sorted ids."""
    universe = sorted(set(int(i) for i in ids))
    order = RngStream(seed, "split").permutation(len(universe))
    sizes = split_sizes(len(universe), fractions)
    out: dict[int, str] = {}
    start = 0
    for name, size in zip(SPLITS, sizes):
        for pos in order[start : start + size]:
            out[universe[pos]] = name
        start += size
    return out


_SPLIT_CACHE: dict[tuple[int, tuple[int, ...] | None], dict[int, str]] = {}


def split_of_index(
    ffhq_index: int, split_seed: int, universe: Sequence[int] | None = None
) -> str:
    """Split of one original image. Retouched versions inherit their original's split."""
    key = (split_seed, None if universe is None else tuple(sorted(set(universe))))
    table = _SPLIT_CACHE.get(key)
    if table is None:
        table = assign_splits(range(FFHQ_SIZE) if universe is None else key[1], split_seed)
        _SPLIT_CACHE[key] = table
    return table[ffhq_index]


def resplit(records: Sequence[ManifestRecord], seed: int) -> tuple[list[ManifestRecord], int]:
    """Assign splits over the cleaned id universe; excluded records are dropped.

    Returns the materialized records and the number dropped.
    """
    kept = [r for r in records if not r.exclusions]
    table = assign_splits((r.id for r in kept), seed)
    return [r.with_split(table[r.id]) for r in kept], len(records) - len(kept)


def is_reduced_sampling_eligible(rec: ManifestRecord) -> bool:
    return rec.kind == 0 or (rec.kind == 1 and rec.api in (Api.TENCENT, Api.ALIBABA))


def reduced_sampling(records: Sequence[ManifestRecord], rng: RngStream) -> list[ManifestRecord]:
    """Keep each eligible record with probability 1/3; others pass through."""
    out = []
    for rec in records:
        if is_reduced_sampling_eligible(rec):
            if rng.uniform() < REDUCED_KEEP:
                out.append(rec)
        else:
            out.append(rec)
    return out


# ----------------------------------------------------------------------------
# statistics
# ----------------------------------------------------------------------------


def psnr(image_a: np.ndarray, image_b: np.ndarray) -> float:
    """PSNR in dB with peak 255; identical images give ``inf``."""
    a = np.asarray(image_a)
    b = np.asarray(image_b)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    if a.dtype != np.uint8 or b.dtype != np.uint8:
        raise ValueError("psnr expects 8-bit images")
    mse = np.mean((a.astype(np.float64) - b.astype(np.float64)) ** 2)
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(255.0**2 / mse)


def mean_psnr(values: Iterable[float]) -> float | None:
    finite = [v for v in values if math.isfinite(v)]
    return sum(finite) / len(finite) if finite else None


def manifest_stats(records: Sequence[ManifestRecord], image_root: Path | None = None) -> dict:
    """Counts per API and subset kind, with average PSNR against originals when images exist."""
    counts: dict[str, Counter] = defaultdict(Counter)
    splits: Counter = Counter()
    excluded = 0
    for rec in records:
        if rec.exclusions:
            excluded += 1
            continue
        counts[rec.api.value][rec.kind] += 1
        splits[rec.split] += 1
    table = {
        api: {f"subset-{k}": counts[api][k] for k in range(5)} | {"total": sum(counts[api].values())}
        for api in sorted(counts)
    }
    stats = {"counts": table, "splits": dict(splits), "excluded": excluded}
    if image_root is not None:
        stats["psnr"] = _psnr_table(records, Path(image_root))
    return stats


def _psnr_table(records: Sequence[ManifestRecord], root: Path) -> dict:
    from PIL import Image

    originals = {r.id: root / r.path for r in records if r.kind == 0 and not r.exclusions}
    values: dict[str, dict[int, list[float]]] = defaultdict(lambda: defaultdict(list))
    for rec in records:
        if rec.kind == 0 or rec.exclusions or rec.id not in originals:
            continue
        a, b = originals[rec.id], root / rec.path
        if not (a.exists() and b.exists()):
            continue
        img_a = np.asarray(Image.open(a).convert("RGB"))
        img_b = np.asarray(Image.open(b).convert("RGB"))
        values[rec.api.value][rec.kind].append(psnr(img_a, img_b))
    return {
        api: {f"subset-{k}": mean_psnr(v) for k, v in sorted(per.items())}
        for api, per in sorted(values.items())
    }
