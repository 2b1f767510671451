import json
import math
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mamkit.labels import (
    TYPES,
    Annotation,
    Api,
    CleaningCategory,
    LevelError,
    ManifestError,
    ManifestRecord,
    RetouchType,
    annotation_decode,
    annotation_encode,
    assign_splits,
    level_from_magnitude,
    magnitude_of,
    manifest_stats,
    parse_annotation,
    psnr,
    read_manifest,
    reduced_sampling,
    resplit,
    split_of_index,
    subset_combinations,
    validate_manifest,
    versions_per_combination,
    write_manifest,
)
from mamkit.numeric import RngStream

S, E, L, W = TYPES


def rec(id=0, api=Api.MEGVII, levels=(0, 1, 0, 0), split="train", version=0, exclusions=()):
    return ManifestRecord(id, api, Annotation(*levels), f"img/{id}_{api.value}_{''.join(map(str, levels))}_{version}.png", split,
                          frozenset(exclusions), version)


def row(**over):
    base = rec().to_json()
    base.update(over)
    return json.dumps(base)


class TestAnnotation:
    def test_worked_example(self):
        ann = annotation_encode({RetouchType.EYE_ENLARGE: 2, RetouchType.WHITEN: 3})
        assert ann.levels == (0, 2, 0, 3)
        assert annotation_decode(ann) == "{Smooth: 0, EyeEnlarge: 2, FaceLift: 0, Whiten: 3}"

    def test_from_magnitudes(self):
        assert Annotation.from_magnitudes([0, 60, 0, 90]) == Annotation(0, 2, 0, 3)

    def test_all_zero_is_kind_zero(self):
        assert Annotation().kind == 0

    def test_bad_magnitude(self):
        with pytest.raises(LevelError):
            level_from_magnitude(45)

    @pytest.mark.parametrize("bad", [-1, 4, 1.5, True, "2"])
    def test_bad_class(self, bad):
        with pytest.raises(LevelError):
            Annotation(bad, 0, 0, 0)

    def test_quantization_bijection(self):
        for level, magnitude in enumerate((0, 30, 60, 90)):
            assert magnitude_of(level) == magnitude
            assert level_from_magnitude(magnitude) == level

    @given(st.tuples(*[st.integers(0, 3)] * 4))
    def test_text_round_trip(self, levels):
        ann = Annotation(*levels)
        assert parse_annotation(annotation_decode(ann)) == ann
        assert ann.kind == sum(1 for v in levels if v)

    def test_parse_rejects_partial(self):
        with pytest.raises(LevelError):
            parse_annotation("{Smooth: 1, EyeEnlarge: 0}")

    def test_encode_by_name(self):
        assert annotation_encode({"FaceLift": 1}).levels == (0, 0, 1, 0)


class TestSubsets:
    def test_pairs(self):
        pairs = subset_combinations(2)
        assert pairs == [(S, E), (S, L), (S, W), (E, L), (E, W), (L, W)]

    def test_quad(self):
        assert subset_combinations(4) == [(S, E, L, W)]
        assert versions_per_combination(4) == 2
        assert versions_per_combination(3) == 1

    @pytest.mark.parametrize("kind,count", [(1, 4), (2, 6), (3, 4), (4, 1)])
    def test_counts(self, kind, count):
        assert len(subset_combinations(kind)) == count == math.comb(4, kind)

    @pytest.mark.parametrize("kind", [0, 5])
    def test_out_of_range(self, kind):
        with pytest.raises(ValueError):
            subset_combinations(kind)


class TestSplits:
    def test_sizes_over_cleaned_universe(self):
        universe = np.random.default_rng(0).choice(70_000, size=58_158, replace=False)
        table = assign_splits(universe, seed=3)
        counts = Counter(table.values())
        assert abs(counts["train"] - 46526) <= 1
        assert abs(counts["val"] - 5816) <= 1
        assert abs(counts["test"] - 5816) <= 1
        assert len(table) == 58_158

    def test_deterministic(self):
        a = assign_splits(range(1000), seed=11)
        assert a == assign_splits(range(1000), seed=11)
        assert a != assign_splits(range(1000), seed=12)

    def test_split_of_index_default_universe(self):
        s = split_of_index(123, 5)
        assert s in ("train", "val", "test")
        assert split_of_index(123, 5) == s

    def test_retouched_versions_inherit(self):
        records = [rec(id=i % 50, version=i, levels=(1, 0, 0, 0)) for i in range(200)]
        out, dropped = resplit(records, seed=4)
        assert dropped == 0
        by_id = {}
        for r in out:
            assert by_id.setdefault(r.id, r.split) == r.split

    def test_resplit_drops_excluded(self):
        records = [rec(id=1), rec(id=2, exclusions=[CleaningCategory.FAKE_FACE])]
        out, dropped = resplit(records, seed=0)
        assert [r.id for r in out] == [1] and dropped == 1

    @settings(max_examples=25, deadline=None)
    @given(st.sets(st.integers(0, 69_999), min_size=1, max_size=300), st.integers(0, 2**32))
    def test_partition_total_and_disjoint(self, ids, seed):
        table = assign_splits(ids, seed)
        assert set(table) == ids
        assert set(table.values()) <= {"train", "val", "test"}


class TestReducedSampling:
    def test_binomial_rate(self):
        records = [rec(id=i % 70_000, api=Api.NONE, levels=(0, 0, 0, 0), version=i) for i in range(30_000)]
        kept = reduced_sampling(records, RngStream(1, "reduce"))
        sigma = math.sqrt(30_000 * (1 / 3) * (2 / 3))
        assert abs(len(kept) - 10_000) <= 3 * sigma

    def test_ineligible_retained(self):
        records = [rec(id=i, api=Api.MEGVII, levels=(1, 1, 1, 0)) for i in range(100)]
        records += [rec(id=i, api=Api.MEGVII, levels=(1, 0, 0, 0)) for i in range(100)]
        assert reduced_sampling(records, RngStream(0)) == records

    def test_tencent_single_is_eligible(self):
        records = [rec(id=i, api=Api.TENCENT, levels=(0, 0, 1, 0)) for i in range(300)]
        assert len(reduced_sampling(records, RngStream(0))) < 200

    def test_empty_eligibility(self):
        assert reduced_sampling([], RngStream(0)) == []


class TestValidation:
    def test_clean_manifest(self, tmp_path):
        path = tmp_path / "m.jsonl"
        write_manifest(path, [rec(id=1), rec(id=2, api=Api.NONE, levels=(0, 0, 0, 0))])
        report = validate_manifest(path)
        assert report.ok and report.records == 2
        assert read_manifest(path)[0] == rec(id=1)

    def test_zero_annotation_with_api(self):
        report = validate_manifest([row(api="Tencent", kind=0, eye_enlarge=0)])
        assert any("inconsistent" in msg for _, msg in report.errors)

    def test_kind_mismatch(self):
        report = validate_manifest([row(kind=2)])
        assert any("nonzero levels" in msg for _, msg in report.errors)

    def test_alibaba_multi_op(self):
        report = validate_manifest([row(api="Alibaba", kind=2, smooth=1)])
        assert any("Alibaba" in msg for _, msg in report.errors)

    def test_duplicate(self):
        report = validate_manifest([row(), row(path="other.png")])
        assert report.errors == [(2, "duplicate (id, api, combination, version) of line 1")]

    def test_distinct_versions_ok(self):
        assert validate_manifest([row(), row(version=1)]).ok

    def test_split_leak_detected(self):
        report = validate_manifest([row(), row(version=1, split="test")])
        assert any("split" in msg for _, msg in report.errors)

    def test_malformed_line_diagnostics(self):
        report = validate_manifest(["{not json", row(whiten=7, kind=2), json.dumps({"id": 1})])
        lines = {n for n, _ in report.errors}
        assert lines == {1, 2, 3}

    def test_bad_exclusion_and_split(self):
        report = validate_manifest([row(exclusions=["Sunburn"], split="holdout")])
        assert len(report.errors) == 2

    def test_from_json_raises(self):
        with pytest.raises(ManifestError):
            ManifestRecord.from_json(json.loads(row(kind=3)))

    def test_field_names(self):
        assert list(rec().to_json()) == [
            "id", "api", "kind", "smooth", "eye_enlarge", "face_lift", "whiten",
            "path", "split", "exclusions", "version",
        ]


class TestPsnr:
    def test_offset_by_one(self):
        a = np.full((8, 8, 3), 100, dtype=np.uint8)
        assert psnr(a, a + 1) == pytest.approx(20 * math.log10(255.0), abs=1e-12)
        assert psnr(a, a + 1) == pytest.approx(48.13, abs=0.01)

    def test_identical_is_infinite(self):
        a = np.zeros((4, 4), dtype=np.uint8)
        assert psnr(a, a) == math.inf

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            psnr(np.zeros((2, 2), np.uint8), np.zeros((3, 2), np.uint8))

    def test_requires_8bit(self):
        with pytest.raises(ValueError):
            psnr(np.zeros((2, 2)), np.zeros((2, 2)))


def test_stats_layout(tmp_path):
    from PIL import Image

    records = [
        rec(id=1, api=Api.NONE, levels=(0, 0, 0, 0)),
        rec(id=1, api=Api.MEGVII, levels=(1, 0, 0, 0)),
        rec(id=1, api=Api.MEGVII, levels=(0, 2, 0, 0)),
        rec(id=2, api=Api.NONE, levels=(0, 0, 0, 0), exclusions=[CleaningCategory.INFANT_OR_BABY]),
    ]
    base = np.full((4, 4, 3), 50, np.uint8)
    for r, img in zip(records[:3], (base, base + 1, base)):
        (tmp_path / r.path).parent.mkdir(exist_ok=True)
        Image.fromarray(img).save(tmp_path / r.path)
    stats = manifest_stats(records, tmp_path)
    assert stats["counts"]["Megvii"]["subset-1"] == 2
    assert stats["counts"]["none"]["subset-0"] == 1
    assert stats["excluded"] == 1
    # the identical pair is excluded from the average
    assert stats["psnr"]["Megvii"]["subset-1"] == pytest.approx(20 * math.log10(255.0))
