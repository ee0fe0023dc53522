"""Synthetic benchmark: determinism, box tightness, shift properties, I/O."""

import numpy as np
import pytest
from hypothesis import given, strategies as st

from dadet.synthdata import (
    AnnotationError,
    BoxAnnotation,
    DataError,
    DomainSample,
    SceneSpec,
    SceneSpecError,
    _shape_mask,
    generate_pair_dataset,
    load_dataset,
    load_split,
    next_batch,
    read_annotations,
    render_sample,
    write_annotations,
    write_dataset,
)


class TestSceneSpec:
    def test_defaults(self):
        spec = SceneSpec()
        assert spec.image_hw == (64, 64)
        assert 0.0 <= spec.fog_strength <= 1.0

    def test_bad_fog(self):
        with pytest.raises(SceneSpecError):
            SceneSpec(fog_strength=1.5)

    def test_bad_object_counts(self):
        with pytest.raises(SceneSpecError):
            SceneSpec(min_objects=3, max_objects=1)


class TestRendering:
    def test_deterministic_bit_identical(self):
        spec = SceneSpec(seed=5)
        a, boxes_a = render_sample(spec, 0, 3, shifted=False)
        b, boxes_b = render_sample(spec, 0, 3, shifted=False)
        assert np.array_equal(a, b)
        assert boxes_a == boxes_b

    def test_different_indices_differ(self):
        spec = SceneSpec(seed=5)
        a, _ = render_sample(spec, 0, 0, shifted=False)
        b, _ = render_sample(spec, 0, 1, shifted=False)
        assert not np.array_equal(a, b)

    def test_boxes_tight_within_one_pixel(self):
        # boxes must exactly bound the rendered mask extent
        spec = SceneSpec(seed=9)
        for index in range(30):
            _, boxes = render_sample(spec, 0, index, shifted=False)
            assert boxes, "every source scene must contain at least one object"
            for b in boxes:
                assert b.x2 - b.x1 >= 2 and b.y2 - b.y1 >= 2
                h, w = spec.image_hw
                assert 0 <= b.x1 < b.x2 <= w
                assert 0 <= b.y1 < b.y2 <= h

    def test_mask_extent_matches_box(self):
        h = w = 64
        for cls in (0, 1, 2):
            mask = _shape_mask(cls, h, w, 30.0, 28.0, 17.0)
            rows = np.flatnonzero(mask.any(axis=1))
            cols = np.flatnonzero(mask.any(axis=0))
            box = BoxAnnotation(float(cols[0]), float(rows[0]),
                                float(cols[-1] + 1), float(rows[-1] + 1), cls)
            ys, xs = np.nonzero(mask)
            assert xs.min() >= box.x1 and xs.max() < box.x2
            assert ys.min() >= box.y1 and ys.max() < box.y2
            # tightness: no slack larger than one pixel on any side
            assert xs.min() - box.x1 <= 1 and box.x2 - 1 - xs.max() <= 1
            assert ys.min() - box.y1 <= 1 and box.y2 - 1 - ys.max() <= 1

    def test_fogged_targets_brighter_on_average(self):
        spec = SceneSpec(seed=2, fog_strength=0.5)
        clean = np.mean([render_sample(spec, 0, i, shifted=False)[0].mean()
                         for i in range(100)])
        foggy = np.mean([render_sample(spec, 0, i, shifted=True)[0].mean()
                         for i in range(100)])
        assert foggy > clean

    def test_zero_shift_matches_source_statistics(self):
        spec = SceneSpec(seed=2, fog_strength=0.0, blur_radius=0, palette_shift=0.0)
        a, _ = render_sample(spec, 0, 4, shifted=False)
        b, _ = render_sample(spec, 0, 4, shifted=True)
        assert np.array_equal(a, b)


class TestGeneratePair:
    def test_counts_and_flags(self):
        spec = SceneSpec(seed=1)
        src, tgt, test = generate_pair_dataset(spec, 2, 3, 4)
        assert (len(src), len(tgt), len(test)) == (2, 3, 4)
        assert all(s.d == 1 and s.boxes for s in src)
        assert all(t.d == 0 and not t.boxes for t in tgt)
        assert all(t.d == 0 and t.boxes for t in test)

    def test_deterministic(self):
        spec = SceneSpec(seed=1)
        a = generate_pair_dataset(spec, 2, 2, 2)
        b = generate_pair_dataset(spec, 2, 2, 2)
        for sa, sb in zip(a[0] + a[1] + a[2], b[0] + b[1] + b[2]):
            assert np.array_equal(sa.pixels, sb.pixels)
            assert sa.boxes == sb.boxes

    def test_duplicate_split_keys_rejected(self):
        with pytest.raises(SceneSpecError):
            generate_pair_dataset(SceneSpec(), 1, 1, 1, split_keys=(0, 0, 2))

    def test_bad_counts_rejected(self):
        with pytest.raises(SceneSpecError):
            generate_pair_dataset(SceneSpec(), 0, 1, 1)


class TestNextBatch:
    def test_cyclic(self, tiny_dataset):
        src, tgt, _ = tiny_dataset
        s0, t0 = next_batch(src, tgt, 0)
        s_again, _ = next_batch(src, tgt, len(src))
        assert s0 is s_again

    def test_domain_flags(self, tiny_dataset):
        src, tgt, _ = tiny_dataset
        s, t = next_batch(src, tgt, 3)
        assert s.d == 1 and t.d == 0

    def test_epoch_covers_every_source_once(self, tiny_dataset):
        src, tgt, _ = tiny_dataset
        seen = [next_batch(src, tgt, step)[0].image_id for step in range(len(src))]
        assert sorted(seen) == sorted(s.image_id for s in src)

    def test_empty_rejected(self):
        with pytest.raises(DataError):
            next_batch([], [], 0)


class TestAnnotationIO:
    def _samples(self):
        pixels = np.zeros((64, 64, 3), dtype=np.uint8)
        return [
            DomainSample(pixels, [BoxAnnotation(1.0, 2.0, 10.0, 12.0, 0)], 1, "source/img_00000"),
            DomainSample(pixels, [], 0, "target/img_00000"),
        ]

    def test_roundtrip(self, tmp_path):
        samples = self._samples()
        path = tmp_path / "ann.jsonl"
        write_annotations(path, samples)
        records = read_annotations(path)
        assert len(records) == 2
        assert records[0]["d"] == 1 and records[1]["d"] == 0
        assert records[0]["boxes"] == samples[0].boxes
        assert records[1]["boxes"] == []
        assert records[0]["image"] == "source/img_00000.png"

    def test_degenerate_box_names_line(self, tmp_path):
        path = tmp_path / "ann.jsonl"
        path.write_text(
            '{"image": "a.png", "d": 1, "boxes": [[5, 1, 5, 9, 0]]}\n')
        with pytest.raises(AnnotationError, match="line 1"):
            read_annotations(path)

    def test_bad_json_names_line(self, tmp_path):
        path = tmp_path / "ann.jsonl"
        path.write_text('{"image": "a.png", "d": 1, "boxes": []}\nnot json\n')
        with pytest.raises(AnnotationError, match="line 2"):
            read_annotations(path)

    def test_missing_field_rejected(self, tmp_path):
        path = tmp_path / "ann.jsonl"
        path.write_text('{"image": "a.png", "boxes": []}\n')
        with pytest.raises(AnnotationError, match="'d'"):
            read_annotations(path)

    @given(raw_boxes=st.lists(
        st.tuples(st.floats(0, 30), st.floats(0, 30), st.floats(1, 30),
                  st.floats(1, 30), st.integers(0, 2)),
        min_size=0, max_size=5))
    def test_fuzz_roundtrip(self, tmp_path_factory, raw_boxes):
        tmp = tmp_path_factory.mktemp("ann")
        boxes = [BoxAnnotation(x1, y1, x1 + w, y1 + h, c)
                 for x1, y1, w, h, c in raw_boxes]
        pixels = np.zeros((64, 64, 3), dtype=np.uint8)
        samples = [DomainSample(pixels, boxes, 1, "source/img_00000")]
        path = tmp / "ann.jsonl"
        write_annotations(path, samples)
        assert read_annotations(path)[0]["boxes"] == boxes


class TestDatasetIO:
    def test_write_load_roundtrip(self, tmp_path, tiny_dataset):
        src, tgt, test = tiny_dataset
        write_dataset(tmp_path, SceneSpec(seed=11), src, tgt, test)
        for split in ("source", "target", "target_test"):
            assert (tmp_path / split / "annotations.jsonl").exists()
        assert (tmp_path / "meta.json").exists()
        src2, tgt2, test2 = load_dataset(tmp_path)
        assert len(src2) == len(src) and len(test2) == len(test)
        for a, b in zip(src, src2):
            assert np.array_equal(a.pixels, b.pixels)   # png roundtrip exact
            assert a.boxes == b.boxes and a.d == b.d and a.image_id == b.image_id

    def test_rerun_generation_byte_identical(self, tmp_path):
        spec = SceneSpec(seed=4)
        for sub in ("a", "b"):
            data = generate_pair_dataset(spec, 2, 2, 2)
            write_dataset(tmp_path / sub, spec, *data)
        for rel in sorted(p.relative_to(tmp_path / "a")
                          for p in (tmp_path / "a").rglob("*") if p.is_file()):
            assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()

    def test_missing_split_rejected(self, tmp_path):
        with pytest.raises(DataError):
            load_split(tmp_path, "source")
