import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from panicle_ssod import data as D
from panicle_ssod.exceptions import EmptySplit, InvalidConfig
from panicle_ssod.geometry import Box


def _image(w, h, boxes=()):
    return D.LabeledImage("img", np.zeros((h, w, 3), np.float32), list(boxes))


class TestSynthetic:
    def test_exact_blob_count(self):
        (im,) = D.generate_synthetic_dataset(1, blob_count_range=(3, 3), seed=4)
        assert len(im.boxes) == 3
        assert im.pixels.shape == (128, 128, 3)

    def test_negative_image(self):
        (im,) = D.generate_synthetic_dataset(1, blob_count_range=(0, 0))
        assert im.boxes == []

    def test_deterministic(self):
        a = D.generate_synthetic_dataset(3, seed=9)
        b = D.generate_synthetic_dataset(3, seed=9)
        for x, y in zip(a, b):
            assert x.id == y.id and x.boxes == y.boxes
            assert np.array_equal(x.pixels, y.pixels)

    def test_order_independent_streams(self):
        full = D.generate_synthetic_dataset(4, seed=2)
        assert D.generate_synthetic_dataset(2, seed=2)[1].boxes == full[1].boxes

    def test_invalid_ranges(self):
        with pytest.raises(InvalidConfig):
            D.generate_synthetic_dataset(1, blob_count_range=(3, 2))
        with pytest.raises(InvalidConfig):
            D.generate_synthetic_dataset(1, image_size=32, blob_size_range=(8, 40))
        with pytest.raises(InvalidConfig):
            D.generate_synthetic_dataset(0)

    def test_centroids_inside_boxes(self):
        rng = np.random.default_rng(0)
        for _ in range(10):
            pixels, boxes, cents = D.render_synthetic_image(rng, 96, 5, (8, 24))
            assert len(boxes) == len(cents) == 5
            assert pixels.min() >= 0 and pixels.max() <= 1
            for b, (cx, cy) in zip(boxes, cents):
                assert b.x_min < cx < b.x_max and b.y_min < cy < b.y_max

    def test_blobs_are_brighter_than_background(self):
        (im,) = D.generate_synthetic_dataset(1, blob_count_range=(4, 4), seed=1)
        b = im.boxes[0]
        cx, cy = (int(v) for v in b.center)
        assert im.pixels[cy, cx].mean() > np.median(im.pixels.mean(-1))


class TestTiling:
    def test_grid(self):
        mosaic = np.zeros((6400, 6400, 3), np.float32)
        tiles = D.tile_orthomosaic(mosaic, 640, 0)
        assert len(tiles) == 100
        assert all(t.pixels.shape == (640, 640, 3) for t in tiles)

    def test_single(self):
        (t,) = D.tile_orthomosaic(np.zeros((640, 640, 3), np.float32), 640)
        assert t.source_offset == (0, 0)

    def test_edge_anchored(self):
        tiles = D.tile_orthomosaic(np.zeros((640, 1000, 3), np.float32), 640, 0)
        assert [t.source_offset for t in tiles] == [(0, 0), (360, 0)]

    @settings(deadline=None, max_examples=40)
    @given(st.integers(16, 90), st.integers(16, 90), st.integers(4, 16), st.integers(0, 15))
    def test_full_coverage(self, h, w, tile, overlap):
        if overlap >= tile or tile > min(h, w):
            return
        tiles = D.tile_orthomosaic(np.zeros((h, w, 3), np.float32), tile, overlap)
        covered = np.zeros((h, w), bool)
        for t in tiles:
            x0, y0 = t.source_offset
            assert t.pixels.shape[:2] == (tile, tile)
            covered[y0:y0 + tile, x0:x0 + tile] = True
        assert covered.all()

    def test_boxes_follow_tiles(self):
        tiles = D.tile_orthomosaic(np.zeros((64, 128, 3), np.float32), 64, 0, boxes=[Box(70, 10, 80, 20)])
        assert tiles[0].boxes == [] and tiles[1].boxes == [Box(6, 10, 16, 20)]

    def test_invalid(self):
        with pytest.raises(InvalidConfig):
            D.tile_orthomosaic(np.zeros((64, 64, 3), np.float32), 32, 32)
        with pytest.raises(InvalidConfig):
            D.tile_orthomosaic(np.zeros((30, 64, 3), np.float32), 32, 0)


class TestSplit:
    ids = [f"im{i}" for i in range(364)]

    @pytest.mark.parametrize("fraction, n", [(0.01, 3), (0.05, 18), (0.10, 36)])
    def test_protocol_counts(self, fraction, n):
        split = D.make_split(self.ids, fraction, 0)
        assert len(split.labeled_ids) == n
        assert len(split.unlabeled_ids) == 364 - n

    def test_full(self):
        split = D.make_split(self.ids, 1.0, 0)
        assert split.unlabeled_ids == () and len(split.labeled_ids) == 364

    def test_empty(self):
        with pytest.raises(EmptySplit):
            D.make_split(self.ids[:50], 0.01, 0)

    def test_seeds_differ(self):
        assert D.make_split(self.ids, 0.1, 0).labeled_ids != D.make_split(self.ids, 0.1, 1).labeled_ids

    @given(st.integers(1, 500), st.floats(0.001, 1.0), st.integers(0, 2**31))
    def test_partition(self, n, fraction, seed):
        ids = [str(i) for i in range(n)]
        k = D.split_count(n, fraction)
        if k == 0:
            with pytest.raises(EmptySplit):
                D.make_split(ids, fraction, seed)
            return
        split = D.make_split(ids, fraction, seed)
        lab, unl = set(split.labeled_ids), set(split.unlabeled_ids)
        assert not lab & unl and lab | unl == set(ids)
        assert len(lab) == k == int(np.floor(fraction * n + 1e-9))

    def test_roundtrip(self, tmp_path):
        split = D.make_split(self.ids, 0.05, 3)
        D.write_split(tmp_path / "s.json", split)
        assert D.read_split(tmp_path / "s.json") == split


class TestResize:
    def test_identity(self):
        im = _image(640, 640, [Box(1, 2, 3, 4)])
        assert D.resize(im, 640) is im

    def test_square(self):
        out = D.resize(_image(1280, 1280, [Box(0, 0, 128, 128)]), 640)
        assert out.boxes == [Box(0, 0, 64, 64)]
        assert out.pixels.shape == (640, 640, 3)

    def test_per_axis(self):
        out = D.resize(_image(1280, 640, [Box(100, 100, 300, 200)]), 640)
        assert out.boxes == [Box(50, 100, 150, 200)]

    def test_degenerate_dropped(self):
        out = D.resize(_image(1280, 1280, [Box(0, 0, 1.5, 1.5), Box(0, 0, 100, 100)]), 128)
        assert out.boxes == [Box(0, 0, 10, 10)]

    def test_constant_image_preserved(self):
        im = D.LabeledImage("c", np.full((50, 70, 3), 0.25, np.float32))
        assert np.allclose(D.resize(im, 32).pixels, 0.25)


class TestAugment:
    def test_flip_reflection(self):
        pix = np.zeros((5, 10, 3), np.float32)
        _, boxes = D.augment_weak(pix, np.array([[1, 2, 3, 4]]), np.random.default_rng(0), force_flip=True)
        assert boxes.tolist() == [[7, 2, 9, 4]]

    def test_flip_involution(self):
        rng = np.random.default_rng(0)
        pix = rng.random((6, 9, 3)).astype(np.float32)
        b = np.array([[1.0, 1.0, 4.0, 5.0]])
        p2, b2 = D.augment_weak(*D.augment_weak(pix, b, rng, force_flip=True), rng, force_flip=True)
        assert np.array_equal(p2, pix) and np.array_equal(b2, b)

    def test_no_flip_identity(self):
        pix = np.random.default_rng(0).random((6, 9, 3))
        p, b = D.augment_weak(pix, np.array([[1, 1, 2, 2]]), np.random.default_rng(0), force_flip=False)
        assert p is pix and b.tolist() == [[1, 1, 2, 2]]

    def test_strong_degenerate_is_weak(self):
        spec = D.AugmentationSpec(brightness=0, contrast=0, cutout_count=(0, 0))
        pix = np.random.default_rng(1).random((16, 16, 3)).astype(np.float32)
        boxes = np.array([[2.0, 2.0, 8.0, 8.0]])
        weak = D.augment_weak(pix, boxes, np.random.default_rng(5), spec)
        strong = D.augment_strong(pix, boxes, np.random.default_rng(5), spec)
        assert np.allclose(weak[0], strong[0], atol=1e-6) and np.array_equal(weak[1], strong[1])

    def test_strong_clamped_and_deterministic(self):
        spec = D.AugmentationSpec(brightness=0.8, contrast=0.9, cutout_count=(2, 4))
        pix = np.random.default_rng(2).random((32, 32, 3)).astype(np.float32)
        boxes = np.array([[2.0, 2.0, 8.0, 8.0]])
        a = D.augment_strong(pix, boxes, np.random.default_rng(7), spec)
        b = D.augment_strong(pix, boxes, np.random.default_rng(7), spec)
        assert a[0].min() >= 0 and a[0].max() <= 1
        assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])

    def test_augmented_images_stay_valid(self):
        rng = np.random.default_rng(3)
        for im in D.generate_synthetic_dataset(5, seed=3):
            pix, boxes = D.augment_strong(im.pixels, im.box_array, rng)
            D.LabeledImage(im.id, pix, [Box(*b) for b in boxes])
            assert 0 <= pix.min() and pix.max() <= 1

    def test_invalid_spec(self):
        with pytest.raises(InvalidConfig):
            D.AugmentationSpec(flip_prob=1.5)
        with pytest.raises(InvalidConfig):
            D.AugmentationSpec(cutout_count=(3, 1))


class TestFiles:
    def test_dataset_roundtrip(self, tmp_path):
        images = D.generate_synthetic_dataset(3, seed=5)
        D.write_dataset(tmp_path, images)
        lines = (tmp_path / D.ANNOTATION_FILE).read_text().splitlines()
        assert len(lines) == 3
        back = D.read_dataset(tmp_path)
        for a, b in zip(images, back):
            assert a.id == b.id and a.boxes == b.boxes
            assert np.array_equal(a.pixels, b.pixels)

    def test_missing_annotations(self, tmp_path):
        with pytest.raises(InvalidConfig):
            D.read_dataset(tmp_path)

    def test_box_outside_image_rejected(self):
        with pytest.raises(InvalidConfig):
            _image(10, 10, [Box(5, 5, 11, 8)])
