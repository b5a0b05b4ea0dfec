"""Tile/merge geometry, baseline segmentation, diameters, and mask I/O."""

import json

import numpy as np
import pytest

from smearkit import imaging as im
from smearkit import synthsmear as sy


def make_image(h, w, value=(235, 228, 225)):
    pixels = np.zeros((h, w, 3), np.uint8)
    pixels[:] = value
    return im.RasterImage(pixels)


def draw_disk(img, cy, cx, r, color):
    rr, cc = np.mgrid[0 : img.pixels.shape[0], 0 : img.pixels.shape[1]]
    sel = (rr - cy) ** 2 + (cc - cx) ** 2 <= r * r
    img.pixels[sel] = color
    return sel


VIOLET = (95, 60, 135)
PARAMS = im.SegmenterParams(chroma_threshold=40, min_area=5, max_area=1_000_000)


class TestTilePlan:
    def test_exact_fit_single_tile(self):
        plan = im.tile_image(make_image(1024, 1024), 1024)
        assert plan.tiles == ((0, 0, 1024, 1024),)

    def test_exact_fit_two_tiles(self):
        plan = im.tile_image(make_image(1024, 2048), 1024)
        assert plan.tiles == ((0, 0, 1024, 1024), (0, 1024, 1024, 1024))

    def test_clamped_edge_tiles(self):
        # 1500x1000 image: hand enumeration gives a full tile plus a 476-wide one
        plan = im.tile_image(make_image(1000, 1500), 1024)
        assert plan.tiles == ((0, 0, 1024, 1000), (0, 1024, 476, 1000))

    def test_partition_covers_image(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            h, w = int(rng.integers(1, 900)), int(rng.integers(1, 900))
            size = int(rng.integers(1, 300))
            plan = im.tile_image(make_image(h, w), size)
            cover = np.zeros((h, w), np.int32)
            for row, col, tw, th in plan.tiles:
                assert tw <= size and th <= size
                cover[row : row + th, col : col + tw] += 1
            assert (cover == 1).all()

    def test_rejects_bad_tile_size(self):
        with pytest.raises(im.ImagingError):
            im.tile_image(make_image(4, 4), 0)


class TestSegmentBaseline:
    def test_uniform_image_yields_empty_mask(self):
        mask = im.segment_baseline(make_image(64, 64), PARAMS)
        assert mask.n_instances == 0

    def test_single_disk_iou_against_generator_truth(self):
        spec = sy.MorphotypeSpec("one", "coccus", "single", "positive",
                                 24.0, 0.0, (1, 1))
        style = sy.PatientStyle("p", blur_sigma=0.0)
        scene = sy.generate_image(spec, style, seed=3, width=256, height=256)
        mask = im.segment_baseline(scene.image, PARAMS)
        assert mask.n_instances == 1
        assert im.instance_iou(mask, 1, scene.mask, 1) >= 0.9

    def test_two_disjoint_disks(self):
        img = make_image(128, 128)
        draw_disk(img, 30, 30, 8, VIOLET)
        draw_disk(img, 90, 90, 8, VIOLET)
        mask = im.segment_baseline(img, PARAMS)
        assert mask.n_instances == 2

    def test_ids_in_raster_scan_order(self):
        img = make_image(64, 64)
        draw_disk(img, 50, 10, 5, VIOLET)   # later in raster order
        draw_disk(img, 10, 50, 5, VIOLET)   # first row hit first
        mask = im.segment_baseline(img, PARAMS)
        assert mask.labels[10, 50] == 1
        assert mask.labels[50, 10] == 2

    def test_area_filter_bounds(self):
        img = make_image(64, 64)
        draw_disk(img, 16, 16, 2, VIOLET)    # area ~13
        draw_disk(img, 48, 48, 10, VIOLET)   # area ~317
        small_only = im.segment_baseline(
            img, im.SegmenterParams(40, min_area=1, max_area=50))
        big_only = im.segment_baseline(
            img, im.SegmenterParams(40, min_area=50, max_area=1000))
        assert small_only.n_instances == 1 and big_only.n_instances == 1

    def test_deterministic(self):
        spec = sy.default_bacteria_categories()[0].morphotypes[0]
        scene = sy.generate_image(spec, sy.PatientStyle("p"), seed=5)
        a = im.segment_baseline(scene.image, PARAMS)
        b = im.segment_baseline(scene.image, PARAMS)
        assert (a.labels == b.labels).all()


class TestMergeTileMasks:
    def test_single_tile_identity(self):
        img = make_image(100, 100)
        draw_disk(img, 40, 40, 10, VIOLET)
        plan = im.tile_image(img, 128)
        mask = im.segment_baseline(img, PARAMS)
        merged = im.merge_tile_masks([mask], plan)
        assert (merged.labels == mask.labels).all()

    def test_disk_straddling_boundary_merges(self):
        img = make_image(64, 128)
        draw_disk(img, 32, 64, 10, VIOLET)   # straddles the col-64 boundary
        plan = im.tile_image(img, 64)
        bg = im.estimate_background(img)
        tiles = []
        raw = im.SegmenterParams(40, min_area=1, max_area=10**9)
        for row, col, tw, th in plan.tiles:
            tile = im.RasterImage(img.pixels[row : row + th, col : col + tw])
            tiles.append(im.segment_baseline(tile, raw, background=bg))
        assert all(t.n_instances == 1 for t in tiles)
        merged = im.merge_tile_masks(tiles, plan)
        assert merged.n_instances == 1
        whole = im.segment_baseline(img, raw)
        assert (merged.labels == whole.labels).all()

    def test_far_apart_disks_stay_separate(self):
        img = make_image(64, 128)
        draw_disk(img, 20, 20, 6, VIOLET)
        draw_disk(img, 44, 100, 6, VIOLET)
        plan = im.tile_image(img, 64)
        bg = im.estimate_background(img)
        tiles = [im.segment_baseline(
            im.RasterImage(img.pixels[r : r + th, c : c + tw]), PARAMS, background=bg)
            for r, c, tw, th in plan.tiles]
        assert im.merge_tile_masks(tiles, plan).n_instances == 2

    def test_dimension_mismatch_rejected(self):
        plan = im.tile_image(make_image(64, 64), 64)
        wrong = im.InstanceMask.empty(32, 32)
        with pytest.raises(im.ImagingError):
            im.merge_tile_masks([wrong], plan)

    def test_tiled_equals_whole_on_generated_images(self):
        # area filter active: segment_tiled defers it until after the merge
        cats = sy.default_bacteria_categories()
        params = im.SegmenterParams(40, min_area=20, max_area=100_000)
        for i in range(20):
            spec = cats[i % len(cats)].morphotypes[0]
            scene = sy.generate_image(spec, sy.PatientStyle("p", blur_sigma=0.3),
                                      seed=100 + i, width=300, height=300)
            whole = im.segment_baseline(scene.image, params)
            tiled = im.segment_tiled(scene.image, params, tile_size=128)
            assert (tiled.labels == whole.labels).all(), f"image {i}"


class TestDiameter:
    def brute_force(self, mask, instance_id):
        pts = np.argwhere(mask.labels == instance_id).astype(np.float64)
        best = 0.0
        for i in range(len(pts)):
            d = np.sqrt(((pts[i] - pts[i + 1 :]) ** 2).sum(axis=1))
            if len(d):
                best = max(best, float(d.max()))
        return best

    def test_single_pixel_zero(self):
        m = np.zeros((5, 5), np.int32)
        m[2, 2] = 1
        assert im.mask_diameter(im.InstanceMask(m), 1) == 0.0

    def test_three_pixel_run(self):
        m = np.zeros((1, 3), np.int32)
        m[0, :] = 1
        assert im.mask_diameter(im.InstanceMask(m), 1) == 2.0

    def test_filled_square(self):
        m = np.zeros((40, 40), np.int32)
        m[5:35, 5:35] = 1
        d = im.mask_diameter(im.InstanceMask(m), 1)
        assert d == pytest.approx(29 * np.sqrt(2), abs=1e-9)

    def test_matches_brute_force_small_instances(self):
        rng = np.random.default_rng(7)
        for _ in range(10):
            m = np.zeros((60, 60), np.int32)
            n_px = int(rng.integers(5, 200))
            rows = rng.integers(0, 60, size=n_px)
            cols = rng.integers(0, 60, size=n_px)
            m[rows, cols] = 1
            mask = im.InstanceMask(m)
            assert im.mask_diameter(mask, 1) == self.brute_force(mask, 1)

    def test_hull_path_matches_brute_force(self):
        # force the convex-hull fast path (> 2000 pixels)
        m = np.zeros((80, 80), np.int32)
        m[5:60, 5:60] = 1   # 3025 px
        mask = im.InstanceMask(m)
        assert im.mask_diameter(mask, 1) == self.brute_force(mask, 1)

    def test_chord_mode_shorter_for_nonconvex(self):
        # U shape: arms far apart, but the connecting chord leaves the mask
        m = np.zeros((30, 30), np.int32)
        m[5:25, 5] = 1
        m[5:25, 25] = 1
        m[24, 5:26] = 1
        mask = im.InstanceMask(m)
        feret = im.mask_diameter(mask, 1, mode="feret")
        chord = im.mask_diameter(mask, 1, mode="chord")
        assert chord < feret

    def test_unknown_id_rejected(self):
        with pytest.raises(im.ImagingError):
            im.mask_diameter(im.InstanceMask.empty(4, 4), 1)


class TestFilterByDiameter:
    def run_of(self, n, width=2):
        m = np.zeros((width, n), np.int32)
        m[0, :] = 1
        return im.InstanceMask(m)

    def test_401_removed_at_threshold_400(self):
        mask = self.run_of(402)   # diameter 401
        assert im.mask_diameter(mask, 1) == 401.0
        assert im.filter_by_diameter(mask, 400.0).n_instances == 0

    def test_399_kept(self):
        mask = self.run_of(400)   # diameter 399
        assert im.filter_by_diameter(mask, 400.0).n_instances == 1

    def test_exactly_400_kept(self):
        mask = self.run_of(401)   # diameter 400: strict inequality keeps it
        assert im.filter_by_diameter(mask, 400.0).n_instances == 1

    def test_empty_mask_identity(self):
        out = im.filter_by_diameter(im.InstanceMask.empty(8, 8), 400.0)
        assert out.n_instances == 0

    def test_survivor_pixels_unchanged(self):
        m = np.zeros((20, 520), np.int32)
        m[2, 5:510] = 1       # long, removed
        m[10:14, 10:14] = 2   # small, kept
        out = im.filter_by_diameter(im.InstanceMask(m), 400.0)
        assert out.n_instances == 1
        assert (np.argwhere(out.labels == 1) == np.argwhere(m == 2)).all()


class TestCentroid:
    def test_single_pixel(self):
        m = np.zeros((10, 10), np.int32)
        m[5, 7] = 1
        assert im.centroid(im.InstanceMask(m), 1) == (5.0, 7.0)

    def test_symmetric_pair(self):
        m = np.zeros((2, 3), np.int32)
        m[0, 0] = m[0, 2] = 1
        assert im.centroid(im.InstanceMask(m), 1) == (0.0, 1.0)

    def test_l_shape(self):
        m = np.zeros((3, 3), np.int32)
        m[0, 0] = m[1, 0] = m[1, 1] = 1
        r, c = im.centroid(im.InstanceMask(m), 1)
        assert r == pytest.approx(0.6667, abs=1e-4)
        assert c == pytest.approx(0.3333, abs=1e-4)


class TestMaskIO:
    def random_mask(self, seed=0):
        rng = np.random.default_rng(seed)
        m = np.zeros((40, 50), np.int32)
        for i in range(1, 6):
            r, c = rng.integers(5, 35), rng.integers(5, 45)
            m[r : r + 3, c : c + 3] = i
        return im.InstanceMask(im._relabel_raster_order(m))

    def test_png_round_trip(self, tmp_path):
        mask = self.random_mask()
        im.write_mask_png(mask, tmp_path / "m.png")
        back = im.read_mask_png(tmp_path / "m.png")
        assert (back.labels == mask.labels).all()

    def test_rle_round_trip(self, tmp_path):
        mask = self.random_mask(1)
        im.write_mask_json(mask, tmp_path / "m.json")
        back = im.read_mask_json(tmp_path / "m.json")
        assert (back.labels == mask.labels).all()

    def test_png_json_cross_format_lossless(self, tmp_path):
        mask = self.random_mask(2)
        im.write_mask_png(mask, tmp_path / "m.png")
        via_png = im.read_mask_png(tmp_path / "m.png")
        im.write_mask_json(via_png, tmp_path / "m.json")
        via_json = im.read_mask_json(tmp_path / "m.json")
        assert (via_json.labels == mask.labels).all()

    def test_image_round_trip(self, tmp_path):
        rng = np.random.default_rng(3)
        img = im.RasterImage(rng.integers(0, 256, (30, 20, 3)).astype(np.uint8))
        im.write_image_png(img, tmp_path / "i.png")
        assert (im.read_image_png(tmp_path / "i.png").pixels == img.pixels).all()

    def test_rle_format_fields(self):
        mask = self.random_mask(4)
        doc = im.mask_to_rle(mask)
        assert set(doc) == {"width", "height", "instances"}
        assert all(set(inst) == {"id", "rle"} for inst in doc["instances"])
        assert json.dumps(doc)  # JSON-serializable

    def test_contiguity_enforced(self):
        bad = np.zeros((4, 4), np.int32)
        bad[0, 0] = 2   # id 1 missing
        with pytest.raises(im.ImagingError):
            im.InstanceMask(bad)
