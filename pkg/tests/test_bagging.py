"""Patch extraction geometry, bilinear resize, bags, and archives."""

import numpy as np
import pytest

from smearkit import bagging as bg
from smearkit import imaging as im


def random_image(h=600, w=600, seed=0):
    rng = np.random.default_rng(seed)
    return im.RasterImage(rng.integers(0, 256, (h, w, 3)).astype(np.uint8))


def mask_with_pixel_instances(h, w, coords):
    m = np.zeros((h, w), np.int32)
    for i, (r, c) in enumerate(coords, start=1):
        m[r, c] = i
    return im.InstanceMask(m)


class TestBacteriaExtraction:
    def test_window_arithmetic_interior(self):
        img = random_image(1024, 1024)
        mask = mask_with_pixel_instances(1024, 1024, [(500, 500)])
        (patch,) = bg.extract_bacteria_patches(img, mask)
        assert patch.pixels.shape == (96, 96, 3)
        # rows/cols 452..547 inclusive
        assert (patch.pixels == img.pixels[452:548, 452:548]).all()
        assert patch.center == (500, 500)

    def test_corner_instance_reflects(self):
        img = random_image(200, 200, seed=1)
        mask = mask_with_pixel_instances(200, 200, [(0, 0)])
        (patch,) = bg.extract_bacteria_patches(img, mask)
        padded = np.pad(img.pixels, ((96, 96), (96, 96), (0, 0)), mode="reflect")
        expected = padded[96 - 48 : 96 + 48, 96 - 48 : 96 + 48]
        assert (patch.pixels == expected).all()

    def test_in_bounds_region_matches_source(self):
        img = random_image(120, 120, seed=2)
        mask = mask_with_pixel_instances(120, 120, [(10, 60)])
        (patch,) = bg.extract_bacteria_patches(img, mask)
        # rows -38..57 -> in-bounds part starts at patch row 38
        assert (patch.pixels[38:, :] == img.pixels[0:58, 12:108]).all()

    def test_one_patch_per_instance_in_id_order(self):
        img = random_image(400, 400, seed=3)
        mask = mask_with_pixel_instances(400, 400, [(100, 100), (200, 200), (300, 300)])
        patches = bg.extract_bacteria_patches(img, mask, id_prefix="bagX")
        assert len(patches) == 3
        assert [p.source_instance for p in patches] == [1, 2, 3]
        assert [p.patch_id for p in patches] == [
            "bagX:0001", "bagX:0002", "bagX:0003"]

    def test_empty_mask_empty_list(self):
        img = random_image(64, 64)
        assert bg.extract_bacteria_patches(img, im.InstanceMask.empty(64, 64)) == []

    def test_jitter_margin_carried(self):
        img = random_image(400, 400, seed=4)
        mask = mask_with_pixel_instances(400, 400, [(200, 200)])
        (patch,) = bg.extract_bacteria_patches(img, mask)
        assert patch.jitter_source.shape == (112, 112, 3)
        assert (patch.jitter_source[8:104, 8:104] == patch.pixels).all()


class TestFungiExtraction:
    def test_one_patch_per_surviving_instance(self):
        img = random_image(900, 900, seed=5)
        mask = mask_with_pixel_instances(900, 900, [(450, 450)])
        patches = bg.extract_fungi_patches(img, mask)
        assert len(patches) == 1
        assert patches[0].pixels.shape == (224, 224, 3)

    def test_constant_region_stays_constant(self):
        img = im.RasterImage(np.full((900, 900, 3), 137, np.uint8))
        mask = mask_with_pixel_instances(900, 900, [(450, 450)])
        (patch,) = bg.extract_fungi_patches(img, mask)
        assert (patch.pixels == 137).all()

    def test_diameter_filter_then_count(self):
        # one 401-px-diameter filament plus one small blastospore
        m = np.zeros((600, 600), np.int32)
        m[100:104, 50:452] = 1          # diameter > 401
        m[300:340, 300:340] = 2         # ~55 px diagonal
        mask = im.InstanceMask(m)
        filtered = im.filter_by_diameter(mask, 400.0)
        assert filtered.n_instances == 1
        img = random_image(600, 600, seed=6)
        patches = bg.extract_fungi_patches(img, filtered)
        assert len(patches) == 1


class TestBilinearResize:
    def test_same_size_identity(self):
        rng = np.random.default_rng(7)
        x = rng.integers(0, 256, (5, 7, 3)).astype(np.uint8)
        assert (bg.bilinear_resize(x, 5, 7) == x).all()

    def test_constant_2x2_to_1x1(self):
        x = np.full((2, 2, 3), 100, np.uint8)
        out = bg.bilinear_resize(x, 1, 1)
        assert out.shape == (1, 1, 3)
        assert (out == 100).all()

    def test_column_average(self):
        x = np.zeros((2, 1, 3), np.uint8)
        x[1] = 200
        out = bg.bilinear_resize(x, 1, 1)
        assert (out == 100).all()

    def test_linear_ramp_within_rounding(self):
        # a horizontal ramp resampled bilinearly stays on the ramp +/- 1
        x = np.repeat(np.arange(0, 256, 8, dtype=np.uint8)[None, :, None], 3, axis=2)
        x = np.repeat(x, 4, axis=0)    # (4, 32, 3)
        out = bg.bilinear_resize(x, 4, 16)
        coords = (np.arange(16) + 0.5) * (32 / 16) - 0.5
        expected = np.interp(coords, np.arange(32), x[0, :, 0])
        assert np.abs(out[0, :, 0].astype(float) - expected).max() <= 1.0

    def test_constant_preserved_any_scale(self):
        x = np.full((8, 6, 3), 42, np.uint8)
        for oh, ow in ((3, 3), (16, 12), (1, 1), (5, 11)):
            assert (bg.bilinear_resize(x, oh, ow) == 42).all()


class TestBags:
    def entry(self):
        return bg.ManifestEntry(bag_id="b1", patient_id="p1", label=2,
                                image_path="i.png", mask_path="m.png")

    def patches(self, n, seed=0):
        rng = np.random.default_rng(seed)
        return [bg.Patch(pixels=rng.integers(0, 256, (96, 96, 3)).astype(np.uint8),
                         center=(50, 50), source_instance=i + 1,
                         patch_id=f"b1:{i+1:04d}") for i in range(n)]

    def test_build_preserves_order(self):
        ps = self.patches(5)
        bag = bg.build_bag(self.entry(), list(reversed(ps)))
        assert [p.source_instance for p in bag.patches] == [1, 2, 3, 4, 5]
        assert not bag.flagged_empty

    def test_zero_patches_flagged(self):
        bag = bg.build_bag(self.entry(), [])
        assert bag.flagged_empty

    def test_deterministic(self):
        a = bg.build_bag(self.entry(), self.patches(3))
        b = bg.build_bag(self.entry(), self.patches(3))
        assert all((pa.pixels == pb.pixels).all() and pa.patch_id == pb.patch_id
                   for pa, pb in zip(a.patches, b.patches))


class TestManifest:
    def manifest(self):
        entries = tuple(
            bg.ManifestEntry(bag_id=f"b{i}", patient_id=f"p{i % 3}", label=i % 2,
                             image_path=f"i{i}.png", mask_path=f"m{i}.png")
            for i in range(6))
        return bg.DatasetManifest(entries=entries, category_names=("a", "b"))

    def test_round_trip(self, tmp_path):
        m = self.manifest()
        bg.write_manifest(m, tmp_path / "m.jsonl")
        back = bg.read_manifest(tmp_path / "m.jsonl")
        assert back == m

    def test_duplicate_bag_ids_rejected(self):
        e = bg.ManifestEntry("b", "p", 0, "i", "m")
        with pytest.raises(bg.BaggingError):
            bg.DatasetManifest(entries=(e, e), category_names=("a",))

    def test_label_out_of_range_rejected(self):
        e = bg.ManifestEntry("b", "p", 5, "i", "m")
        with pytest.raises(bg.BaggingError):
            bg.DatasetManifest(entries=(e,), category_names=("a",))

    def test_patient_majority_label(self):
        entries = (
            bg.ManifestEntry("b0", "p", 1, "i0", "m0"),
            bg.ManifestEntry("b1", "p", 1, "i1", "m1"),
            bg.ManifestEntry("b2", "p", 0, "i2", "m2"),
        )
        m = bg.DatasetManifest(entries=entries, category_names=("a", "b"))
        assert m.patient_label("p") == 1


class TestArchives:
    def patches(self, n=4, seed=9):
        rng = np.random.default_rng(seed)
        return [bg.Patch(pixels=rng.integers(0, 256, (96, 96, 3)).astype(np.uint8),
                         center=(1, 1), source_instance=i + 1,
                         patch_id=f"z:{i:04d}") for i in range(n)]

    def test_dir_round_trip(self, tmp_path):
        ps = self.patches()
        bg.write_patch_dir(ps, tmp_path / "d")
        back = bg.read_patch_dir(tmp_path / "d")
        assert [p.patch_id for p in back] == [p.patch_id for p in ps]
        for a, b in zip(ps, back):
            assert (a.pixels == b.pixels).all()

    def test_container_round_trip(self, tmp_path):
        ps = self.patches(6, seed=10)
        path = tmp_path / "x.bags"
        bg.write_patch_container(ps, path)
        raw = path.read_bytes()
        assert raw[:4] == b"BAGS"
        assert int.from_bytes(raw[4:8], "little") == 6
        back = bg.read_patch_container(path)
        assert [p.patch_id for p in back] == [p.patch_id for p in ps]
        for a, b in zip(ps, back):
            assert (a.pixels == b.pixels).all()

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "bad.bags"
        path.write_bytes(b"NOPE" + b"\0" * 8)
        (tmp_path / "bad.bags.index.json").write_text("[]")
        with pytest.raises(bg.BaggingError):
            bg.read_patch_container(path)
