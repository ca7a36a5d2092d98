import numpy as np
import pytest

from mcforge import imagecore as ic


def write_pgm(path, arr):
    arr = np.asarray(arr, dtype=np.uint8)
    with open(path, "wb") as f:
        f.write(b"P5\n%d %d\n255\n" % (arr.shape[1], arr.shape[0]))
        f.write(arr.tobytes())


class TestLoadSave:
    def test_small_pgm_bytes(self, tmp_path):
        p = tmp_path / "tiny.pgm"
        write_pgm(p, np.array([[0, 255], [17, 34]]))
        m = ic.load_micrograph(p)
        assert m.width == 2 and m.height == 2
        assert m.pixels.flatten().tolist() == [0, 255, 17, 34]
        assert m.id == "tiny"

    def test_rgb_png_rejected(self, tmp_path):
        from PIL import Image
        p = tmp_path / "color.png"
        Image.new("RGB", (4, 4), (10, 20, 30)).save(p)
        with pytest.raises(ic.ImageFormatError, match="unsupported format"):
            ic.load_micrograph(p)

    def test_roundtrip_pgm_and_png(self, tmp_path):
        rng = np.random.default_rng(0)
        px = rng.integers(0, 256, size=(13, 9))
        for ext in ("pgm", "png"):
            path = tmp_path / f"img.{ext}"
            ic.save_micrograph(ic.Micrograph(px.astype(float), id="img"), path)
            back = ic.load_micrograph(path)
            assert np.array_equal(back.pixels, px)

    def test_pgm_with_comment(self, tmp_path):
        p = tmp_path / "c.pgm"
        with open(p, "wb") as f:
            f.write(b"P5\n# a comment\n3 2\n255\n" + bytes(range(6)))
        m = ic.load_micrograph(p)
        assert m.width == 3 and m.height == 2

    def test_p6_rejected(self, tmp_path):
        p = tmp_path / "x.pgm"
        with open(p, "wb") as f:
            f.write(b"P6\n1 1\n255\n" + b"\x00\x00\x00")
        with pytest.raises(ic.ImageFormatError):
            ic.load_micrograph(p)

    def test_16bit_maxval_rejected(self, tmp_path):
        p = tmp_path / "x.pgm"
        with open(p, "wb") as f:
            f.write(b"P5\n1 1\n65535\n\x00\x00")
        with pytest.raises(ic.ImageFormatError, match="bit depth"):
            ic.load_micrograph(p)


class TestNeighborhoods:
    def test_3x3_single_sample(self):
        m = ic.Micrograph(np.arange(9, dtype=float).reshape(3, 3))
        ns = ic.extract_neighborhoods(m, 1)
        assert len(ns) == 1
        s = ns.sample(0)
        assert s.target == 4
        assert s.neighbors.tolist() == [0, 1, 2, 3, 5, 6, 7, 8]
        assert (s.row, s.col) == (1, 1)

    def test_5x5_count(self):
        m = ic.Micrograph(np.zeros((5, 5)))
        assert len(ic.extract_neighborhoods(m, 1)) == 9

    def test_ls5_neighbor_length(self):
        m = ic.Micrograph(np.zeros((12, 12)))
        ns = ic.extract_neighborhoods(m, 5)
        assert ns.neighbors.shape[1] == 120

    def test_too_small(self):
        with pytest.raises(ValueError):
            ic.extract_neighborhoods(ic.Micrograph(np.zeros((4, 4))), 2)

    def test_window_reconstruction_bijection(self):
        # target + neighbors must reproduce the original window exactly
        rng = np.random.default_rng(3)
        m = ic.Micrograph(rng.integers(0, 256, size=(7, 8)).astype(float))
        l_s = 2
        ns = ic.extract_neighborhoods(m, l_s)
        win = 2 * l_s + 1
        for i in range(len(ns)):
            s = ns.sample(i)
            flat = np.insert(s.neighbors, (win * win) // 2, s.target)
            expect = m.pixels[s.row - l_s:s.row + l_s + 1,
                              s.col - l_s:s.col + l_s + 1].flatten()
            assert np.array_equal(flat, expect)


class TestConnectedRegions:
    def test_uniform(self):
        mask = ic.LabelMask(np.zeros((6, 7), dtype=int))
        regions = ic.connected_regions(mask, min_size=1)
        assert len(regions) == 1
        assert regions[0].size == 42

    def test_checkerboard_min2(self):
        rr, cc = np.indices((8, 8))
        mask = ic.LabelMask(((rr + cc) % 2).astype(int))
        assert ic.connected_regions(mask, min_size=2) == []

    def test_two_stripes(self):
        labels = np.zeros((10, 10), dtype=int)
        labels[5:] = 1
        regions = ic.connected_regions(ic.LabelMask(labels), min_size=1)
        assert len(regions) == 2
        assert {r.label for r in regions} == {0, 1}

    def test_unlabeled_excluded_and_partition(self):
        rng = np.random.default_rng(7)
        labels = rng.integers(0, 3, size=(20, 20))
        labels[0, :] = ic.UNLABELED
        mask = ic.LabelMask(labels)
        regions = ic.connected_regions(mask, min_size=1)
        seen = set()
        for r in regions:
            for row, col in map(tuple, r.pixels):
                assert (row, col) not in seen
                assert labels[row, col] == r.label
                seen.add((row, col))
        assert len(seen) == int((labels != ic.UNLABELED).sum())

    def test_sorted_by_size(self):
        labels = np.zeros((10, 10), dtype=int)
        labels[:, :3] = 1
        regions = ic.connected_regions(ic.LabelMask(labels), min_size=1)
        assert regions[0].size >= regions[1].size


class TestHarvestPatches:
    def full_region(self, n):
        mask = ic.LabelMask(np.zeros((n, n), dtype=int))
        return ic.connected_regions(mask, min_size=1)[0]

    def test_grid_64(self):
        m = ic.Micrograph(np.zeros((64, 64)))
        patches = ic.harvest_patches(m, self.full_region(64), 32, 32)
        assert len(patches) == 4

    def test_identity(self):
        rng = np.random.default_rng(1)
        m = ic.Micrograph(rng.integers(0, 256, (64, 64)).astype(float))
        patches = ic.harvest_patches(m, self.full_region(64), 64, 1)
        assert len(patches) == 1
        assert np.array_equal(patches[0].pixels, m.pixels)

    def test_thin_region_empty(self):
        labels = np.full((64, 64), ic.UNLABELED, dtype=int)
        labels[:, 10:13] = 0
        region = ic.connected_regions(ic.LabelMask(labels), min_size=1)[0]
        m = ic.Micrograph(np.zeros((64, 64)))
        assert ic.harvest_patches(m, region, 32, 1) == []

    def test_patch_overlay_matches_source(self):
        rng = np.random.default_rng(5)
        m = ic.Micrograph(rng.integers(0, 256, (40, 40)).astype(float))
        labels = np.zeros((40, 40), dtype=int)
        labels[:, 20:] = 1
        for region in ic.connected_regions(ic.LabelMask(labels), min_size=1):
            for p in ic.harvest_patches(m, region, 8, 4):
                assert np.array_equal(
                    p.pixels, m.pixels[p.row:p.row + 8, p.col:p.col + 8])


class TestResize:
    def test_constant_preserved(self):
        out = ic.bilinear_resize(np.full((10, 10), 7.0), 23, 17)
        assert np.allclose(out, 7.0)

    def test_identity(self):
        rng = np.random.default_rng(2)
        a = rng.normal(size=(9, 11))
        assert np.allclose(ic.bilinear_resize(a, 9, 11), a)

    def test_rescale_micrograph_scale_field(self):
        m = ic.Micrograph(np.full((10, 10), 50.0), scale=2.0)
        out = ic.rescale_micrograph(m, 2.0)
        assert out.height == 20 and out.scale == 1.0
