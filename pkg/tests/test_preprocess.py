"""Tissue masking and tiling against exhaustive brute-force oracles."""

import numpy as np
import pytest

from gleasonmil.preprocess import (
    DegenerateHistogramError,
    otsu_threshold,
    patch_filename,
    tile_slide,
    tissue_mask,
)


def otsu_oracle(hist):
    """Exhaustive search over all 255 cut points for the max between-class
    variance; returns (best_t, variance_per_cut)."""
    hist = [float(v) for v in hist]
    total = sum(hist)
    best_t, best_v = None, -1.0
    variances = []
    for t in range(255):
        w0 = sum(hist[: t + 1])
        w1 = total - w0
        if w0 == 0 or w1 == 0:
            variances.append(0.0)
            continue
        mu0 = sum(i * hist[i] for i in range(t + 1)) / w0
        mu1 = sum(i * hist[i] for i in range(t + 1, 256)) / w1
        variances.append(w0 * w1 * (mu0 - mu1) ** 2)
    for t, v in enumerate(variances):
        if v > best_v + 1e-9:
            best_t, best_v = t, v
    return best_t, variances


def tiling_count_oracle(h, w, window, stride):
    count = 0
    for y in range(0, h + 1):
        for x in range(0, w + 1):
            if y % stride == 0 and x % stride == 0 and y + window <= h and x + window <= w:
                count += 1
    return count


class TestOtsu:
    def test_two_spikes(self):
        hist = np.zeros(256)
        hist[0] = 10
        hist[255] = 10
        expected, _ = otsu_oracle(hist)
        assert otsu_threshold(hist) == expected

    def test_single_bin_degenerate(self):
        hist = np.zeros(256)
        hist[100] = 20
        with pytest.raises(DegenerateHistogramError):
            otsu_threshold(hist)

    def test_two_bands(self):
        hist = np.zeros(256)
        hist[0:10] = 10
        hist[200:210] = 10
        t = otsu_threshold(hist)
        expected, _ = otsu_oracle(hist)
        assert t == expected
        assert 9 <= t <= 199

    def test_matches_exhaustive_oracle_randomized(self):
        rng = np.random.default_rng(11)
        for _ in range(1000):
            hist = rng.integers(0, 20, size=256).astype(float)
            if np.count_nonzero(hist) <= 1:
                continue
            expected, variances = otsu_oracle(hist)
            got = otsu_threshold(hist)
            # Equal the exhaustive maximizer, smallest index on ties.
            assert variances[got] == pytest.approx(max(variances), rel=1e-12)
            assert got == expected

    def test_input_validation(self):
        with pytest.raises(ValueError):
            otsu_threshold(np.zeros(256))
        with pytest.raises(ValueError):
            otsu_threshold(np.zeros(128))


class TestTissueMask:
    def test_all_white(self):
        image = np.full((32, 32, 3), 255, dtype=np.uint8)
        assert not tissue_mask(image).any()

    def test_left_dark_right_light(self):
        image = np.full((20, 40, 3), 250, dtype=np.uint8)
        image[:, :20] = 30
        mask = tissue_mask(image)
        assert mask[:, :20].all() and not mask[:, 20:].any()

    def test_checkerboard_half(self):
        image = np.zeros((16, 16, 3), dtype=np.uint8)
        image[::2, 1::2] = 255
        image[1::2, ::2] = 255
        mask = tissue_mask(image)
        assert mask.sum() == mask.size // 2

    def test_mask_side_is_darker(self):
        rng = np.random.default_rng(5)
        image = rng.integers(0, 256, size=(30, 30, 3)).astype(np.uint8)
        mask = tissue_mask(image)
        gray = image.astype(np.uint32).sum(axis=2) // 3
        if mask.any() and (~mask).any():
            assert gray[mask].max() < gray[~mask].min()


class TestTiling:
    def test_nine_patches_on_full_tissue(self):
        image = np.zeros((1024, 1024, 3), dtype=np.uint8)
        full = np.ones((1024, 1024), dtype=bool)
        patches = tile_slide(image, window=512, stride=256, mask=full)
        assert len(patches) == 9
        assert tiling_count_oracle(1024, 1024, 512, 256) == 9

    def test_all_white_zero_patches(self):
        image = np.full((1024, 1024, 3), 255, dtype=np.uint8)
        assert tile_slide(image, window=512, stride=256) == []

    def test_tissue_fraction_boundary_inclusive(self):
        # 10x10 window over an image with a controllable tissue fraction.
        image = np.full((10, 10, 3), 255, dtype=np.uint8)
        image[:2, :] = 0  # 20% dark rows
        patches = tile_slide(image, window=10, stride=10, min_tissue=0.20)
        assert len(patches) == 1 and patches[0].tissue_fraction == pytest.approx(0.20)
        image[1, 0] = 255  # drop to 19%
        assert tile_slide(image, window=10, stride=10, min_tissue=0.20) == []

    def test_window_larger_than_image(self):
        image = np.zeros((100, 100, 3), dtype=np.uint8)
        with pytest.raises(ValueError, match="smaller than window"):
            tile_slide(image, window=128, stride=64)

    def test_row_major_order_and_bounds(self):
        image = np.zeros((70, 90, 3), dtype=np.uint8)
        patches = tile_slide(image, window=30, stride=20)
        coords = [(p.grid_row, p.grid_col) for p in patches]
        assert coords == sorted(coords)
        for p in patches:
            x, y = p.offsets(20)
            assert x + 30 <= 90 and y + 30 <= 70
            assert p.pixels.shape == (30, 30, 3)

    def test_count_matches_oracle_randomized(self):
        rng = np.random.default_rng(21)
        for _ in range(200):
            window = int(rng.integers(4, 40))
            h = int(rng.integers(window, 150))
            w = int(rng.integers(window, 150))
            stride = int(rng.integers(1, window + 5))
            image = np.zeros((h, w, 3), dtype=np.uint8)
            patches = tile_slide(image, window=window, stride=stride, min_tissue=0.0)
            assert len(patches) == tiling_count_oracle(h, w, window, stride)
            for p in patches:
                assert p.tissue_fraction >= 0.0

    def test_kept_patches_meet_min_tissue(self):
        rng = np.random.default_rng(8)
        image = (rng.random((64, 64, 3)) * 255).astype(np.uint8)
        for p in tile_slide(image, window=16, stride=8, min_tissue=0.2):
            assert p.tissue_fraction >= 0.2


def test_patch_filename():
    assert patch_filename("slide7", 3, 1) == "slide7_x3_y1.png"
