"""Histogram matching: CDF construction, inversion rule, invariants."""

import numpy as np
import pytest

from gleasonmil.stain import ReferenceProfile, build_reference, histogram_match


def cdf_oracle(channel):
    """Direct counting oracle for one channel's CDF."""
    flat = channel.ravel()
    return np.array([(flat <= v).mean() for v in range(256)])


class TestBuildReference:
    def test_constant_image_step(self):
        image = np.full((8, 8, 3), 128, dtype=np.uint8)
        profile = build_reference(image)
        for c in range(3):
            assert np.all(profile.cdfs[c, :128] == 0.0)
            assert np.all(profile.cdfs[c, 128:] == 1.0)

    def test_uniform_histogram_linear(self):
        ramp = np.tile(np.arange(256, dtype=np.uint8), (4, 1))
        image = np.stack([ramp] * 3, axis=2)
        profile = build_reference(image)
        expected = (np.arange(256) + 1) / 256
        assert np.allclose(profile.cdfs, expected)

    def test_matches_counting_oracle(self):
        rng = np.random.default_rng(17)
        image = rng.integers(0, 256, size=(23, 31, 3)).astype(np.uint8)
        profile = build_reference(image)
        for c in range(3):
            assert np.allclose(profile.cdfs[c], cdf_oracle(image[..., c]))

    def test_invalid_profile_rejected(self):
        bad = np.ones((3, 256))
        bad[0, 10] = 2.0
        bad[0, 11] = 1.0  # decreasing step
        with pytest.raises(ValueError):
            ReferenceProfile(bad)


class TestHistogramMatch:
    def test_identity_on_own_profile(self):
        rng = np.random.default_rng(3)
        # Every intensity present => strictly increasing CDFs.
        base = np.arange(256, dtype=np.uint8)
        image = np.stack([rng.permutation(base).reshape(16, 16) for _ in range(3)], axis=2)
        out = histogram_match(image, build_reference(image))
        assert np.array_equal(out, image)

    def test_constant_to_constant(self):
        src = np.full((10, 10, 3), 50, dtype=np.uint8)
        ref = np.full((4, 4, 3), 200, dtype=np.uint8)
        out = histogram_match(src, build_reference(ref))
        assert np.all(out == 200)

    def test_two_level_mapping(self):
        # Equal-mass {0,255} source onto equal-mass {100,200} reference.
        src = np.zeros((2, 2, 3), dtype=np.uint8)
        src[0, :, :] = 0
        src[1, :, :] = 255
        ref = np.zeros((2, 2, 3), dtype=np.uint8)
        ref[0, :, :] = 100
        ref[1, :, :] = 200
        out = histogram_match(src, build_reference(ref))
        assert set(np.unique(out)) == {100, 200}
        assert np.all(out[0] == 100) and np.all(out[1] == 200)

    def test_monotone_mapping_randomized(self):
        rng = np.random.default_rng(9)
        for _ in range(20):
            src = rng.integers(0, 256, size=(12, 12, 3)).astype(np.uint8)
            ref = rng.integers(0, 256, size=(15, 9, 3)).astype(np.uint8)
            profile = build_reference(ref)
            out = histogram_match(src, profile)
            for c in range(3):
                values = np.sort(np.unique(src[..., c]))
                mapped = []
                for v in values:
                    where = src[..., c] == v
                    outputs = np.unique(out[..., c][where])
                    assert outputs.size == 1  # a value maps to one value
                    mapped.append(outputs[0])
                assert np.all(np.diff(np.asarray(mapped, dtype=int)) >= 0)

    def test_idempotent_randomized(self):
        rng = np.random.default_rng(29)
        for _ in range(20):
            src = rng.integers(0, 256, size=(10, 14, 3)).astype(np.uint8)
            ref = rng.integers(0, 256, size=(8, 8, 3)).astype(np.uint8)
            profile = build_reference(ref)
            once = histogram_match(src, profile)
            twice = histogram_match(once, profile)
            assert np.array_equal(once, twice)

    def test_hook_runs_after_matching(self):
        src = np.full((4, 4, 3), 10, dtype=np.uint8)
        ref = np.full((4, 4, 3), 90, dtype=np.uint8)
        out = histogram_match(src, build_reference(ref), hook=lambda img: img // 2)
        assert np.all(out == 45)


class TestProfilePersistence:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(41)
        image = rng.integers(0, 256, size=(10, 10, 3)).astype(np.uint8)
        profile = build_reference(image)
        path = tmp_path / "reference.txt"
        profile.save(path)
        loaded = ReferenceProfile.load(path)
        assert np.allclose(loaded.cdfs, profile.cdfs, atol=1e-9)
        src = rng.integers(0, 256, size=(6, 6, 3)).astype(np.uint8)
        assert np.array_equal(histogram_match(src, profile), histogram_match(src, loaded))
