import numpy as np
import pytest

from conftest import brute_cc
from mialign import (
    NumericalHealthError,
    correlate_cached,
    cross_correlate,
    round_counts,
)
from mialign.xcorr import padded_lengths, spectrum


class TestCrossCorrelate:
    def test_delta_correlation(self):
        f = np.zeros((3, 3))
        f[0, 0] = 1.0
        out = cross_correlate(f, f)
        expect = np.zeros((5, 5))
        expect[2, 2] = 1.0  # chi = (0, 0)
        assert np.allclose(out, expect, atol=1e-12)

    def test_ones_2x2_overlap_pyramid(self):
        out = round_counts(cross_correlate(np.ones((2, 2)), np.ones((2, 2))))
        assert out.tolist() == [[1, 2, 1], [2, 4, 2], [1, 2, 1]]

    def test_random_binary_matches_brute_force_exactly(self, rng):
        f = (rng.random((16, 16)) < 0.4).astype(float)
        g = (rng.random((16, 16)) < 0.4).astype(float)
        fast = round_counts(cross_correlate(f, g))
        slow = brute_cc(f, g).astype(np.int64)
        assert np.array_equal(fast, slow)

    def test_rectangular_shapes_match_brute_force(self, rng):
        f = (rng.random((5, 12)) < 0.5).astype(float)
        g = (rng.random((9, 3)) < 0.5).astype(float)
        assert np.array_equal(round_counts(cross_correlate(f, g)), brute_cc(f, g).astype(np.int64))

    def test_exactness_at_128(self, rng):
        f = (rng.random((128, 128)) < 0.5).astype(float)
        g = (rng.random((128, 128)) < 0.5).astype(float)
        assert np.array_equal(round_counts(cross_correlate(f, g)), brute_cc(f, g).astype(np.int64))

    def test_symmetry_under_argument_swap(self, rng):
        f = (rng.random((7, 9)) < 0.5).astype(float)
        g = (rng.random((11, 4)) < 0.5).astype(float)
        fg = round_counts(cross_correlate(f, g))
        gf = round_counts(cross_correlate(g, f))
        assert np.array_equal(fg, gf[::-1, ::-1])

    def test_mass_conservation(self, rng):
        f = rng.random((8, 8))
        g = rng.random((6, 10))
        out = cross_correlate(f, g)
        assert np.isclose(out.sum(), f.sum() * g.sum(), rtol=1e-10)

    def test_weighted_matches_brute_force_to_tolerance(self, rng):
        f = rng.random((12, 12)) * 3.0
        g = rng.random((12, 12)) * 0.5
        out = cross_correlate(f, g)
        ref = brute_cc(f, g)
        scale = max(ref.max(), 1.0)
        assert np.abs(out - ref).max() / scale < 1e-9

    def test_empty_grid_rejected(self):
        with pytest.raises(ValueError):
            cross_correlate(np.zeros((0, 3)), np.ones((2, 2)))


class TestSpectrumCache:
    def test_cached_equals_uncached(self, rng):
        f = (rng.random((10, 8)) < 0.5).astype(float)
        g = (rng.random((6, 7)) < 0.5).astype(float)
        padded = padded_lengths(f.shape, g.shape)
        ref = spectrum(f, padded, conjugate=False)
        flt = spectrum(g, padded, conjugate=True)
        assert np.array_equal(
            round_counts(correlate_cached(ref, flt)), round_counts(cross_correlate(f, g))
        )

    def test_cache_reuse_across_partners(self, rng):
        f = (rng.random((9, 9)) < 0.5).astype(float)
        g1 = (rng.random((9, 9)) < 0.5).astype(float)
        g2 = (rng.random((9, 9)) < 0.5).astype(float)
        padded = padded_lengths(f.shape, g1.shape)
        ref = spectrum(f, padded, conjugate=False)
        for g in (g1, g2):
            flt = spectrum(g, padded, conjugate=True)
            assert np.array_equal(
                round_counts(correlate_cached(ref, flt)),
                round_counts(cross_correlate(f, g)),
            )

    def test_extent_mismatch_rejected(self, rng):
        f = np.ones((4, 4))
        ref = spectrum(f, (16, 16), conjugate=False)
        flt = spectrum(f, (18, 18), conjugate=True)
        with pytest.raises(ValueError):
            correlate_cached(ref, flt)

    def test_wrong_conjugation_side_rejected(self):
        f = np.ones((4, 4))
        ref = spectrum(f, (16, 16), conjugate=False)
        with pytest.raises(ValueError):
            correlate_cached(ref, ref)

    def test_batched_stack_correlates_each_grid(self, rng):
        stack = (rng.random((3, 6, 6)) < 0.5).astype(float)
        g = (rng.random((6, 6)) < 0.5).astype(float)
        padded = padded_lengths((6, 6), (6, 6))
        ref = spectrum(stack, padded, conjugate=False)
        flt = spectrum(g, padded, conjugate=True)
        out = round_counts(correlate_cached(ref, flt))
        assert out.shape == (3, 11, 11)
        for i in range(3):
            assert np.array_equal(out[i], brute_cc(stack[i], g).astype(np.int64))


class TestRoundCounts:
    def test_near_integer_rounds(self):
        assert round_counts(np.array([[3.9999999]]))[0, 0] == 4

    def test_tiny_negative_clamps_to_zero(self):
        out = round_counts(np.array([[-1e-12]]))
        assert out[0, 0] == 0

    def test_large_residual_raises(self):
        with pytest.raises(NumericalHealthError):
            round_counts(np.array([[2.3]]))

    def test_padded_extent_must_cover_grid(self):
        with pytest.raises(ValueError):
            spectrum(np.ones((8, 8)), (4, 16), conjugate=False)
