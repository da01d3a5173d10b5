"""Tests for cross-layer code merging, the gamma classifier, and delta stats."""

import math

import numpy as np
import pytest

from xquant.crosslayer import (
    GAMMA_BOUNDARIES,
    GAMMA_INTERVALS,
    DeltaHistogram,
    GammaBoundaryError,
    MergeWeights,
    classify_gamma,
    delta_histogram,
    dominant_share,
    merge_codes,
)

# =============================================================================
# Reference helpers
# =============================================================================


def ref_merge_pair(e0: int, e1: int, gamma0: float, bits: int) -> int:
    # delta form with the same tie rule: e1 + round_half_down(gamma0 * delta)
    adjust = -math.floor(0.5 - gamma0 * (e0 - e1))
    return int(np.clip(e1 + adjust, 0, 2**bits - 1))


INTERVAL_SAMPLES = {
    "[0,1/6)": (0.0, 0.05, 0.16),
    "(1/6,1/4)": (0.17, 0.2, 0.24),
    "(1/4,1/2)": (0.26, 0.3, 0.49),
    "(1/2,3/4)": (0.51, 0.6, 0.74),
    "(3/4,5/6)": (0.76, 0.8, 0.83),
    "(5/6,1]": (0.84, 0.9, 1.0),
}


# =============================================================================
# merge_codes
# =============================================================================


class TestMergeCodes:
    def test_high_gamma_keeps_first_layer(self):
        w = MergeWeights((0.9, 0.1))
        out = merge_codes([np.array([3]), np.array([0])], w, 2)
        assert out.tolist() == [3]

    def test_one_hot_is_identity(self):
        rng = np.random.default_rng(71)
        for _ in range(20):
            size = int(rng.integers(1, 50))
            arrays = [rng.integers(0, 4, size=size, dtype=np.uint8) for _ in range(3)]
            hot = int(rng.integers(3))
            out = merge_codes(arrays, MergeWeights.one_hot(3, hot), 2)
            assert np.array_equal(out, arrays[hot])

    def test_matches_delta_form_oracle_within_intervals(self):
        for samples in INTERVAL_SAMPLES.values():
            for gamma0 in samples:
                w = MergeWeights((gamma0, 1.0 - gamma0))
                for e0 in range(4):
                    for e1 in range(4):
                        out = merge_codes([np.array([e0]), np.array([e1])], w, 2)
                        assert out[0] == ref_merge_pair(e0, e1, gamma0, 2), (gamma0, e0, e1)

    def test_output_always_in_range(self):
        rng = np.random.default_rng(73)
        for _ in range(50):
            g0 = float(rng.random())
            arrays = [rng.integers(0, 4, size=30, dtype=np.uint8) for _ in range(2)]
            out = merge_codes(arrays, MergeWeights((g0, 1 - g0)), 2)
            assert out.dtype == np.uint8
            assert out.min() >= 0 and out.max() <= 3

    def test_length_mismatch_rejected(self):
        w = MergeWeights((0.5, 0.5))
        with pytest.raises(ValueError):
            merge_codes([np.zeros(3, dtype=np.uint8), np.zeros(4, dtype=np.uint8)], w, 2)

    def test_array_count_must_match_weights(self):
        w = MergeWeights((0.5, 0.5))
        with pytest.raises(ValueError):
            merge_codes([np.zeros(3, dtype=np.uint8)] * 3, w, 2)


class TestMergeWeights:
    def test_sum_must_be_one(self):
        with pytest.raises(ValueError):
            MergeWeights((0.6, 0.6))

    def test_nonnegative(self):
        with pytest.raises(ValueError):
            MergeWeights((1.2, -0.2))

    def test_at_least_two_layers(self):
        with pytest.raises(ValueError):
            MergeWeights((1.0,))

    def test_one_hot_constructor(self):
        w = MergeWeights.one_hot(4, 2)
        assert w.gamma == (0.0, 0.0, 1.0, 0.0)


# =============================================================================
# dominant_share
# =============================================================================


class TestDominantShare:
    def test_returns_equal_codes(self):
        codes = np.array([0, 1, 2, 3], dtype=np.uint8)
        assert np.array_equal(dominant_share(codes), codes)

    def test_returns_independent_copy(self):
        codes = np.array([1, 2], dtype=np.uint8)
        out = dominant_share(codes)
        out[0] = 3
        assert codes[0] == 1

    def test_equals_one_hot_merge(self):
        rng = np.random.default_rng(79)
        for _ in range(50):
            bits = int(rng.integers(1, 3))
            size = int(rng.integers(1, 40))
            arrays = [
                rng.integers(0, 2**bits, size=size, dtype=np.uint8) for _ in range(2)
            ]
            hot = int(rng.integers(2))
            merged = merge_codes(arrays, MergeWeights.one_hot(2, hot), bits)
            assert np.array_equal(dominant_share(arrays[hot]), merged)


# =============================================================================
# classify_gamma
# =============================================================================


class TestClassifyGamma:
    def test_share_layer_zero(self):
        interval = classify_gamma(0.9)
        assert interval.label == "(5/6,1]"
        assert interval.accelerated and interval.shared_layer == 0

    def test_middle_interval(self):
        interval = classify_gamma(0.3)
        assert interval.label == "(1/4,1/2)"
        assert not interval.accelerated and interval.shared_layer is None

    def test_share_layer_one(self):
        interval = classify_gamma(0.1)
        assert interval.label == "[0,1/6)"
        assert interval.accelerated and interval.shared_layer == 1

    def test_endpoints_belong_to_outer_intervals(self):
        assert classify_gamma(0.0).label == "[0,1/6)"
        assert classify_gamma(1.0).label == "(5/6,1]"

    @pytest.mark.parametrize("boundary", GAMMA_BOUNDARIES)
    def test_boundaries_rejected(self, boundary):
        with pytest.raises(GammaBoundaryError):
            classify_gamma(boundary)

    @pytest.mark.parametrize("bad", [-0.2, 1.01])
    def test_domain_rejected(self, bad):
        with pytest.raises(ValueError):
            classify_gamma(bad)

    def test_intervals_partition_unit_range(self):
        rng = np.random.default_rng(83)
        for _ in range(500):
            g0 = float(rng.random())
            if g0 in GAMMA_BOUNDARIES:
                continue
            hits = [iv for iv in GAMMA_INTERVALS if iv.contains(g0)]
            assert len(hits) == 1
            assert classify_gamma(g0) is hits[0]

    def test_same_interval_iff_same_merge_behavior(self):
        def signature(g0: float) -> tuple:
            w = MergeWeights((g0, 1 - g0))
            e0, e1 = np.meshgrid(np.arange(4), np.arange(4))
            out = merge_codes([e0.ravel().astype(np.uint8), e1.ravel().astype(np.uint8)], w, 2)
            return tuple(out.tolist())

        rng = np.random.default_rng(89)
        points = [float(g) for g in rng.random(40) if g not in GAMMA_BOUNDARIES]
        for a in points[:10]:
            for b in points[10:20]:
                same_interval = classify_gamma(a) is classify_gamma(b)
                same_merge = signature(a) == signature(b)
                assert same_interval == same_merge, (a, b)


# =============================================================================
# delta_histogram
# =============================================================================


class TestDeltaHistogram:
    def test_identical_arrays_point_mass(self):
        codes = np.array([0, 1, 2, 3, 3], dtype=np.uint8)
        hist = delta_histogram(codes, codes, 2)
        assert hist.counts.tolist() == [5, 0, 0, 0]
        assert hist.total == 5
        assert hist.shares.tolist() == [1.0, 0.0, 0.0, 0.0]

    def test_hand_example(self):
        a = np.array([0, 1, 2, 3], dtype=np.uint8)
        b = np.array([3, 2, 1, 0], dtype=np.uint8)
        hist = delta_histogram(a, b, 2)
        assert hist.counts.tolist() == [0, 2, 0, 2]
        assert hist.shares.tolist() == [0.0, 0.5, 0.0, 0.5]

    def test_symmetry(self):
        rng = np.random.default_rng(97)
        a = rng.integers(0, 4, size=100, dtype=np.uint8)
        b = rng.integers(0, 4, size=100, dtype=np.uint8)
        assert np.array_equal(delta_histogram(a, b, 2).counts, delta_histogram(b, a, 2).counts)

    def test_counts_sum_to_total(self):
        rng = np.random.default_rng(101)
        a = rng.integers(0, 2, size=77, dtype=np.uint8)
        b = rng.integers(0, 2, size=77, dtype=np.uint8)
        hist = delta_histogram(a, b, 1)
        assert hist.counts.sum() == hist.total == 77

    def test_length_mismatch_rejected(self):
        with pytest.raises(ValueError):
            delta_histogram(np.zeros(3, dtype=np.uint8), np.zeros(4, dtype=np.uint8), 2)

    def test_out_of_range_codes_rejected(self):
        with pytest.raises(ValueError):
            delta_histogram(np.array([5], dtype=np.uint8), np.array([0], dtype=np.uint8), 2)
