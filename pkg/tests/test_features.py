"""Spectral features against a naive O(n^2) DFT oracle."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from szpred import features
from szpred.features import (
    BANDS, EXCLUDED, FEATURE_EPS, INTERICTAL, PREICTAL, RATIO_PAIRS,
    SegmentationError, apply_band_masks, band_powers, extract_timeline,
    psd, read_feature_cache, segment, write_feature_cache,
)
from szpred.records import EegRecord


def naive_dft_psd(x, fs):
    """Independent periodogram: detrend, Hann, O(n^2) DFT, density scaling."""
    x = np.asarray(x, dtype=np.float64)
    n = x.size
    nfft = 1
    while nfft < n:
        nfft *= 2
    w = np.hanning(n)
    xw = np.zeros(nfft)
    xw[:n] = (x - x.mean()) * w
    k = np.arange(nfft // 2 + 1)
    t = np.arange(nfft)
    basis = np.exp(-2j * np.pi * np.outer(k, t) / nfft)  # O(n^2) matrix DFT
    coeffs = basis @ xw
    p = np.abs(coeffs) ** 2 / (fs * np.sum(w ** 2))
    p[1:] *= 2.0
    if nfft % 2 == 0:
        p[-1] /= 2.0
    freqs = k * fs / nfft
    return freqs, p


def oracle_band_features(power, freqs):
    """Eqs-style band features recomputed with independent mask logic."""
    sums = []
    for _, lo, hi in BANDS:
        sel = (freqs > lo) & (freqs <= hi)
        sums.append(np.sum(power[sel]))
    sums = np.array(sums)
    total = sums.sum()
    absolute = np.log(sums + FEATURE_EPS)
    relative = np.log((sums + FEATURE_EPS) / (total + FEATURE_EPS))
    ratios = np.array([absolute[i] - absolute[j] for i, j in RATIO_PAIRS])
    return np.concatenate([absolute, relative, ratios])


def make_record(data, fs=256):
    return EegRecord(fs, [f"c{i}" for i in range(data.shape[0])], data)


class TestSegment:
    def test_10s_record_gives_9_windows(self):
        rec = make_record(np.zeros((1, 2560)))
        assert sum(1 for _ in segment(rec)) == 9

    def test_38s_record_gives_37_windows(self):
        rec = make_record(np.zeros((2, 38 * 256)))
        assert sum(1 for _ in segment(rec)) == 37

    def test_2s_record_single_window(self):
        rec = make_record(np.arange(512.0).reshape(1, 512))
        wins = list(segment(rec))
        assert len(wins) == 1
        np.testing.assert_array_equal(wins[0][1], rec.samples)

    def test_window_k_covers_k_to_k_plus_2(self):
        rec = make_record(np.arange(1024.0).reshape(1, 1024))
        wins = dict(segment(rec))
        np.testing.assert_array_equal(wins[1][0], np.arange(256.0, 768.0))

    def test_too_short_rejected(self):
        with pytest.raises(SegmentationError):
            list(segment(make_record(np.zeros((1, 100)))))


class TestPsd:
    def test_zero_signal_zero_psd(self):
        p = psd(np.zeros((3, 512)), 256)
        np.testing.assert_array_equal(p.power, 0.0)

    def test_sinusoid_parseval_and_peak(self):
        fs = 256
        t = np.arange(2 * fs) / fs
        x = np.sin(2 * np.pi * 10.0 * t)
        p = psd(x, fs)
        df = fs / 512
        total = p.power[0].sum() * df
        assert abs(total - 0.5) < 0.02  # variance of a unit sinusoid
        assert p.freqs[np.argmax(p.power[0])] == 10.0

    def test_matches_naive_dft_oracle(self):
        rng = np.random.default_rng(0)
        worst = 0.0
        for _ in range(20):
            x = rng.standard_normal(512)
            p = psd(x, 256)
            freqs, expected = naive_dft_psd(x, 256)
            np.testing.assert_array_equal(p.freqs, freqs)
            scale = np.maximum(np.abs(expected), 1e-30)
            worst = max(worst, (np.abs(p.power[0] - expected) / scale).max())
        assert worst < 1e-9

    def test_non_power_of_two_zero_padded(self):
        x = np.random.default_rng(1).standard_normal(300)
        p = psd(x, 150)
        assert p.freqs.size == 512 // 2 + 1  # padded to 512


class TestMasks:
    def test_mask_definition_on_flat_psd(self):
        freqs = np.arange(0.0, 160.5, 0.5)
        p = features.Psd(freqs=freqs, power=np.ones((1, freqs.size)))
        masked = apply_band_masks(p)
        notch = (freqs >= 57) & (freqs <= 63)
        high = freqs > 128
        np.testing.assert_array_equal(masked.power[0][notch], 0.0)
        np.testing.assert_array_equal(masked.power[0][high], 0.0)
        np.testing.assert_array_equal(masked.power[0][~(notch | high)], 1.0)

    def test_60hz_line_removed_from_gamma2(self):
        fs = 256
        t = np.arange(2 * fs) / fs
        x = np.sin(2 * np.pi * 60.0 * t)
        masked = apply_band_masks(psd(x, fs))
        sel = (masked.freqs > 50) & (masked.freqs <= 70)
        assert masked.power[0][sel].sum() < 1e-6  # only leakage tails survive

    def test_idempotent(self):
        rng = np.random.default_rng(2)
        p = psd(rng.standard_normal(512), 256)
        once = apply_band_masks(p)
        twice = apply_band_masks(once)
        np.testing.assert_array_equal(once.power, twice.power)


class TestBandPowers:
    def test_ratio_antisymmetry_structure(self):
        rng = np.random.default_rng(3)
        p = apply_band_masks(psd(rng.standard_normal(512), 256))
        feats = band_powers(p)[0]
        absolute = feats[:8]
        for idx, (i, j) in enumerate(RATIO_PAIRS):
            assert feats[16 + idx] == absolute[i] - absolute[j]

    def test_uniform_psd_relative_is_bin_count_ratio(self):
        freqs = np.fft.rfftfreq(512, 1.0 / 256)
        power = np.ones((1, freqs.size))
        p = apply_band_masks(features.Psd(freqs=freqs, power=power))
        feats = band_powers(p)[0]
        keep = features._mask_bins(freqs)
        counts = []
        for _, lo, hi in BANDS:
            counts.append(((freqs > lo) & (freqs <= hi) & keep).sum())
        counts = np.array(counts, dtype=float)
        expected = np.log((counts + FEATURE_EPS) / (counts.sum() + FEATURE_EPS))
        np.testing.assert_allclose(feats[8:16], expected, rtol=1e-12)

    def test_10hz_sinusoid_peaks_in_alpha(self):
        fs = 256
        t = np.arange(2 * fs) / fs
        p = apply_band_masks(psd(np.sin(2 * np.pi * 10 * t), fs))
        feats = band_powers(p)[0]
        assert np.argmax(feats[:8]) == 1  # alpha

    def test_all_zero_window_is_finite(self):
        p = apply_band_masks(psd(np.zeros(512), 256))
        assert np.isfinite(band_powers(p)).all()

    def test_relative_never_positive(self):
        rng = np.random.default_rng(4)
        for _ in range(10):
            p = apply_band_masks(psd(rng.standard_normal((2, 512)), 256))
            feats = band_powers(p)
            assert (feats[:, 8:16] <= 1e-15).all()

    def test_band_edges_partition_retained_bins(self):
        freqs = np.fft.rfftfreq(512, 1.0 / 256)
        keep = features._mask_bins(freqs)
        in_range = (freqs > 4) & (freqs <= 128) & keep
        membership = np.sum(features._band_masks(freqs), axis=0)
        np.testing.assert_array_equal(membership[in_range], 1)
        assert (membership[freqs <= 4] == 0).all()
        assert (membership[freqs > 128] == 0).all()

    def test_bitwise_against_oracle_band_features(self):
        rng = np.random.default_rng(5)
        x = rng.standard_normal(512)
        freqs, power = naive_dft_psd(x, 256)
        masked = power * features._mask_bins(freqs)
        ours = features._features_from_power(masked, features._band_masks(freqs))
        np.testing.assert_array_equal(ours, oracle_band_features(masked, freqs))


class TestExtractTimeline:
    def test_shape_arithmetic(self):
        rng = np.random.default_rng(6)
        rec = make_record(rng.standard_normal((4, 60 * 256)))
        tl = extract_timeline(rec)
        assert tl.features.shape == (59, 4, 44)

    def test_channel_permutation_equivariance(self):
        rng = np.random.default_rng(7)
        data = rng.standard_normal((4, 10 * 256))
        tl = extract_timeline(make_record(data))
        perm = [2, 0, 3, 1]
        tlp = extract_timeline(make_record(data[perm]))
        np.testing.assert_array_equal(tlp.features, tl.features[:, perm, :])

    def test_single_channel_slice_bitwise(self):
        rng = np.random.default_rng(8)
        data = rng.standard_normal((3, 12 * 256))
        multi = extract_timeline(make_record(data))
        single = extract_timeline(make_record(data[1:2]))
        np.testing.assert_array_equal(single.features[:, 0, :],
                                      multi.features[:, 1, :])

    def test_straddling_window_label_excluded(self):
        rec = make_record(np.random.default_rng(9).standard_normal((1, 10 * 256)))
        track = np.full(10, INTERICTAL, dtype=np.int8)
        track[5:] = PREICTAL
        tl = extract_timeline(rec, second_labels=track)
        assert tl.labels[3] == INTERICTAL
        assert tl.labels[4] == EXCLUDED  # covers seconds 4 and 5
        assert tl.labels[5] == PREICTAL

    def test_matches_chunked_vs_single_pass(self):
        rng = np.random.default_rng(10)
        rec = make_record(rng.standard_normal((2, 20 * 256)))
        a = extract_timeline(rec, chunk=4)
        b = extract_timeline(rec, chunk=10_000)
        np.testing.assert_array_equal(a.features, b.features)


class TestFeatureCache:
    def test_round_trip_bit_identical(self, tmp_path):
        rng = np.random.default_rng(11)
        rec = make_record(rng.standard_normal((2, 6 * 256)))
        tl = extract_timeline(rec)
        path = tmp_path / "cache.csv"
        write_feature_cache(tl, path)
        back = read_feature_cache(path)
        np.testing.assert_array_equal(back.features, tl.features)


@given(st.integers(0, 2 ** 31 - 1))
@settings(max_examples=30, deadline=None)
def test_fft_path_equals_naive_dft_property(seed):
    rng = np.random.default_rng(seed)
    x = rng.uniform(-10, 10, size=512)
    p = psd(x, 256)
    _, expected = naive_dft_psd(x, 256)
    scale = np.maximum(np.abs(expected), 1e-30)
    assert (np.abs(p.power[0] - expected) / scale).max() < 1e-9
