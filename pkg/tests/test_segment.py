import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ascnet.segment import (
    HistogramProfile,
    compute_histogram,
    find_peaks,
    invert_image,
    mask_out_region,
    morph_open_close,
    pooled_threshold,
    prominence,
    segment_dataset,
    segment_slice,
    select_threshold,
    smooth_counts,
    threshold_mask,
    to_levels,
)

from oracles import brute_dilate, brute_erode, brute_local_maxima


def _hist(pairs):
    c = np.zeros(256, np.int64)
    for k, v in pairs:
        c[k] = v
    return HistogramProfile(c)


class TestLevels:
    def test_round_half_up(self):
        assert to_levels([0.0, 1.0, 0.5, 254 / 255, 253.5 / 255]).tolist() == [0, 255, 128, 254, 254]

    def test_rejects_out_of_range(self):
        with pytest.raises(ValueError):
            to_levels([1.01])

    def test_histogram_total(self):
        img = np.random.default_rng(0).random((7, 9))
        assert compute_histogram(img).total == 63

    def test_region_excludes_pixels(self):
        img = np.array([[1.0, 0.0], [0.0, 0.0]])
        reg = np.array([[1, 0], [0, 0]])
        h = compute_histogram(img, reg)
        assert h.total == 1 and h.bins[255] == 1


class TestPeaks:
    def test_bimodal(self):
        h = _hist([(40, 1000), (200, 300)])
        assert find_peaks(h) == [40, 200]
        assert h.peaks == [40, 200]

    def test_single_impulse(self):
        assert find_peaks(_hist([(100, 5)])) == [100]

    def test_flat(self):
        # a constant histogram is one flat run spanning the whole range
        assert find_peaks(np.ones(256)) == [127]

    def test_minor_peak_below_prominence(self):
        h = _hist([(40, 1000), (200, 20)])
        assert find_peaks(h) == [40]
        assert find_peaks(h, min_prominence_fraction=0.0) == [40, 200]

    def test_boundary_peaks(self):
        assert find_peaks(_hist([(0, 50), (255, 50)]), smoothing_window=1) == [0, 255]

    def test_empty(self):
        with pytest.raises(ValueError, match="empty histogram"):
            find_peaks(np.zeros(256))

    def test_smoothing_truncates(self):
        c = np.zeros(256)
        c[0] = 6
        y = smooth_counts(c, 5)
        assert y[0] == 2.0 and y[1] == 1.5 and y[2] == 1.2 and y[3] == 0

    def test_even_window(self):
        with pytest.raises(ValueError):
            smooth_counts(np.ones(256), 4)

    def test_prominence_cases(self):
        y = np.array([0, 5, 1, 3, 0], dtype=float)
        assert prominence(y, 1, 1) == 5.0
        assert prominence(y, 3, 3) == 2.0
        assert prominence(np.array([4.0, 1.0]), 0, 0) == 3.0

    @settings(max_examples=100, deadline=None)
    @given(arrays(np.int64, 256, elements=st.integers(0, 6)))
    def test_brute_force_oracle(self, counts):
        if counts.sum() == 0:
            return
        assert find_peaks(counts, min_prominence_fraction=0.0, smoothing_window=1) == brute_local_maxima(counts)

    def test_brute_force_oracle_dense(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            counts = rng.integers(0, 1000, 256)
            assert find_peaks(counts, 0.0, 1) == brute_local_maxima(counts)


class TestThreshold:
    def test_select(self):
        h = _hist([(40, 1000), (128, 400), (200, 300)])
        assert select_threshold(h, "bright") == 200
        assert select_threshold(h, "dark") == 40

    def test_bad_polarity(self):
        with pytest.raises(ValueError):
            select_threshold(_hist([(1, 1)]), "grey")

    def test_mask_at_threshold(self):
        img = np.array([[253 / 255, 254 / 255, 1.0]])
        assert threshold_mask(img, 254).mask.tolist() == [[0, 1, 1]]

    def test_dark_pipeline(self):
        img = np.array([[13 / 255, 12 / 255, 200 / 255]])
        # inverted levels 242, 243, 55
        assert threshold_mask(img, 242, "dark").mask.tolist() == [[1, 1, 0]]

    def test_threshold_range(self):
        with pytest.raises(ValueError):
            threshold_mask(np.zeros((2, 2)), 256)

    def test_inversion_involution(self):
        img = np.random.default_rng(3).random((5, 5))
        np.testing.assert_allclose(invert_image(invert_image(img)), img, atol=1e-15)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.integers(0, 255))
    def test_polarity_duality(self, seed, level):
        img = np.random.default_rng(seed).integers(0, 256, (8, 8)) / 255.0
        dark = threshold_mask(img, level, "dark").mask
        bright = threshold_mask(1.0 - img, level, "bright").mask
        assert np.array_equal(dark, bright)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.integers(0, 254))
    def test_monotone_in_level(self, seed, level):
        img = np.random.default_rng(seed).random((8, 8))
        hi = threshold_mask(img, level + 1).mask
        lo = threshold_mask(img, level).mask
        assert np.all(hi <= lo)


class TestMorphology:
    def test_bit_exact_against_brute_force(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            m = rng.random((32, 32)) < rng.uniform(0.3, 0.9)
            expected = brute_dilate(brute_erode(m, 5), 5).astype(np.uint8)
            assert np.array_equal(morph_open_close(m.astype(np.uint8)), expected)

    def test_removes_small_blobs(self):
        m = np.zeros((20, 20), np.uint8)
        m[2:4, 2:4] = 1
        m[8:16, 8:16] = 1
        out = morph_open_close(m)
        assert out[2:4, 2:4].sum() == 0 and out[8:16, 8:16].all()

    def test_idempotent(self):
        m = (np.random.default_rng(1).random((32, 32)) < 0.7).astype(np.uint8)
        once = morph_open_close(m)
        assert np.array_equal(morph_open_close(once), once)

    def test_non_binary(self):
        with pytest.raises(ValueError):
            morph_open_close(np.full((4, 4), 2))


class TestSegmentation:
    def _recon(self):
        img = np.full((32, 32), 0.4)
        img[10:18, 10:18] = 1.0
        return img

    def test_bright_auto(self):
        res = segment_slice(self._recon())
        assert res.threshold_level == 255 and res.mask.sum() == 64

    def test_dark_auto(self):
        res = segment_slice(1.0 - self._recon(), "dark")
        assert res.threshold_level == 255 and res.mask.sum() == 64 and res.polarity == "dark"

    def test_fixed_threshold(self):
        res = segment_slice(self._recon(), threshold_level=254)
        assert res.threshold_level == 254 and res.mask.sum() == 64

    def test_region_restricts_mask(self):
        recon = 1.0 - self._recon()
        region = np.zeros((32, 32), np.uint8)
        region[4:28, 4:28] = 1
        res = segment_slice(recon, "dark", region_mask=region)
        # the zeroed background would invert to 255; it is excluded
        assert res.mask.sum() == 64 and not res.mask[~region.astype(bool)].any()

    def test_post_process_flag(self):
        res = segment_slice(self._recon(), post_process=True)
        assert res.post_processed and res.mask.sum() == 64

    def test_dataset_pooled_level(self):
        recons = [self._recon(), np.full((32, 32), 0.4)]
        out = segment_dataset(recons)
        assert [r.threshold_level for r in out] == [255, 255]
        assert out[1].mask.sum() == 0
        assert pooled_threshold(recons) == 255

    def test_mask_out_region(self):
        img = np.ones((2, 2))
        assert mask_out_region(img, np.eye(2)).tolist() == [[1, 0], [0, 1]]
        with pytest.raises(ValueError):
            mask_out_region(img, np.ones((3, 3)))


class TestSpecExamples:
    def test_histogram_examples(self):
        assert compute_histogram(np.zeros((4, 4))).bins[0] == 16
        half = np.concatenate([np.zeros(8), np.ones(8)]).reshape(4, 4)
        h = compute_histogram(half).bins
        assert h[0] == h[255] == 8 and h.sum() == 16
        assert to_levels([0.5])[0] == 128

    def test_listed_peak_examples(self):
        counts = np.zeros(256)
        counts[:8] = [0, 5, 10, 5, 0, 8, 2, 0]
        assert find_peaks(counts, 0.0, 1) == [2, 5]
        assert find_peaks(np.arange(256, dtype=float)) == [255]
        gauss = 1000 * np.exp(-0.5 * ((np.arange(256) - 90) / 12.0) ** 2)
        assert find_peaks(np.round(gauss)) == [90]

    def test_single_peak_either_polarity(self):
        h = _hist([(77, 10)])
        assert select_threshold(h, "bright") == select_threshold(h, "dark") == 77

    def test_threshold_mask_examples(self):
        assert threshold_mask(np.zeros((4, 4)), 254).mask.sum() == 0
        one = np.zeros((4, 4))
        one[2, 1] = 1.0
        assert threshold_mask(one, 254).mask.sum() == 1
        assert threshold_mask(np.ones((4, 4)), 242, "dark").mask.sum() == 0
        assert invert_image(np.array([0.3]))[0] == pytest.approx(0.7, abs=1e-15)

    def test_morphology_examples(self):
        dot = np.zeros((32, 32), np.uint8)
        dot[10, 10] = 1
        assert morph_open_close(dot).sum() == 0
        sq = np.zeros((32, 32), np.uint8)
        sq[6:26, 6:26] = 1
        assert np.array_equal(morph_open_close(sq), sq)
        assert morph_open_close(np.zeros((32, 32), np.uint8)).sum() == 0

    def test_blob_on_background(self):
        img = np.full((32, 32), 0.1)
        img[12:20, 12:20] = 1.0
        assert np.array_equal(segment_slice(img).mask, (img == 1.0).astype(np.uint8))
        dot = np.full((32, 32), 0.1)
        dot[5, 5] = 1.0
        assert segment_slice(dot, threshold_level=255, post_process=True).mask.sum() == 0

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.booleans())
    def test_dark_equals_bright_on_inverted(self, seed, post):
        rng = np.random.default_rng(seed)
        x = rng.integers(0, 256, (16, 16)) / 255.0
        dark = segment_slice(x, "dark", post_process=post)
        bright = segment_slice(invert_image(x), "bright", post_process=post)
        assert np.array_equal(dark.mask, bright.mask) and dark.threshold_level == bright.threshold_level

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.randoms())
    def test_pooled_threshold_order_free(self, seed, rnd):
        rng = np.random.default_rng(seed)
        imgs = [rng.random((8, 8)) ** 3 for _ in range(5)]
        shuffled = imgs[:]
        rnd.shuffle(shuffled)
        for pol in ("bright", "dark"):
            assert pooled_threshold(imgs, pol) == pooled_threshold(shuffled, pol)
