"""Histogram-peak thresholding of reconstructions into binary anomaly masks."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy import ndimage

N_LEVELS = 256
OPEN_KERNEL = np.ones((5, 5), dtype=bool)
POLARITIES = ("bright", "dark")


@dataclass
class HistogramProfile:
    bins: np.ndarray
    peaks: list[int] = field(default_factory=list)

    def __post_init__(self):
        self.bins = np.asarray(self.bins, dtype=np.int64)
        if self.bins.shape != (N_LEVELS,) or (self.bins < 0).any():
            raise ValueError("histogram must hold 256 non-negative counts")

    @property
    def total(self) -> int:
        return int(self.bins.sum())


@dataclass
class SegmentationResult:
    mask: np.ndarray
    threshold_level: int
    polarity: str
    post_processed: bool = False


def _check_polarity(polarity: str) -> None:
    if polarity not in POLARITIES:
        raise ValueError(f"polarity must be one of {POLARITIES}, got {polarity!r}")


def to_levels(image) -> np.ndarray:
    """Map [0, 1] intensities to 0..255 with round-half-up."""
    v = np.asarray(image, dtype=np.float64)
    if v.size and (not np.isfinite(v).all() or v.min() < 0.0 or v.max() > 1.0):
        raise ValueError("intensities must lie in [0, 1]")
    return np.floor(v * 255.0 + 0.5).astype(np.int64)


def compute_histogram(images, regions=None) -> HistogramProfile:
    """Pooled 256-bin histogram; pixels outside ``regions`` (if given) are skipped."""
    if isinstance(images, np.ndarray) and images.ndim == 2:
        images = [images]
    if regions is not None and isinstance(regions, np.ndarray) and regions.ndim == 2:
        regions = [regions]
    bins = np.zeros(N_LEVELS, dtype=np.int64)
    for i, img in enumerate(images):
        lv = to_levels(img)
        if regions is not None:
            r = np.asarray(regions[i])
            if r.shape != lv.shape:
                raise ValueError(f"region shape {r.shape} differs from image {lv.shape}")
            lv = lv[r > 0]
        bins += np.bincount(lv.ravel(), minlength=N_LEVELS)
    return HistogramProfile(bins)


def smooth_counts(counts, window: int) -> np.ndarray:
    """Centered moving average; windows are truncated (not zero-padded) at the ends."""
    c = np.asarray(counts, dtype=np.float64)
    if window < 1 or window % 2 == 0:
        raise ValueError(f"smoothing window must be a positive odd integer, got {window}")
    if window == 1:
        return c.copy()
    half = window // 2
    csum = np.concatenate([[0.0], np.cumsum(c)])
    idx = np.arange(len(c))
    lo = np.maximum(idx - half, 0)
    hi = np.minimum(idx + half + 1, len(c))
    return (csum[hi] - csum[lo]) / (hi - lo)


def local_maxima(y: np.ndarray) -> list[tuple[int, int, int]]:
    """Plateau-aware strict local maxima as (position, run_start, run_end).

    A maximal run of equal values is a maximum when every existing neighbour
    of the run is strictly lower; its position is the middle of the run
    (rounded down). Single-sample runs are ordinary strict maxima.
    """
    out = []
    n = len(y)
    i = 0
    while i < n:
        j = i
        while j + 1 < n and y[j + 1] == y[i]:
            j += 1
        left_ok = i == 0 or y[i - 1] < y[i]
        right_ok = j == n - 1 or y[j + 1] < y[i]
        if left_ok and right_ok:
            out.append(((i + j) // 2, i, j))
        i = j + 1
    return out


def prominence(y: np.ndarray, start: int, end: int) -> float:
    """Height above the higher of the two flanking minima.

    Each flank extends from the run until a strictly higher sample or the
    array end; a flank with no samples (peak at the boundary) is ignored.
    """
    h = y[start]
    bases = []
    i = start - 1
    if i >= 0:
        lo = h
        while i >= 0 and y[i] <= h:
            lo = min(lo, y[i])
            i -= 1
        bases.append(lo)
    j = end + 1
    if j < len(y):
        lo = h
        while j < len(y) and y[j] <= h:
            lo = min(lo, y[j])
            j += 1
        bases.append(lo)
    if not bases:
        return float(h)
    return float(h - max(bases))


def find_peaks(
    hist: HistogramProfile | Sequence[float],
    min_prominence_fraction: float = 0.05,
    smoothing_window: int = 5,
) -> list[int]:
    """Peak bin indices of the smoothed histogram, in increasing order.

    Counts are smoothed with a centered moving average; a peak is a local
    maximum whose prominence is at least ``min_prominence_fraction`` times the
    largest smoothed count.
    """
    counts = hist.bins if isinstance(hist, HistogramProfile) else np.asarray(hist, dtype=np.float64)
    if counts.sum() <= 0:
        raise ValueError("empty histogram")
    y = smooth_counts(counts, smoothing_window)
    floor = min_prominence_fraction * y.max()
    peaks = [p for p, s, e in local_maxima(y) if prominence(y, s, e) >= floor and prominence(y, s, e) > 0]
    if isinstance(hist, HistogramProfile):
        hist.peaks = peaks
    return peaks


def select_threshold(hist: HistogramProfile, polarity: str = "bright", **peak_kw) -> int:
    """Rightmost peak for bright anomalies, leftmost for dark ones."""
    _check_polarity(polarity)
    peaks = hist.peaks or find_peaks(hist, **peak_kw)
    if not peaks:
        raise ValueError("histogram has no peaks")
    return int(peaks[-1] if polarity == "bright" else peaks[0])


def invert_image(image) -> np.ndarray:
    v = np.asarray(image, dtype=np.float64)
    if v.size and (v.min() < 0.0 or v.max() > 1.0):
        raise ValueError("intensities must lie in [0, 1]")
    return 1.0 - v


def threshold_mask(image, threshold_level: int, polarity: str = "bright") -> SegmentationResult:
    """mask = level >= threshold, on the inverted image for the dark pipeline."""
    _check_polarity(polarity)
    if not 0 <= int(threshold_level) < N_LEVELS:
        raise ValueError(f"threshold must be in 0..255, got {threshold_level}")
    v = invert_image(image) if polarity == "dark" else np.asarray(image, dtype=np.float64)
    mask = (to_levels(v) >= int(threshold_level)).astype(np.uint8)
    return SegmentationResult(mask, int(threshold_level), polarity)


def mask_out_region(image, region_mask) -> np.ndarray:
    """Zero everything outside the region (before any inversion)."""
    v = np.asarray(image, dtype=np.float64)
    r = np.asarray(region_mask)
    if r.shape != v.shape:
        raise ValueError(f"region shape {r.shape} differs from image {v.shape}")
    return v * (r > 0)


def morph_open_close(mask, kernel: np.ndarray = OPEN_KERNEL) -> np.ndarray:
    """Binary opening: erosion then dilation, zero padding at the border."""
    m = np.asarray(mask)
    if not np.isin(m, (0, 1)).all():
        raise ValueError("morphology expects a binary mask")
    m = m.astype(bool)
    k = np.asarray(kernel, dtype=bool)
    eroded = ndimage.binary_erosion(m, structure=k, border_value=0)
    return ndimage.binary_dilation(eroded, structure=k, border_value=0).astype(np.uint8)


def _oriented(image, polarity: str, region=None) -> np.ndarray:
    v = np.asarray(image, dtype=np.float64)
    if region is not None:
        v = mask_out_region(v, region)
    return invert_image(v) if polarity == "dark" else v


def pooled_threshold(images: Iterable, polarity: str = "bright", regions=None, **peak_kw) -> int:
    """One dataset-wide level: the rightmost peak of the pooled histogram of the
    (inverted, for dark anomalies) reconstructions. Pixels outside the region
    masks are left out of the histogram."""
    _check_polarity(polarity)
    images = list(images)
    oriented = [_oriented(img, polarity, None if regions is None else regions[i]) for i, img in enumerate(images)]
    hist = compute_histogram(oriented, regions)
    return select_threshold(hist, "bright", **peak_kw)


def segment_slice(
    recon,
    polarity: str = "bright",
    threshold_level: int | str = "auto",
    region_mask=None,
    post_process: bool = False,
) -> SegmentationResult:
    """region masking -> inversion (dark) -> threshold -> optional opening.

    With ``threshold_level="auto"`` the slice's own histogram picks the
    level; use :func:`segment_dataset` for one pooled level across slices.
    The mask never extends outside ``region_mask``.
    """
    _check_polarity(polarity)
    if threshold_level == "auto":
        regions = None if region_mask is None else [region_mask]
        threshold_level = pooled_threshold([recon], polarity, regions)
    v = _oriented(recon, polarity, region_mask)
    res = threshold_mask(v, int(threshold_level), "bright")
    res.polarity = polarity
    if region_mask is not None:
        res.mask = res.mask * (np.asarray(region_mask) > 0).astype(np.uint8)
    if post_process:
        res.mask = morph_open_close(res.mask)
        res.post_processed = True
    return res


def segment_dataset(
    recons,
    polarity: str = "bright",
    threshold_level: int | str = "auto",
    regions=None,
    post_process: bool = False,
) -> list[SegmentationResult]:
    recons = list(recons)
    if threshold_level == "auto":
        threshold_level = pooled_threshold(recons, polarity, regions)
    return [
        segment_slice(r, polarity, threshold_level, None if regions is None else regions[i], post_process)
        for i, r in enumerate(recons)
    ]
