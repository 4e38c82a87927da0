"""Dice scoring, aggregation and diagnostic figures."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .segment import N_LEVELS, compute_histogram, find_peaks, smooth_counts, to_levels


@dataclass
class EvalReport:
    per_slice_dice: list[tuple[str, float]]
    mean_dice: float
    fold_id: int | None = None
    post_processed: bool = False
    grouping: str = "slice"

    def write_csv(self, path: Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(("slice_id", "dice"))
            for name, d in self.per_slice_dice:
                w.writerow((name, repr(float(d))))
            w.writerow(("mean", repr(float(self.mean_dice))))

    def summary(self) -> str:
        return (
            f"mean Dice {self.mean_dice:.4f} over {len(self.per_slice_dice)} {self.grouping}s"
            f" (post_processed={self.post_processed})"
        )


def dice_score(pred, gt) -> float:
    """2|P & G| / (|P| + |G|); two empty masks score 1.0."""
    p, g = np.asarray(pred), np.asarray(gt)
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {g.shape}")
    if not (np.isin(p, (0, 1)).all() and np.isin(g, (0, 1)).all()):
        raise ValueError("dice_score expects binary masks")
    p, g = p.astype(bool), g.astype(bool)
    denom = int(p.sum()) + int(g.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int(np.logical_and(p, g).sum()) / denom


def subject_of(name: str) -> str:
    subj, _, idx = name.rpartition("_")
    return subj if subj and idx.isdigit() else name


def evaluate_dataset(
    preds: Sequence,
    gts: Sequence,
    names: Sequence[str] | None = None,
    grouping: str = "slice",
    fold_id: int | None = None,
    post_processed: bool | None = None,
) -> EvalReport:
    """Per-item Dice and its arithmetic mean.

    ``preds`` may hold arrays or SegmentationResults. ``grouping="subject"``
    stacks each subject's slices (by ``<subject>_<index>`` names) into one
    volume pair before scoring.
    """
    preds = list(preds)
    gts = list(gts)
    if len(preds) != len(gts):
        raise ValueError(f"misaligned collections: {len(preds)} predictions vs {len(gts)} masks")
    if not preds:
        raise ValueError("nothing to evaluate")
    if post_processed is None:
        post_processed = bool(getattr(preds[0], "post_processed", False))
    preds = [getattr(p, "mask", p) for p in preds]
    names = list(names) if names is not None else [f"slice_{i:04d}" for i in range(len(preds))]
    if len(names) != len(preds):
        raise ValueError("names must align with predictions")
    if grouping == "slice":
        items = [(n, dice_score(p, g)) for n, p, g in zip(names, preds, gts)]
    elif grouping == "subject":
        groups: dict[str, list[int]] = {}
        for i, n in enumerate(names):
            groups.setdefault(subject_of(n), []).append(i)
        items = [
            (s, dice_score(np.stack([preds[i] for i in idx]), np.stack([gts[i] for i in idx])))
            for s, idx in groups.items()
        ]
    else:
        raise ValueError(f"grouping must be 'slice' or 'subject', got {grouping!r}")
    mean = float(np.mean([d for _, d in items]))
    return EvalReport(items, mean, fold_id, post_processed, grouping)


# --------------------------------------------------------------------------- figures


def _figure_backend():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def _save(fig, out_path: Path) -> Path:
    out_path = Path(out_path)
    if out_path.parent and not out_path.parent.exists():
        raise OSError(f"output directory does not exist: {out_path.parent}")
    fig.savefig(out_path, dpi=100, metadata={"Software": None})
    return out_path


def _hist_axes(ax, image) -> None:
    counts = compute_histogram(np.asarray(image)).bins
    ax.bar(np.arange(N_LEVELS), counts, width=1.0, color="0.2")
    ax.set_xlim(-1, N_LEVELS)
    ax.set_yticks([])


def emit_histogram_figure(images: Sequence[np.ndarray], out_path: Path, labels=None) -> Path:
    """One row per image: the image and its 256-bin histogram."""
    plt = _figure_backend()
    images = [np.asarray(i, dtype=np.float64) for i in images]
    if not images:
        raise ValueError("no images to plot")
    fig, axes = plt.subplots(len(images), 2, figsize=(6, 2.4 * len(images)), squeeze=False)
    for r, img in enumerate(images):
        axes[r, 0].imshow(img, cmap="gray", vmin=0, vmax=1)
        axes[r, 0].set_axis_off()
        if labels:
            axes[r, 0].set_title(labels[r], fontsize=8)
        _hist_axes(axes[r, 1], img)
    fig.tight_layout()
    try:
        return _save(fig, out_path)
    finally:
        plt.close(fig)


BRANCH_COLUMNS = ("I_in", "I_fc", "I_wc", "I_ro", "M_gt", "M_est", "M_est ∩ I_in")


def emit_branch_panel(I_in, I_fc, I_wc, I_ro, M_est, out_path: Path, M_gt=None) -> Path:
    """One row per sample with the branch outputs, masks and the overlay column."""
    plt = _figure_backend()
    cols = [np.asarray(a, dtype=np.float64) for a in (I_in, I_fc, I_wc, I_ro)]
    cols = [c[None] if c.ndim == 2 else c for c in cols]
    est = np.asarray(M_est, dtype=np.float64)
    est = est[None] if est.ndim == 2 else est
    gt = None
    if M_gt is not None:
        gt = np.asarray(M_gt, dtype=np.float64)
        gt = gt[None] if gt.ndim == 2 else gt
    n = cols[0].shape[0]
    if any(c.shape != cols[0].shape for c in cols + [est] + ([gt] if gt is not None else [])):
        raise ValueError("all panel inputs must share dimensions")
    overlay = est * cols[0]
    rows = [cols[0], cols[1], cols[2], cols[3], gt if gt is not None else np.zeros_like(est), est, overlay]
    fig, axes = plt.subplots(n, len(rows), figsize=(1.6 * len(rows), 1.7 * n), squeeze=False)
    for r in range(n):
        for c, (title, arr) in enumerate(zip(BRANCH_COLUMNS, rows)):
            ax = axes[r, c]
            ax.imshow(arr[r], cmap="gray", vmin=0, vmax=1)
            ax.set_axis_off()
            if r == 0:
                ax.set_title(title, fontsize=8)
    fig.tight_layout()
    try:
        return _save(fig, out_path)
    finally:
        plt.close(fig)


def peak_ranges(counts: np.ndarray, peaks: Sequence[int], window: int = 5) -> list[tuple[int, int]]:
    """Level range owned by each peak: from the valley before it to the valley after it."""
    y = smooth_counts(counts, window)
    bounds = [0]
    for a, b in zip(peaks, peaks[1:]):
        bounds.append(a + int(np.argmin(y[a : b + 1])))
    bounds.append(N_LEVELS)
    ranges = []
    for k in range(len(peaks)):
        lo = bounds[k] if k == 0 else bounds[k] + 1
        ranges.append((lo, bounds[k + 1] if k + 1 < len(peaks) else N_LEVELS - 1))
    return ranges


def equalize(image: np.ndarray, support: np.ndarray) -> np.ndarray:
    """Histogram equalization of the pixels in ``support``; zero elsewhere."""
    out = np.zeros_like(image, dtype=np.float64)
    vals = image[support]
    if vals.size == 0:
        return out
    lv = to_levels(vals)
    cdf = np.cumsum(np.bincount(lv, minlength=N_LEVELS)).astype(np.float64)
    cdf /= cdf[-1]
    out[support] = cdf[lv]
    return out


def peak_subimages(image, **peak_kw) -> tuple[list[int], list[np.ndarray]]:
    img = np.asarray(image, dtype=np.float64)
    hist = compute_histogram(img)
    peaks = find_peaks(hist, **peak_kw)
    levels = to_levels(img)
    subs = []
    for lo, hi in peak_ranges(hist.bins, peaks, peak_kw.get("smoothing_window", 5)):
        subs.append(equalize(img, (levels >= lo) & (levels <= hi)))
    return peaks, subs


def emit_disjoincy_strip(I_fc, I_wc, out_path: Path, **peak_kw) -> Path:
    """Per branch: the image, its histogram, then one equalized sub-image per peak."""
    plt = _figure_backend()
    rows = []
    for name, img in (("I_fc", I_fc), ("I_wc", I_wc)):
        peaks, subs = peak_subimages(img, **peak_kw)
        rows.append((name, np.asarray(img, dtype=np.float64), peaks, subs))
    ncol = 2 + max(len(r[3]) for r in rows)
    fig, axes = plt.subplots(2, ncol, figsize=(1.8 * ncol, 4), squeeze=False)
    for r, (name, img, peaks, subs) in enumerate(rows):
        axes[r, 0].imshow(img, cmap="gray", vmin=0, vmax=1)
        axes[r, 0].set_title(name, fontsize=8)
        _hist_axes(axes[r, 1], img)
        for c in range(2, ncol):
            ax = axes[r, c]
            if c - 2 < len(subs):
                ax.imshow(subs[c - 2], cmap="gray", vmin=0, vmax=1)
                ax.set_title(f"peak {peaks[c - 2]}", fontsize=8)
        for ax in axes[r]:
            if ax is not axes[r, 1]:
                ax.set_axis_off()
    fig.tight_layout()
    try:
        return _save(fig, out_path)
    finally:
        plt.close(fig)
