"""Slice datasets: volume normalization, slicing, resizing, balancing, folds,
region masks, on-disk layouts and the synthetic desk-scale corpus."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image

IMAGE_SUFFIXES = (".png", ".tif", ".tiff", ".bmp", ".pgm")


class Role(str, Enum):
    QUERY = "query"
    REFERENCE = "reference"


@dataclass(frozen=True, eq=False)
class ImageSlice:
    pixels: np.ndarray
    subject_id: str = ""
    slice_index: int = 0

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.ndim != 2 or px.size == 0:
            raise ValueError(f"slice must be a non-empty 2D array, got shape {px.shape}")
        if not np.all(np.isfinite(px)) or px.min() < 0.0 or px.max() > 1.0:
            raise ValueError("slice intensities must be finite and within [0, 1]")
        px.setflags(write=False)
        object.__setattr__(self, "pixels", px)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def name(self) -> str:
        return f"{self.subject_id}_{self.slice_index:04d}"


def _as_binary(mask) -> np.ndarray:
    m = np.asarray(mask)
    if not np.isin(m, (0, 1)).all():
        raise ValueError("masks must be binary (values in {0, 1})")
    m = m.astype(np.uint8)
    m.setflags(write=False)
    return m


@dataclass(frozen=True, eq=False)
class SliceDataset:
    """Ordered slices with optional ground-truth masks and region masks.

    ``regions`` holds the organ/anatomy support used to mask out irrelevant
    background (the liver mask for CT lesions); it is never used as a label.
    """

    slices: tuple[ImageSlice, ...]
    role: Role = Role.QUERY
    masks: tuple[np.ndarray, ...] | None = None
    regions: tuple[np.ndarray, ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "slices", tuple(self.slices))
        object.__setattr__(self, "role", Role(self.role))
        for attr in ("masks", "regions"):
            arrs = getattr(self, attr)
            if arrs is None:
                continue
            arrs = tuple(_as_binary(a) for a in arrs)
            if len(arrs) != len(self.slices):
                raise ValueError(f"{attr} must parallel slices ({len(arrs)} vs {len(self.slices)})")
            for s, a in zip(self.slices, arrs):
                if a.shape != s.pixels.shape:
                    raise ValueError(f"{attr} shape {a.shape} differs from slice {s.pixels.shape}")
            object.__setattr__(self, attr, arrs)
        if self.role is Role.REFERENCE and self.masks is not None:
            raise ValueError("reference datasets are anomaly-free and cannot carry masks")

    def __len__(self) -> int:
        return len(self.slices)

    def __getitem__(self, i) -> ImageSlice:
        return self.slices[i]

    def stack(self) -> np.ndarray:
        """(N, H, W) float32 array of all pixels."""
        return np.stack([s.pixels for s in self.slices]).astype(np.float32)

    def mask_stack(self) -> np.ndarray | None:
        return None if self.masks is None else np.stack(self.masks)

    def region_stack(self) -> np.ndarray | None:
        return None if self.regions is None else np.stack(self.regions)

    @property
    def names(self) -> list[str]:
        return [s.name for s in self.slices]

    def subset(self, indices: Sequence[int]) -> "SliceDataset":
        idx = list(indices)
        pick = lambda arrs: None if arrs is None else tuple(arrs[i] for i in idx)
        return SliceDataset(
            tuple(self.slices[i] for i in idx), self.role, pick(self.masks), pick(self.regions)
        )

    def with_role(self, role: Role | str) -> "SliceDataset":
        role = Role(role)
        return replace(self, role=role, masks=None if role is Role.REFERENCE else self.masks)


def concat(datasets: Iterable[SliceDataset], role: Role | str) -> SliceDataset:
    datasets = list(datasets)
    slices = tuple(s for d in datasets for s in d.slices)

    def join(attr):
        parts = [getattr(d, attr) for d in datasets if len(d)]
        if not parts or any(p is None for p in parts):
            return None
        return tuple(a for p in parts for a in p)

    role = Role(role)
    return SliceDataset(slices, role, None if role is Role.REFERENCE else join("masks"), join("regions"))


@dataclass(frozen=True)
class FoldSplit:
    fold_id: int
    train_reference: SliceDataset
    train_query: SliceDataset
    held_out: SliceDataset


# --------------------------------------------------------------------------- volumes


def normalize_volume(volume) -> np.ndarray:
    """Min-max scale a whole 3D volume to [0, 1] (one affine map for every slice)."""
    v = np.asarray(volume, dtype=np.float64)
    if v.size == 0:
        raise ValueError("empty volume")
    if not np.all(np.isfinite(v)):
        raise ValueError("invalid intensities: volume contains NaN or Inf")
    lo, hi = v.min(), v.max()
    if hi <= lo:
        raise ValueError("degenerate volume: constant intensity")
    out = (v - lo) / (hi - lo)
    return np.clip(out, 0.0, 1.0)


def extract_slices(
    volume, axis: int = 2, drop_empty: bool = True, subject_id: str = "", mask=None
) -> SliceDataset:
    """Cut a normalized volume into axial slices along ``axis``.

    ``slice_index`` keeps the position in the volume, so dropped empty slices
    leave gaps. A parallel ``mask`` volume, if given, is sliced identically.
    """
    v = np.asarray(volume, dtype=np.float64)
    if v.ndim != 3:
        raise ValueError(f"expected a 3D volume, got shape {v.shape}")
    if mask is not None:
        mask = np.asarray(mask)
        if mask.shape != v.shape:
            raise ValueError(f"mask shape {mask.shape} differs from volume {v.shape}")
        mask = (mask > 0).astype(np.uint8)
    slices, masks = [], []
    for k in range(v.shape[axis]):
        px = np.take(v, k, axis=axis)
        if drop_empty and px.sum() == 0:
            continue
        slices.append(ImageSlice(px, subject_id, k))
        if mask is not None:
            masks.append(np.take(mask, k, axis=axis))
    return SliceDataset(tuple(slices), Role.QUERY, tuple(masks) if mask is not None else None)


def resize_slice(sl: ImageSlice, target: tuple[int, int]) -> ImageSlice:
    """Bilinear resize to ``target`` (h, w), clamped back into [0, 1]."""
    h, w = (int(t) for t in target)
    if h <= 0 or w <= 0:
        raise ValueError(f"target size must be positive, got {target}")
    px = sl.pixels
    if px.shape == (h, w):
        return sl
    out = _bilinear(px, h, w)
    return ImageSlice(np.clip(out, 0.0, 1.0), sl.subject_id, sl.slice_index)


def _bilinear(px: np.ndarray, h: int, w: int) -> np.ndarray:
    # half-pixel centers, edge-clamped; a constant image stays exactly constant
    def axis_weights(n_in, n_out):
        x = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        x = np.clip(x, 0, n_in - 1)
        i0 = np.floor(x).astype(int)
        i1 = np.minimum(i0 + 1, n_in - 1)
        return i0, i1, x - i0

    r0, r1, fr = axis_weights(px.shape[0], h)
    c0, c1, fc = axis_weights(px.shape[1], w)
    # a + (b - a) * t keeps constants exact
    top = px[r0][:, c0] + (px[r0][:, c1] - px[r0][:, c0]) * fc
    bot = px[r1][:, c0] + (px[r1][:, c1] - px[r1][:, c0]) * fc
    return top + (bot - top) * fr[:, None]


def resize_mask(mask: np.ndarray, target: tuple[int, int]) -> np.ndarray:
    """Nearest-neighbour resize for binary masks."""
    m = np.asarray(mask)
    h, w = target
    if m.shape == (h, w):
        return m.astype(np.uint8)
    rows = np.minimum(((np.arange(h) + 0.5) * m.shape[0] / h).astype(int), m.shape[0] - 1)
    cols = np.minimum(((np.arange(w) + 0.5) * m.shape[1] / w).astype(int), m.shape[1] - 1)
    return (m[rows][:, cols] > 0).astype(np.uint8)


def resize_dataset(ds: SliceDataset, target: tuple[int, int]) -> SliceDataset:
    target = tuple(int(t) for t in target)
    rs = lambda arrs: None if arrs is None else tuple(resize_mask(a, target) for a in arrs)
    return SliceDataset(
        tuple(resize_slice(s, target) for s in ds.slices), ds.role, rs(ds.masks), rs(ds.regions)
    )


def apply_region_mask(sl: ImageSlice, mask) -> ImageSlice:
    m = np.asarray(mask)
    if m.shape != sl.pixels.shape:
        raise ValueError(f"region mask shape {m.shape} differs from slice {sl.pixels.shape}")
    return ImageSlice(sl.pixels * (m > 0), sl.subject_id, sl.slice_index)


# --------------------------------------------------------------------------- sets


def balance_sets(a: SliceDataset, b: SliceDataset, seed: int) -> tuple[SliceDataset, SliceDataset]:
    """Pad the smaller set with uniformly drawn duplicates of its own members."""
    if len(a) == 0 or len(b) == 0:
        raise ValueError("cannot balance an empty dataset")
    rng = np.random.default_rng(seed)

    def pad(ds: SliceDataset, n: int) -> SliceDataset:
        extra = rng.integers(0, len(ds), size=n - len(ds))
        return ds.subset(list(range(len(ds))) + extra.tolist())

    n = max(len(a), len(b))
    if len(a) < n:
        a = pad(a, n)
    elif len(b) < n:
        b = pad(b, n)
    return a, b


def split_crossval(
    corpus: SliceDataset, folds: int = 2, train_fraction: float = 0.9, seed: int = 0
) -> list[FoldSplit]:
    """Patient-wise k-fold split.

    Subjects are shuffled and dealt into ``folds`` disjoint groups; group k is
    held out in fold k. The remaining subjects are split patient-wise into a
    ``train_fraction`` part and the rest. Anomaly-free slices of the first part
    form the reference set; its anomalous slices plus every slice of the second
    part form the training query set. ``corpus.masks`` decide "anomalous".
    """
    if corpus.masks is None:
        raise ValueError("cross-validation needs anomaly annotations (masks)")
    if not 0.0 < train_fraction <= 1.0:
        raise ValueError("train_fraction must be in (0, 1]")
    subjects = sorted({s.subject_id for s in corpus.slices})
    if len(subjects) < folds or folds < 2:
        raise ValueError(f"need at least {folds} subjects for {folds} folds, got {len(subjects)}")
    rng = np.random.default_rng(seed)
    order = [subjects[i] for i in rng.permutation(len(subjects))]
    groups = [order[k::folds] for k in range(folds)]
    by_subject: dict[str, list[int]] = {}
    for i, s in enumerate(corpus.slices):
        by_subject.setdefault(s.subject_id, []).append(i)

    out = []
    for k, held in enumerate(groups):
        train_subjects = [s for g, grp in enumerate(groups) if g != k for s in grp]
        n_minor = int(math.floor(len(train_subjects) * (1.0 - train_fraction) + 1e-9))
        minor = set(train_subjects[len(train_subjects) - n_minor :]) if n_minor else set()
        ref_idx, query_idx = [], []
        for subj in train_subjects:
            for i in by_subject[subj]:
                if subj in minor or corpus.masks[i].any():
                    query_idx.append(i)
                else:
                    ref_idx.append(i)
        held_idx = [i for subj in held for i in by_subject[subj]]
        out.append(
            FoldSplit(
                fold_id=k,
                train_reference=corpus.subset(ref_idx).with_role(Role.REFERENCE),
                train_query=corpus.subset(query_idx),
                held_out=corpus.subset(held_idx),
            )
        )
    return out


# --------------------------------------------------------------------------- synthetic corpus


@dataclass
class SynthConfig:
    n_ref: int = 500
    n_query: int = 300
    size: int = 64
    polarity: str = "bright"
    radius_min: float = 4.0
    radius_max: float = 10.0
    tissue: float = 0.45
    lesion_contrast: float = 0.55
    noise: float = 0.02

    def validate(self) -> None:
        if self.polarity not in ("bright", "dark"):
            raise ValueError(f"polarity must be 'bright' or 'dark', got {self.polarity!r}")
        if self.size <= 0 or self.n_ref < 0 or self.n_query < 0:
            raise ValueError("size must be positive and counts non-negative")
        if not 0 < self.radius_min <= self.radius_max:
            raise ValueError("need 0 < radius_min <= radius_max")
        if 2 * self.radius_max >= self.size:
            raise ValueError(
                f"anomaly radius {self.radius_max} too large for image size {self.size}"
            )


def _anatomy(rng: np.random.Generator, size: int, tissue: float):
    """Randomly posed soft-edged ellipse "organ" with a darker inner structure.

    Returns (content, edge, rho): the intensity map inside the organ, the soft
    organ edge in [0, 1] and the normalized elliptical radius.
    """
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    c = size / 2 + rng.uniform(-0.04, 0.04, size=2) * size
    a, b = size * rng.uniform(0.36, 0.42), size * rng.uniform(0.30, 0.36)
    th = rng.uniform(-0.35, 0.35)
    dy, dx = yy - c[0], xx - c[1]
    u = (dx * np.cos(th) + dy * np.sin(th)) / a
    v = (-dx * np.sin(th) + dy * np.cos(th)) / b
    rho = np.sqrt(u**2 + v**2)
    edge = 1.0 / (1.0 + np.exp((rho - 1.0) * size / 2.5))
    ri = np.sqrt((u / 0.35) ** 2 + (v / 0.22) ** 2)
    inner = 1.0 / (1.0 + np.exp((ri - 1.0) * size / 6.0))
    t = tissue + rng.uniform(-0.04, 0.04)
    content = t - inner * t * rng.uniform(0.35, 0.5)
    return content, edge, rho


def _blob_site(rng, rho, size, radius):
    # rejection-sample a center inside the organ, clear of the rim and the inner structure
    for _ in range(1000):
        cy, cx = rng.uniform(radius + 1, size - radius - 1, size=2)
        r_here = rho[int(cy), int(cx)]
        if 0.3 < r_here < 0.85 - 1.2 * radius / size:
            return cy, cx
    return size / 2, size / 2


def synth_generate(config: SynthConfig, seed: int) -> tuple[SliceDataset, SliceDataset]:
    """Reference (anomaly-free) and query (one blob each, with masks) datasets.

    Images are ``edge * content`` for bright polarity and ``edge * (1 - content)``
    for dark, where content holds tissue, the inner structure and (query only)
    a blob at ``tissue + lesion_contrast``. Inside the organ an inverted dark
    image therefore matches the bright one drawn from the same seed. Organ
    supports are returned as ``regions`` for both sets.
    """
    config.validate()
    rng = np.random.default_rng(seed)
    n, bright = config.size, config.polarity == "bright"
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64) + 0.5

    def make(with_blob: bool, idx: int, prefix: str):
        content, edge, rho = _anatomy(rng, n, config.tissue)
        mask = None
        if with_blob:
            r = rng.uniform(config.radius_min, config.radius_max)
            cy, cx = _blob_site(rng, rho, n, r)
            d = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2)
            w = 1.0 / (1.0 + np.exp((d - r) * 3.0))
            content = content * (1 - w) + (config.tissue + config.lesion_contrast) * w
            mask = (w >= 0.5).astype(np.uint8)
        content = np.clip(content + rng.normal(0.0, config.noise, size=content.shape), 0.0, 1.0)
        img = edge * (content if bright else 1.0 - content)
        return ImageSlice(np.clip(img, 0.0, 1.0), f"{prefix}{idx:05d}", 0), mask, (edge >= 0.5)

    ref = [make(False, i, "ref") for i in range(config.n_ref)]
    qry = [make(True, i, "qry") for i in range(config.n_query)]
    reference = SliceDataset(
        tuple(s for s, _, _ in ref), Role.REFERENCE, None, tuple(r for _, _, r in ref)
    )
    query = SliceDataset(
        tuple(s for s, _, _ in qry),
        Role.QUERY,
        tuple(m for _, m, _ in qry),
        tuple(r for _, _, r in qry),
    )
    return reference, query


# --------------------------------------------------------------------------- disk layouts


def read_image(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im)
        mode = im.mode
    if arr.ndim == 3:
        raise ValueError(f"{path}: expected single-channel grayscale, got mode {mode}")
    if arr.dtype == np.uint8:
        return arr.astype(np.float64) / 255.0
    if arr.dtype in (np.uint16, np.int32, np.int16) or mode.startswith("I"):
        return np.clip(arr.astype(np.float64) / 65535.0, 0.0, 1.0)
    if arr.dtype == bool:
        return arr.astype(np.float64)
    raise ValueError(f"{path}: unsupported pixel type {arr.dtype}")


def write_image(path: Path, pixels: np.ndarray, bits: int = 16) -> None:
    px = np.clip(np.asarray(pixels, dtype=np.float64), 0.0, 1.0)
    if bits == 16:
        im = Image.fromarray(np.floor(px * 65535 + 0.5).astype(np.uint16))
    elif bits == 8:
        im = Image.fromarray(np.floor(px * 255 + 0.5).astype(np.uint8))
    else:
        raise ValueError("bits must be 8 or 16")
    path.parent.mkdir(parents=True, exist_ok=True)
    im.save(path, format="PNG")


def write_mask(path: Path, mask: np.ndarray) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray((np.asarray(mask) > 0).astype(np.uint8) * 255).save(path, format="PNG")


def read_mask(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        return (np.asarray(im) > 0).astype(np.uint8)


def list_images(directory: Path) -> list[Path]:
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"not a directory: {directory}")
    return sorted(p for p in directory.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def _parse_name(stem: str) -> tuple[str, int]:
    subj, _, idx = stem.rpartition("_")
    if subj and idx.isdigit():
        return subj, int(idx)
    return stem, 0


def load_image_dir(
    directory: Path,
    role: Role | str = Role.QUERY,
    mask_dir: Path | None = None,
    region_dir: Path | None = None,
    size: tuple[int, int] | None = None,
) -> SliceDataset:
    """Load a directory of grayscale images named ``<subject>_<index>.png``.

    Masks and regions, when given, must mirror the image filenames.
    """
    paths = list_images(directory)
    if not paths:
        raise ValueError(f"no images found in {directory}")
    slices = []
    for p in paths:
        subj, idx = _parse_name(p.stem)
        slices.append(ImageSlice(read_image(p), subj, idx))

    def mirrored(d):
        if d is None:
            return None
        out = []
        for p in paths:
            q = Path(d) / p.name
            if not q.exists():
                raise FileNotFoundError(f"missing mirrored file {q}")
            out.append(read_mask(q))
        return tuple(out)

    role = Role(role)
    ds = SliceDataset(
        tuple(slices), role, mirrored(mask_dir) if role is Role.QUERY else None, mirrored(region_dir)
    )
    return resize_dataset(ds, size) if size is not None else ds


def save_dataset(ds: SliceDataset, root: Path, image_dir: str) -> None:
    root = Path(root)
    for i, s in enumerate(ds.slices):
        name = f"{s.name}.png"
        write_image(root / image_dir / name, s.pixels)
        if ds.masks is not None:
            write_mask(root / "masks" / name, ds.masks[i])
        if ds.regions is not None:
            write_mask(root / "regions" / name, ds.regions[i])


def load_volume(path: Path) -> np.ndarray:
    path = Path(path)
    name = path.name.lower()
    if name.endswith(".npy"):
        return np.load(path)
    if name.endswith(".npz"):
        with np.load(path) as z:
            return z[z.files[0]]
    if name.endswith(".nii") or name.endswith(".nii.gz"):
        try:
            import nibabel
        except ImportError as exc:  # pragma: no cover - optional dependency
            raise ImportError("reading NIfTI volumes requires nibabel (pip install nibabel)") from exc
        return np.asarray(nibabel.load(str(path)).get_fdata())
    raise ValueError(f"unsupported volume format: {path}")


def load_manifest(
    manifest: Path, size: tuple[int, int], axis: int = 2, drop_empty: bool = True
) -> SliceDataset:
    """Volumetric corpus from a CSV manifest with columns ``subject_id,image[,mask]``.

    Each volume is min-max normalized as a whole, cut into slices along ``axis``
    (empty slices dropped) and resized to ``size``. Paths are relative to the
    manifest's directory.
    """
    manifest = Path(manifest)
    with open(manifest, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows or "subject_id" not in rows[0] or "image" not in rows[0]:
        raise ValueError(f"{manifest}: manifest needs subject_id and image columns")
    parts = []
    for row in rows:
        vol = normalize_volume(load_volume(manifest.parent / row["image"]))
        mask = None
        if row.get("mask"):
            mask = load_volume(manifest.parent / row["mask"])
        ds = extract_slices(vol, axis=axis, drop_empty=drop_empty, subject_id=row["subject_id"], mask=mask)
        parts.append(resize_dataset(ds, size))
    return concat(parts, Role.QUERY)
