"""Synthetic carotid-plaque ultrasound phantoms.

Each sample is a plaque-centred ROI: homogeneous speckled tissue with one
plaque blob whose brightness encodes the echogenicity class. Images are
quantised to 8 bits at generation time so that the PGM round-trip is exact.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import ndimage

CLASS_NAMES = ("hyperechoic", "hypoechoic", "mixed")
HYPERECHOIC, HYPOECHOIC, MIXED = 0, 1, 2

MANIFEST_NAME = "manifest.csv"
MANIFEST_COLUMNS = ("id", "image_path", "mask_path", "class_label", "pixel_spacing_mm")

# fraction of the inscribed ellipse a blob may occupy; leaves room for
# boundary perturbation and placement jitter
_FILL_LIMIT = 0.6
_MARGIN_PX = 2
_MAX_ATTEMPTS = 200


class DatasetError(Exception):
    """Base class for dataset persistence errors."""


class MissingManifestError(DatasetError):
    pass


class EmptyDatasetError(DatasetError):
    pass


class CorruptImageError(DatasetError):
    pass


class ManifestMismatchError(DatasetError):
    pass


def _default_contrasts() -> dict[int, tuple[float, float]]:
    return {
        HYPERECHOIC: (0.72, 0.38),
        HYPOECHOIC: (0.10, 0.38),
        MIXED: (0.42, 0.38),
    }


@dataclass(frozen=True)
class PhantomConfig:
    image_height: int = 96
    image_width: int = 144
    pixel_spacing: float = 0.1
    # class -> (plaque mean, background mean)
    class_contrasts: dict[int, tuple[float, float]] = field(default_factory=_default_contrasts)
    speckle_scale: float = 0.45
    area_range: tuple[float, float] = (10.0, 50.0)
    # half-spread of the bright/dark sub-blobs of mixed plaques
    mixed_spread: float = 0.3
    seed: int = 0

    def __post_init__(self):
        if self.image_height <= 0 or self.image_width <= 0:
            raise ValueError("image dimensions must be positive")
        if not self.pixel_spacing > 0:
            raise ValueError("pixel_spacing must be > 0")
        if set(self.class_contrasts) != {HYPERECHOIC, HYPOECHOIC, MIXED}:
            raise ValueError("class_contrasts must be keyed by exactly the classes 0, 1, 2")
        for cls, pair in self.class_contrasts.items():
            if len(pair) != 2 or not all(0.0 <= v <= 1.0 for v in pair):
                raise ValueError(f"class_contrasts[{cls}] must be two values in [0, 1]")
        lo, hi = self.area_range
        if not lo < hi:
            raise ValueError("area_range min must be < max")
        if lo <= 0:
            raise ValueError("area_range min must be positive")
        if self.speckle_scale < 0:
            raise ValueError("speckle_scale must be >= 0")

    def max_feasible_area(self) -> float:
        """Largest plaque area (mm^2) the generator can place in the image."""
        a = self.image_width / 2 - _MARGIN_PX
        b = self.image_height / 2 - _MARGIN_PX
        if a <= 0 or b <= 0:
            return 0.0
        return _FILL_LIMIT * math.pi * a * b * self.pixel_spacing**2

    def check_feasible(self) -> None:
        # a blob must hold at least a handful of pixels to be a plaque
        min_area = max(self.area_range[0], 4 * self.pixel_spacing**2)
        if min_area > self.max_feasible_area():
            raise ValueError(
                f"area_range {self.area_range} mm^2 cannot fit a "
                f"{self.image_height}x{self.image_width} image at "
                f"{self.pixel_spacing} mm/pixel (max {self.max_feasible_area():.2f} mm^2)"
            )


@dataclass
class Sample:
    image: np.ndarray  # (H, W) float32 in [0, 1]
    mask: np.ndarray  # (H, W) uint8 in {0, 1}
    class_label: int
    pixel_spacing: float
    id: str

    def __post_init__(self):
        if self.image.shape != self.mask.shape or self.image.ndim != 2:
            raise ValueError(f"{self.id}: image {self.image.shape} and mask {self.mask.shape} must be equal 2-D shapes")
        if self.class_label not in (0, 1, 2):
            raise ValueError(f"{self.id}: class_label must be 0, 1 or 2, got {self.class_label}")
        if not np.isin(self.mask, (0, 1)).all():
            raise ValueError(f"{self.id}: mask values must be 0 or 1")
        if not self.mask.any():
            raise ValueError(f"{self.id}: mask has no plaque pixels")
        if not np.isfinite(self.image).all():
            raise ValueError(f"{self.id}: image has non-finite values")

    @property
    def class_name(self) -> str:
        return CLASS_NAMES[self.class_label]

    def plaque_area_mm2(self) -> float:
        return float(self.mask.sum()) * self.pixel_spacing**2

    def equals(self, other: "Sample") -> bool:
        return (
            self.id == other.id
            and self.class_label == other.class_label
            and self.pixel_spacing == other.pixel_spacing
            and self.image.dtype == other.image.dtype
            and np.array_equal(self.image, other.image)
            and np.array_equal(self.mask, other.mask)
        )


@dataclass
class DatasetSplit:
    train: list[Sample]
    val: list[Sample]
    test: list[Sample]
    split_seed: int

    def ids(self) -> dict[str, list[str]]:
        return {name: [s.id for s in part] for name, part in self.parts().items()}

    def parts(self) -> dict[str, list[Sample]]:
        return {"train": self.train, "val": self.val, "test": self.test}


def quantize(image: np.ndarray) -> np.ndarray:
    """Quantise intensities in [0, 1] to the 8-bit grid used on disk."""
    u8 = np.clip(np.rint(np.asarray(image, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    return from_uint8(u8)


def from_uint8(u8: np.ndarray) -> np.ndarray:
    return u8.astype(np.float32) / np.float32(255.0)


def _rng_for(rng_state) -> np.random.Generator:
    if isinstance(rng_state, np.random.Generator):
        return rng_state
    return np.random.default_rng(rng_state)


def _polar_blob(shape, center, semi_axes, harmonics, scale) -> np.ndarray:
    h, w = shape
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    dy = yy - center[0]
    dx = xx - center[1]
    theta = np.arctan2(dy, dx)
    a, b = semi_axes[0] * scale, semi_axes[1] * scale
    # ellipse radius along theta (a horizontal, b vertical)
    r_ell = a * b / np.sqrt((b * np.cos(theta)) ** 2 + (a * np.sin(theta)) ** 2)
    bump = np.ones_like(theta)
    for k, amp, phase in harmonics:
        bump += amp * np.cos(k * theta + phase)
    return np.hypot(dx, dy) <= r_ell * bump


def _clean_blob(blob: np.ndarray) -> np.ndarray:
    """Keep the largest 4-connected component and fill its holes."""
    labels, n = ndimage.label(blob)
    if n == 0:
        return blob
    if n > 1:
        sizes = ndimage.sum_labels(blob, labels, index=np.arange(1, n + 1))
        blob = labels == (int(np.argmax(sizes)) + 1)
    return ndimage.binary_fill_holes(blob)


def _draw_mask(config: PhantomConfig, rng: np.random.Generator) -> np.ndarray:
    h, w = config.image_height, config.image_width
    px_area = config.pixel_spacing**2
    lo, hi = config.area_range
    hi = min(hi, config.max_feasible_area())
    for _ in range(_MAX_ATTEMPTS):
        target_px = rng.uniform(lo, hi) / px_area
        aspect = rng.uniform(1.2, 2.4)
        # semi-axes for a unit-scale ellipse of the target area
        b = math.sqrt(target_px / (math.pi * aspect))
        a = aspect * b
        harmonics = [(k, rng.uniform(0.0, 0.08), rng.uniform(0, 2 * math.pi)) for k in (2, 3, 4)]
        reach = 1.0 + sum(amp for _, amp, _ in harmonics)
        half_w, half_h = a * reach + _MARGIN_PX, b * reach + _MARGIN_PX
        if 2 * half_w > w - 1 or 2 * half_h > h - 1:
            continue
        center = (rng.uniform(half_h, h - 1 - half_h), rng.uniform(half_w, w - 1 - half_w))
        blob = _clean_blob(_polar_blob((h, w), center, (a, b), harmonics, 1.0))
        if blob.sum() == 0:
            continue
        # one rescale pass to land on the target pixel count
        scale = math.sqrt(target_px / blob.sum())
        blob = _clean_blob(_polar_blob((h, w), center, (a, b), harmonics, scale))
        area = blob.sum() * px_area
        if lo <= area <= config.area_range[1] and not (blob[0].any() or blob[-1].any() or blob[:, 0].any() or blob[:, -1].any()):
            return blob.astype(np.uint8)
    raise RuntimeError("failed to place a plaque within area_range; check the config")


def _speckle(shape, scale: float, rng: np.random.Generator) -> np.ndarray:
    if scale == 0:
        return np.ones(shape)
    k = 1.0 / scale**2
    field = rng.gamma(k, 1.0 / k, size=shape)
    # speckle grains span a couple of pixels
    field = ndimage.gaussian_filter(field, sigma=0.7, mode="reflect")
    return field / field.mean()


def generate_phantom(config: PhantomConfig, class_label: int, rng_state, sample_id: str | None = None) -> Sample:
    """Draw one phantom of the given class.

    ``rng_state`` is a seed (int or SeedSequence) or a numpy Generator that
    is advanced in place.
    """
    config.check_feasible()
    if class_label not in (0, 1, 2):
        raise ValueError(f"unknown plaque class {class_label}")
    rng = _rng_for(rng_state)
    h, w = config.image_height, config.image_width
    mask = _draw_mask(config, rng)
    plaque_mean, bg_mean = config.class_contrasts[class_label]

    base = np.full((h, w), bg_mean, dtype=np.float64)
    # slow tissue gain variation, +-8%
    gain = ndimage.gaussian_filter(rng.standard_normal((h, w)), sigma=12, mode="reflect")
    gain = 1.0 + 0.08 * gain / (np.abs(gain).max() + 1e-12)
    base *= gain

    inside = mask.astype(bool)
    if class_label == MIXED:
        # split the plaque by a random line through its centroid
        ys, xs = np.nonzero(inside)
        cy, cx = ys.mean(), xs.mean()
        phi = rng.uniform(0, math.pi)
        side = (ys - cy) * math.cos(phi) - (xs - cx) * math.sin(phi) > 0
        n_bright = int(side.sum())
        n_dark = side.size - n_bright
        spread = config.mixed_spread
        if n_bright == 0 or n_dark == 0:
            values = np.full(side.size, plaque_mean)
        else:
            bright = plaque_mean + spread
            # dark level keeps the area-weighted mean at plaque_mean
            dark = plaque_mean - spread * n_bright / n_dark
            values = np.where(side, bright, dark)
        base[ys, xs] = np.clip(values, 0.02, 0.98)
    else:
        base[inside] = plaque_mean

    image = np.clip(base * _speckle((h, w), config.speckle_scale, rng), 0.0, 1.0)
    return Sample(
        image=quantize(image),
        mask=mask,
        class_label=int(class_label),
        pixel_spacing=float(config.pixel_spacing),
        id=sample_id or f"{CLASS_NAMES[class_label]}",
    )


def generate_dataset(config: PhantomConfig, counts: Sequence[int]) -> list[Sample]:
    """Generate ``counts[c]`` phantoms of each class c, deterministically in ``config.seed``."""
    if len(counts) != 3 or any(c < 0 for c in counts):
        raise ValueError("counts must be three non-negative integers")
    config.check_feasible()
    total = int(sum(counts))
    # one independent stream per sample so generation order does not matter
    streams = np.random.SeedSequence(config.seed).spawn(total)
    samples = []
    i = 0
    for cls, n in enumerate(counts):
        for _ in range(int(n)):
            sid = f"s{i:05d}_{CLASS_NAMES[cls][:5]}"
            samples.append(generate_phantom(config, cls, np.random.default_rng(streams[i]), sample_id=sid))
            i += 1
    return samples


# ---------------------------------------------------------------------------
# PGM I/O
# ---------------------------------------------------------------------------


def write_pgm(path, array: np.ndarray) -> None:
    array = np.asarray(array)
    if array.dtype != np.uint8 or array.ndim != 2:
        raise ValueError("PGM writer expects a 2-D uint8 array")
    h, w = array.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(array).tobytes())


def read_pgm(path) -> np.ndarray:
    """Read a binary (P5) 8-bit PGM."""
    path = Path(path)
    data = path.read_bytes()
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise CorruptImageError(f"{path}: truncated PGM header")
        tokens.append(data[start:pos])
    if tokens[0] != b"P5":
        raise CorruptImageError(f"{path}: not a binary PGM (magic {tokens[0]!r})")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise CorruptImageError(f"{path}: malformed PGM header") from None
    if w <= 0 or h <= 0 or maxval != 255:
        raise CorruptImageError(f"{path}: unsupported PGM geometry {w}x{h} maxval {maxval}")
    pos += 1  # single whitespace after maxval
    payload = data[pos:]
    if len(payload) != w * h:
        raise CorruptImageError(f"{path}: expected {w * h} pixel bytes, found {len(payload)}")
    return np.frombuffer(payload, dtype=np.uint8).reshape(h, w).copy()


def save_dataset(samples: Iterable[Sample], directory) -> Path:
    """Write PGM files and ``manifest.csv``; returns the manifest path."""
    directory = Path(directory)
    (directory / "images").mkdir(parents=True, exist_ok=True)
    (directory / "masks").mkdir(parents=True, exist_ok=True)
    rows = []
    for s in samples:
        img_rel = f"images/{s.id}.pgm"
        mask_rel = f"masks/{s.id}.pgm"
        u8 = np.clip(np.rint(s.image.astype(np.float64) * 255.0), 0, 255).astype(np.uint8)
        if not np.array_equal(from_uint8(u8), s.image):
            raise ValueError(f"{s.id}: image is not on the 8-bit grid; pass it through quantize() first")
        write_pgm(directory / img_rel, u8)
        write_pgm(directory / mask_rel, (s.mask * 255).astype(np.uint8))
        rows.append((s.id, img_rel, mask_rel, str(s.class_label), repr(float(s.pixel_spacing))))
    manifest = directory / MANIFEST_NAME
    tmp = manifest.with_suffix(".csv.tmp")
    with open(tmp, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_COLUMNS)
        writer.writerows(rows)
    os.replace(tmp, manifest)
    return manifest


def load_dataset(directory) -> list[Sample]:
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"dataset directory {directory} does not exist")
    manifest = directory / MANIFEST_NAME
    if not manifest.exists():
        if not any(directory.iterdir()):
            raise EmptyDatasetError(f"{directory} is empty")
        raise MissingManifestError(f"{manifest} not found")
    with open(manifest, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != MANIFEST_COLUMNS:
            raise ManifestMismatchError(f"{manifest}: expected columns {','.join(MANIFEST_COLUMNS)}, got {reader.fieldnames}")
        rows = list(reader)
    if not rows:
        raise EmptyDatasetError(f"{manifest} lists no samples")

    samples = []
    seen = set()
    for row in rows:
        sid = row["id"]
        if sid in seen:
            raise ManifestMismatchError(f"{manifest}: duplicate id {sid}")
        seen.add(sid)
        paths = {}
        for key in ("image_path", "mask_path"):
            p = directory / row[key]
            if not p.is_file():
                raise ManifestMismatchError(f"{manifest}: {key} for {sid} references missing file {row[key]}")
            paths[key] = p
        image_u8 = read_pgm(paths["image_path"])
        mask_u8 = read_pgm(paths["mask_path"])
        if image_u8.shape != mask_u8.shape:
            raise ManifestMismatchError(f"{sid}: image {image_u8.shape} and mask {mask_u8.shape} differ in size")
        if not np.isin(mask_u8, (0, 255)).all():
            raise CorruptImageError(f"{paths['mask_path']}: mask values must be 0 or 255")
        try:
            label = int(row["class_label"])
            spacing = float(row["pixel_spacing_mm"])
            samples.append(Sample(from_uint8(image_u8), (mask_u8 // 255).astype(np.uint8), label, spacing, sid))
        except ValueError as exc:
            raise ManifestMismatchError(f"{manifest}: bad row for {sid}: {exc}") from None
    return samples


# ---------------------------------------------------------------------------
# Splitting
# ---------------------------------------------------------------------------


def _largest_remainder(n: int, ratios: Sequence[float]) -> list[int]:
    quotas = [n * r for r in ratios]
    sizes = [math.floor(q) for q in quotas]
    order = sorted(range(len(ratios)), key=lambda k: (-(quotas[k] - sizes[k]), k))
    for k in order[: n - sum(sizes)]:
        sizes[k] += 1
    return sizes


def _stratified_sizes(class_counts: Sequence[int], ratios: Sequence[float]) -> list[list[int]]:
    """Per-class split sizes whose column totals hit the global targets."""
    n = sum(class_counts)
    targets = _largest_remainder(n, ratios)
    cells = [[math.floor(c * r) for r in ratios] for c in class_counts]
    class_left = [c - sum(row) for c, row in zip(class_counts, cells)]
    split_left = [t - sum(row[k] for row in cells) for k, t in enumerate(targets)]
    candidates = sorted(
        ((c * r - math.floor(c * r), ci, k) for ci, c in enumerate(class_counts) for k, r in enumerate(ratios)),
        key=lambda t: (-t[0], t[1], t[2]),
    )
    for frac, ci, k in candidates:
        if frac > 0 and class_left[ci] > 0 and split_left[k] > 0:
            cells[ci][k] += 1
            class_left[ci] -= 1
            split_left[k] -= 1
    # greedy can strand a few units; place them wherever a split is short
    for ci in range(len(class_counts)):
        for k in range(len(ratios)):
            move = min(class_left[ci], split_left[k])
            cells[ci][k] += move
            class_left[ci] -= move
            split_left[k] -= move
    return cells


def split_dataset(samples: Sequence[Sample], ratios=(0.6, 0.2, 0.2), seed: int = 0) -> DatasetSplit:
    """Stratified train/val/test partition.

    Totals follow largest-remainder rounding of ``len(samples) * ratios``;
    each class is spread over the splits as evenly as those totals allow.
    """
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must be three non-negative numbers summing to 1, got {ratios}")
    if len(samples) < 3:
        raise ValueError(f"need at least 3 samples to split, got {len(samples)}")
    ids = [s.id for s in samples]
    if len(set(ids)) != len(ids):
        raise ValueError("sample ids must be unique")

    by_class: dict[int, list[Sample]] = {0: [], 1: [], 2: []}
    for s in samples:
        by_class[s.class_label].append(s)
    classes = sorted(by_class)
    sizes = _stratified_sizes([len(by_class[c]) for c in classes], ratios)

    rng = np.random.default_rng(seed)
    parts: list[list[Sample]] = [[], [], []]
    for c, row in zip(classes, sizes):
        members = sorted(by_class[c], key=lambda s: s.id)
        order = rng.permutation(len(members))
        start = 0
        for k, size in enumerate(row):
            parts[k].extend(members[j] for j in order[start : start + size])
            start += size
    for part in parts:
        part.sort(key=lambda s: s.id)
    return DatasetSplit(train=parts[0], val=parts[1], test=parts[2], split_seed=int(seed))


def split_from_ids(samples: Sequence[Sample], ids: dict[str, list[str]], seed: int) -> DatasetSplit:
    """Rebuild a split from a stored id partition."""
    lookup = {s.id: s for s in samples}
    missing = [i for part in ids.values() for i in part if i not in lookup]
    if missing:
        raise ManifestMismatchError(f"split references unknown ids: {missing[:5]}")
    return DatasetSplit(
        train=[lookup[i] for i in ids["train"]],
        val=[lookup[i] for i in ids["val"]],
        test=[lookup[i] for i in ids["test"]],
        split_seed=seed,
    )
