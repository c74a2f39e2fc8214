"""Image ingestion, preprocessing, manifests, synthetic data, and minibatching.

File formats owned here:
  - binary PGM ("P5", maxval <= 255), comments tolerated in the header;
  - tab-separated manifests, one ``relative-path<TAB>label`` per line (UTF-8, LF);
  - a small ``key value`` stats file persisting the training-split
    normalization constants next to the manifest.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from . import tensor
from .errors import ArgumentError, ConfigError, GeometryError, PgmParseError
from .tensor import Rng, Tensor

CLASS_NAMES = ("normal", "pneumonia")

# Synthetic-generator constants. Tuned so that an opacity blob always beats
# the background modulation: max-minus-median separates the classes with a
# wide margin before any training happens.
SYNTH_BASE = 0.40
SYNTH_WAVE_AMPS = (0.05, 0.03)
SYNTH_WAVE_FREQ = (0.5, 2.0)      # cycles across the image
SYNTH_NOISE_STD = 0.02
SYNTH_BLOB_COUNT = (1, 3)         # inclusive
SYNTH_BLOB_AMP = (0.35, 0.50)
SYNTH_BLOB_SIGMA = (0.05, 0.10)   # fraction of image side
SYNTH_BLOB_CENTER = (0.25, 0.75)  # fraction of image side


# -- images and PGM -----------------------------------------------------------


@dataclass
class Image:
    """8-bit grayscale raster, row-major."""

    width: int
    height: int
    pixels: np.ndarray  # uint8, shape (height, width)

    def __post_init__(self):
        self.pixels = np.ascontiguousarray(self.pixels, dtype=np.uint8)
        if self.pixels.shape != (self.height, self.width):
            raise ArgumentError(
                f"pixel block {self.pixels.shape} does not match {self.height}x{self.width}"
            )


def _skip_header_token(data: bytes, pos: int) -> tuple[bytes, int]:
    """Next whitespace-delimited header token, skipping '#' comments."""
    n = len(data)
    while pos < n:
        b = data[pos]
        if b in b" \t\r\n":
            pos += 1
        elif b == ord("#"):
            while pos < n and data[pos] not in b"\r\n":
                pos += 1
        else:
            break
    if pos >= n:
        raise PgmParseError("unexpected end of header", pos)
    start = pos
    while pos < n and data[pos] not in b" \t\r\n#":
        pos += 1
    return data[start:pos], pos


def _header_int(data: bytes, pos: int, what: str) -> tuple[int, int]:
    token, end = _skip_header_token(data, pos)
    if not token.isdigit():
        raise PgmParseError(f"{what} must be a decimal integer, got {token[:16]!r}", pos)
    if len(token) > 9:
        raise PgmParseError(f"{what} is absurdly large", pos)
    return int(token), end


def load_pgm(data: bytes) -> Image:
    """Strict binary PGM parser; never reads past the declared payload."""
    if len(data) < 2 or data[:2] != b"P5":
        raise PgmParseError("not a binary PGM (missing P5 magic)", 0)
    width, pos = _header_int(data, 2, "width")
    height, pos = _header_int(data, pos, "height")
    maxval, pos = _header_int(data, pos, "maxval")
    if width < 1 or height < 1:
        raise PgmParseError(f"degenerate dimensions {width}x{height}", 2)
    if not (1 <= maxval <= 255):
        raise PgmParseError(f"maxval {maxval} out of supported range [1, 255]", pos)
    if pos >= len(data) or data[pos] not in b" \t\r\n":
        raise PgmParseError("expected single whitespace before payload", pos)
    pos += 1
    expected = width * height
    payload = data[pos:pos + expected]
    if len(payload) < expected:
        raise PgmParseError(
            f"payload truncated: need {expected} bytes, have {len(payload)}", pos + len(payload)
        )
    if len(data) > pos + expected:
        raise PgmParseError("trailing bytes after payload", pos + expected)
    pixels = np.frombuffer(payload, dtype=np.uint8).reshape(height, width)
    return Image(width=width, height=height, pixels=pixels.copy())


def save_pgm(image: Image) -> bytes:
    header = f"P5\n{image.width} {image.height}\n255\n".encode("ascii")
    return header + image.pixels.tobytes()


# -- preprocessing --------------------------------------------------------------


def resize_bilinear(image: Image, out_w: int, out_h: int) -> Image:
    """Bilinear resample with half-pixel-centered sampling; rounds half away from zero."""
    if out_w < 1 or out_h < 1:
        raise GeometryError(f"target dimensions must be >= 1, got {out_w}x{out_h}")
    if (out_w, out_h) == (image.width, image.height):
        return Image(out_w, out_h, image.pixels.copy())
    src = image.pixels.astype(np.float64)
    xs = (np.arange(out_w) + 0.5) * (image.width / out_w) - 0.5
    ys = (np.arange(out_h) + 0.5) * (image.height / out_h) - 0.5
    x0 = np.clip(np.floor(xs), 0, image.width - 1).astype(np.int64)
    y0 = np.clip(np.floor(ys), 0, image.height - 1).astype(np.int64)
    x1 = np.minimum(x0 + 1, image.width - 1)
    y1 = np.minimum(y0 + 1, image.height - 1)
    fx = np.clip(xs - x0, 0.0, 1.0)
    fy = np.clip(ys - y0, 0.0, 1.0)
    top = src[y0][:, x0] * (1 - fx) + src[y0][:, x1] * fx
    bot = src[y1][:, x0] * (1 - fx) + src[y1][:, x1] * fx
    out = top * (1 - fy)[:, None] + bot * fy[:, None]
    return Image(out_w, out_h, np.clip(np.floor(out + 0.5), 0, 255).astype(np.uint8))


def center_crop(image: Image, out_w: int, out_h: int) -> Image:
    """Centered window; odd margins resolve toward the top-left."""
    if out_w < 1 or out_h < 1 or out_w > image.width or out_h > image.height:
        raise GeometryError(
            f"crop {out_w}x{out_h} does not fit inside {image.width}x{image.height}"
        )
    x0 = (image.width - out_w) // 2
    y0 = (image.height - out_h) // 2
    return Image(out_w, out_h, image.pixels[y0:y0 + out_h, x0:x0 + out_w].copy())


@dataclass(frozen=True)
class NormStats:
    """Training-split pixel statistics on the [0, 1] scale."""

    mu: float
    sigma: float
    degenerate: bool = False  # sigma was 0 and has been replaced by 1

    def to_text(self) -> str:
        return f"mu {self.mu!r}\nsigma {self.sigma!r}\ndegenerate {int(self.degenerate)}\n"

    @staticmethod
    def from_text(text: str) -> "NormStats":
        kv = dict(line.split(" ", 1) for line in text.strip().splitlines())
        return NormStats(mu=float(kv["mu"]), sigma=float(kv["sigma"]),
                         degenerate=bool(int(kv["degenerate"])))


def compute_norm_stats(images: list[Image]) -> NormStats:
    if not images:
        raise ArgumentError("cannot compute statistics over zero images")
    total = sum(img.pixels.size for img in images)
    mean = sum(float(img.pixels.sum()) for img in images) / total / 255.0
    var = sum(float(((img.pixels.astype(np.float64) / 255.0 - mean) ** 2).sum()) for img in images) / total
    sigma = float(np.sqrt(var))
    if sigma == 0.0:
        return NormStats(mu=mean, sigma=1.0, degenerate=True)
    return NormStats(mu=mean, sigma=sigma)


def normalize(image: Image, stats: NormStats) -> Tensor:
    """pixel/255, then (x - mu)/sigma, as a [1, H, W] tensor in the active precision."""
    scaled = image.pixels.astype(np.float64) / 255.0
    out = (scaled - stats.mu) / stats.sigma
    return tensor.from_numpy(out[None, :, :])


# -- manifests --------------------------------------------------------------------


@dataclass
class DatasetManifest:
    entries: list[tuple[str, str]]           # (relative path, label string)
    class_names: tuple[str, ...]
    split: str = "train"

    def __post_init__(self):
        declared = set(self.class_names)
        seen = set()
        for path, label in self.entries:
            if label not in declared:
                raise ArgumentError(f"label {label!r} not in declared classes {sorted(declared)}")
            if path in seen:
                raise ArgumentError(f"duplicate path {path!r} in manifest")
            seen.add(path)

    @property
    def class_to_index(self) -> dict[str, int]:
        return {name: i for i, name in enumerate(self.class_names)}

    def __len__(self) -> int:
        return len(self.entries)


def save_manifest(manifest: DatasetManifest, path: str) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for rel, label in manifest.entries:
            fh.write(f"{rel}\t{label}\n")


def load_manifest(path: str, class_names: tuple[str, ...] | None = None,
                  split: str = "train") -> DatasetManifest:
    entries = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            if "\t" not in line:
                raise ArgumentError(f"{path}:{lineno}: expected 'path<TAB>label'")
            rel, label = line.split("\t", 1)
            entries.append((rel, label))
    if class_names is None:
        class_names = tuple(sorted({label for _, label in entries}))
    return DatasetManifest(entries=entries, class_names=class_names, split=split)


def split_manifest(manifest: DatasetManifest, fractions: tuple[float, float, float],
                   rng: Rng) -> tuple[DatasetManifest, DatasetManifest, DatasetManifest]:
    """Seeded stratified split; a partition, per-class counts within 1 of exact."""
    if abs(sum(fractions) - 1.0) > 1e-9 or any(f < 0 for f in fractions):
        raise ConfigError(f"split fractions must be nonnegative and sum to 1, got {fractions}")
    buckets: tuple[list, list, list] = ([], [], [])
    for class_index, name in enumerate(manifest.class_names):
        members = [e for e in manifest.entries if e[1] == name]
        members = rng.child(class_index).shuffle(members)
        n = len(members)
        edges = [0]
        acc = 0.0
        for f in fractions:
            acc += f
            edges.append(int(round(acc * n)))
        edges[-1] = n
        for k in range(3):
            buckets[k].extend(members[edges[k]:edges[k + 1]])
    tags = ("train", "val", "test")
    out = []
    for k, tag in enumerate(tags):
        if fractions[k] > 0 and not buckets[k]:
            raise ConfigError(f"{tag} split is empty despite fraction {fractions[k]}")
        out.append(DatasetManifest(entries=buckets[k], class_names=manifest.class_names, split=tag))
    return tuple(out)


# -- synthetic dataset ---------------------------------------------------------------


def _synth_one(rng: Rng, hw: int, with_blobs: bool) -> Image:
    coords = (np.arange(hw) + 0.5) / hw
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    canvas = np.full((hw, hw), SYNTH_BASE)
    for amp in SYNTH_WAVE_AMPS:
        f = SYNTH_WAVE_FREQ[0] + rng.uniform_array(1)[0] * (SYNTH_WAVE_FREQ[1] - SYNTH_WAVE_FREQ[0])
        angle = rng.uniform_array(1)[0] * 2.0 * np.pi
        phase = rng.uniform_array(1)[0] * 2.0 * np.pi
        canvas += amp * np.sin(2.0 * np.pi * f * (np.cos(angle) * xx + np.sin(angle) * yy) + phase)
    canvas += SYNTH_NOISE_STD * rng.normal_array(hw * hw).reshape(hw, hw)
    if with_blobs:
        count = SYNTH_BLOB_COUNT[0] + rng.randint(0, SYNTH_BLOB_COUNT[1] - SYNTH_BLOB_COUNT[0] + 1)
        for _ in range(count):
            u = rng.uniform_array(4)
            cx = SYNTH_BLOB_CENTER[0] + u[0] * (SYNTH_BLOB_CENTER[1] - SYNTH_BLOB_CENTER[0])
            cy = SYNTH_BLOB_CENTER[0] + u[1] * (SYNTH_BLOB_CENTER[1] - SYNTH_BLOB_CENTER[0])
            sigma = SYNTH_BLOB_SIGMA[0] + u[2] * (SYNTH_BLOB_SIGMA[1] - SYNTH_BLOB_SIGMA[0])
            amp = SYNTH_BLOB_AMP[0] + u[3] * (SYNTH_BLOB_AMP[1] - SYNTH_BLOB_AMP[0])
            canvas += amp * np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2.0 * sigma ** 2))
    canvas = np.clip(canvas, 0.0, 1.0)
    return Image(hw, hw, np.floor(canvas * 255.0 + 0.5).astype(np.uint8))


def synth_generate(rng: Rng, n_per_class: int, hw: int) -> tuple[list[Image], list[int]]:
    """Deterministic two-class set: smooth backgrounds (0) vs added bright blobs (1)."""
    if hw < 16:
        raise ArgumentError(f"hw must be >= 16, got {hw}")
    if n_per_class < 1:
        raise ArgumentError(f"n_per_class must be >= 1, got {n_per_class}")
    images, labels = [], []
    for cls in (0, 1):
        for i in range(n_per_class):
            images.append(_synth_one(rng.child(cls, i), hw, with_blobs=cls == 1))
            labels.append(cls)
    return images, labels


def blob_response(image: Image) -> float:
    """Max-minus-median brightness after 3x3 box smoothing; high for blob images."""
    px = image.pixels.astype(np.float64)
    acc = np.zeros((image.height - 2, image.width - 2))
    for dy in range(3):
        for dx in range(3):
            acc += px[dy:dy + image.height - 2, dx:dx + image.width - 2]
    smooth = acc / 9.0
    return float(smooth.max() - np.median(smooth))


# -- materialized datasets and batching -------------------------------------------------


@dataclass
class ArrayDataset:
    """Preprocessed samples ready for training: inputs, integer labels, stable ids."""

    x: Tensor                     # [n, 1, H, W]
    labels: np.ndarray            # int64 [n]
    ids: list[str]
    class_names: tuple[str, ...]

    def __len__(self) -> int:
        return self.x.shape[0]


@dataclass
class Batch:
    x: Tensor                     # [N, C, H, W]
    y_onehot: Tensor              # [N, c]
    ids: list[str]


def dataset_from_images(images: list[Image], labels: list[int], ids: list[str],
                        stats: NormStats, class_names: tuple[str, ...] = CLASS_NAMES,
                        target_hw: int | None = None) -> ArrayDataset:
    if not images:
        raise ConfigError("dataset has no samples")
    planes = []
    for img in images:
        if target_hw is not None and (img.width, img.height) != (target_hw, target_hw):
            side = min(img.width, img.height)
            img = center_crop(img, side, side)
            img = resize_bilinear(img, target_hw, target_hw)
        planes.append(normalize(img, stats).array)
    x = tensor.from_numpy(np.stack(planes))
    return ArrayDataset(x=x, labels=np.asarray(labels, dtype=np.int64), ids=list(ids),
                        class_names=class_names)


def load_split(manifest: DatasetManifest, root: str, stats: NormStats,
               target_hw: int | None = None) -> ArrayDataset:
    images, labels, ids = [], [], []
    index = manifest.class_to_index
    for rel, label in manifest.entries:
        with open(os.path.join(root, rel), "rb") as fh:
            images.append(load_pgm(fh.read()))
        labels.append(index[label])
        ids.append(rel)
    return dataset_from_images(images, labels, ids, stats, manifest.class_names, target_hw)


def load_images(manifest: DatasetManifest, root: str) -> list[Image]:
    out = []
    for rel, _ in manifest.entries:
        with open(os.path.join(root, rel), "rb") as fh:
            out.append(load_pgm(fh.read()))
    return out


def batches(dataset: ArrayDataset, batch_size: int, rng: Rng | None, shuffle: bool):
    """Minibatch iterator; seeded order, last partial batch kept."""
    if batch_size < 1:
        raise ArgumentError(f"batch_size must be >= 1, got {batch_size}")
    n = len(dataset)
    if shuffle:
        if rng is None:
            raise ArgumentError("shuffling requires an rng")
        order = rng.permutation(n)
    else:
        order = np.arange(n)
    c = len(dataset.class_names)
    eye = np.eye(c, dtype=dataset.x.dtype)
    for start in range(0, n, batch_size):
        pick = order[start:start + batch_size]
        x = Tensor(dataset.x.array[pick].copy())
        y = Tensor(eye[dataset.labels[pick]].copy())
        yield Batch(x=x, y_onehot=y, ids=[dataset.ids[i] for i in pick])
