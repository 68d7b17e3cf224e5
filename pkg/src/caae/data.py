"""Dataset ingestion, synthetic faces, and the numeric encodings fed to the networks.

Ages are grouped into ten bins (0-5, 6-10, 11-15, 16-20, 21-30, 31-40, 41-50,
51-60, 61-70, 71-80) and encoded as a ten-element label with +1 at the bin and
-1 elsewhere.  Pixels live in [-1, 1].
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image as PILImage

NUM_BINS = 10
# inclusive upper edge of each bin; anything above 80 lands in the last one
BIN_UPPER_EDGES = (5, 10, 15, 20, 30, 40, 50, 60, 70, 80)
BIN_RANGES = ((0, 5), (6, 10), (11, 15), (16, 20), (21, 30),
              (31, 40), (41, 50), (51, 60), (61, 70), (71, 80))


class ManifestError(ValueError):
    """Raised when a manifest cannot be parsed; ``problems`` lists (line, message)."""

    def __init__(self, path, problems):
        self.path = str(path)
        self.problems = list(problems)
        lines = "; ".join(f"line {n}: {msg}" for n, msg in self.problems)
        super().__init__(f"invalid manifest {self.path}: {lines}")


@dataclass(frozen=True)
class DatasetRecord:
    image_path: Path
    age_years: float
    split: str = "train"

    @property
    def bin_index(self) -> int:
        return age_to_bin(self.age_years)


@dataclass
class Batch:
    images: np.ndarray  # B x H x W x C, float32 in [-1, 1]
    labels: np.ndarray  # B x 10, entries in {-1, +1}

    def __post_init__(self):
        if self.images.shape[0] != self.labels.shape[0]:
            raise ValueError(
                f"images and labels disagree on batch size: "
                f"{self.images.shape[0]} vs {self.labels.shape[0]}")

    def __len__(self):
        return self.images.shape[0]


@dataclass
class FaceDataset:
    """In-memory image stack with ages; what the trainer iterates over."""

    images: np.ndarray  # N x H x W x C float32
    ages: np.ndarray  # N float

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.ages = np.asarray(self.ages, dtype=np.float64)
        if self.images.ndim != 4:
            raise ValueError(f"images must be N x H x W x C, got shape {self.images.shape}")
        if len(self.images) != len(self.ages):
            raise ValueError("images and ages differ in length")

    def __len__(self):
        return len(self.ages)

    @property
    def image_size(self) -> int:
        return self.images.shape[1]

    @property
    def channels(self) -> int:
        return self.images.shape[3]

    @property
    def labels(self) -> np.ndarray:
        return ages_to_labels(self.ages)

    def subset(self, idx) -> "FaceDataset":
        return FaceDataset(self.images[idx], self.ages[idx])

    @classmethod
    def from_pairs(cls, pairs: Iterable[tuple[np.ndarray, float]]) -> "FaceDataset":
        pairs = list(pairs)
        if not pairs:
            raise ValueError("no samples")
        return cls(np.stack([p[0] for p in pairs]), np.array([p[1] for p in pairs]))

    @classmethod
    def from_records(cls, records: Sequence[DatasetRecord], image_size: int,
                     channels: int = 3) -> "FaceDataset":
        if not records:
            raise ValueError("no records")
        images = np.stack([load_image(r.image_path, image_size, channels) for r in records])
        return cls(images, np.array([r.age_years for r in records]))

    @classmethod
    def synthetic(cls, count: int, image_size: int, seed: int,
                  channels: int = 3) -> "FaceDataset":
        return cls.from_pairs(synth_faces(count, image_size, seed, channels=channels))


def age_to_bin(age_years: float) -> int:
    if age_years is None or not math.isfinite(age_years):
        raise ValueError(f"age must be a finite number, got {age_years!r}")
    if age_years < 0:
        raise ValueError(f"age must be non-negative, got {age_years}")
    age = math.floor(age_years)
    for b, upper in enumerate(BIN_UPPER_EDGES):
        if age <= upper:
            return b
    return NUM_BINS - 1


def bin_to_label(bin_index: int) -> np.ndarray:
    if isinstance(bin_index, bool) or int(bin_index) != bin_index:
        raise ValueError(f"bin index must be an integer, got {bin_index!r}")
    if not 0 <= bin_index < NUM_BINS:
        raise ValueError(f"bin index must lie in [0, {NUM_BINS - 1}], got {bin_index}")
    label = -np.ones(NUM_BINS, dtype=np.float32)
    label[int(bin_index)] = 1.0
    return label


def ages_to_labels(ages) -> np.ndarray:
    return np.stack([bin_to_label(age_to_bin(float(a))) for a in np.atleast_1d(ages)])


def label_to_bin(label) -> int:
    label = np.asarray(label)
    if label.shape != (NUM_BINS,) or np.sum(label == 1) != 1 or np.sum(label == -1) != NUM_BINS - 1:
        raise ValueError(f"not a valid age label: {label}")
    return int(np.argmax(label))


def normalize_image(raw) -> np.ndarray:
    raw = np.asarray(raw, dtype=np.float64)
    if raw.size and (raw.min() < 0 or raw.max() > 255 or not np.all(np.isfinite(raw))):
        raise ValueError("raw pixel values must lie in [0, 255]")
    return (raw / 127.5 - 1.0).astype(np.float32)


def denormalize_image(img) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    # floor(v + 0.5) is round-half-up; np.round would send 127.5 to 128 by luck only
    out = np.floor((img + 1.0) * 127.5 + 0.5)
    return np.clip(out, 0, 255).astype(np.uint8)


def load_image(path, image_size: int, channels: int = 3) -> np.ndarray:
    mode = {1: "L", 3: "RGB"}.get(channels)
    if mode is None:
        raise ValueError(f"channels must be 1 or 3, got {channels}")
    with PILImage.open(path) as im:
        im = im.convert(mode)
        if im.size != (image_size, image_size):
            im = im.resize((image_size, image_size), PILImage.BILINEAR)
        raw = np.asarray(im, dtype=np.uint8)
    if raw.ndim == 2:
        raw = raw[:, :, None]
    return normalize_image(raw)


def save_image(img, path) -> None:
    pix = denormalize_image(img)
    if pix.ndim == 3 and pix.shape[2] == 1:
        pix = pix[:, :, 0]
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    PILImage.fromarray(pix).save(path)


def load_manifest(path) -> list[DatasetRecord]:
    """Read a JSON-lines manifest; image paths are resolved relative to the file."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"manifest not found: {path}")
    records, problems = [], []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                problems.append((lineno, f"malformed JSON ({exc.msg})"))
                continue
            if not isinstance(obj, dict):
                problems.append((lineno, "expected a JSON object"))
                continue
            missing = [k for k in ("path", "age") if k not in obj]
            if missing:
                problems.append((lineno, "missing field " + ", ".join(f'"{k}"' for k in missing)))
                continue
            age = obj["age"]
            if isinstance(age, bool) or not isinstance(age, (int, float)) or not math.isfinite(age):
                problems.append((lineno, f'field "age" must be a number, got {age!r}'))
                continue
            if age < 0:
                problems.append((lineno, f'field "age" must be non-negative, got {age}'))
                continue
            split = obj.get("split", "train")
            if split not in ("train", "eval"):
                problems.append((lineno, f'field "split" must be "train" or "eval", got {split!r}'))
                continue
            img_path = Path(obj["path"])
            if not img_path.is_absolute():
                img_path = path.parent / img_path
            records.append(DatasetRecord(img_path, float(age), split))
    if problems:
        raise ManifestError(path, problems)
    return records


def write_manifest(records: Iterable[DatasetRecord], path, relative_to=None) -> None:
    path = Path(path)
    base = Path(relative_to) if relative_to is not None else path.parent
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            p = Path(r.image_path)
            try:
                p = p.relative_to(base)
            except ValueError:
                pass
            fh.write(json.dumps({"path": p.as_posix(), "age": r.age_years, "split": r.split}) + "\n")


# --- synthetic faces -------------------------------------------------------

def face_geometry(image_size, cx, cy, a, b):
    """Feature placement shared by the renderer and the wrinkle scorer."""
    return {
        "eye_dx": 0.55 * a, "eye_dy": -0.2 * b, "eye_r": max(1.0, 0.1 * a),
        "mouth_dy": 0.5 * b, "mouth_half_w": 0.15 * a,
        "stripe_thickness": max(1, round(image_size / 32)),
    }


def stripe_rows(cy: float, b: float, n_stripes: int) -> list[float]:
    return [cy - b + (k + 1) * 2 * b / (n_stripes + 1) for k in range(n_stripes)]


def render_face(image_size, n_stripes, cx, cy, a, b, skin, bg, channels=3) -> np.ndarray:
    s = image_size
    yy, xx = np.mgrid[0:s, 0:s].astype(np.float64) + 0.5
    geo = face_geometry(s, cx, cy, a, b)
    lum = np.full((s, s), bg)
    head = ((xx - cx) / a) ** 2 + ((yy - cy) / b) ** 2 <= 1.0
    lum[head] = skin
    stripe_val = skin - 0.5 * (skin - bg)
    t = geo["stripe_thickness"]
    for y in stripe_rows(cy, b, n_stripes):
        top = math.floor(y - t / 2 + 0.5)
        band = (yy - 0.5 >= top) & (yy - 0.5 < top + t)
        lum[head & band] = stripe_val
    dark = bg - 0.1
    for sign in (-1, 1):
        eye = (xx - (cx + sign * geo["eye_dx"])) ** 2 + (yy - (cy + geo["eye_dy"])) ** 2 <= geo["eye_r"] ** 2
        lum[eye & head] = dark
    mouth_y = cy + geo["mouth_dy"]
    mouth = (np.abs(xx - cx) <= geo["mouth_half_w"]) & (np.abs(yy - mouth_y) <= max(1.0, t / 2))
    lum[mouth & head] = dark
    if channels == 1:
        img = lum[:, :, None]
    elif channels == 3:
        # warm tint on the head, cool tint on the background; the mean over channels stays `lum`
        tint = np.where(head, 0.08, -0.08)
        img = np.stack([lum + tint, lum, lum - tint], axis=-1)
    else:
        raise ValueError(f"channels must be 1 or 3, got {channels}")
    return np.clip(img, -1.0, 1.0).astype(np.float32)


def synth_faces(count: int, image_size: int, seed: int, channels: int = 3):
    """Render ``count`` toy faces whose number of wrinkle stripes equals the age bin.

    Returns a list of ``(image, age_years)``.  Bins are assigned round-robin
    and shuffled so per-bin counts differ by at most one.
    """
    if count <= 0:
        raise ValueError(f"count must be positive, got {count}")
    if image_size < 16 or image_size % 16:
        raise ValueError(f"image_size must be a positive multiple of 16, got {image_size}")
    rng = np.random.default_rng(seed)
    bins = rng.permutation(np.arange(count) % NUM_BINS)
    out = []
    s = image_size
    for b_idx in bins:
        lo, hi = BIN_RANGES[b_idx]
        age = float(rng.integers(lo, hi + 1))
        cx = s / 2 + rng.uniform(-0.05, 0.05) * s
        cy = s / 2 + rng.uniform(-0.04, 0.04) * s
        a = s * rng.uniform(0.25, 0.31)
        b = s * rng.uniform(0.34, 0.40)
        skin = rng.uniform(0.45, 0.75)
        bg = rng.uniform(-0.9, -0.6)
        out.append((render_face(s, int(b_idx), cx, cy, a, b, skin, bg, channels), age))
    return out


# --- batching ----------------------------------------------------------------

def _as_dataset(records) -> FaceDataset:
    if isinstance(records, FaceDataset):
        return records
    records = list(records)
    if not records:
        raise ValueError("cannot batch an empty record list")
    if isinstance(records[0], DatasetRecord):
        raise TypeError("load DatasetRecords with FaceDataset.from_records before batching")
    return FaceDataset.from_pairs(records)


def epoch_permutation(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch]).permutation(n)


def make_batches(records, batch_size: int, seed: int, epoch: int) -> list[Batch]:
    """Shuffle by (seed, epoch) and cut into full batches; the short tail is dropped."""
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    ds = _as_dataset(records)
    if len(ds) == 0:
        raise ValueError("cannot batch an empty record list")
    order = epoch_permutation(len(ds), seed, epoch)
    labels = ds.labels
    batches = []
    for k in range(len(ds) // batch_size):
        idx = order[k * batch_size:(k + 1) * batch_size]
        batches.append(Batch(ds.images[idx], labels[idx]))
    return batches


def steps_per_epoch(n_records: int, batch_size: int) -> int:
    return n_records // batch_size
