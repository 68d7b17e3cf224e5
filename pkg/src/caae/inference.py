"""Traversals on a trained model: reconstruction, age sweeps, interpolation, grids.

Only E and G are used here.  Inputs are single channels-last images in [-1, 1]
(numpy or torch); outputs are float32 numpy arrays.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .data import NUM_BINS, bin_to_label, denormalize_image, save_image
from .networks import ModelParams, encode, generate

GRID_BORDER = 2


@dataclass
class SweepResult:
    source: np.ndarray
    code: np.ndarray  # the single latent code shared by every output
    outputs: list[np.ndarray]  # one per age bin, ascending

    @property
    def codes(self) -> np.ndarray:
        return self.code


@dataclass
class MorphSequence:
    frames: list[np.ndarray]
    endpoints: tuple[np.ndarray, np.ndarray]
    label: np.ndarray

    def smoothness(self) -> float:
        """Mean RMS pixel change between consecutive frames."""
        return float(np.mean([np.sqrt(np.mean((b - a) ** 2)) for a, b in zip(self.frames, self.frames[1:])]))


def _single(x) -> np.ndarray:
    x = np.asarray(x.detach().cpu().numpy() if isinstance(x, torch.Tensor) else x, dtype=np.float32)
    if x.ndim != 3:
        raise ValueError(f"expected a single H x W x C image, got shape {x.shape}")
    return x


def _np(t: torch.Tensor) -> np.ndarray:
    return t.detach().cpu().numpy().astype(np.float32)


@torch.no_grad()
def encode_images(params: ModelParams, images, batch_size: int = 256) -> np.ndarray:
    images = np.asarray(images)
    return np.concatenate([_np(encode(params, images[i:i + batch_size]))
                           for i in range(0, len(images), batch_size)])


@torch.no_grad()
def generate_images(params: ModelParams, codes, labels, batch_size: int = 256) -> np.ndarray:
    codes, labels = np.asarray(codes), np.asarray(labels)
    return np.concatenate([_np(generate(params, codes[i:i + batch_size], labels[i:i + batch_size]))
                           for i in range(0, len(codes), batch_size)])


@torch.no_grad()
def reconstruct(params: ModelParams, x, l) -> np.ndarray:
    """G(E(x), l) for one image."""
    x = _single(x)
    l = np.asarray(l, dtype=np.float32)
    if l.shape != (NUM_BINS,):
        raise ValueError(f"expected a {NUM_BINS}-element label, got shape {l.shape}")
    z = encode(params, x[None])
    return _np(generate(params, z, l[None]))[0]


@torch.no_grad()
def age_sweep(params: ModelParams, x) -> SweepResult:
    """Encode once, then decode the same code under every age label."""
    x = _single(x)
    z = encode(params, x[None])
    labels = np.stack([bin_to_label(b) for b in range(NUM_BINS)])
    out = _np(generate(params, z.expand(NUM_BINS, -1), labels))
    return SweepResult(source=x, code=_np(z)[0], outputs=list(out))


@torch.no_grad()
def interpolate(params: ModelParams, x1, x2, l, steps: int) -> MorphSequence:
    """Frames from G((1 - t) z1 + t z2, l) at t = k / (steps - 1)."""
    if steps < 2:
        raise ValueError(f"steps must be >= 2, got {steps}")
    x1, x2 = _single(x1), _single(x2)
    l = np.asarray(l, dtype=np.float32)
    z = encode(params, np.stack([x1, x2]))
    z1, z2 = z[0], z[1]
    k = torch.arange(steps, dtype=z.dtype)
    # both weights as exact quotients so swapping x1 and x2 reverses the frames bit-for-bit
    a = (steps - 1 - k) / (steps - 1)
    b = k / (steps - 1)
    path = a[:, None] * z1[None] + b[:, None] * z2[None]
    frames = _np(generate(params, path, np.repeat(l[None], steps, axis=0)))
    return MorphSequence(frames=list(frames), endpoints=(_np(z1), _np(z2)), label=l)


def tile_grid(rows: list[list[np.ndarray]], border: int = GRID_BORDER) -> np.ndarray:
    """Tile equally sized [-1, 1] images into an 8-bit mosaic with black borders."""
    if not rows or not rows[0]:
        raise ValueError("nothing to tile")
    h, w, c = rows[0][0].shape
    n_cols = max(len(r) for r in rows)
    grid = np.zeros((len(rows) * h + (len(rows) + 1) * border,
                     n_cols * w + (n_cols + 1) * border, c), dtype=np.uint8)
    for i, row in enumerate(rows):
        for j, tile in enumerate(row):
            y = border + i * (h + border)
            x = border + j * (w + border)
            grid[y:y + h, x:x + w] = denormalize_image(tile)
    return grid


def manifold_grid(params: ModelParams, faces) -> np.ndarray:
    """One row per face, one column per age bin (young to old), as uint8."""
    faces = list(faces)
    if not faces:
        raise ValueError("manifold_grid needs at least one face")
    return tile_grid([age_sweep(params, f).outputs for f in faces])


def save_frames(frames, out_dir, prefix: str = "frame") -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    width = max(2, len(str(len(frames) - 1)))
    paths = []
    for k, f in enumerate(frames):
        p = out_dir / f"{prefix}_{k:0{width}d}.png"
        save_image(f, p)
        paths.append(p)
    return paths


def save_uint8(img: np.ndarray, path) -> None:
    from PIL import Image as PILImage
    if img.ndim == 3 and img.shape[2] == 1:
        img = img[:, :, 0]
    PILImage.fromarray(img).save(path)
