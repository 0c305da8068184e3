"""Seeded synthetic image corpus plus directory IO shared by every stage.

Images are procedural 32x32 (or any square size) RGB textures drawn from a
fixed set of families. The family index doubles as a class label for the
feature-extractor classifier. All randomness flows through a numpy Generator
so identical seeds give identical corpora on any machine.

Stages exchange images as directories of PNG files; helpers here write and
read those directories and compute the file hashes used for split
disjointness checks.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch
from PIL import Image

FAMILY_NAMES = (
    "clouds",
    "gradient_ellipse",
    "stripes",
    "checker",
    "blobs",
    "cells",
    "rings",
    "patches",
)
NUM_FAMILIES = len(FAMILY_NAMES)

MANIFEST_NAME = "manifest.json"


def _bilinear_upsample(grid: np.ndarray, size: int) -> np.ndarray:
    """Upsample a (k, k) float grid to (size, size) with bilinear weights."""
    k = grid.shape[0]
    if k == size:
        return grid
    pos = np.linspace(0.0, k - 1.0, size)
    lo = np.floor(pos).astype(np.int64)
    hi = np.minimum(lo + 1, k - 1)
    t = pos - lo
    rows = grid[lo, :] * (1.0 - t)[:, None] + grid[hi, :] * t[:, None]
    out = rows[:, lo] * (1.0 - t)[None, :] + rows[:, hi] * t[None, :]
    return out


def _value_noise(rng: np.random.Generator, size: int, octaves: int = 4) -> np.ndarray:
    field = np.zeros((size, size), dtype=np.float64)
    amp, total = 1.0, 0.0
    for o in range(octaves):
        k = min(size, 2 ** (o + 1))
        field += amp * _bilinear_upsample(rng.random((k, k)), size)
        total += amp
        amp *= 0.55
    field /= total
    lo, hi = field.min(), field.max()
    return (field - lo) / max(hi - lo, 1e-8)


def _palette(rng: np.random.Generator, n: int = 2) -> np.ndarray:
    return rng.uniform(0.05, 0.95, size=(n, 3))


def _colorize(field: np.ndarray, c0: np.ndarray, c1: np.ndarray) -> np.ndarray:
    return c0[None, None, :] + field[:, :, None] * (c1 - c0)[None, None, :]


def _coords(size: int) -> tuple[np.ndarray, np.ndarray]:
    ax = (np.arange(size) + 0.5) / size
    return np.meshgrid(ax, ax, indexing="xy")


def _fam_clouds(rng, size):
    c0, c1 = _palette(rng)
    return _colorize(_value_noise(rng, size), c0, c1)


def _fam_gradient_ellipse(rng, size):
    xx, yy = _coords(size)
    theta = rng.uniform(0, 2 * np.pi)
    ramp = (np.cos(theta) * xx + np.sin(theta) * yy + 1.0) / 2.0
    c0, c1 = _palette(rng)
    img = _colorize(ramp, c0, c1)
    cx, cy = rng.uniform(0.25, 0.75, size=2)
    rx, ry = rng.uniform(0.1, 0.35, size=2)
    mask = ((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2 <= 1.0
    img[mask] = rng.uniform(0.05, 0.95, size=3)
    return img


def _fam_stripes(rng, size):
    xx, yy = _coords(size)
    theta = rng.uniform(0, np.pi)
    freq = rng.uniform(2.0, 10.0)
    phase = rng.uniform(0, 2 * np.pi)
    wave = 0.5 + 0.5 * np.sin(2 * np.pi * freq * (np.cos(theta) * xx + np.sin(theta) * yy) + phase)
    if rng.random() < 0.5:
        wave = (wave > 0.5).astype(np.float64)
    c0, c1 = _palette(rng)
    return _colorize(wave, c0, c1)


def _fam_checker(rng, size):
    tile = int(rng.integers(2, max(3, size // 4)))
    idx = np.arange(size) // tile
    board = ((idx[:, None] + idx[None, :]) % 2).astype(np.float64)
    c0, c1 = _palette(rng)
    img = _colorize(board, c0, c1)
    img += rng.normal(0, 0.02, size=img.shape)
    return img


def _fam_blobs(rng, size):
    xx, yy = _coords(size)
    img = np.tile(rng.uniform(0.05, 0.95, size=3)[None, None, :], (size, size, 1))
    for _ in range(int(rng.integers(2, 6))):
        cx, cy = rng.uniform(0, 1, size=2)
        rad = rng.uniform(0.05, 0.25)
        bump = np.exp(-(((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * rad**2)))
        color = rng.uniform(0.05, 0.95, size=3)
        img = img * (1 - bump[:, :, None]) + color[None, None, :] * bump[:, :, None]
    return img


def _fam_cells(rng, size):
    xx, yy = _coords(size)
    k = int(rng.integers(3, 9))
    pts = rng.uniform(0, 1, size=(k, 2))
    colors = rng.uniform(0.05, 0.95, size=(k, 3))
    d = (xx[None] - pts[:, 0, None, None]) ** 2 + (yy[None] - pts[:, 1, None, None]) ** 2
    return colors[np.argmin(d, axis=0)]


def _fam_rings(rng, size):
    xx, yy = _coords(size)
    cx, cy = rng.uniform(0.3, 0.7, size=2)
    rad = np.sqrt((xx - cx) ** 2 + (yy - cy) ** 2)
    freq = rng.uniform(3.0, 12.0)
    wave = 0.5 + 0.5 * np.sin(2 * np.pi * freq * rad + rng.uniform(0, 2 * np.pi))
    c0, c1 = _palette(rng)
    return _colorize(wave, c0, c1)


def _fam_patches(rng, size):
    img = np.tile(rng.uniform(0.05, 0.95, size=3)[None, None, :], (size, size, 1))
    for _ in range(int(rng.integers(3, 8))):
        x0, y0 = rng.integers(0, size - 2, size=2)
        w, h = rng.integers(2, size // 2, size=2)
        img[y0 : y0 + h, x0 : x0 + w] = rng.uniform(0.05, 0.95, size=3)
    return img


_FAMILY_FNS = (
    _fam_clouds,
    _fam_gradient_ellipse,
    _fam_stripes,
    _fam_checker,
    _fam_blobs,
    _fam_cells,
    _fam_rings,
    _fam_patches,
)


def synth_image(family: int, rng: np.random.Generator, size: int = 32) -> np.ndarray:
    """One (size, size, 3) float image in [0, 1] from the given family."""
    img = _FAMILY_FNS[family](rng, size)
    # mild global tone jitter so families overlap less trivially
    img = img * rng.uniform(0.85, 1.0) + rng.uniform(0.0, 0.1)
    return np.clip(img, 0.0, 1.0)


def synth_corpus(n: int, seed: int, size: int = 32) -> tuple[np.ndarray, np.ndarray]:
    """Generate n images; returns (uint8 (n,size,size,3), int labels (n,)).

    Each image draws from its own child generator keyed by (seed, index), so
    growing the corpus keeps earlier images identical. Splits carved from the
    front can therefore be shared across runs with different totals."""
    labels = np.empty(n, dtype=np.int64)
    images = np.empty((n, size, size, 3), dtype=np.uint8)
    for i in range(n):
        rng = np.random.default_rng([seed, i])
        labels[i] = rng.integers(0, NUM_FAMILIES)
        img = synth_image(int(labels[i]), rng, size)
        images[i] = np.round(img * 255.0).astype(np.uint8)
    return images, labels


def save_image_dir(
    out_dir: Path | str,
    images: np.ndarray,
    labels: np.ndarray | None = None,
    prefix: str = "img",
) -> list[str]:
    """Write uint8 (n,h,w,3) images as PNG files plus a manifest with labels."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    names = []
    for i, arr in enumerate(images):
        name = f"{prefix}_{i:06d}.png"
        Image.fromarray(arr, mode="RGB").save(out_dir / name)
        names.append(name)
    manifest = {"count": len(names)}
    if labels is not None:
        manifest["labels"] = {n: int(l) for n, l in zip(names, labels)}
    (out_dir / MANIFEST_NAME).write_text(json.dumps(manifest))
    return names


def list_image_files(src: Path | str) -> list[Path]:
    src = Path(src)
    if not src.is_dir():
        raise FileNotFoundError(f"image directory not found: {src}")
    files = sorted(p for p in src.iterdir() if p.suffix.lower() in {".png", ".bmp"})
    if not files:
        raise FileNotFoundError(f"no PNG images in {src}")
    return files


def load_image_dir(
    src: Path | str, limit: int | None = None
) -> tuple[torch.Tensor, list[str]]:
    """Read a PNG directory into a float tensor (n,3,h,w) in [0,1], sorted by name."""
    files = list_image_files(src)
    if limit is not None:
        files = files[:limit]
    arrays = [np.asarray(Image.open(p).convert("RGB"), dtype=np.float32) for p in files]
    stack = np.stack(arrays) / 255.0
    return torch.from_numpy(stack).permute(0, 3, 1, 2).contiguous(), [p.name for p in files]


def load_labels(src: Path | str, names: list[str]) -> np.ndarray | None:
    manifest = Path(src) / MANIFEST_NAME
    if not manifest.exists():
        return None
    labels = json.loads(manifest.read_text()).get("labels")
    if labels is None or any(n not in labels for n in names):
        return None
    return np.asarray([labels[n] for n in names], dtype=np.int64)


def save_tensor_dir(
    out_dir: Path | str,
    images: torch.Tensor,
    names: list[str] | None = None,
    labels: np.ndarray | None = None,
) -> list[str]:
    """Write a float tensor (n,3,h,w) in [0,1] as PNGs, preserving names if given."""
    arr = np.round(images.clamp(0, 1).permute(0, 2, 3, 1).numpy() * 255.0).astype(np.uint8)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if names is None:
        return save_image_dir(out_dir, arr, labels=labels)
    for a, name in zip(arr, names):
        Image.fromarray(a, mode="RGB").save(out_dir / name)
    manifest = {"count": len(names)}
    if labels is not None:
        manifest["labels"] = {n: int(l) for n, l in zip(names, labels)}
    (out_dir / MANIFEST_NAME).write_text(json.dumps(manifest))
    return list(names)


def image_hashes(src: Path | str) -> set[str]:
    """Content hashes of every image in a directory (for disjointness checks)."""
    from .utils import sha256_file

    return {sha256_file(p) for p in list_image_files(src)}


def assert_disjoint(dir_a: Path | str, dir_b: Path | str) -> None:
    overlap = image_hashes(dir_a) & image_hashes(dir_b)
    if overlap:
        raise ValueError(
            f"splits share {len(overlap)} identical images: {sorted(overlap)[:3]}..."
        )


def split_counts(n: int, fractions: dict[str, float]) -> dict[str, int]:
    counts = {k: int(n * f) for k, f in fractions.items()}
    spare = n - sum(counts.values())
    first = next(iter(counts))
    counts[first] += spare
    return counts


def iter_batches(
    n: int,
    batch_size: int,
    generator: torch.Generator | None = None,
):
    """Yield index tensors covering range(n), shuffled when a generator is given."""
    order = torch.randperm(n, generator=generator) if generator is not None else torch.arange(n)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]
