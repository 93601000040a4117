"""Synthetic 32-class shape dataset: 4 shapes x 8 hues, drawn as faint colour tints over gray clutter."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .image_io import decode_png, encode_png, quantize_roundtrip

SHAPES = ("circle", "square", "triangle", "cross")
# hues are evenly spaced directions on the chroma wheel, starting near red
HUE_NAMES = ("red", "orange", "yellow", "green", "cyan", "blue", "purple", "magenta")
HUES = dict(zip(HUE_NAMES, (np.pi / 6 + k * np.pi / 4 for k in range(len(HUE_NAMES)))))
NUM_CLASSES = len(SHAPES) * len(HUES)
IMAGE_SIZE = 32
_SUPERSAMPLE = 3
# Class evidence is a faint chroma offset; background clutter is luminance only, so the two are orthogonal.
CHROMA = 0.08
CHROMA_NOISE = 0.01
CLUTTER = 1.0
_CHROMA_BASIS = np.array([[1.0, -1.0, 0.0], [1.0, 1.0, -2.0]]) / np.array([[np.sqrt(2)], [np.sqrt(6)]])


def class_id(shape: str, hue: str) -> int:
    return SHAPES.index(shape) * len(HUES) + HUE_NAMES.index(hue)


def class_name(cid: int) -> str:
    if not 0 <= cid < NUM_CLASSES:
        raise ValueError(f"class id {cid} out of range")
    return f"{HUE_NAMES[cid % len(HUES)]}_{SHAPES[cid // len(HUES)]}"


@dataclass(frozen=True)
class ShapeDataset:
    images: np.ndarray  # (N, H, W, 3) float32, 8-bit quantized
    labels: np.ndarray  # (N,) int64
    seed: int

    def __len__(self):
        return len(self.labels)

    def __iter__(self):
        return iter(zip(self.images, self.labels.tolist()))

    def of_class(self, cid: int) -> np.ndarray:
        return self.images[self.labels == cid]

    def to_bytes(self) -> bytes:
        return self.images.tobytes() + self.labels.astype("<i8").tobytes()


def _background(rng: np.random.Generator, size: int) -> np.ndarray:
    """Gray (luminance only) clutter, (size, size)."""
    base = 0.425 + CLUTTER * rng.uniform(-0.175, 0.175)
    coarse = rng.normal(0.0, 0.08 * CLUTTER, (5, 5))
    grid = np.linspace(0, 4, size)
    i0 = np.minimum(grid.astype(int), 3)
    f = grid - i0
    rows = coarse[i0] * (1 - f)[:, None] + coarse[i0 + 1] * f[:, None]
    smooth = rows[:, i0] * (1 - f)[None, :] + rows[:, i0 + 1] * f[None, :]
    theta = rng.uniform(0, np.pi)
    yy, xx = np.mgrid[0:size, 0:size]
    stripes = 0.04 * CLUTTER * np.sin((xx * np.cos(theta) + yy * np.sin(theta)) * rng.uniform(0.6, 1.4))
    return base + smooth + stripes + rng.normal(0.0, 0.03 * CLUTTER, (size, size))


def _shape_mask(rng: np.random.Generator, shape: str, size: int) -> np.ndarray:
    n = size * _SUPERSAMPLE
    coords = (np.arange(n) + 0.5) / _SUPERSAMPLE
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    cy, cx = rng.uniform(14, 18, 2)
    r = rng.uniform(7.5, 10.5)
    ang = rng.uniform(-0.1, 0.1)
    dx, dy = xx - cx, yy - cy
    u = dx * np.cos(ang) + dy * np.sin(ang)
    v = -dx * np.sin(ang) + dy * np.cos(ang)
    if shape == "circle":
        inside = u * u + v * v <= r * r
    elif shape == "square":
        inside = np.maximum(np.abs(u), np.abs(v)) <= 0.82 * r
    elif shape == "triangle":
        # apex up; three half-planes of an equilateral triangle with circumradius r
        inside = (v <= 0.5 * r) & (np.sqrt(3) * u - v <= r) & (-np.sqrt(3) * u - v <= r)
    elif shape == "cross":
        arm = 0.3 * r
        inside = ((np.abs(u) <= arm) & (np.abs(v) <= r)) | ((np.abs(v) <= arm) & (np.abs(u) <= r))
    else:
        raise ValueError(f"unknown shape {shape!r}")
    return inside.reshape(size, _SUPERSAMPLE, size, _SUPERSAMPLE).mean(axis=(1, 3))


def chroma_direction(hue: str) -> np.ndarray:
    theta = HUES[hue]
    return np.cos(theta) * _CHROMA_BASIS[0] + np.sin(theta) * _CHROMA_BASIS[1]


def render_sample(rng: np.random.Generator, cid: int, size: int = IMAGE_SIZE) -> np.ndarray:
    shape = SHAPES[cid // len(HUES)]
    direction = chroma_direction(HUE_NAMES[cid % len(HUES)])
    gray = _background(rng, size)[..., None]
    mask = _shape_mask(rng, shape, size)[..., None]
    chroma = CHROMA * rng.uniform(0.8, 1.0) * direction + rng.normal(0.0, CHROMA_NOISE, (size, size, 3))
    img = np.clip(gray + chroma * mask, 0.0, 1.0)
    return quantize_roundtrip(img)


def generate_shape_dataset(seed: int, n_per_class: int, size: int = IMAGE_SIZE) -> ShapeDataset:
    """Samples ordered in rounds: round i holds one image of every class in id order."""
    if n_per_class < 0:
        raise ValueError("n_per_class must be non-negative")
    rng = np.random.default_rng(seed)
    labels = np.tile(np.arange(NUM_CLASSES), n_per_class).astype(np.int64)
    images = np.zeros((len(labels), size, size, 3), dtype=np.float32)
    for k, cid in enumerate(labels):
        images[k] = render_sample(rng, int(cid), size)
    return ShapeDataset(images, labels, seed)


def save_dataset(ds: ShapeDataset, out_dir) -> Path:
    """One lossless PNG per sample plus ``labels.csv``; samples are already 8-bit so nothing is lost."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lines = ["index,class_id,class_name,file"]
    for i, (img, cid) in enumerate(ds):
        name = f"img_{i:05d}.png"
        (out / name).write_bytes(encode_png(img))
        lines.append(f"{i},{cid},{class_name(cid)},{name}")
    (out / "labels.csv").write_text("\n".join(lines) + "\n")
    (out / "seed.txt").write_text(f"{ds.seed}\n")
    return out


def load_dataset(in_dir) -> ShapeDataset:
    src = Path(in_dir)
    index = src / "labels.csv"
    if not index.exists():
        raise FileNotFoundError(f"no labels.csv in {src}")
    rows = index.read_text().splitlines()[1:]
    images, labels = [], []
    for row in rows:
        _, cid, _, name = row.split(",")
        images.append(decode_png((src / name).read_bytes()))
        labels.append(int(cid))
    seed_file = src / "seed.txt"
    seed = int(seed_file.read_text()) if seed_file.exists() else -1
    size = images[0].shape[0] if images else IMAGE_SIZE
    return ShapeDataset(
        np.stack(images) if images else np.zeros((0, size, size, 3), np.float32), np.array(labels, np.int64), seed
    )
