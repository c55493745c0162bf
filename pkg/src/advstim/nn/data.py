"""Dataset manifests and a synthetic textured-shapes corpus for CI.

A manifest is JSON: a list of {path, fine, coarse} rows plus the fine-label
name table. The synthetic generator draws 8 shape families x 2 fill textures
(16 fine classes) on noisy gradient backgrounds with randomized position and
size, so no class is pinned to fixed pixels.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

SHAPES = ("disk", "ring", "square", "cross", "triangle", "wedge", "checker", "dots")
TEXTURES = ("plain", "hatch")
FINE_NAMES = tuple(f"{s}_{t}" for s in SHAPES for t in TEXTURES)

# coarse class per shape; checker/dots stay outside every coarse class and
# act as the distractor pool for mismatched-perturbation stimuli
SHAPE_COARSE = {
    "disk": "round",
    "ring": "holed",
    "square": "boxy",
    "cross": "crossed",
    "triangle": "pointed",
    "wedge": "cornered",
    "checker": "distractor",
    "dots": "distractor",
}

GROUP_PAIRS = {
    "curved": ("round", "holed"),
    "angular": ("boxy", "crossed"),
    "tapered": ("pointed", "cornered"),
}


@dataclass
class Dataset:
    images: np.ndarray  # (N, H, W, 1) float64 in [0, 255]
    labels: np.ndarray  # (N,) int fine-label indices
    fine_names: tuple[str, ...]
    ids: tuple[str, ...]

    def __len__(self) -> int:
        return self.images.shape[0]


def fine_index(name: str) -> int:
    return FINE_NAMES.index(name)


def coarse_of_fine(fine: int | str) -> str:
    name = FINE_NAMES[fine] if isinstance(fine, int) else fine
    return SHAPE_COARSE[name.rsplit("_", 1)[0]]


def _shape_mask(shape: str, size: int, cx: float, cy: float, r: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dx = xx - cx
    dy = yy - cy
    d2 = dx * dx + dy * dy
    if shape == "disk":
        return d2 < r * r
    if shape == "ring":
        return (d2 < r * r) & (d2 > (0.55 * r) ** 2)
    if shape == "square":
        return np.maximum(np.abs(dx), np.abs(dy)) < 0.88 * r
    if shape == "cross":
        arm = 0.34 * r
        box = np.maximum(np.abs(dx), np.abs(dy)) < r
        return box & ((np.abs(dx) < arm) | (np.abs(dy) < arm))
    if shape == "triangle":
        # apex up: half-width grows from 0 at the top vertex to r at the base
        inside_v = (dy > -r) & (dy < r)
        half_w = (dy + r) * 0.5
        return inside_v & (np.abs(dx) < half_w)
    if shape == "wedge":
        # quarter disk, lower-right: vertically and horizontally asymmetric
        return (d2 < (1.25 * r) ** 2) & (dx > -0.15 * r) & (dy > -0.15 * r)
    if shape == "checker":
        box = np.maximum(np.abs(dx), np.abs(dy)) < r
        cells = ((np.floor(xx / 4.0) + np.floor(yy / 4.0)) % 2).astype(bool)
        return box & cells
    if shape == "dots":
        offs = ((-0.55, -0.5), (0.55, -0.45), (0.0, 0.1), (-0.5, 0.6), (0.5, 0.55))
        mask = np.zeros((size, size), dtype=bool)
        for ox, oy in offs:
            mask |= (xx - (cx + ox * r)) ** 2 + (yy - (cy + oy * r)) ** 2 < (0.28 * r) ** 2
        return mask
    raise ValueError(f"unknown shape {shape!r}")


def _render(shape: str, texture: str, size: int, rng: np.random.Generator) -> np.ndarray:
    base = rng.uniform(95.0, 150.0)
    gdir = rng.uniform(0.0, 2 * np.pi)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    ramp = (xx * np.cos(gdir) + yy * np.sin(gdir)) / size
    img = base + 22.0 * (ramp - ramp.mean()) + rng.normal(0.0, 7.0, size=(size, size))

    cx = size / 2.0 + rng.uniform(-0.16, 0.16) * size
    cy = size / 2.0 + rng.uniform(-0.16, 0.16) * size
    r = rng.uniform(0.17, 0.28) * size
    mask = _shape_mask(shape, size, cx, cy, r)

    contrast = -rng.uniform(55.0, 85.0)  # shapes sit darker than background
    fill = np.full((size, size), contrast)
    if texture == "hatch":
        phi = rng.uniform(0.0, np.pi)
        phase = rng.uniform(0.0, 2 * np.pi)
        stripes = np.sign(np.sin(0.7 * (xx * np.cos(phi) + yy * np.sin(phi)) + phase))
        fill = contrast * (0.55 + 0.45 * stripes)
    img = img + fill * mask
    return np.clip(img, 0.0, 255.0)[:, :, None]


def synth_dataset(n_per_class: int, size: int = 64, seed: int = 0,
                  shapes: tuple[str, ...] = SHAPES) -> Dataset:
    """Balanced synthetic corpus: n_per_class images for every fine class."""
    rng = np.random.default_rng(seed)
    images, labels, ids = [], [], []
    for shape in shapes:
        for texture in TEXTURES:
            fine = fine_index(f"{shape}_{texture}")
            for j in range(n_per_class):
                images.append(_render(shape, texture, size, rng))
                labels.append(fine)
                ids.append(f"{shape}_{texture}_{seed}_{j:04d}")
    return Dataset(
        images=np.stack(images),
        labels=np.asarray(labels, dtype=np.int64),
        fine_names=FINE_NAMES,
        ids=tuple(ids),
    )


def write_dataset(dataset: Dataset, out_dir) -> Path:
    """Write PNGs plus manifest.json; returns the manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for i in range(len(dataset)):
        name = f"{dataset.ids[i]}.png"
        img = np.rint(dataset.images[i, :, :, 0]).astype(np.uint8)
        Image.fromarray(img, mode="L").save(out / name)
        fine = dataset.fine_names[dataset.labels[i]]
        rows.append({"path": name, "fine": fine, "coarse": coarse_of_fine(fine)})
    manifest = {"fine_names": list(dataset.fine_names), "images": rows}
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1))
    return path


def load_dataset(manifest_path) -> Dataset:
    manifest_path = Path(manifest_path)
    manifest = json.loads(manifest_path.read_text())
    fine_names = tuple(manifest["fine_names"])
    images, labels, ids = [], [], []
    for row in manifest["images"]:
        img = np.asarray(Image.open(manifest_path.parent / row["path"]), dtype=np.float64)
        if img.ndim == 2:
            img = img[:, :, None]
        images.append(img)
        labels.append(fine_names.index(row["fine"]))
        ids.append(Path(row["path"]).stem)
    return Dataset(
        images=np.stack(images),
        labels=np.asarray(labels, dtype=np.int64),
        fine_names=fine_names,
        ids=tuple(ids),
    )
