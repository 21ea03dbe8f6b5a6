"""Synthetic shape dataset: filled shapes on textured backgrounds.

A class is a (shape, color family) pair. Shapes cycle through circle,
square, triangle, so once there are more than three classes some
classes share a shape and only color separates them; that keeps color
both discriminative for classifiers and exploitable for recoloring
attacks. Masks carry two regions: background pixels are 0 and shape
pixels hold the region's semantic id, 1 + class id, so a color
library built from a corpus keeps each class's palette separate.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import image_io

SHAPES = ("circle", "square", "triangle")

# (name, hue center in turns, hue half-width in turns). The first five
# sit 0.2 turns apart and classes that share a shape keep their bands
# at least 0.1 turns clear of each other at any class count, so
# families remain unambiguous even with the per-pixel hue texture.
FAMILIES = (
    ("red", 0.000, 0.030),
    ("lime", 0.200, 0.030),
    ("green", 0.400, 0.030),
    ("blue", 0.600, 0.030),
    ("purple", 0.800, 0.030),
    ("azure", 0.630, 0.030),
    ("olive", 0.300, 0.030),
    ("teal", 0.500, 0.030),
    ("magenta", 0.870, 0.030),
    ("violet", 0.820, 0.030),
)

IMAGE_SIZE = 64
MIN_CLASSES = 3
MAX_CLASSES = 10


@dataclass
class Sample:
    name: str
    image: np.ndarray  # float64 (H, W, 3) in [0, 1]
    mask: np.ndarray  # int64 (H, W), 0 background / 1 + label on the shape
    label: int


def class_catalog(num_classes: int) -> list[tuple[str, str]]:
    """(shape, family name) per class id."""
    if not MIN_CLASSES <= num_classes <= MAX_CLASSES:
        raise ValueError(f"num_classes must be in [{MIN_CLASSES}, {MAX_CLASSES}]")
    return [(SHAPES[i % len(SHAPES)], FAMILIES[i][0]) for i in range(num_classes)]


def _hsv_to_rgb(h, s, v):
    """Vectorized HSV -> RGB, hue in turns."""
    h = np.asarray(h, np.float64) % 1.0
    s, v = np.asarray(s, np.float64), np.asarray(v, np.float64)
    sector = np.floor(h * 6.0)
    f = h * 6.0 - sector
    p = v * (1.0 - s)
    q = v * (1.0 - s * f)
    t = v * (1.0 - s * (1.0 - f))
    sector = sector.astype(np.int64) % 6
    r = np.choose(sector, [v, q, p, p, t, v])
    g = np.choose(sector, [t, v, v, q, p, p])
    b = np.choose(sector, [p, p, t, v, v, q])
    return np.stack(np.broadcast_arrays(r, g, b), axis=-1)


def _value_noise(rng, size, cells=9):
    """Smooth [-1, 1] noise field from a bilinearly upsampled coarse grid."""
    coarse = rng.uniform(-1.0, 1.0, (cells, cells))
    coords = np.linspace(0.0, cells - 1.0, size)
    lo = np.floor(coords).astype(np.int64)
    hi = np.minimum(lo + 1, cells - 1)
    frac = coords - lo
    rows = coarse[lo] * (1.0 - frac)[:, None] + coarse[hi] * frac[:, None]
    return rows[:, lo] * (1.0 - frac)[None, :] + rows[:, hi] * frac[None, :]


def _shape_mask(shape, rng, size):
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    cx, cy = rng.uniform(size * 0.35, size * 0.65, 2)
    radius = rng.uniform(size * 0.14, size * 0.26)
    angle = rng.uniform(0.0, 2.0 * np.pi)
    if shape == "circle":
        return (xx - cx) ** 2 + (yy - cy) ** 2 <= radius**2
    ca, sa = np.cos(angle), np.sin(angle)
    xr = (xx - cx) * ca + (yy - cy) * sa
    yr = -(xx - cx) * sa + (yy - cy) * ca
    if shape == "square":
        half = radius * 0.82
        return (np.abs(xr) <= half) & (np.abs(yr) <= half)
    # equilateral triangle: intersection of three half planes
    verts = np.array(
        [
            [cx + radius * np.cos(angle + k * 2.0 * np.pi / 3.0),
             cy + radius * np.sin(angle + k * 2.0 * np.pi / 3.0)]
            for k in range(3)
        ]
    )
    inside = np.ones((size, size), dtype=bool)
    for k in range(3):
        ax, ay = verts[k]
        bx, by = verts[(k + 1) % 3]
        cross = (bx - ax) * (yy - ay) - (by - ay) * (xx - ax)
        inside &= cross >= 0.0
    return inside


def _luma(rgb):
    return float(rgb[..., 0] * 0.299 + rgb[..., 1] * 0.587 + rgb[..., 2] * 0.114)


def make_sample(class_id, catalog, rng, size=IMAGE_SIZE):
    """Render one sample.

    The shape is drawn inside its family's hue band with a smooth
    per-pixel hue texture; the backdrop is desaturated with a free hue
    and free lightness. The returned mask holds the shape's semantic
    region id (1 + class id) on shape pixels and 0 on the backdrop.
    """
    shape_kind, family_name = catalog[class_id]
    family = next(f for f in FAMILIES if f[0] == family_name)

    mask = _shape_mask(shape_kind, rng, size)
    hue = family[1] + rng.uniform(-family[2], family[2])
    hue_field = hue + 0.05 * _value_noise(rng, size)
    fg_sat = rng.uniform(0.60, 0.95)
    fg_value = rng.uniform(0.18, 0.92)
    fg_probe = _hsv_to_rgb(hue, fg_sat, fg_value)

    # keep the shape clearly separated from the backdrop in lightness;
    # bounded resampling keeps generation deterministic
    for _ in range(64):
        bg_rgb = _hsv_to_rgb(
            rng.uniform(0.0, 1.0),
            rng.uniform(0.03, 0.28),
            rng.uniform(0.15, 0.92),
        )
        if abs(_luma(bg_rgb) - _luma(fg_probe)) >= 0.18:
            break

    image = np.broadcast_to(bg_rgb, (size, size, 3)).copy()
    image *= 1.0 + 0.16 * _value_noise(rng, size)[:, :, None]
    shade = np.clip(fg_value * (1.0 + 0.10 * _value_noise(rng, size)), 0.0, 1.0)
    image[mask] = _hsv_to_rgb(hue_field[mask], fg_sat, shade[mask])

    return np.clip(image, 0.0, 1.0), mask.astype(np.int64) * (class_id + 1)


def generate(num_classes, per_class, seed=0, size=IMAGE_SIZE) -> list[Sample]:
    """Class-balanced deterministic dataset; sample i of class c is
    independent of every other sample (seeded per (seed, c, i))."""
    catalog = class_catalog(num_classes)
    samples = []
    for cid in range(num_classes):
        for i in range(per_class):
            rng = np.random.default_rng(np.random.SeedSequence([seed, cid, i]))
            image, mask = make_sample(cid, catalog, rng, size)
            idx = cid * per_class + i
            samples.append(Sample(name=f"img_{idx:05d}", image=image, mask=mask, label=cid))
    return samples


def write_dataset(samples, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for s in samples:
        image_io.write_rgb(out / f"{s.name}.png", s.image)
        image_io.write_mask(out / f"{s.name}.pgm", s.mask)
        rows.append((f"{s.name}.png", f"{s.name}.pgm", s.label))
    with open(out / "labels.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["image", "mask", "label"])
        writer.writerows(sorted(rows))


def load_dataset(data_dir) -> list[Sample]:
    """Read a written dataset back (sorted by image name)."""
    root = Path(data_dir)
    manifest = root / "labels.csv"
    if not manifest.exists():
        raise FileNotFoundError(f"missing manifest {manifest}")
    samples = []
    with open(manifest, newline="") as fh:
        for row in csv.DictReader(fh):
            samples.append(
                Sample(
                    name=Path(row["image"]).stem,
                    image=image_io.read_rgb(root / row["image"]),
                    mask=image_io.read_mask(root / row["mask"]),
                    label=int(row["label"]),
                )
            )
    samples.sort(key=lambda s: s.name)
    return samples
