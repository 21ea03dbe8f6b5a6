"""Color distribution library: histograms, palettes, per-class clustering.

A ColorDistribution is a normalized histogram over a fixed 16x16x16 Lab
grid (L in [0, 100], a and b in [-128, 127]). A class's library entry is
a fixed set of LIB_SLOTS representative distributions, obtained by
clustering the palettes of that class's corpus regions and keeping one
member distribution per cluster.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.cluster.hierarchy import fcluster, linkage

from .transport import COV_RIDGE, Moments

BIN_GRID = (16, 16, 16)
LAB_BOX = ((0.0, 100.0), (-128.0, 127.0), (-128.0, 127.0))
LIB_SLOTS = 20
MIN_REGION_PIXELS = 64
DEFAULT_PALETTE_SIZE = 5
LIBRARY_FORMAT_VERSION = 1

_LOWS = np.array([lo for lo, _ in LAB_BOX])
_SPANS = np.array([hi - lo for lo, hi in LAB_BOX])
_DIMS = np.array(BIN_GRID)


class EmptyCorpus(ValueError):
    """No usable (image, class) region anywhere in the corpus."""


class UnknownClass(KeyError):
    """Class id has no entry in the library."""


class BadWeights(ValueError):
    """Fusion weights do not form a convex combination."""


@dataclass
class ColorDistribution:
    """Normalized histogram over the Lab bin grid, shape BIN_GRID."""

    weights: np.ndarray

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.weights.shape != BIN_GRID:
            raise ValueError(f"weights shape {self.weights.shape} != {BIN_GRID}")
        if self.weights.min() < 0.0:
            raise ValueError("negative bin weight")
        total = self.weights.sum()
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"weights sum {total!r} != 1")


@dataclass
class Palette:
    """Dominant region colors (P, 3) in Lab with mass proportions (P,)."""

    colors: np.ndarray
    proportions: np.ndarray


@dataclass
class DistributionLibrary:
    """Per-class lists of exactly LIB_SLOTS representative distributions."""

    classes: dict[int, list[ColorDistribution]]
    names: dict[int, str] = field(default_factory=dict)

    def __post_init__(self):
        for cid, dists in self.classes.items():
            if len(dists) != LIB_SLOTS:
                raise ValueError(f"class {cid}: {len(dists)} slots != {LIB_SLOTS}")

    @property
    def num_classes(self) -> int:
        return len(self.classes)


def bin_index_of(lab_pixels) -> np.ndarray:
    """Flat bin index (C-order over BIN_GRID) for (..., 3) Lab values."""
    lab = np.asarray(lab_pixels, dtype=np.float64)
    rel = (lab - _LOWS) / _SPANS * _DIMS
    idx = np.clip(np.floor(rel).astype(np.int64), 0, _DIMS - 1)
    return np.ravel_multi_index(tuple(np.moveaxis(idx, -1, 0)), BIN_GRID)


def bin_centers() -> np.ndarray:
    """Lab coordinates of all bin centers, shape (prod(BIN_GRID), 3)."""
    axes = [
        _LOWS[d] + (np.arange(_DIMS[d]) + 0.5) * _SPANS[d] / _DIMS[d] for d in range(3)
    ]
    grid = np.meshgrid(*axes, indexing="ij")
    return np.stack([g.ravel() for g in grid], axis=-1)


_BIN_CENTERS = None


def _centers_cached() -> np.ndarray:
    global _BIN_CENTERS
    if _BIN_CENTERS is None:
        _BIN_CENTERS = bin_centers()
    return _BIN_CENTERS


def histogram_of(lab_pixels) -> ColorDistribution:
    """Empirical ColorDistribution of a (N, 3) or (..., 3) Lab pixel set."""
    flat = np.asarray(lab_pixels, dtype=np.float64).reshape(-1, 3)
    if flat.shape[0] == 0:
        raise ValueError("no pixels")
    counts = np.bincount(bin_index_of(flat), minlength=int(np.prod(BIN_GRID)))
    weights = counts.astype(np.float64) / flat.shape[0]
    return ColorDistribution(weights.reshape(BIN_GRID))


def extract_palette(region_pixels, palette_size=DEFAULT_PALETTE_SIZE, seed=0) -> Palette:
    """k-means palette of a Lab pixel region.

    k-means++ seeding from `seed`, Lloyd iterations until the largest
    centroid shift drops below 1e-4 or 50 iterations. The requested size
    is clamped to the number of distinct pixels; empty clusters are
    dropped. Proportions are cluster mass fractions.
    """
    pixels = np.asarray(region_pixels, dtype=np.float64).reshape(-1, 3)
    if pixels.shape[0] == 0:
        raise ValueError("empty region")
    n_distinct = np.unique(pixels, axis=0).shape[0]
    k = max(1, min(int(palette_size), n_distinct))
    rng = np.random.default_rng(np.random.SeedSequence(seed))

    centers = _kmeans_pp(pixels, k, rng)
    assign = None
    for _ in range(50):
        d2 = ((pixels[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        assign = np.argmin(d2, axis=1)
        new_centers = centers.copy()
        for j in range(k):
            sel = assign == j
            if sel.any():
                new_centers[j] = pixels[sel].mean(axis=0)
        shift = np.abs(new_centers - centers).max()
        centers = new_centers
        if shift < 1e-4:
            break
    d2 = ((pixels[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
    assign = np.argmin(d2, axis=1)
    counts = np.bincount(assign, minlength=k)
    keep = counts > 0
    return Palette(
        colors=centers[keep],
        proportions=counts[keep].astype(np.float64) / pixels.shape[0],
    )


def _kmeans_pp(pixels, k, rng):
    n = pixels.shape[0]
    centers = np.empty((k, 3))
    centers[0] = pixels[rng.integers(n)]
    d2 = ((pixels - centers[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            # all remaining mass sits on chosen centers; pick uniformly
            centers[j] = pixels[rng.integers(n)]
        else:
            centers[j] = pixels[rng.choice(n, p=d2 / total)]
        d2 = np.minimum(d2, ((pixels - centers[j]) ** 2).sum(axis=1))
    return centers


def palette_distance(pal_a: Palette, pal_b: Palette) -> float:
    """Greedy one-to-one matching cost between two palettes.

    Pairs are consumed cheapest-first (Euclidean Lab distance, ties by
    flat index) until the smaller palette is exhausted; each matched
    pair contributes its distance weighted by the mean of the two
    proportions. Zero for identical palettes, symmetric.
    """
    ca, cb = pal_a.colors, pal_b.colors
    dist = np.sqrt(((ca[:, None, :] - cb[None, :, :]) ** 2).sum(axis=2))
    n_a, n_b = dist.shape
    order = np.argsort(dist, axis=None, kind="stable")
    used_a = np.zeros(n_a, dtype=bool)
    used_b = np.zeros(n_b, dtype=bool)
    remaining = min(n_a, n_b)
    cost = 0.0
    for flat in order:
        i, j = divmod(int(flat), n_b)
        if used_a[i] or used_b[j]:
            continue
        cost += 0.5 * (pal_a.proportions[i] + pal_b.proportions[j]) * dist[i, j]
        used_a[i] = True
        used_b[j] = True
        remaining -= 1
        if remaining == 0:
            break
    return float(cost)


def cluster_class_palettes(pairs, n_clusters=LIB_SLOTS, seed=0) -> list[ColorDistribution]:
    """Pick LIB_SLOTS representative distributions for one class.

    `pairs` is a list of (Palette, ColorDistribution) for every corpus
    region of the class. Palettes are grouped by average-linkage
    agglomerative clustering under palette_distance, cut at n_clusters
    (or the list length if smaller); one member distribution per cluster
    is chosen uniformly at random from `seed`; clusters repeat
    cyclically if fewer than LIB_SLOTS.
    """
    if not pairs:
        raise ValueError("no palettes to cluster")
    n = len(pairs)
    k = min(int(n_clusters), n)
    if n == 1:
        labels = np.zeros(1, dtype=np.int64)
    else:
        condensed = np.empty(n * (n - 1) // 2, dtype=np.float64)
        pos = 0
        for i in range(n):
            for j in range(i + 1, n):
                condensed[pos] = palette_distance(pairs[i][0], pairs[j][0])
                pos += 1
        labels = fcluster(linkage(condensed, method="average"), t=k, criterion="maxclust")

    # order clusters by smallest member index so output is stable
    first_seen: dict[int, int] = {}
    members: dict[int, list[int]] = {}
    for idx, lab in enumerate(labels):
        lab = int(lab)
        first_seen.setdefault(lab, idx)
        members.setdefault(lab, []).append(idx)
    cluster_order = sorted(first_seen, key=first_seen.get)

    rng = np.random.default_rng(np.random.SeedSequence(seed))
    reps = []
    for lab in cluster_order:
        group = members[lab]
        reps.append(pairs[group[rng.integers(len(group))]][1])
    return [reps[i % len(reps)] for i in range(LIB_SLOTS)]


def build_library(corpus, seed=0, palette_size=DEFAULT_PALETTE_SIZE) -> DistributionLibrary:
    """Build the per-class library from (lab_image, mask) pairs.

    Every (image, class) region with at least MIN_REGION_PIXELS pixels
    contributes one (Palette, ColorDistribution); classes with no
    qualifying region are omitted. Raises EmptyCorpus if nothing
    qualifies.
    """
    per_class: dict[int, list[tuple[Palette, ColorDistribution]]] = {}
    for lab_img, mask in corpus:
        mask = np.asarray(mask)
        for cid in np.unique(mask):
            cid = int(cid)
            region = np.asarray(lab_img, dtype=np.float64)[mask == cid]
            if region.shape[0] < MIN_REGION_PIXELS:
                continue
            region_idx = len(per_class.setdefault(cid, []))
            pal = extract_palette(region, palette_size, seed=[seed, 0, cid, region_idx])
            per_class[cid].append((pal, histogram_of(region)))
    per_class = {cid: pairs for cid, pairs in per_class.items() if pairs}
    if not per_class:
        raise EmptyCorpus("no (image, class) region with enough pixels")
    classes = {}
    for cid in sorted(per_class):
        classes[cid] = cluster_class_palettes(per_class[cid], LIB_SLOTS, seed=[seed, 1, cid])
    return DistributionLibrary(classes=classes, names={c: f"class_{c}" for c in classes})


def sample_distribution(lib: DistributionLibrary, class_id: int, rng):
    """Draw one of the class's LIB_SLOTS entries uniformly.

    Returns (slot, ColorDistribution) with slot being the 1-based slot id.
    """
    if class_id not in lib.classes:
        raise UnknownClass(class_id)
    slot = int(rng.integers(LIB_SLOTS))
    return slot + 1, lib.classes[class_id][slot]


def fuse_distributions(parts) -> ColorDistribution:
    """Convex bin-wise combination of (weight, ColorDistribution) pairs."""
    parts = list(parts)
    if not parts:
        raise BadWeights("nothing to fuse")
    weights = np.array([w for w, _ in parts], dtype=np.float64)
    if weights.min() < 0.0 or abs(weights.sum() - 1.0) > 1e-6:
        raise BadWeights(f"weights sum to {weights.sum()!r}")
    fused = np.zeros(BIN_GRID)
    for w, dist in parts:
        fused += w * dist.weights
    total = fused.sum()
    if abs(total - 1.0) > 1e-9:
        # inputs off by up to the BadWeights slack: renormalize instead
        # of emitting an invalid distribution (exact inputs untouched)
        fused = fused / total
    return ColorDistribution(fused)


def moments_of_distribution(dist: ColorDistribution):
    """Mean/covariance of the histogram read at bin centers, plus ridge.

    Matches transport.image_moments applied to any pixel set that
    reconstructs the histogram exactly at bin centers.
    """
    centers = _centers_cached()
    w = dist.weights.ravel()
    mean = w @ centers
    centered = centers - mean
    cov = (centered * w[:, None]).T @ centered + COV_RIDGE * np.eye(3)
    return Moments(mean=mean, cov=cov)


_CENTER_OUTER = None


def _center_outer_cached() -> np.ndarray:
    # flattened c c^T per bin center, for raw second moments in one GEMM
    global _CENTER_OUTER
    if _CENTER_OUTER is None:
        centers = _centers_cached()
        _CENTER_OUTER = np.einsum("bi,bj->bij", centers, centers).reshape(-1, 9)
    return _CENTER_OUTER


def raw_moment_arrays(dists):
    """First and raw second moments of distributions over the bin grid.

    Returns (means (n, 3), seconds (n, 3, 3)). Both are linear in the
    distribution, so moments of any convex fusion are the same convex
    combination of these arrays; the fused covariance follows as
    seconds - mean mean^T + COV_RIDGE I, matching moments_of_distribution
    up to floating point reassociation.
    """
    stacked = np.stack([np.asarray(d.weights).ravel() for d in dists])
    means = stacked @ _centers_cached()
    seconds = (stacked @ _center_outer_cached()).reshape(-1, 3, 3)
    return means, seconds


def save_library(lib: DistributionLibrary, path) -> None:
    """Serialize to versioned JSON (sparse nonzero bins per slot)."""
    doc = {
        "version": LIBRARY_FORMAT_VERSION,
        "num_classes": lib.num_classes,
        "bin_grid": list(BIN_GRID),
        "lab_box": [list(b) for b in LAB_BOX],
        "classes": [
            {
                "class_id": cid,
                "name": lib.names.get(cid, str(cid)),
                "distributions": [
                    {
                        "bins": np.flatnonzero(d.weights.ravel()).tolist(),
                        "weights": d.weights.ravel()[
                            np.flatnonzero(d.weights.ravel())
                        ].tolist(),
                    }
                    for d in lib.classes[cid]
                ],
            }
            for cid in sorted(lib.classes)
        ],
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1)
        fh.write("\n")


def load_library(path) -> DistributionLibrary:
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("version") != LIBRARY_FORMAT_VERSION:
        raise ValueError(f"unsupported library version {doc.get('version')!r}")
    if tuple(doc["bin_grid"]) != BIN_GRID:
        raise ValueError("bin grid mismatch")
    classes, names = {}, {}
    for entry in doc["classes"]:
        cid = int(entry["class_id"])
        names[cid] = entry["name"]
        dists = []
        for rec in entry["distributions"]:
            w = np.zeros(int(np.prod(BIN_GRID)))
            w[np.asarray(rec["bins"], dtype=np.int64)] = rec["weights"]
            dists.append(ColorDistribution(w.reshape(BIN_GRID)))
        classes[cid] = dists
    lib = DistributionLibrary(classes=classes, names=names)
    if lib.num_classes != doc["num_classes"]:
        raise ValueError("class count mismatch in header")
    return lib
