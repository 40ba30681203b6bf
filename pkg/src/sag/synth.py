"""Synthetic slides with planted ground truth.

Each slide is a gray raster with dark tissue blobs on a light background.
Lesions sit inside tissue and carry a class-specific pattern in the signal
channels of the patch features. Distractors sit on the background and carry
the pattern of a random class at higher contrast: salient but unrelated to
the label, so a model has to learn where to look. Cell points are scattered
densely inside lesions and sparsely over the rest of the tissue, feeding the
heuristic-guidance pipeline.

All randomness is drawn from generators keyed by (slide seed, stream name);
there is no global random state.
"""

from __future__ import annotations

import dataclasses
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from sag.grid import PatchGrid, patchify, read_mask, read_pgm, write_mask, write_pgm
from sag.guidance import HG, GuidanceWeights, guidance_weights
from sag.io import atomic_write_text, read_json, read_points, write_json, write_points
from sag.models import Bag, feature_source

SPLITS = ("train", "val", "test")


class GenerationError(ValueError):
    """The slide spec cannot be realized."""


@dataclass
class SlideSpec:
    seed: int = 0
    rows: int = 8
    cols: int = 8
    patch_edge: int = 16
    num_classes: int = 4
    scales: tuple = (1,)
    e: int = 16
    signal_channels: int = 4
    # tissue
    tissue_blobs: tuple = (1, 2)
    tissue_radius: tuple = (24.0, 34.0)
    # lesions (class evidence)
    lesion_count: tuple = (1, 1)
    lesion_radius: tuple = (7.0, 10.0)
    delta: float = 2.0
    # distractors (salient, label independent)
    distractors: bool = True
    distractor_count: tuple = (1, 2)
    distractor_radius: tuple = (7.0, 10.0)
    distractor_contrast: float = 3.0
    # cell point process, points per square pixel
    lambda_in: float = 0.08
    lambda_out: float = 0.0008
    # appearance
    background_level: int = 235
    tissue_level: int = 150
    lesion_level: int = 95
    distractor_level: int = 215
    pixel_noise: float = 6.0
    feature_noise: float = 0.35  # on the class-signal and padding channels
    descriptor_noise: float = 0.25  # on the appearance channels

    def __post_init__(self):
        for name in ("tissue_blobs", "tissue_radius", "lesion_count", "lesion_radius",
                     "distractor_count", "distractor_radius", "scales"):
            setattr(self, name, tuple(getattr(self, name)))
        if self.lambda_in <= self.lambda_out:
            raise GenerationError("lambda_in must exceed lambda_out")
        if self.num_classes < 2:
            raise GenerationError("need at least two classes")

    @property
    def grid(self) -> PatchGrid:
        return PatchGrid(self.rows, self.cols, self.patch_edge)

    def scale_grids(self) -> list[PatchGrid]:
        return [self.grid.coarsen(f) for f in self.scales]

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in dataclasses.asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "SlideSpec":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise KeyError(f"unknown slide spec keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class LabeledSlide:
    slide_id: str
    label: int
    raster: np.ndarray
    bags: list
    tissue: np.ndarray
    lesion: np.ndarray
    points: np.ndarray
    distractor: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def lesion_weights(self, grid: PatchGrid) -> GuidanceWeights:
        """Guidance weights of the true lesion mask, the reference for attention quality."""
        return guidance_weights(patchify(self.lesion, grid), HG, grid)


def _rng(seed, stream: str) -> np.random.Generator:
    key = list(seed) if isinstance(seed, (tuple, list)) else [int(seed)]
    return np.random.default_rng(key + [zlib.crc32(stream.encode())])


def class_prototypes(num_classes: int, channels: int, seed: int = 0) -> np.ndarray:
    """Unit-norm class patterns over the signal channels; one-hot when they fit."""
    if num_classes <= channels:
        return np.eye(channels)[:num_classes]
    protos = np.random.default_rng([seed, 7]).standard_normal((num_classes, channels))
    return protos / np.linalg.norm(protos, axis=1, keepdims=True)


def _disc(shape, cx, cy, r) -> np.ndarray:
    yy, xx = np.mgrid[: shape[0], : shape[1]]
    return ((xx + 0.5 - cx) ** 2 + (yy + 0.5 - cy) ** 2) <= r * r


def _randint(rng, lo_hi) -> int:
    lo, hi = lo_hi
    return int(rng.integers(lo, hi + 1))


def generate_slide(spec: SlideSpec, seed, label: int | None = None,
                   slide_id: str | None = None) -> LabeledSlide:
    grid = spec.grid
    h, w = grid.shape
    layout = _rng(seed, "layout")
    if label is None:
        label = int(layout.integers(spec.num_classes))
    if not 0 <= label < spec.num_classes:
        raise GenerationError(f"label {label} out of range")

    if spec.lesion_radius[1] > spec.tissue_radius[0] and spec.lesion_count[1] > 0:
        raise GenerationError("lesions may not fit inside the smallest tissue blob")
    if 2 * spec.tissue_radius[1] > min(h, w):
        raise GenerationError("tissue blobs larger than the raster")

    tissue = np.zeros((h, w), bool)
    blobs = []
    for _ in range(_randint(layout, spec.tissue_blobs)):
        r = layout.uniform(*spec.tissue_radius)
        cx, cy = layout.uniform(r, w - r), layout.uniform(r, h - r)
        blobs.append((cx, cy, r))
        tissue |= _disc((h, w), cx, cy, r)

    lesion = np.zeros((h, w), bool)
    for _ in range(_randint(layout, spec.lesion_count)):
        cx, cy, big = blobs[int(layout.integers(len(blobs)))]
        r = layout.uniform(*spec.lesion_radius)
        rho, th = (big - r) * np.sqrt(layout.uniform()), layout.uniform(0, 2 * np.pi)
        lesion |= _disc((h, w), cx + rho * np.cos(th), cy + rho * np.sin(th), r)
    lesion &= tissue

    protos = class_prototypes(spec.num_classes, spec.signal_channels, spec.seed)
    signal = np.zeros((h, w, spec.signal_channels))
    signal[lesion] += spec.delta * protos[label]

    distractor = np.zeros((h, w), bool)
    if spec.distractors:
        for _ in range(_randint(layout, spec.distractor_count)):
            r = layout.uniform(*spec.distractor_radius)
            for _attempt in range(200):
                cx, cy = layout.uniform(r, w - r), layout.uniform(r, h - r)
                if all(np.hypot(cx - bx, cy - by) >= br + r + 1 for bx, by, br in blobs):
                    break
            else:
                continue
            disc = _disc((h, w), cx, cy, r) & ~tissue
            distractor |= disc
            fake = int(layout.integers(spec.num_classes))
            signal[disc] += spec.distractor_contrast * protos[fake]

    pix = _rng(seed, "pixels")
    raster = np.full((h, w), float(spec.background_level))
    raster[tissue] = spec.tissue_level
    raster[lesion] = spec.lesion_level
    raster[distractor] = spec.distractor_level
    raster = np.clip(np.rint(raster + spec.pixel_noise * pix.standard_normal((h, w))), 0, 255)
    raster = raster.astype(np.int64)

    points = _cell_points(_rng(seed, "cells"), lesion, tissue & ~lesion, spec)

    slide_id = slide_id or f"slide-{zlib.crc32(repr(seed).encode()):08x}"
    noise_seed = int(_rng(seed, "features").integers(2**63))
    bags = []
    for s, g in enumerate(spec.scale_grids()):
        feats = feature_source(raster, g, spec.e, signal=signal,
                               noise=spec.feature_noise,
                               descriptor_noise=spec.descriptor_noise, seed=noise_seed + s)
        bags.append(Bag(feats, label, g, None, s))
    return LabeledSlide(slide_id, label, raster, bags, tissue.astype(np.uint8),
                        lesion.astype(np.uint8), points, distractor.astype(np.uint8),
                        {"seed": list(seed) if isinstance(seed, (tuple, list)) else seed})


def _cell_points(rng, inside, elsewhere, spec: SlideSpec) -> np.ndarray:
    chunks = []
    for region, rate in ((inside, spec.lambda_in), (elsewhere, spec.lambda_out)):
        ys, xs = np.nonzero(region)
        if rate <= 0 or ys.size == 0:
            continue
        n = int(rng.poisson(rate * ys.size))
        pick = rng.integers(ys.size, size=n)
        jitter = rng.uniform(0, 1, (n, 2))
        chunks.append(np.column_stack([xs[pick] + jitter[:, 0], ys[pick] + jitter[:, 1]]))
    if not chunks:
        return np.zeros((0, 2))
    return np.vstack(chunks)


def generate_dataset(spec: SlideSpec, n_train: int, n_val: int, n_test: int,
                     seed: int | None = None) -> dict:
    """Three splits with disjoint seed streams and round-robin class balance."""
    seed = spec.seed if seed is None else seed
    sizes = dict(zip(SPLITS, (n_train, n_val, n_test)))
    out = {}
    for k, (split, n) in enumerate(sizes.items()):
        if n < 1:
            raise ValueError(f"{split} split needs at least one slide")
        out[split] = [
            generate_slide(spec, (seed, k, i), label=i % spec.num_classes,
                           slide_id=f"{split}-{i:04d}")
            for i in range(n)
        ]
    return out


# ---------------------------------------------------------------------------
# On-disk layout


def write_dataset(root, spec: SlideSpec, datasets: dict) -> dict:
    root = Path(root)
    entries = []
    for split, slides in datasets.items():
        for sl in slides:
            d = root / split / sl.slide_id
            d.mkdir(parents=True, exist_ok=True)
            write_pgm(d / "raster.pgm", sl.raster, maxval=255)
            write_mask(d / "tissue.pgm", sl.tissue)
            write_mask(d / "lesion.pgm", sl.lesion)
            write_points(d / "points.csv", sl.points)
            feats = []
            for bag in sl.bags:
                name = f"features_s{bag.scale_id}.csv"
                _write_matrix(d / name, bag.features)
                feats.append(name)
            rel = d.relative_to(root)
            entries.append({
                "id": sl.slide_id,
                "split": split,
                "label": sl.label,
                "raster": str(rel / "raster.pgm"),
                "tissue_mask": str(rel / "tissue.pgm"),
                "lesion_mask": str(rel / "lesion.pgm"),
                "points": str(rel / "points.csv"),
                "features": [str(rel / f) for f in feats],
            })
    manifest = {
        "spec": spec.to_dict(),
        "splits": {s: len(v) for s, v in datasets.items()},
        "slides": entries,
    }
    write_json(root / "manifest.json", manifest)
    return manifest


def _write_matrix(path, m) -> None:
    lines = [",".join(repr(float(v)) for v in row) for row in np.asarray(m)]
    atomic_write_text(path, "\n".join(lines) + "\n")


def _read_matrix(path) -> np.ndarray:
    return np.loadtxt(path, delimiter=",", dtype=np.float64, ndmin=2)


def load_dataset(root) -> tuple[SlideSpec, dict]:
    root = Path(root)
    manifest = read_json(root / "manifest.json")
    spec = SlideSpec.from_dict(manifest["spec"])
    grids = spec.scale_grids()
    out = {s: [] for s in SPLITS}
    for ent in manifest["slides"]:
        raster, _ = read_pgm(root / ent["raster"])
        bags = [Bag(_read_matrix(root / f), ent["label"], grids[s], None, s)
                for s, f in enumerate(ent["features"])]
        out.setdefault(ent["split"], []).append(LabeledSlide(
            ent["id"], ent["label"], raster, bags,
            read_mask(root / ent["tissue_mask"]), read_mask(root / ent["lesion_mask"]),
            read_points(root / ent["points"]),
        ))
    return spec, out
