"""Attention-guidance signals.

Tissue guidance (TG) comes from an Otsu foreground mask. Heuristic guidance
(HG) comes from detected cell points: DBSCAN groups them, each group becomes
a filled convex hull, and the union of hulls is the heuristic mask. Either
mask is reduced to per-patch area ratios and normalized to a distribution
over patches.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from sag.grid import PatchGrid, ShapeError, check_raster, patchify

TG = "TG"
HG = "HG"
KINDS = (TG, HG)

DBSCAN_EPS = 20.0
DBSCAN_MIN_SAMPLES = 5


@dataclass
class GuidanceWeights:
    kind: str
    weights: np.ndarray
    degenerate: bool = False
    grid: PatchGrid | None = field(default=None, compare=False)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"guidance kind must be one of {KINDS}, got {self.kind!r}")
        self.weights = np.asarray(self.weights, dtype=np.float64)

    @property
    def p(self) -> int:
        return self.weights.shape[0]

    def to_json(self) -> dict:
        return {
            "kind": self.kind,
            "grid": self.grid.to_dict() if self.grid is not None else None,
            "weights": self.weights.tolist(),
            "degenerate": bool(self.degenerate),
        }

    @classmethod
    def from_json(cls, d: dict) -> "GuidanceWeights":
        validate_guidance_json(d)
        grid = PatchGrid.from_dict(d["grid"]) if d.get("grid") else None
        return cls(d["kind"], np.array(d["weights"], dtype=np.float64), d["degenerate"], grid)


def validate_guidance_json(d: dict) -> None:
    """Check a guidance JSON object against the file schema."""
    if not isinstance(d, dict):
        raise ValueError("guidance JSON must be an object")
    missing = {"kind", "grid", "weights", "degenerate"} - d.keys()
    if missing:
        raise ValueError(f"guidance JSON missing keys: {sorted(missing)}")
    if d["kind"] not in KINDS:
        raise ValueError(f"bad guidance kind {d['kind']!r}")
    if not isinstance(d["degenerate"], bool):
        raise ValueError("'degenerate' must be a boolean")
    w = d["weights"]
    if not isinstance(w, list) or not all(isinstance(v, (int, float)) for v in w):
        raise ValueError("'weights' must be a list of numbers")
    if any(v < 0 for v in w):
        raise ValueError("guidance weights must be nonnegative")
    if d["grid"] is not None:
        grid = PatchGrid.from_dict(d["grid"])
        if grid.p != len(w):
            raise ValueError(f"grid has {grid.p} patches but {len(w)} weights given")
    if not d["degenerate"] and abs(sum(w) - 1.0) > 1e-9:
        raise ValueError("non-degenerate guidance weights must sum to 1")


def guidance_weights(ratios, kind: str, grid: PatchGrid | None = None) -> GuidanceWeights:
    """Normalize mask-area ratios into guidance weights.

    An all-zero input gives an all-zero vector flagged as degenerate.
    """
    ratios = np.asarray(ratios, dtype=np.float64)
    if ratios.ndim != 1:
        raise ShapeError(f"ratios must be a vector, got shape {ratios.shape}")
    if np.any(ratios < 0) or not np.all(np.isfinite(ratios)):
        raise ValueError("mask-area ratios must be finite and nonnegative")
    total = ratios.sum()
    if total <= 0:
        return GuidanceWeights(kind, np.zeros_like(ratios), True, grid)
    return GuidanceWeights(kind, ratios / total, False, grid)


# ---------------------------------------------------------------------------
# Tissue guidance


class Threshold(NamedTuple):
    value: int
    degenerate: bool


def otsu_threshold(gray, levels: int = 256) -> Threshold:
    """Otsu threshold over integer gray levels.

    The classes are ``{< t}`` and ``{>= t}``. Between-class variance is
    compared exactly in integer arithmetic, so ties resolve to the smallest
    ``t``. A constant image has no split and yields ``Threshold(0, True)``.
    """
    gray = np.asarray(gray)
    if gray.size == 0:
        raise ValueError("cannot threshold an empty raster")
    if levels < 1:
        raise ValueError("levels must be positive")
    if not np.issubdtype(gray.dtype, np.integer):
        if not np.all(np.mod(gray, 1) == 0):
            raise ValueError("gray levels must be integers")
        gray = gray.astype(np.int64)
    if gray.min() < 0 or gray.max() >= levels:
        raise ValueError(f"gray levels must lie in [0, {levels})")
    hist = np.bincount(gray.ravel(), minlength=levels)
    return otsu_from_histogram(hist)


def otsu_from_histogram(hist) -> Threshold:
    counts = [int(c) for c in hist]
    n = sum(counts)
    s = sum(i * c for i, c in enumerate(counts))
    best, best_t = None, 0
    n0 = s0 = 0
    # sigma_b^2 * n^2 == (n*s0 - n0*s)^2 / (n0*n1); compare as fractions
    for t in range(1, len(counts)):
        n0 += counts[t - 1]
        s0 += (t - 1) * counts[t - 1]
        n1 = n - n0
        if n0 == 0 or n1 == 0:
            continue
        num = (n * s0 - n0 * s) ** 2
        den = n0 * n1
        if best is None or num * best[1] > best[0] * den:
            best, best_t = (num, den), t
    if best is None or best[0] == 0:
        return Threshold(0, True)
    return Threshold(best_t, False)


def tissue_mask(image, grid: PatchGrid, *, levels: int = 256, tissue_darker: bool = True):
    """Binary tissue mask by Otsu thresholding.

    Returns ``(mask, degenerate)``. With ``tissue_darker`` the pixels below
    the threshold are tissue, otherwise those at or above it.
    """
    image = np.asarray(image)
    check_raster(image, grid, "image")
    t = otsu_threshold(image, levels)
    if t.degenerate:
        return np.zeros(grid.shape, dtype=np.uint8), True
    below = image < t.value
    mask = below if tissue_darker else ~below
    return mask.astype(np.uint8), False


def build_tg(image, grid: PatchGrid, **kw) -> GuidanceWeights:
    mask, degenerate = tissue_mask(image, grid, **kw)
    weights = guidance_weights(patchify(mask, grid), TG, grid)
    weights.degenerate = weights.degenerate or degenerate
    return weights


# ---------------------------------------------------------------------------
# Heuristic guidance


def check_points(points, grid: PatchGrid | None = None) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64)
    if pts.size == 0:
        return pts.reshape(0, 2)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise ShapeError(f"points must have shape (n, 2), got {pts.shape}")
    if not np.all(np.isfinite(pts)):
        raise ValueError("point coordinates must be finite")
    if grid is not None:
        x, y = pts[:, 0], pts[:, 1]
        if x.min() < 0 or y.min() < 0 or x.max() > grid.width or y.max() > grid.height:
            raise ValueError(
                f"points fall outside the {grid.width}x{grid.height} raster bounds"
            )
    return pts


def dbscan(points, eps: float = DBSCAN_EPS, min_samples: int = DBSCAN_MIN_SAMPLES) -> np.ndarray:
    """Density-based clustering; returns per-point labels, -1 for noise.

    A point is core when at least ``min_samples`` points (itself included)
    lie within Euclidean distance ``eps``. Core points within ``eps`` of each
    other share a cluster. A non-core point joins the cluster of its
    lowest-indexed core neighbour. Clusters are numbered in order of their
    lowest-indexed core point.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    if min_samples < 1:
        raise ValueError("min_samples must be >= 1")
    pts = check_points(points)
    n = len(pts)
    labels = np.full(n, -1, dtype=np.int64)
    if n == 0:
        return labels

    diff = pts[:, None, :] - pts[None, :, :]
    adj = np.einsum("ijk,ijk->ij", diff, diff) <= eps * eps
    core = adj.sum(axis=1) >= min_samples

    next_label = 0
    for i in range(n):
        if not core[i] or labels[i] >= 0:
            continue
        labels[i] = next_label
        stack = [i]
        while stack:
            j = stack.pop()
            for k in np.flatnonzero(adj[j] & core):
                if labels[k] < 0:
                    labels[k] = next_label
                    stack.append(k)
        next_label += 1

    for i in np.flatnonzero(~core):
        neighbours = np.flatnonzero(adj[i] & core)
        if neighbours.size:
            labels[i] = labels[neighbours[0]]
    return labels


@dataclass
class ConvexPolygon:
    """Counterclockwise vertices; 1 or 2 vertices mark a degenerate hull."""

    vertices: np.ndarray

    @property
    def degenerate(self) -> bool:
        return len(self.vertices) < 3

    def area(self) -> float:
        if self.degenerate:
            return 0.0
        x, y = self.vertices[:, 0], self.vertices[:, 1]
        return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))

    def contains(self, xy, tol: float = 1e-9) -> np.ndarray:
        """Boundary-inclusive containment for an (n, 2) array of points."""
        xy = np.atleast_2d(np.asarray(xy, dtype=np.float64))
        v = self.vertices
        if self.degenerate:
            return _segment_distance(xy, v[0], v[-1]) <= tol
        inside = np.ones(len(xy), dtype=bool)
        for a, b in zip(v, np.roll(v, -1, axis=0)):
            inside &= _cross(a, b, xy) >= -tol
        return inside


def _cross(o, a, b):
    """z-component of (a - o) x (b - o); ``b`` may be an (n, 2) array."""
    b = np.asarray(b, dtype=np.float64)
    return (a[0] - o[0]) * (b[..., 1] - o[1]) - (a[1] - o[1]) * (b[..., 0] - o[0])


def _segment_distance(xy, a, b) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    d = np.asarray(b, dtype=np.float64) - a
    denom = float(d @ d)
    if denom == 0.0:
        return np.hypot(xy[:, 0] - a[0], xy[:, 1] - a[1])
    t = np.clip(((xy - a) @ d) / denom, 0.0, 1.0)
    closest = a + t[:, None] * d
    return np.hypot(*(xy - closest).T)


def convex_hull(points) -> ConvexPolygon:
    """Monotone-chain hull, counterclockwise, collinear points dropped.

    Fewer than three distinct points, or all collinear, give a degenerate
    polygon: the single point or the two extreme endpoints.
    """
    pts = check_points(points)
    if len(pts) == 0:
        raise ValueError("cannot take the hull of an empty point set")
    uniq = sorted(set(map(tuple, pts.tolist())))
    if len(uniq) <= 2:
        return ConvexPolygon(np.array(uniq, dtype=np.float64))

    def chain(seq):
        out = []
        for p in seq:
            while len(out) >= 2 and _cross(out[-2], out[-1], p) <= 0:
                out.pop()
            out.append(p)
        return out

    lower = chain(uniq)
    upper = chain(reversed(uniq))
    hull = lower[:-1] + upper[:-1]
    if len(hull) < 3:
        hull = [uniq[0], uniq[-1]]
    return ConvexPolygon(np.array(hull, dtype=np.float64))


def rasterize_hulls(hulls, grid: PatchGrid, *, degenerate_radius: float = 0.5) -> np.ndarray:
    """Union of hulls as a mask: a pixel is set iff its centre is inside or on a hull.

    Degenerate hulls (point or segment) set pixels whose centres lie within
    ``degenerate_radius`` of them.
    """
    mask = np.zeros(grid.shape, dtype=np.uint8)
    for hull in hulls:
        v = hull.vertices
        if v.min() < 0 or v[:, 0].max() > grid.width or v[:, 1].max() > grid.height:
            raise ValueError("hull vertices fall outside the raster bounds")
        pad = degenerate_radius if hull.degenerate else 0.0
        c0 = max(int(np.floor(v[:, 0].min() - pad - 0.5)), 0)
        c1 = min(int(np.ceil(v[:, 0].max() + pad + 0.5)), grid.width)
        r0 = max(int(np.floor(v[:, 1].min() - pad - 0.5)), 0)
        r1 = min(int(np.ceil(v[:, 1].max() + pad + 0.5)), grid.height)
        if c1 <= c0 or r1 <= r0:
            continue
        cy, cx = np.mgrid[r0:r1, c0:c1]
        centres = np.column_stack([cx.ravel() + 0.5, cy.ravel() + 0.5])
        if hull.degenerate:
            hit = _segment_distance(centres, v[0], v[-1]) <= degenerate_radius + 1e-9
        else:
            hit = hull.contains(centres)
        mask[r0:r1, c0:c1] |= hit.reshape(r1 - r0, c1 - c0).astype(np.uint8)
    return mask


def cluster_hulls(points, eps: float = DBSCAN_EPS, min_samples: int = DBSCAN_MIN_SAMPLES):
    pts = check_points(points)
    labels = dbscan(pts, eps, min_samples)
    return [convex_hull(pts[labels == k]) for k in range(labels.max(initial=-1) + 1)]


def hg_mask(points, grid: PatchGrid, eps: float = DBSCAN_EPS,
            min_samples: int = DBSCAN_MIN_SAMPLES) -> np.ndarray:
    pts = check_points(points, grid)
    return rasterize_hulls(cluster_hulls(pts, eps, min_samples), grid)


def build_hg(points, grid: PatchGrid, eps: float = DBSCAN_EPS,
             min_samples: int = DBSCAN_MIN_SAMPLES) -> GuidanceWeights:
    """Cell points -> clusters -> hulls -> mask -> patch ratios -> weights."""
    mask = hg_mask(points, grid, eps, min_samples)
    return guidance_weights(patchify(mask, grid), HG, grid)
