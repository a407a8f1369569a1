"""Seeded generators for validity masks and synthetic datasets.

All randomness comes from counter-based Philox streams keyed by
``(seed, purpose, index, ...)``, so every sample can be regenerated on its own,
in any order, with identical bits.  Masks are boolean arrays with ``True`` for
valid pixels.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Literal, Union

import numpy as np

from .errors import InfeasiblePolicyError

__all__ = [
    "stream",
    "BrushGrid",
    "Regime",
    "SparseSample",
    "MaskPolicy",
    "REGIME_BANDS",
    "gen_mask",
    "DepthSpec",
    "gen_depth_field",
    "depth_dataset",
    "ShapesSpec",
    "SHAPE_NAMES",
    "gen_shapes_dataset",
]

# stream purposes
_MASK, _DEPTH, _SHAPES, _SPARSE, _LABELS = 11, 23, 37, 41, 53


def stream(seed: int, *keys: int) -> np.random.Generator:
    """Independent generator for ``(seed, *keys)``."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), *map(int, keys)])))


REGIME_BANDS: dict[str, tuple[float, float]] = {
    "easy": (0.25, 0.50),
    "hard": (0.50, 0.75),
    "extreme": (0.75, 0.90),
}


@dataclass(frozen=True)
class BrushGrid:
    """Free-form brush strokes drawn independently inside each grid cell.

    ``crop`` is clamped to the image size.  Widths and segment lengths are
    fractions of the crop side.  Each cell's invalid fraction is driven into
    ``band`` while keeping at least one fully valid ``patch x patch`` block.
    """

    crop: int = 96
    strokes_vertices: tuple[int, int] = (3, 6)
    width: tuple[float, float] = (0.06, 0.15)
    segment: tuple[float, float] = (0.15, 0.45)
    band: tuple[float, float] = (0.25, 0.50)
    patch: int = 4


@dataclass(frozen=True)
class Regime:
    """Full-image random rectangles and strokes at an easy/hard/extreme invalid fraction."""

    level: Literal["easy", "hard", "extreme"] = "easy"

    @property
    def band(self) -> tuple[float, float]:
        return REGIME_BANDS[self.level]


@dataclass(frozen=True)
class SparseSample:
    """Independent Bernoulli valid bits at ``density``."""

    density: float = 0.05


MaskPolicy = Union[BrushGrid, Regime, SparseSample]


def _segment_mask(shape: tuple[int, int], p0, p1, radius: float) -> np.ndarray:
    h, w = shape
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64) + 0.5
    (y0, x0), (y1, x1) = p0, p1
    dy, dx = y1 - y0, x1 - x0
    den = dy * dy + dx * dx
    if den == 0:
        t = np.zeros_like(yy)
    else:
        t = np.clip(((yy - y0) * dy + (xx - x0) * dx) / den, 0.0, 1.0)
    py, px = y0 + t * dy, x0 + t * dx
    return (yy - py) ** 2 + (xx - px) ** 2 <= radius * radius


def _stroke(rng: np.random.Generator, shape: tuple[int, int], side: int, p: BrushGrid) -> np.ndarray:
    h, w = shape
    out = np.zeros(shape, dtype=bool)
    n_vert = int(rng.integers(p.strokes_vertices[0], p.strokes_vertices[1] + 1))
    radius = max(0.5, rng.uniform(*p.width) * side / 2)
    y, x = rng.uniform(0, h), rng.uniform(0, w)
    for _ in range(n_vert):
        angle = rng.uniform(0, 2 * math.pi)
        length = rng.uniform(*p.segment) * side
        ny = float(np.clip(y + length * math.sin(angle), 0, h))
        nx = float(np.clip(x + length * math.cos(angle), 0, w))
        out |= _segment_mask(shape, (y, x), (ny, nx), radius)
        y, x = ny, nx
    return out


def _has_valid_patch(invalid: np.ndarray, oy: int, ox: int, patch: int) -> bool:
    h, w = invalid.shape
    # patches aligned to the global grid
    sy = -(-oy // patch) * patch - oy
    sx = -(-ox // patch) * patch - ox
    for i in range(sy, h - patch + 1, patch):
        for j in range(sx, w - patch + 1, patch):
            if not invalid[i : i + patch, j : j + patch].any():
                return True
    return False


def _band_feasible(n: int, lo: float, hi: float) -> bool:
    k = math.ceil(lo * n)
    return k < n and k / n < hi


def _brush_cell(rng, shape, oy, ox, p: BrushGrid) -> np.ndarray:
    n = shape[0] * shape[1]
    lo, hi = p.band
    if not _band_feasible(n, lo, hi) or min(shape) < p.patch:
        raise InfeasiblePolicyError(f"brush band {p.band} infeasible for a {shape} cell")
    side = min(shape)
    for _ in range(20):
        target = rng.uniform(lo, hi)
        invalid = np.zeros(shape, dtype=bool)
        rejects = 0
        while invalid.mean() < target and rejects < 40:
            cand = invalid | _stroke(rng, shape, side, p)
            if cand.mean() >= hi or not _has_valid_patch(cand, oy, ox, p.patch):
                rejects += 1
                continue
            invalid = cand
        if lo <= invalid.mean() < hi:
            return invalid
    raise InfeasiblePolicyError(f"could not reach brush band {p.band} in a {shape} cell")


def _regime_mask(rng, h: int, w: int, band: tuple[float, float]) -> np.ndarray:
    lo, hi = band
    if not _band_feasible(h * w, lo, hi):
        raise InfeasiblePolicyError(f"invalid-fraction band {band} is unreachable on a {h}x{w} image")
    side = min(h, w)
    for _ in range(50):
        target = rng.uniform(lo, hi)
        invalid = np.zeros((h, w), dtype=bool)
        rejects = 0
        shrink = 1.0
        while invalid.mean() < target and rejects < 200:
            if rng.random() < 0.5:
                rh = max(1, int(rng.uniform(0.05, 0.5) * h * shrink))
                rw = max(1, int(rng.uniform(0.05, 0.5) * w * shrink))
                y, x = int(rng.integers(0, h - rh + 1)), int(rng.integers(0, w - rw + 1))
                shape_mask = np.zeros((h, w), dtype=bool)
                shape_mask[y : y + rh, x : x + rw] = True
            else:
                stroke = BrushGrid(width=(0.03 * shrink, 0.12 * shrink), segment=(0.1, 0.5))
                shape_mask = _stroke(rng, (h, w), side, stroke)
            cand = invalid | shape_mask
            if cand.mean() >= hi:
                rejects += 1
                shrink = max(0.05, shrink * 0.8)
                continue
            invalid = cand
        if lo <= invalid.mean() < hi:
            return invalid
        # pixel-level completion when shapes cannot land inside a narrow band
        need = math.ceil(target * h * w) - int(invalid.sum())
        free = np.flatnonzero(~invalid.ravel())
        if 0 < need < free.size:
            pick = rng.choice(free, size=need, replace=False)
            invalid.ravel()[pick] = True
            if lo <= invalid.mean() < hi:
                return invalid
    raise InfeasiblePolicyError(f"could not reach band {band} on a {h}x{w} image")


def gen_mask(policy: MaskPolicy, h: int, w: int, seed: int = 0, index: int = 0) -> np.ndarray:
    """Boolean validity mask (``True`` = valid) with at least one valid pixel."""
    if h < 1 or w < 1:
        raise InfeasiblePolicyError("mask size must be positive")
    if isinstance(policy, SparseSample):
        if not 0.0 < policy.density <= 1.0:
            raise InfeasiblePolicyError(f"density {policy.density} would give an all-invalid mask")
        rng = stream(seed, _SPARSE, index)
        while True:
            m = rng.random((h, w)) < policy.density
            if m.any():
                return m
    if isinstance(policy, Regime):
        rng = stream(seed, _MASK, index, 1)
        return ~_regime_mask(rng, h, w, policy.band)
    if isinstance(policy, BrushGrid):
        crop = min(policy.crop, h, w)
        invalid = np.zeros((h, w), dtype=bool)
        for ci, oy in enumerate(range(0, h, crop)):
            for cj, ox in enumerate(range(0, w, crop)):
                rng = stream(seed, _MASK, index, 2, ci, cj)
                cell = (min(crop, h - oy), min(crop, w - ox))
                invalid[oy : oy + cell[0], ox : ox + cell[1]] = _brush_cell(rng, cell, oy, ox, policy)
        return ~invalid
    raise TypeError(f"unknown mask policy {policy!r}")


@dataclass(frozen=True)
class DepthSpec:
    size: int = 64
    count: int = 1000
    seed: int = 0
    density: float = 0.05


def gen_depth_field(spec: DepthSpec, index: int = 0) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """One synthetic depth field.

    Returns ``(gt, sparse_values, mask)``: ``gt`` is a ``size x size`` map in
    meters clipped to [1, 80] (affine ramp plus smooth Gaussian bumps),
    ``sparse_values`` equals ``gt`` at the sampled valid pixels and 0 elsewhere.
    """
    rng = stream(spec.seed, _DEPTH, index)
    n = spec.size
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64) / max(n - 1, 1)
    base = rng.uniform(8.0, 60.0)
    gy, gx = rng.uniform(-25.0, 25.0, size=2)
    gt = base + gy * (yy - 0.5) + gx * (xx - 0.5)
    for _ in range(int(rng.integers(2, 7))):
        amp = rng.uniform(-20.0, 20.0)
        cy, cx = rng.uniform(0, 1, size=2)
        sigma = rng.uniform(0.05, 0.25)
        gt += amp * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma * sigma))
    gt = np.clip(gt, 1.0, 80.0).astype(np.float32)
    mask = gen_mask(SparseSample(spec.density), n, n, seed=spec.seed, index=index)
    sparse = np.where(mask, gt, np.float32(0.0)).astype(np.float32)
    return gt, sparse, mask


def depth_dataset(spec: DepthSpec, offset: int = 0):
    """Stack ``spec.count`` fields; arrays ``(n, 1, H, W)``, ``(n, 1, H, W)``, ``(n, H, W)``."""
    gts, sparse, masks = [], [], []
    for i in range(spec.count):
        g, s, m = gen_depth_field(spec, offset + i)
        gts.append(g)
        sparse.append(s)
        masks.append(m)
    return np.stack(gts)[:, None], np.stack(sparse)[:, None], np.stack(masks)


SHAPE_NAMES = (
    "circle",
    "square",
    "triangle",
    "cross",
    "ring",
    "bar-h",
    "bar-v",
    "checker",
    "diamond",
    "dot-grid",
)


@dataclass(frozen=True)
class ShapesSpec:
    size: int = 32
    count: int = 5000
    seed: int = 0
    channels: int = 1
    classes: int = 10
    noise: float = 0.05


def _render_shape(kind: int, u: np.ndarray, v: np.ndarray, s: float) -> np.ndarray:
    r = np.sqrt(u * u + v * v)
    au, av = np.abs(u), np.abs(v)
    name = SHAPE_NAMES[kind]
    if name == "circle":
        return r <= s
    if name == "square":
        return np.maximum(au, av) <= 0.8 * s
    if name == "triangle":
        return (v <= 0.8 * s) & (v >= -0.9 * s + 1.8 * au)
    if name == "cross":
        return ((au <= 0.3 * s) & (av <= s)) | ((av <= 0.3 * s) & (au <= s))
    if name == "ring":
        return (r <= s) & (r >= 0.55 * s)
    if name == "bar-h":
        return (av <= 0.3 * s) & (au <= s)
    if name == "bar-v":
        return (au <= 0.3 * s) & (av <= s)
    if name == "checker":
        inside = np.maximum(au, av) <= 0.9 * s
        cell = np.floor((u + s) / (0.9 * s)) + np.floor((v + s) / (0.9 * s))
        return inside & (cell % 2 == 0)
    if name == "diamond":
        return au + av <= s
    if name == "dot-grid":
        gu = u - np.round(u / (0.7 * s)) * 0.7 * s
        gv = v - np.round(v / (0.7 * s)) * 0.7 * s
        return (np.maximum(au, av) <= 1.05 * s) & (gu * gu + gv * gv <= (0.2 * s) ** 2)
    raise ValueError(kind)


def _shape_image(spec: ShapesSpec, label: int, index: int) -> np.ndarray:
    rng = stream(spec.seed, _SHAPES, index)
    n = spec.size
    s = rng.uniform(0.2, 0.34) * n
    margin = s + 1
    cy, cx = rng.uniform(margin, n - margin, size=2)
    theta = rng.uniform(-0.25, 0.25)
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64) + 0.5
    dy, dx = yy - cy, xx - cx
    u = math.cos(theta) * dx + math.sin(theta) * dy
    v = -math.sin(theta) * dx + math.cos(theta) * dy
    fg_mask = _render_shape(label, u, v, s)
    bg = rng.uniform(0.15, 0.45, size=spec.channels)
    fg = rng.uniform(0.65, 0.95, size=spec.channels)
    img = np.where(fg_mask[None], fg[:, None, None], bg[:, None, None])
    img = img + rng.normal(0.0, spec.noise, size=img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def gen_shapes_dataset(spec: ShapesSpec) -> tuple[np.ndarray, np.ndarray]:
    """Balanced labeled shape renders: ``images (n, C, H, W)`` in [0, 1], ``labels (n,)``."""
    if spec.classes > len(SHAPE_NAMES) or spec.classes < 2:
        raise ValueError(f"classes must be in [2, {len(SHAPE_NAMES)}]")
    labels = np.arange(spec.count) % spec.classes
    labels = stream(spec.seed, _LABELS).permutation(labels)
    images = np.stack([_shape_image(spec, int(lab), i) for i, lab in enumerate(labels)])
    return images, labels.astype(np.int64)
