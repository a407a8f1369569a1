import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pvm.datagen import (
    REGIME_BANDS,
    BrushGrid,
    DepthSpec,
    Regime,
    ShapesSpec,
    SparseSample,
    depth_dataset,
    gen_depth_field,
    gen_mask,
    gen_shapes_dataset,
    stream,
)
from pvm.errors import InfeasiblePolicyError


def test_streams_are_keyed():
    assert np.array_equal(stream(1, 2, 3).random(4), stream(1, 2, 3).random(4))
    assert not np.array_equal(stream(1, 2, 3).random(4), stream(1, 2, 4).random(4))


@pytest.mark.parametrize("policy", [BrushGrid(), Regime("hard"), SparseSample(0.1)])
def test_masks_deterministic(policy):
    a = gen_mask(policy, 64, 64, seed=3, index=7)
    assert a.dtype == bool and a.shape == (64, 64)
    assert np.array_equal(a, gen_mask(policy, 64, 64, seed=3, index=7))
    assert not np.array_equal(a, gen_mask(policy, 64, 64, seed=3, index=8))


@pytest.mark.parametrize("level", ["easy", "hard", "extreme"])
def test_regime_bands(level):
    lo, hi = REGIME_BANDS[level]
    for i in range(3):
        frac = 1.0 - gen_mask(Regime(level), 256, 256, seed=0, index=i).mean()
        assert lo <= frac <= hi


def test_sparse_count_near_expectation():
    counts = [gen_mask(SparseSample(0.05), 64, 64, seed=0, index=i).sum() for i in range(20)]
    sigma = math.sqrt(4096 * 0.05 * 0.95)
    assert abs(np.mean(counts) - 204.8) <= 3 * sigma / math.sqrt(20)
    assert all(abs(c - 204.8) <= 5 * sigma for c in counts)


def test_infeasible_policies():
    with pytest.raises(InfeasiblePolicyError):
        gen_mask(SparseSample(0.0), 8, 8)
    with pytest.raises(InfeasiblePolicyError):
        gen_mask(Regime("extreme"), 1, 3)
    with pytest.raises(InfeasiblePolicyError):
        gen_mask(BrushGrid(band=(0.99, 1.0)), 8, 8)
    with pytest.raises(InfeasiblePolicyError):
        gen_mask(BrushGrid(), 0, 8)


def _has_full_patch(valid, p):
    h, w = valid.shape
    return any(valid[i : i + p, j : j + p].all() for i in range(0, h - p + 1) for j in range(0, w - p + 1))


@settings(max_examples=15)
@given(st.integers(0, 10**6), st.sampled_from([32, 48, 64]))
def test_brush_cells_in_band_with_valid_patch(seed, size):
    p = BrushGrid(crop=32, band=(0.25, 0.5), patch=4)
    m = gen_mask(p, size, size, seed=seed)
    for oy in range(0, size, 32):
        for ox in range(0, size, 32):
            cell = m[oy : oy + 32, ox : ox + 32]
            assert 0.25 <= 1.0 - cell.mean() <= 0.5
            assert _has_full_patch(cell, 4)


def test_depth_fields():
    spec = DepthSpec(size=32, count=4, seed=0, density=0.05)
    gt, sparse, mask = depth_dataset(spec)
    assert gt.shape == (4, 1, 32, 32) and sparse.shape == gt.shape and mask.shape == (4, 32, 32)
    assert gt.min() >= 1.0 and gt.max() <= 80.0
    assert np.array_equal(sparse[:, 0][mask], gt[:, 0][mask])
    assert not sparse[:, 0][~mask].any()
    g0, _, _ = gen_depth_field(spec, 2)
    assert np.array_equal(g0, gt[2, 0])
    other, _, _ = gen_depth_field(DepthSpec(size=32, seed=1), 2)
    assert (other != g0).mean() > 0.5


def test_shapes_balanced_and_deterministic():
    spec = ShapesSpec(size=16, count=40, seed=0, channels=2, classes=4)
    x, y = gen_shapes_dataset(spec)
    assert x.shape == (40, 2, 16, 16) and x.dtype == np.float32
    assert 0.0 <= x.min() and x.max() <= 1.0
    assert np.bincount(y).tolist() == [10] * 4
    x2, y2 = gen_shapes_dataset(spec)
    assert np.array_equal(x, x2) and np.array_equal(y, y2)
    with pytest.raises(ValueError):
        gen_shapes_dataset(ShapesSpec(classes=11))


def test_shapes_are_learnable():
    # one-vs-rest ridge regression on raw pixels must clear chance by a wide margin
    x, y = gen_shapes_dataset(ShapesSpec(size=32, count=1500, seed=0))
    x = x.reshape(len(x), -1).astype(np.float64)
    x = np.hstack([x, np.ones((len(x), 1))])
    xtr, ytr, xte, yte = x[:1000], y[:1000], x[1000:], y[1000:]
    targets = np.eye(10)[ytr]
    w = np.linalg.solve(xtr.T @ xtr + 10.0 * np.eye(x.shape[1]), xtr.T @ targets)
    acc = ((xte @ w).argmax(1) == yte).mean()
    assert acc > 0.3
