import numpy as np
import pytest
import torch
import torch.nn.functional as F
from hypothesis import given
from hypothesis import strategies as st

from pvm.errors import FillError, PreconditionError, ShapeError
from pvm.masks import KernelFootprint, ValidityRule, chebyshev_fill_bound, propagate_receptive_field
from pvm.partial import (
    fill_until_valid,
    partial_avg_pool2d,
    partial_global_pool,
    partial_linear,
    pconv2d,
    std_conv2d_masked,
)
from pvm.tensor import MaskedTensor, TokenSequence


def test_pconv_renormalises_to_mean_of_valid():
    x = torch.zeros(1, 3, 3)
    m = torch.zeros(3, 3, dtype=torch.bool)
    for (i, j), v in zip([(0, 0), (1, 2), (2, 1)], [3.0, 6.0, 9.0]):
        x[0, i, j] = v
        m[i, j] = True
    x[0, 1, 1] = 500.0  # placeholder under the window
    out = pconv2d(MaskedTensor(x, m, 2), torch.full((1, 1, 3, 3), 1 / 9), torch.zeros(1))
    assert out.values.shape == (1, 1, 1)
    assert out.values.item() == pytest.approx(6.0, abs=1e-6)
    assert out.mask.item()


def test_pconv_empty_window():
    x = MaskedTensor(torch.tensor([[[4.0, 2.0]]]), torch.tensor([[False, True]]), 2)
    out = pconv2d(x, torch.ones(1, 1, 1, 1), torch.ones(1))
    assert out.values.tolist() == [[[0.0, 3.0]]]
    assert out.mask.tolist() == [[False, True]]


def test_pconv_all_valid_matches_conv():
    x = torch.randn(2, 3, 9, 9)
    w, b = torch.randn(4, 3, 3, 3), torch.randn(4)
    out = pconv2d(MaskedTensor(x, torch.ones(2, 9, 9, dtype=torch.bool), 2), w, b, stride=2)
    assert (out.values - F.conv2d(x, w, b, stride=2)).abs().max().item() <= 1e-6


def test_pconv_mask_follows_any_valid_rule():
    x = torch.randn(1, 2, 10, 10)
    m = torch.rand(1, 10, 10) < 0.2
    out = pconv2d(MaskedTensor(x, m, 2), torch.randn(3, 2, 3, 3), None, stride=2, padding=1)
    want = propagate_receptive_field(m, KernelFootprint.square(3, 2, 1), ValidityRule.ANY_VALID)
    assert torch.equal(out.mask, want)
    assert bool((out.values.permute(1, 0, 2, 3)[:, ~out.mask] == 0).all())


def test_pconv_shape_errors():
    x = MaskedTensor(torch.randn(1, 2, 5, 5), torch.ones(1, 5, 5, dtype=torch.bool), 2)
    with pytest.raises(ShapeError):
        pconv2d(x, torch.randn(3, 4, 3, 3))
    with pytest.raises(ShapeError):
        pconv2d(x, torch.randn(3, 2, 3, 3), torch.randn(2))


def test_std_conv_centre_hole_erodes_everything():
    m = torch.ones(3, 3, dtype=torch.bool)
    m[1, 1] = False
    x = MaskedTensor(torch.randn(1, 3, 3), m, 2)
    out = std_conv2d_masked(x, torch.randn(1, 1, 3, 3), None, padding=1)
    assert not out.mask.any()


def test_std_conv_reads_placeholders():
    m = torch.ones(3, 3, dtype=torch.bool)
    m[1, 1] = False
    w = torch.randn(1, 1, 3, 3)
    a = std_conv2d_masked(MaskedTensor(torch.zeros(1, 3, 3), m, 2), w)
    b = std_conv2d_masked(MaskedTensor(torch.zeros(1, 3, 3).index_put((torch.tensor([0]), torch.tensor([1]), torch.tensor([1])), torch.tensor([5.0])), m, 2), w)
    assert a.values.item() != b.values.item()


def test_partial_linear_mean_pad():
    x = MaskedTensor(torch.tensor([[2.0, 4.0, 77.0]]), torch.tensor([True, True, False]), 1)
    token, valid = partial_linear(x, torch.full((1, 3), 1 / 3), torch.zeros(1))
    assert token.item() == pytest.approx(3.0) and bool(valid)


def test_partial_linear_full_and_empty():
    w, b = torch.randn(5, 8), torch.randn(5)
    v = torch.randn(2, 2, 2)
    token, valid = partial_linear(MaskedTensor(v, torch.ones(2, 2, dtype=torch.bool), 2), w, b)
    assert torch.allclose(token, F.linear(v.flatten(), w, b), atol=1e-6) and bool(valid)
    token, valid = partial_linear(MaskedTensor(v, torch.zeros(2, 2, dtype=torch.bool), 2), w, b)
    assert bool((token == 0).all()) and not bool(valid)


def test_partial_linear_per_channel_mean():
    v = torch.tensor([[1.0, 3.0, 0.0, 0.0], [10.0, 30.0, 0.0, 0.0]])
    m = torch.tensor([True, True, False, False])
    w = torch.zeros(2, 8)
    w[0, 2], w[1, 7] = 1.0, 1.0  # read back the padded entries of each channel
    token, _ = partial_linear(MaskedTensor(v, m, 1), w, None)
    assert token.tolist() == [2.0, 20.0]


def test_partial_avg_pool():
    x2 = MaskedTensor(torch.tensor([[[1.0, 3.0], [100.0, 5.0]]]), torch.tensor([[True, True], [False, False]]), 2)
    out = partial_avg_pool2d(x2, 2)
    assert out.values.item() == 2.0 and out.mask.item()
    empty = partial_avg_pool2d(MaskedTensor(x2.values, torch.zeros(2, 2, dtype=torch.bool), 2), 2)
    assert empty.values.item() == 0.0 and not empty.mask.item()
    full = torch.randn(1, 2, 6, 6)
    ref = F.avg_pool2d(full, 2)
    got = partial_avg_pool2d(MaskedTensor(full, torch.ones(1, 6, 6, dtype=torch.bool), 2), 2).values
    assert (got - ref).abs().max().item() <= 1e-6


def test_partial_global_pool():
    t = torch.tensor([[1.0, 2.0], [99.0, -99.0], [3.0, 6.0]])
    m = torch.tensor([True, False, True])
    vec, valid = partial_global_pool(TokenSequence(t, m))
    assert vec.tolist() == [2.0, 4.0] and bool(valid)
    t2 = t.clone()
    t2[1] = 1e9
    assert torch.equal(partial_global_pool(TokenSequence(t2, m))[0], vec)
    assert torch.equal(partial_global_pool(TokenSequence(t, torch.ones(3, dtype=torch.bool)))[0], t.mean(0))
    vec, valid = partial_global_pool(TokenSequence(t, torch.zeros(3, dtype=torch.bool)))
    assert bool((vec == 0).all()) and not bool(valid)


def test_fill_single_centre_pixel_two_passes():
    m = torch.zeros(5, 5, dtype=torch.bool)
    m[2, 2] = True
    out, iters = fill_until_valid(MaskedTensor(torch.randn(3, 5, 5), m, 2), torch.randn(3, 3, 3, 3))
    assert int(iters) == 2 and bool(out.mask.all())


def test_fill_already_valid_is_untouched():
    x = torch.randn(2, 3, 6, 6)
    out, iters = fill_until_valid(MaskedTensor(x, torch.ones(2, 6, 6, dtype=torch.bool), 2), torch.randn(3, 3, 3, 3))
    assert iters.tolist() == [0, 0] and torch.equal(out.values, x)


def test_fill_per_sample_stop():
    m = torch.ones(2, 6, 6, dtype=torch.bool)
    m[1] = False
    m[1, 0, 0] = True
    x = torch.randn(2, 1, 6, 6)
    out, iters = fill_until_valid(MaskedTensor(x, m, 2), torch.randn(1, 1, 3, 3))
    assert iters.tolist() == [0, 5]
    assert torch.equal(out.values[0], x[0])


def test_fill_errors():
    w = torch.randn(1, 1, 3, 3)
    with pytest.raises(PreconditionError):
        fill_until_valid(MaskedTensor(torch.randn(1, 4, 4), torch.zeros(4, 4, dtype=torch.bool), 2), w)
    m = torch.zeros(9, 9, dtype=torch.bool)
    m[0, 0] = True
    with pytest.raises(FillError) as err:
        fill_until_valid(MaskedTensor(torch.randn(1, 9, 9), m, 2), w, max_iters=3)
    assert err.value.iters == 3
    with pytest.raises(ShapeError):
        fill_until_valid(MaskedTensor(torch.randn(1, 4, 4), m[:4, :4], 2), torch.randn(1, 1, 2, 2))


def _two_fillings(seed, shape, mask):
    rng = np.random.default_rng(seed)
    base = torch.from_numpy(rng.standard_normal(shape).astype(np.float32))
    junk = torch.from_numpy((rng.standard_normal(shape) * 1e4).astype(np.float32))
    m = mask.unsqueeze(-3)
    return torch.where(m, base, torch.zeros(())), torch.where(m, base, junk)


@given(st.integers(0, 10**6), st.sampled_from([1, 3, 5]), st.sampled_from([1, 2]), st.integers(0, 2))
def test_pconv_placeholder_agnostic(seed, k, stride, padding):
    g = torch.Generator().manual_seed(seed)
    m = torch.rand(2, 9, 9, generator=g) < 0.5
    a, b = _two_fillings(seed, (2, 3, 9, 9), m)
    w, bias = torch.randn(4, 3, k, k, generator=g), torch.randn(4, generator=g)
    ya = pconv2d(MaskedTensor(a, m, 2), w, bias, stride, padding)
    yb = pconv2d(MaskedTensor(b, m, 2), w, bias, stride, padding)
    assert torch.equal(ya.values, yb.values) and torch.equal(ya.mask, yb.mask)


@given(st.integers(0, 10**6), st.integers(1, 4))
def test_pool_and_linear_placeholder_agnostic(seed, p):
    g = torch.Generator().manual_seed(seed)
    m = torch.rand(3, p, p, generator=g) < 0.5
    a, b = _two_fillings(seed, (3, 2, p, p), m)
    w = torch.randn(5, 2 * p * p, generator=g)
    assert torch.equal(partial_linear(MaskedTensor(a, m, 2), w)[0], partial_linear(MaskedTensor(b, m, 2), w)[0])
    pa = partial_avg_pool2d(MaskedTensor(a, m, 2), 2, 1, 1)
    pb = partial_avg_pool2d(MaskedTensor(b, m, 2), 2, 1, 1)
    assert torch.equal(pa.values, pb.values)


@given(st.integers(1, 24), st.integers(1, 24), st.integers(0, 10**6))
def test_fill_within_chebyshev_bound(h, w, seed):
    g = torch.Generator().manual_seed(seed)
    m = torch.rand(h, w, generator=g) < 0.1
    m[seed % h, (seed // h) % w] = True
    out, iters = fill_until_valid(MaskedTensor(torch.randn(1, h, w, generator=g), m, 2), torch.randn(1, 1, 3, 3, generator=g))
    assert bool(out.mask.all())
    assert int(iters) <= chebyshev_fill_bound(m, 3)
