import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from pvm.errors import PreconditionError, ShapeError
from pvm.masks import (
    KernelFootprint,
    ValidityRule,
    chebyshev_fill_bound,
    oracle_receptive_field,
    propagate_dense,
    propagate_receptive_field,
    propagate_sequence,
)

ALL, ANY = ValidityRule.ALL_VALID, ValidityRule.ANY_VALID


def centre_hole():
    m = torch.ones(3, 3, dtype=torch.bool)
    m[1, 1] = False
    return m


def test_centre_hole_all_valid_kills_everything():
    fp = KernelFootprint.square(3, 1, 1)
    out = propagate_receptive_field(centre_hole(), fp, ALL)
    assert out.shape == (3, 3) and not out.any()
    assert np.array_equal(oracle_receptive_field(centre_hole(), fp, ALL), out.numpy())


def test_centre_hole_any_valid_keeps_everything():
    fp = KernelFootprint.square(3, 1, 1)
    out = propagate_receptive_field(centre_hole(), fp, ANY)
    assert out.all()
    assert np.array_equal(oracle_receptive_field(centre_hole(), fp, ANY), out.numpy())


@pytest.mark.parametrize("rule", [ALL, ANY])
def test_all_valid_without_padding(rule):
    fp = KernelFootprint.square(3, 2, 0)
    out = propagate_receptive_field(torch.ones(7, 6, dtype=torch.bool), fp, rule)
    assert out.shape == (3, 2) and out.all()
    assert np.array_equal(oracle_receptive_field(torch.ones(7, 6, dtype=torch.bool), fp, rule), out.numpy())


@pytest.mark.parametrize("rule", [ALL, ANY])
def test_unit_kernel_is_strided_crop(rule):
    m = torch.rand(9, 7) < 0.5
    out = propagate_receptive_field(m, KernelFootprint.square(1, 2, 0), rule)
    assert torch.equal(out, m[::2, ::2])


def test_output_size_and_errors():
    assert KernelFootprint.square(3, 2, 1).output_size(7, 8) == (4, 4)
    with pytest.raises(ShapeError):
        KernelFootprint.square(5).output_size(3, 3)
    with pytest.raises(ValueError):
        KernelFootprint(0, 3)


def test_batched_masks():
    m = torch.rand(2, 3, 8, 8) < 0.5
    out = propagate_receptive_field(m, KernelFootprint.square(3, 1, 1), ANY)
    assert out.shape == (2, 3, 8, 8)
    assert np.array_equal(out[1, 2].numpy(), oracle_receptive_field(m[1, 2], KernelFootprint.square(3, 1, 1), ANY))


def test_dense_rule():
    m = torch.tensor([1, 1, 0], dtype=torch.bool)
    assert not bool(propagate_dense(m, ALL)) and bool(propagate_dense(m, ANY))
    z = torch.zeros(4, dtype=torch.bool)
    assert not bool(propagate_dense(z, ALL)) and not bool(propagate_dense(z, ANY))
    o = torch.ones(4, dtype=torch.bool)
    assert bool(propagate_dense(o, ALL)) and bool(propagate_dense(o, ANY))
    with pytest.raises(ShapeError):
        propagate_dense(torch.zeros(0, dtype=torch.bool), ALL)


def seq(bits):
    return torch.tensor(bits, dtype=torch.bool)


def test_sequence_rules():
    assert propagate_sequence(seq([1, 0, 1]), "forward", ALL).tolist() == [True, False, False]
    assert propagate_sequence(seq([0, 0, 1]), "forward", ANY).tolist() == [False, False, True]
    assert propagate_sequence(seq([1, 0, 1]), "backward", ALL).tolist() == [False, False, True]
    assert propagate_sequence(seq([1, 1, 0, 1]), "bidirectional", ALL).tolist() == [False] * 4
    assert propagate_sequence(seq([0, 1, 0]), "bidirectional", ANY).tolist() == [True] * 3
    with pytest.raises(ValueError):
        propagate_sequence(seq([1]), "sideways", ALL)
    with pytest.raises(ShapeError):
        propagate_sequence(torch.zeros(0, dtype=torch.bool), "forward", ALL)


def test_chebyshev_bound():
    m = torch.zeros(5, 5, dtype=torch.bool)
    m[2, 2] = True
    assert chebyshev_fill_bound(m, 3) == 2
    assert chebyshev_fill_bound(m, 5) == 1
    assert chebyshev_fill_bound(torch.ones(3, 3, dtype=torch.bool), 3) == 0
    with pytest.raises(PreconditionError):
        chebyshev_fill_bound(torch.zeros(3, 3, dtype=torch.bool), 3)


footprints = st.builds(
    KernelFootprint.square, st.sampled_from([1, 2, 3, 5]), st.sampled_from([1, 2, 3]), st.sampled_from([0, 1, 2])
)


def _mask(seed, h, w, p=0.5):
    return torch.from_numpy(np.random.default_rng(seed).random((h, w)) < p)


@given(footprints, st.integers(5, 16), st.integers(5, 16), st.integers(0, 10**6), st.sampled_from([ALL, ANY]))
def test_oracle_equivalence(fp, h, w, seed, rule):
    m = _mask(seed, h, w)
    assert np.array_equal(propagate_receptive_field(m, fp, rule).numpy(), oracle_receptive_field(m, fp, rule))


@given(footprints, st.integers(5, 12), st.integers(0, 10**6))
def test_monotone_in_valid_pixels(fp, n, seed):
    m = _mask(seed, n, n, 0.4)
    more = m | _mask(seed + 1, n, n, 0.3)
    for rule in (ALL, ANY):
        lo, hi = propagate_receptive_field(m, fp, rule), propagate_receptive_field(more, fp, rule)
        assert bool((lo <= hi).all())


@given(st.sampled_from([1, 2, 3, 5]), st.integers(5, 12), st.integers(0, 10**6))
def test_duality_without_padding(k, n, seed):
    m = _mask(seed, n, n)
    fp = KernelFootprint.square(k)
    assert torch.equal(propagate_receptive_field(m, fp, ALL), ~propagate_receptive_field(~m, fp, ANY))


@given(st.lists(st.booleans(), min_size=1, max_size=16), st.sampled_from(["forward", "backward", "bidirectional"]),
       st.sampled_from([ALL, ANY]))
def test_sequence_idempotent(bits, direction, rule):
    once = propagate_sequence(seq(bits), direction, rule)
    assert torch.equal(propagate_sequence(once, direction, rule), once)


@given(footprints, st.integers(5, 12), st.integers(0, 10**6))
def test_erosion_inside_dilation(fp, n, seed):
    m = _mask(seed, n, n)
    assert bool((propagate_receptive_field(m, fp, ALL) <= propagate_receptive_field(m, fp, ANY)).all())
