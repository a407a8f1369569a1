import math

import pytest
import torch

from pvm.errors import PreconditionError, ShapeError
from pvm.models import (
    ClsConfig,
    ClsModel,
    DepthConfig,
    DepthModel,
    charbonnier_loss,
    cls_forward,
    cross_entropy,
    dc_forward,
    rmse_mae_valid,
    topk_accuracy,
)
from pvm.tensor import MaskedTensor

ONE = torch.ones(1, 1, 1, 1, dtype=torch.bool)


def test_charbonnier_values():
    z = torch.zeros(1, 1, 1, 1)
    assert charbonnier_loss(z, z, ONE).item() == pytest.approx(1e-3, rel=1e-6)
    pred = torch.full((1, 1, 1, 1), 3.0, dtype=torch.float64)
    assert charbonnier_loss(pred, pred * 0, ONE).item() == pytest.approx(3.00000017, abs=1e-8)


def test_charbonnier_ignores_invalid_gt():
    pred = torch.tensor([[[[1.0, 100.0]]]])
    gt = torch.tensor([[[[2.0, 0.0]]]])
    m = torch.tensor([[[[True, False]]]])
    assert charbonnier_loss(pred, gt, m, eps=0.0).item() == 1.0
    with pytest.raises(PreconditionError):
        charbonnier_loss(pred, gt, m & False)
    with pytest.raises(ShapeError):
        charbonnier_loss(pred, gt[..., :1], m)


def test_rmse_mae():
    pred = torch.tensor([[[[3.0, 1.0, 9.0]]]])
    gt = torch.tensor([[[[1.0, 1.0, 0.0]]]])
    m = torch.tensor([[[[True, True, False]]]])
    rmse, mae = rmse_mae_valid(pred, gt, m)
    assert rmse == pytest.approx(math.sqrt(2)) and mae == pytest.approx(1.0)


def test_topk():
    logits = torch.tensor([0.1, 0.9, 0.5])
    assert topk_accuracy(logits, torch.tensor(2), 2) == 1.0
    assert topk_accuracy(logits, torch.tensor(2), 1) == 0.0
    tie = torch.tensor([[1.0, 1.0, 1.0]])
    assert topk_accuracy(tie, torch.tensor([0]), 1) == 1.0
    assert topk_accuracy(tie, torch.tensor([2]), 2) == 0.0
    with pytest.raises(ValueError):
        topk_accuracy(logits, torch.tensor(2), 4)
    with pytest.raises(ValueError):
        topk_accuracy(logits, torch.tensor(3), 1)


def test_cross_entropy():
    assert cross_entropy(torch.zeros(4, 10), torch.arange(4)).item() == pytest.approx(math.log(10))
    big = torch.tensor([[1000.0, 0.0, 0.0]])
    assert cross_entropy(big, torch.tensor([0])).item() == 0.0
    assert math.isfinite(cross_entropy(big, torch.tensor([1])).item())
    with pytest.raises(ValueError):
        cross_entropy(big, torch.tensor([3]))


def _masked_batch(b, c, size, p, seed):
    g = torch.Generator().manual_seed(seed)
    m = torch.rand(b, size, size, generator=g) < p
    m[:, 0, 0] = True
    v = torch.where(m.unsqueeze(1), torch.rand(b, c, size, size, generator=g) * 10, torch.zeros(()))
    return MaskedTensor(v, m, 2)


def test_cls_shapes_and_variants():
    torch.manual_seed(0)
    model = ClsModel(ClsConfig(image_size=16, channels=2, patch=4, dim=8, expand=1, state=2, blocks=1, classes=5))
    x = _masked_batch(3, 2, 16, 0.5, 0)
    with torch.no_grad():
        assert cls_forward(x, model, "pvm").shape == (3, 5)
        assert cls_forward(x, model, "vm").shape == (3, 5)
        assert model(MaskedTensor(x.values[0], x.mask[0], 2)).shape == (5,)
        full = MaskedTensor(x.values, torch.ones_like(x.mask), 2)
        assert torch.allclose(cls_forward(full, model, "pvm"), cls_forward(full, model, "vm"), atol=1e-5)
    with pytest.raises(ValueError):
        cls_forward(x, model, "cnn")
    with pytest.raises(ValueError):
        ClsConfig(image_size=10, patch=4)


def small_depth():
    torch.manual_seed(1)
    return DepthModel(DepthConfig(size=16, features=4, rpssb=1, pvmm_per_block=1, patch=4, dim=8, expand=1, state=2))


def test_depth_forward_pvm():
    model = small_depth()
    x = _masked_batch(2, 1, 16, 0.05, 1)
    with torch.no_grad():
        out = dc_forward(x, model, "pvm")
    assert out.depth.shape == (2, 1, 16, 16) and out.mask.all()
    assert torch.equal(out.dfe_mask_in, out.dfe_mask_out)
    assert bool((out.fill_iters >= 1).all())
    with torch.no_grad():
        dense = dc_forward(MaskedTensor(x.values, torch.ones_like(x.mask), 2), model, "pvm")
    assert dense.fill_iters.tolist() == [0, 0]


def test_depth_forward_vm_bookkeeping():
    model = small_depth()
    x = _masked_batch(2, 1, 16, 0.05, 2)
    with torch.no_grad():
        out = dc_forward(x, model, "vm")
    assert out.depth.shape == (2, 1, 16, 16) and not out.mask.any()
    assert out.fill_iters.tolist() == [0, 0]
    with pytest.raises(ValueError):
        DepthConfig(fill_kernel=4)
