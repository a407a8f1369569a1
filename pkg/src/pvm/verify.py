"""Self-check suites run by ``pvm verify``.

Each suite draws its random cases from a seeded generator and returns a
:class:`SuiteResult` with one summary line per check.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import torch
import torch.nn.functional as F

from .autodiff import grad_check
from .block import (
    PatchMambaBlock,
    pad_masked_tokens,
    partial_patch_embed,
    patch_embed,
    pvm_forward,
    pvm_residual,
    vm_forward,
)
from .masks import (
    KernelFootprint,
    ValidityRule,
    chebyshev_fill_bound,
    oracle_receptive_field,
    propagate_receptive_field,
)
from .models import (
    ClsConfig,
    ClsModel,
    DepthConfig,
    DepthModel,
    charbonnier_loss,
    cls_forward,
    cross_entropy,
    dc_forward,
)
from .partial import (
    fill_until_valid,
    partial_avg_pool2d,
    partial_global_pool,
    partial_linear,
    pconv2d,
    std_conv2d_masked,
)
from .ssm import SSMParams, VMBlock, discrete_scan, linear_recurrence, selective_scan, vm_block
from .tensor import MaskedTensor, TokenSequence


@dataclass
class SuiteResult:
    name: str
    passed: bool
    lines: list[str] = field(default_factory=list)
    data: dict = field(default_factory=dict)
    seconds: float = 0.0


def _rng(seed: int) -> np.random.Generator:
    return np.random.default_rng(seed)


def random_mask(rng: np.random.Generator, h: int, w: int, need_invalid: bool = False) -> torch.Tensor:
    """Random mask with at least one valid pixel (and one invalid when asked and possible)."""
    density = rng.choice([0.05, 0.3, 0.6, 0.9])
    m = rng.random((h, w)) < density
    m.flat[rng.integers(h * w)] = True
    if need_invalid and h * w > 1 and m.all():
        i = rng.integers(h * w)
        m.flat[i] = False
        if not m.any():
            m.flat[(i + 1) % (h * w)] = True
    return torch.from_numpy(m)


def same_bits(a: torch.Tensor, b: torch.Tensor) -> bool:
    """Bitwise equality (distinguishes -0.0 from 0.0, equates identical NaNs)."""
    if a.shape != b.shape or a.dtype != b.dtype:
        return False
    if a.dtype.is_floating_point:
        int_type = {torch.float32: torch.int32, torch.float64: torch.int64}[a.dtype]
        return torch.equal(a.contiguous().view(int_type), b.contiguous().view(int_type))
    return torch.equal(a, b)


# ---------------------------------------------------------------------------
# receptive-field oracle


def suite_mask_oracle(cases: int = 1000, seed: int = 0) -> SuiteResult:
    rng = _rng(seed)
    t0 = time.perf_counter()
    exact = 0
    failures = []
    for i in range(cases):
        k = int(rng.choice([1, 3, 5]))
        s = int(rng.choice([1, 2]))
        p = int(rng.choice([0, 1, 2]))
        rule = ValidityRule.ALL_VALID if rng.random() < 0.5 else ValidityRule.ANY_VALID
        lo = max(1, k - 2 * p)
        h, w = (int(v) for v in rng.integers(lo, 33, size=2))
        m = torch.from_numpy(rng.random((h, w)) < rng.random())
        fp = KernelFootprint.square(k, s, p)
        got = propagate_receptive_field(m, fp, rule).numpy()
        want = oracle_receptive_field(m, fp, rule)
        if got.shape == want.shape and np.array_equal(got, want):
            exact += 1
        elif len(failures) < 5:
            failures.append(f"case {i}: {h}x{w} k={k} s={s} p={p} {rule.value}")
    dt = time.perf_counter() - t0
    lines = [f"mask-oracle: {exact}/{cases} exact ({dt:.2f} s)"] + failures
    return SuiteResult("mask-oracle", exact == cases, lines, {"exact": exact, "cases": cases}, dt)


# ---------------------------------------------------------------------------
# placeholder agnosticism


def _garbage(rng: np.random.Generator, shape) -> torch.Tensor:
    scale = float(rng.choice([1.0, 1e3, 1e6]))
    return torch.from_numpy(rng.standard_normal(shape).astype(np.float32) * scale)


def _two_inputs(rng, values: torch.Tensor, mask: torch.Tensor, channel_axis: int = -3):
    """Same valid values; zeros at invalid positions in the first, garbage in the second."""
    m = mask.unsqueeze(channel_axis) if values.dim() > mask.dim() else mask
    zero = torch.where(m, values, torch.zeros(()))
    junk = torch.where(m, values, _garbage(rng, values.shape))
    return zero, junk


def _outputs(out) -> list[torch.Tensor]:
    if isinstance(out, MaskedTensor):
        return [out.values, out.mask]
    if isinstance(out, TokenSequence):
        return [out.tokens, out.token_mask]
    if isinstance(out, tuple):
        return [t for o in out for t in _outputs(o)]
    if hasattr(out, "depth"):
        return [out.depth, out.mask, out.fill_iters]
    return [out]


def _agnostic(op: Callable, a, b) -> bool:
    with torch.no_grad():
        return all(same_bits(x, y) for x, y in zip(_outputs(op(a)), _outputs(op(b))))


def _case_conv(rng):
    c, k = int(rng.integers(1, 4)), int(rng.choice([1, 3, 5]))
    h, w = (int(v) for v in rng.integers(k, 17, size=2))
    mask = random_mask(rng, h, w, need_invalid=True)
    values = torch.from_numpy(rng.standard_normal((2, c, h, w)).astype(np.float32))
    mask = torch.stack([mask, random_mask(rng, h, w, need_invalid=True)])
    weight = torch.randn(int(rng.integers(1, 5)), c, k, k)
    bias = torch.randn(weight.shape[0])
    stride, padding = int(rng.choice([1, 2])), int(rng.integers(0, k // 2 + 1))
    return values, mask, weight, bias, stride, padding


def _agnosticism_cases(rng):
    """Yield ``(name, op, input_a, input_b)`` for one random instantiation of every partial op."""
    values, mask, weight, bias, stride, padding = _case_conv(rng)
    a, b = _two_inputs(rng, values, mask)
    yield "pconv2d", lambda x: pconv2d(MaskedTensor(x, mask, 2), weight, bias, stride, padding), a, b

    c, p = int(rng.integers(1, 4)), int(rng.integers(1, 5))
    pv = torch.randn(3, c, p, p)
    pm = torch.stack([random_mask(rng, p, p, need_invalid=True) for _ in range(3)])
    pm[2] = False  # fully invalid patch
    wl, bl = torch.randn(5, c * p * p), torch.randn(5)
    a, b = _two_inputs(rng, pv, pm)
    yield "partial_linear", lambda x: partial_linear(MaskedTensor(x, pm, 2), wl, bl), a, b

    k = int(rng.choice([2, 3]))
    a, b = _two_inputs(rng, values, mask)
    yield "partial_avg_pool2d", lambda x: partial_avg_pool2d(MaskedTensor(x, mask, 2), k, 1, k // 2), a, b

    tl = int(rng.integers(1, 12))
    tok = torch.randn(2, tl, 6)
    tm = torch.from_numpy(rng.random((2, tl)) < 0.5)
    tm[:, 0] = True
    a, b = _two_inputs(rng, tok, tm, channel_axis=-1)
    yield "partial_global_pool", lambda x: partial_global_pool(TokenSequence(x, tm)), a, b

    patch = int(rng.choice([1, 2, 4]))
    h, w = patch * int(rng.integers(1, 5)), patch * int(rng.integers(1, 5))
    c = int(rng.integers(1, 4))
    img = torch.randn(2, c, h, w)
    im = torch.stack([random_mask(rng, h, w, need_invalid=True) for _ in range(2)])
    we, be = torch.randn(8, c * patch * patch), torch.randn(8)
    a, b = _two_inputs(rng, img, im)
    yield "partial_patch_embed", lambda x: partial_patch_embed(MaskedTensor(x, im, 2), we, be, patch), a, b

    padding_kind = str(rng.choice(["learned", "mean", "zero"]))
    block = PatchMambaBlock(c, 8, patch=patch, expand=1, state=2, token_padding=padding_kind,
                            norm_before_substitution=bool(rng.random() < 0.5),
                            scan=str(rng.choice(["bidirectional", "forward"])))
    yield "pvm_forward", lambda x: pvm_forward(MaskedTensor(x, im, 2), block), a, b
    yield "pvm_residual", lambda x: pvm_residual(MaskedTensor(x, im, 2), block), a, b

    ccfg = ClsConfig(image_size=8, channels=c, patch=2, dim=8, expand=1, state=2, blocks=1, classes=4)
    cls = ClsModel(ccfg)
    cm = torch.stack([random_mask(rng, 8, 8, need_invalid=True) for _ in range(2)])
    a, b = _two_inputs(rng, torch.randn(2, c, 8, 8), cm)
    yield "cls_forward(pvm)", lambda x: cls_forward(MaskedTensor(x, cm, 2), cls, "pvm"), a, b

    dcfg = DepthConfig(size=8, features=4, rpssb=1, pvmm_per_block=1, patch=2, dim=8, expand=1, state=2)
    dc = DepthModel(dcfg)
    dm = torch.stack([random_mask(rng, 8, 8, need_invalid=True) for _ in range(2)])
    a, b = _two_inputs(rng, torch.rand(2, 1, 8, 8) * 80, dm)
    yield "dc_forward(pvm)", lambda x: dc_forward(MaskedTensor(x, dm, 2), dc, "pvm"), a, b


def _baseline_cases(rng):
    """Baseline ops on inputs with at least one partially invalid window; yield ``(name, op, a, b)``."""
    values, mask, weight, bias, stride, padding = _case_conv(rng)
    a, b = _two_inputs(rng, values, mask)
    yield "std_conv2d_masked", lambda x: std_conv2d_masked(MaskedTensor(x, mask, 2), weight, bias, stride, padding), a, b
    patch = int(rng.choice([1, 2, 4]))
    h, w = patch * int(rng.integers(1, 5)), patch * int(rng.integers(1, 5))
    c = int(rng.integers(1, 4))
    im = torch.stack([random_mask(rng, h, w, need_invalid=True) for _ in range(2)])
    block = PatchMambaBlock(c, 8, patch=patch, expand=1, state=2)
    a, b = _two_inputs(rng, torch.randn(2, c, h, w), im)
    yield "vm_forward", lambda x: vm_forward(MaskedTensor(x, im, 2), block), a, b


def suite_agnosticism(cases: int = 100, seed: int = 0, baseline_min_fail: float = 0.95) -> SuiteResult:
    torch.manual_seed(seed)
    rng = _rng(seed)
    t0 = time.perf_counter()
    ok: dict[str, int] = {}
    fails: dict[str, int] = {}
    for _ in range(cases):
        for name, op, a, b in _agnosticism_cases(rng):
            ok[name] = ok.get(name, 0) + int(_agnostic(op, a, b))
        for name, op, a, b in _baseline_cases(rng):
            fails[name] = fails.get(name, 0) + int(not _agnostic(op, a, b))
    dt = time.perf_counter() - t0
    lines = [f"agnostic {name}: {n}/{cases}" for name, n in ok.items()]
    lines += [
        f"baseline {name} fails: {n}/{cases} ({n / cases:.0%}, need >= {baseline_min_fail:.0%})"
        for name, n in fails.items()
    ]
    lines.append(f"agnosticism: {dt:.1f} s")
    passed = all(n == cases for n in ok.values()) and all(
        n / cases >= baseline_min_fail for n in fails.values()
    )
    return SuiteResult("agnosticism", passed, lines, {"agnostic": ok, "baseline_fail": fails, "cases": cases}, dt)


# ---------------------------------------------------------------------------
# all-valid reduction


def suite_all_valid(cases: int = 50, seed: int = 0, tol: float = 1e-6) -> SuiteResult:
    """Partial ops on fully valid input against their standard counterparts (no padding)."""
    torch.manual_seed(seed)
    rng = _rng(seed)
    t0 = time.perf_counter()
    worst: dict[str, float] = {}

    def record(name: str, a: torch.Tensor, b: torch.Tensor) -> None:
        worst[name] = max(worst.get(name, 0.0), float((a - b).abs().max()))

    with torch.no_grad():
        for _ in range(cases):
            c, k = int(rng.integers(1, 4)), int(rng.choice([1, 3, 5]))
            h, w = (int(v) for v in rng.integers(k, 17, size=2))
            x = torch.randn(2, c, h, w)
            full = torch.ones(2, h, w, dtype=torch.bool)
            wt, bs = torch.randn(3, c, k, k), torch.randn(3)
            s = int(rng.choice([1, 2]))
            record("pconv2d", pconv2d(MaskedTensor(x, full, 2), wt, bs, s).values,
                   F.conv2d(x, wt, None, s) + bs.view(1, -1, 1, 1))
            record("partial_avg_pool2d", partial_avg_pool2d(MaskedTensor(x, full, 2), k, s).values,
                   F.avg_pool2d(x, k, s))
            wl, bl = torch.randn(4, c * 9), torch.randn(4)
            pv = torch.randn(5, c, 3, 3)
            tok, _ = partial_linear(MaskedTensor(pv, torch.ones(5, 3, 3, dtype=torch.bool), 2), wl, bl)
            record("partial_linear", tok, F.linear(pv.flatten(1), wl, bl))
            t = torch.randn(2, 7, 6)
            vec, _ = partial_global_pool(TokenSequence(t, torch.ones(2, 7, dtype=torch.bool)))
            record("partial_global_pool", vec, t.mean(1))
            patch = int(rng.choice([1, 2, 4]))
            hp, wp = patch * int(rng.integers(1, 5)), patch * int(rng.integers(1, 5))
            img = torch.randn(2, c, hp, wp)
            fullp = torch.ones(2, hp, wp, dtype=torch.bool)
            we, be = torch.randn(8, c * patch * patch), torch.randn(8)
            record("partial_patch_embed", partial_patch_embed(MaskedTensor(img, fullp, 2), we, be, patch).tokens,
                   patch_embed(img, we, be, patch))
            block = PatchMambaBlock(c, 8, patch=patch, expand=int(rng.integers(1, 3)), state=int(rng.integers(1, 5)),
                                    token_padding=str(rng.choice(["learned", "mean", "zero"])))
            pv_out = pvm_forward(MaskedTensor(img, fullp, 2), block)
            vm_out = vm_forward(MaskedTensor(img, fullp, 2), block)
            record("pvm_forward vs vm_forward", pv_out.values, vm_out.values)
            worst["pvm_forward vs vm_forward mask"] = max(
                worst.get("pvm_forward vs vm_forward mask", 0.0), float((pv_out.mask != vm_out.mask).sum())
            )
            model = ClsModel(ClsConfig(image_size=8, channels=c, patch=2, dim=8, expand=1, state=2, blocks=1, classes=4))
            im = torch.randn(2, c, 8, 8)
            f8 = torch.ones(2, 8, 8, dtype=torch.bool)
            record("cls_forward pvm vs vm", cls_forward(MaskedTensor(im, f8, 2), model, "pvm"),
                   cls_forward(MaskedTensor(im, f8, 2), model, "vm"))
    dt = time.perf_counter() - t0
    lines = [f"all-valid {name}: max |diff| = {v:.3g}" for name, v in worst.items()]
    return SuiteResult("all-valid", all(v <= tol for v in worst.values()), lines, {"max_abs": worst}, dt)


# ---------------------------------------------------------------------------
# gradient checks


def _randomize_ssm(module: torch.nn.Module, rng: np.random.Generator) -> torch.nn.Module:
    """Redraw scan weights well away from init so no gradient sits near the error floor."""
    with torch.no_grad():
        for sub in module.modules():
            if isinstance(sub, SSMParams):
                e, n = sub.A_log.shape
                sub.A_log.copy_(torch.from_numpy(rng.uniform(np.log(0.5), np.log(4.0), (e, n))))
                dt = torch.from_numpy(rng.uniform(0.05, 0.5, e))
                sub.delta_bias.copy_(dt + torch.log(-torch.expm1(-dt)))
                sub.D_skip.copy_(torch.from_numpy(rng.standard_normal(e)))
                sub.W_delta.copy_(torch.from_numpy(rng.uniform(-0.5, 0.5, (e, e))))
                sub.W_B.copy_(torch.from_numpy(rng.standard_normal((n, e))))
                sub.W_C.copy_(torch.from_numpy(rng.standard_normal((n, e))))
            elif isinstance(sub, VMBlock):
                sub.in_proj.weight.copy_(torch.from_numpy(rng.standard_normal(sub.in_proj.weight.shape)))
                sub.out_proj.weight.copy_(torch.from_numpy(rng.standard_normal(sub.out_proj.weight.shape)))
    return module


def _leaf(t: torch.Tensor) -> torch.Tensor:
    return t.double().requires_grad_(True)


def _module_params(module: torch.nn.Module, prefix: str) -> dict[str, torch.Tensor]:
    return {f"{prefix}.{n}": p for n, p in module.named_parameters()}


def _gradcheck_cases(rng):
    """Yield ``(name, loss_fn, params, tol, max_entries)`` in float64."""
    L, E, N = 5, 3, 2
    decay = _leaf(torch.rand(2, L, E, N) * 0.9 + 0.05)
    drive = _leaf(torch.randn(2, L, E, N))
    wr = torch.randn(2, L, E, N, dtype=torch.float64)
    yield "linear_recurrence", lambda: (linear_recurrence(decay, drive) * wr).sum(), {"decay": decay, "drive": drive}, 1e-4, None

    u = _leaf(torch.randn(2, L, E))
    bb = _leaf(torch.randn(2, L, E, N))
    cc = _leaf(torch.randn(2, L, N))
    d = _leaf(torch.randn(E))
    wy = torch.randn(2, L, E, dtype=torch.float64)
    yield "discrete_scan(reverse)", lambda: (discrete_scan(u, decay, bb, cc, d, reverse=True) * wy).sum(), \
        {"u": u, "decay": decay, "b_bar": bb, "c": cc, "d": d}, 1e-4, None

    sp = _randomize_ssm(SSMParams(E, N).double(), rng)
    yield "selective_scan", lambda: (selective_scan(u, sp, "backward") * wy).sum(), \
        {"u": u, **_module_params(sp, "ssm")}, 1e-4, None

    vb = _randomize_ssm(VMBlock(4, expand=1, state=2).double(), rng)
    t = _leaf(torch.randn(2, L, 4))
    wt = torch.randn(2, L, 4, dtype=torch.float64)
    yield "vm_block", lambda: (vm_block(t, vb) * wt).sum(), {"t": t, **_module_params(vb, "vm")}, 1e-4, None

    c, h, w = 2, 6, 5
    x = _leaf(torch.randn(2, c, h, w))
    m = torch.stack([random_mask(rng, h, w, need_invalid=True) for _ in range(2)])
    cw, cb = _leaf(torch.randn(3, c, 3, 3)), _leaf(torch.randn(3))
    yield "pconv2d", lambda: (pconv2d(MaskedTensor(x, m, 2), cw, cb, 1, 1).values ** 2).sum(), \
        {"x": x, "w": cw, "b": cb}, 1e-4, None
    yield "std_conv2d_masked", lambda: (std_conv2d_masked(MaskedTensor(x, m, 2), cw, cb, 2, 1).values ** 2).sum(), \
        {"x": x, "w": cw, "b": cb}, 1e-4, None
    yield "partial_avg_pool2d", lambda: (partial_avg_pool2d(MaskedTensor(x, m, 2), 2, 1, 1).values ** 2).sum(), \
        {"x": x}, 1e-4, None

    pv = _leaf(torch.randn(4, c, 2, 2))
    pm = torch.stack([random_mask(rng, 2, 2, need_invalid=True) for _ in range(4)])
    wl, bl = _leaf(torch.randn(3, c * 4)), _leaf(torch.randn(3))
    yield "partial_linear", lambda: (partial_linear(MaskedTensor(pv, pm, 2), wl, bl)[0] ** 2).sum(), \
        {"x": pv, "w": wl, "b": bl}, 1e-4, None

    tok = _leaf(torch.randn(2, 6, 3))
    tm = torch.from_numpy(rng.random((2, 6)) < 0.5)
    tm[:, 0] = True
    mt = _leaf(torch.randn(3))
    yield "partial_global_pool", lambda: (partial_global_pool(TokenSequence(tok, tm))[0] ** 2).sum(), {"t": tok}, 1e-4, None
    yield "pad_masked_tokens(mean)", lambda: (pad_masked_tokens(TokenSequence(tok, tm), "mean") ** 2).sum(), {"t": tok}, 1e-4, None
    yield "pad_masked_tokens(learned)", lambda: (pad_masked_tokens(TokenSequence(tok, tm), "learned", mt) ** 2).sum(), \
        {"t": tok, "tau": mt}, 1e-4, None

    block = _randomize_ssm(PatchMambaBlock(c, 4, patch=2, expand=1, state=2).double(), rng)
    img = _leaf(torch.randn(2, c, 4, 4))
    im = torch.stack([random_mask(rng, 4, 4, need_invalid=True) for _ in range(2)])
    wi = torch.randn(2, c, 4, 4, dtype=torch.float64)
    yield "pvm_forward", lambda: (pvm_forward(MaskedTensor(img, im, 2), block).values * wi).sum(), \
        {"x": img, **_module_params(block, "blk")}, 1e-4, None
    yield "vm_forward", lambda: (vm_forward(MaskedTensor(img, im, 2), block).values * wi).sum(), \
        {"x": img, **{k: v for k, v in _module_params(block, "blk").items() if "mask_token" not in k}}, 1e-4, None

    fm = torch.zeros(2, 5, 5, dtype=torch.bool)
    fm[0, 0, 0] = True
    fm[1, 2, 3] = True
    fx = _leaf(torch.randn(2, 2, 5, 5))
    fw, fb = _leaf(torch.randn(2, 2, 3, 3) * 0.3), _leaf(torch.randn(2))
    yield "fill_until_valid", lambda: (fill_until_valid(MaskedTensor(fx, fm, 2), fw, fb)[0].values ** 2).sum(), \
        {"x": fx, "w": fw, "b": fb}, 1e-4, None

    pred = _leaf(torch.randn(2, 1, 4, 4))
    gt = torch.randn(2, 1, 4, 4, dtype=torch.float64)
    gm = torch.from_numpy(rng.random((2, 1, 4, 4)) < 0.6)
    gm[0, 0, 0, 0] = True
    yield "charbonnier_loss", lambda: charbonnier_loss(pred, gt, gm), {"pred": pred}, 1e-4, None
    logits = _leaf(torch.randn(5, 4))
    labels = torch.from_numpy(rng.integers(0, 4, 5))
    yield "cross_entropy", lambda: cross_entropy(logits, labels), {"logits": logits}, 1e-4, None

    cls = _randomize_ssm(
        ClsModel(ClsConfig(image_size=8, channels=1, patch=2, dim=6, expand=1, state=2, blocks=1, classes=3)).double(), rng
    )
    cx = torch.randn(3, 1, 8, 8, dtype=torch.float64)
    cm = torch.stack([random_mask(rng, 8, 8, need_invalid=True) for _ in range(3)])
    cl = torch.from_numpy(rng.integers(0, 3, 3))
    yield "end-to-end PVM-Cls loss", lambda: cross_entropy(cls_forward(MaskedTensor(cx, cm, 2), cls, "pvm"), cl), \
        dict(cls.named_parameters()), 1e-3, 8


def _invalid_grad_cases(rng):
    """Yield ``(name, fn(values) -> scalar, values, mask)`` for every partial path."""
    c, h, w = 2, 8, 8
    m = torch.stack([random_mask(rng, h, w, need_invalid=True) for _ in range(2)])
    cw, cb = torch.randn(3, c, 3, 3, dtype=torch.float64), torch.randn(3, dtype=torch.float64)
    r = torch.randn(2, 3, 8, 8, dtype=torch.float64)
    yield "pconv2d", lambda x: (pconv2d(MaskedTensor(x, m, 2), cw, cb, 1, 1).values * r).sum(), m
    yield "partial_avg_pool2d", lambda x: (partial_avg_pool2d(MaskedTensor(x, m, 2), 3, 1, 1).values ** 2).sum(), m
    wl = torch.randn(4, c * 4, dtype=torch.float64)
    yield "partial_patch_embed", lambda x: (partial_patch_embed(MaskedTensor(x, m, 2), wl, None, 2).tokens ** 2).sum(), m
    block = PatchMambaBlock(c, 4, patch=2, expand=1, state=2).double()
    yield "pvm_forward", lambda x: (pvm_forward(MaskedTensor(x, m, 2), block).values ** 2).sum(), m
    yield "pvm_residual", lambda x: (pvm_residual(MaskedTensor(x, m, 2), block).values ** 2).sum(), m
    fw = torch.randn(c, c, 3, 3, dtype=torch.float64) * 0.3
    yield "fill_until_valid", lambda x: (fill_until_valid(MaskedTensor(x, m, 2), fw)[0].values ** 2).sum(), m
    cls = ClsModel(ClsConfig(image_size=8, channels=c, patch=2, dim=6, expand=1, state=2, blocks=1, classes=3)).double()
    yield "cls_forward(pvm)", lambda x: cls_forward(MaskedTensor(x, m, 2), cls, "pvm").square().sum(), m
    dc = DepthModel(DepthConfig(size=8, channels=c, features=3, rpssb=1, pvmm_per_block=1, patch=2, dim=4,
                                expand=1, state=2)).double()
    yield "dc_forward(pvm)", lambda x: dc_forward(MaskedTensor(x, m, 2), dc, "pvm").depth.square().sum(), m


def suite_gradcheck(seed: int = 0, instances: int = 20, max_entries: int = 24) -> SuiteResult:
    """Central differences (step 1e-6) over ``instances`` random draws of every primitive.

    Large tensors are subsampled to ``max_entries`` entries per draw; the
    end-to-end classifier loss is checked on every draw as well.
    """
    torch.manual_seed(seed)
    gen = torch.Generator().manual_seed(seed)
    t0 = time.perf_counter()
    worst: dict[str, tuple[float, float, str]] = {}
    counts: dict[str, int] = {}
    for inst in range(instances):
        rng = _rng(seed * 1000 + inst)
        for name, fn, params, tol, cap in _gradcheck_cases(rng):
            res = grad_check(fn, params, step=1e-6, max_entries=cap or max_entries, generator=gen)
            counts[name] = counts.get(name, 0) + res.checked
            if name not in worst or res.max_rel_error > worst[name][0]:
                worst[name] = (res.max_rel_error, tol, f"{res.name}{res.index}")
    lines, data, passed = [], {}, True
    for name, (err, tol, where) in worst.items():
        ok = err <= tol
        passed &= ok
        data[name] = err
        lines.append(
            f"gradcheck {name}: max rel err {err:.2e} over {counts[name]} entries / {instances} draws "
            f"(tol {tol:g}) {'ok' if ok else 'FAIL at ' + where}"
        )
    rng = _rng(seed)
    for name, fn, m in _invalid_grad_cases(rng):
        x = torch.randn(2, 2, 8, 8, dtype=torch.float64, requires_grad=True)
        (g,) = torch.autograd.grad(fn(x), x)
        leak = float(g.masked_select(~m.unsqueeze(1).expand_as(g)).abs().max())
        ok = leak == 0.0
        passed &= ok
        data[f"invalid-grad {name}"] = leak
        lines.append(f"invalid-position gradient {name}: max |g| = {leak:g} {'ok' if ok else 'FAIL'}")
    dt = time.perf_counter() - t0
    lines.append(f"gradcheck: {dt:.1f} s")
    return SuiteResult("gradcheck", passed, lines, data, dt)


# ---------------------------------------------------------------------------
# filling


def suite_fill(cases: int = 200, seed: int = 0) -> SuiteResult:
    torch.manual_seed(seed)
    rng = _rng(seed)
    t0 = time.perf_counter()
    good, tight = 0, 0
    failures = []
    w = torch.randn(2, 2, 3, 3) * 0.3
    for i in range(cases):
        h, wd = (int(v) for v in rng.integers(1, 65, size=2))
        m = random_mask(rng, h, wd)
        if rng.random() < 0.25:  # a single valid pixel stresses the pass count
            m = torch.zeros(h, wd, dtype=torch.bool)
            m[int(rng.integers(h)), int(rng.integers(wd))] = True
        x = torch.randn(2, h, wd)
        out, iters = fill_until_valid(MaskedTensor(x, m, 2), w)
        bound = chebyshev_fill_bound(m, 3)
        ok = bool(out.mask.all()) and int(iters) <= bound
        good += ok
        tight += int(iters) == bound
        if not ok and len(failures) < 5:
            failures.append(f"case {i}: {h}x{wd} iters {int(iters)} bound {bound}")
    center = torch.zeros(5, 5, dtype=torch.bool)
    center[2, 2] = True
    _, iters5 = fill_until_valid(MaskedTensor(torch.randn(2, 5, 5), center, 2), w)
    dt = time.perf_counter() - t0
    lines = [
        f"fill: {good}/{cases} complete within the Chebyshev bound ({tight} exactly at it)",
        f"fill: 5x5 single centre pixel used {int(iters5)} passes (expected 2)",
    ] + failures
    return SuiteResult("fill", good == cases and int(iters5) == 2, lines,
                       {"good": good, "tight": tight, "center_passes": int(iters5)}, dt)


SUITES: dict[str, Callable[..., SuiteResult]] = {
    "mask-oracle": suite_mask_oracle,
    "agnosticism": suite_agnosticism,
    "all-valid": suite_all_valid,
    "gradcheck": suite_gradcheck,
    "fill": suite_fill,
}


def run_suite(name: str, seed: int = 0) -> SuiteResult:
    if name not in SUITES:
        raise KeyError(name)
    t0 = time.perf_counter()
    res = SUITES[name](seed=seed)
    res.seconds = time.perf_counter() - t0
    return res

