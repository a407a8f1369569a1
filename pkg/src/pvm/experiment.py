"""Training, evaluation, checkpoints and metrics records for both tasks."""

from __future__ import annotations

import functools
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .autodiff import Adam
from .config import ExperimentConfig, dump_config
from .datagen import (
    DepthSpec,
    MaskPolicy,
    Regime,
    ShapesSpec,
    depth_dataset,
    gen_mask,
    gen_shapes_dataset,
)
from .errors import CheckpointError, NumericError
from .io import load_pvmt, save_pvmt
from .models import (
    ClsModel,
    DepthModel,
    charbonnier_loss,
    cross_entropy,
    rmse_mae_valid,
    topk_accuracy,
)
from .tensor import MaskedTensor

log = logging.getLogger(__name__)

REGIMES = ("easy", "hard", "extreme")
_REGIME_INDEX_OFFSET = 1_000_000


# ---------------------------------------------------------------------------
# metrics


@dataclass
class MetricsLog:
    """Append-only list of metric records for one run."""

    run_id: str
    seed: int
    records: list[dict] = field(default_factory=list)
    _t0: float = field(default_factory=time.perf_counter, repr=False)

    def log(self, epoch: int, split: str, metric: str, value: float) -> None:
        self.records.append(
            {
                "run_id": self.run_id,
                "seed": self.seed,
                "epoch": epoch,
                "split": split,
                "metric": metric,
                "value": float(value),
                "wall_clock": round(time.perf_counter() - self._t0, 3),
            }
        )

    def value(self, split: str, metric: str) -> float:
        for r in reversed(self.records):
            if r["split"] == split and r["metric"] == metric:
                return r["value"]
        raise KeyError((split, metric))


def write_records(path: Path, records: list[dict], append: bool = False) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "a" if append else "w") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")


def read_records(path: Path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]


def metrics_payload(records: list[dict]) -> bytes:
    """Canonical bytes of a record list with wall-clock timings stripped."""
    lines = [
        json.dumps({k: v for k, v in r.items() if k != "wall_clock"}, sort_keys=True)
        for r in records
    ]
    return ("\n".join(lines) + "\n").encode()


# ---------------------------------------------------------------------------
# data


@dataclass(frozen=True)
class Split:
    inputs: torch.Tensor  # (n, C, H, W), zeros at invalid pixels
    masks: torch.Tensor  # (n, H, W) bool
    targets: torch.Tensor  # labels (n,) or dense depth (n, 1, H, W)
    clean: torch.Tensor  # unmasked images (cls) or the dense ground truth (depth)


def _masks(policy: MaskPolicy, n: int, size: int, seed: int, offset: int) -> np.ndarray:
    return np.stack([gen_mask(policy, size, size, seed=seed, index=offset + i) for i in range(n)])


@functools.lru_cache(maxsize=8)
def _cls_arrays(size, channels, classes, count, seed):
    return gen_shapes_dataset(ShapesSpec(size=size, count=count, seed=seed, channels=channels, classes=classes))


@functools.lru_cache(maxsize=16)
def _cls_masks(policy, n, size, seed, offset):
    return _masks(policy, n, size, seed, offset)


@functools.lru_cache(maxsize=8)
def _depth_arrays(size, count, seed, density):
    return depth_dataset(DepthSpec(size=size, count=count, seed=seed, density=density))


def _apply(images: np.ndarray, masks: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.where(masks[:, None], images, np.float32(0.0)).astype(np.float32))


def load_split(cfg: ExperimentConfig, seed: int, split: str, regime: str | None = None) -> Split:
    """Train or test split for ``seed``; ``regime`` swaps in full-image stress masks."""
    n_train, n_test = cfg.train_count, cfg.test_count
    lo, n = (0, n_train) if split == "train" else (n_train, n_test)
    if cfg.task == "cls":
        images, labels = _cls_arrays(cfg.image_size, cfg.channels, cfg.classes, n_train + n_test, seed)
        images, labels = images[lo : lo + n], labels[lo : lo + n]
        if regime is None:
            masks = _cls_masks(cfg.mask_policy_obj(), n, cfg.image_size, seed, lo)
        else:
            masks = _cls_masks(Regime(regime), n, cfg.image_size, seed, _REGIME_INDEX_OFFSET + lo)
        return Split(_apply(images, masks), torch.from_numpy(masks), torch.from_numpy(labels), torch.from_numpy(images))
    gt, sparse, masks = _depth_arrays(cfg.image_size, n_train + n_test, seed, cfg.mask_density)
    gt, sparse, masks = gt[lo : lo + n], sparse[lo : lo + n], masks[lo : lo + n]
    if regime is not None:
        stress = _cls_masks(Regime(regime), n, cfg.image_size, seed, _REGIME_INDEX_OFFSET + lo)
        combined = masks & stress
        # keep the original samples where the stress mask would remove every one
        empty = ~combined.reshape(n, -1).any(axis=1)
        combined[empty] = masks[empty]
        masks = combined
        sparse = np.where(masks[:, None], gt, np.float32(0.0)).astype(np.float32)
    gt_t = torch.from_numpy(gt)
    return Split(torch.from_numpy(sparse), torch.from_numpy(masks), gt_t, gt_t)


# ---------------------------------------------------------------------------
# models and checkpoints


def build_model(cfg: ExperimentConfig, variant: str, seed: int, token_padding: str | None = None):
    torch.manual_seed(seed)
    mcfg = cfg.model_config(variant, token_padding)
    return ClsModel(mcfg) if cfg.task == "cls" else DepthModel(mcfg)


def run_name(cfg: ExperimentConfig, variant: str, token_padding: str | None = None) -> str:
    name = f"{cfg.task}-{variant}"
    if token_padding is not None:
        name += f"-{token_padding}"
    return name


def save_checkpoint(model: torch.nn.Module, path: Path, cfg: ExperimentConfig, meta: dict) -> None:
    path.mkdir(parents=True, exist_ok=True)
    chash = cfg.config_hash()
    lines = [f"# {k} {v}" for k, v in sorted(meta.items())]
    lines.append(f"# config_hash {chash}")
    for name, tensor in model.state_dict().items():
        fname = name.replace(".", "_") + ".pvmt"
        save_pvmt(path / fname, tensor.detach().float())
        shape = "x".join(str(d) for d in tensor.shape) or "scalar"
        lines.append(f"{name}\t{fname}\t{shape}\t{chash}")
    (path / "manifest.txt").write_text("\n".join(lines) + "\n")
    (path / "config.ini").write_text(dump_config(cfg))


def read_manifest(path: Path) -> tuple[dict, list[tuple[str, str, str, str]]]:
    manifest = Path(path) / "manifest.txt"
    if not manifest.is_file():
        raise CheckpointError(f"missing checkpoint: {manifest} not found")
    meta, entries = {}, []
    for line in manifest.read_text().splitlines():
        if line.startswith("# "):
            key, _, value = line[2:].partition(" ")
            meta[key] = value
        elif line.strip():
            name, fname, shape, chash = line.split("\t")
            entries.append((name, fname, shape, chash))
    return meta, entries


def load_checkpoint(path: Path, cfg: ExperimentConfig) -> tuple[torch.nn.Module, dict]:
    path = Path(path)
    meta, entries = read_manifest(path)
    want = cfg.config_hash()
    for name, _, _, chash in entries:
        if chash != want:
            raise CheckpointError(
                f"config hash mismatch for {name}: checkpoint {chash}, config {want}"
            )
    model = build_model(cfg, meta["variant"], int(meta["seed"]), meta.get("token_padding"))
    state = {}
    for name, fname, _, _ in entries:
        f = path / fname
        if not f.is_file():
            raise CheckpointError(f"missing tensor file {f}")
        state[name] = torch.from_numpy(load_pvmt(f))
    model.load_state_dict(state)
    return model, meta


# ---------------------------------------------------------------------------
# training / evaluation


def _batch(split: Split, idx: torch.Tensor) -> tuple[MaskedTensor, torch.Tensor]:
    return MaskedTensor(split.inputs[idx], split.masks[idx], 2), split.targets[idx]


@torch.no_grad()
def evaluate(model, cfg: ExperimentConfig, variant: str, split: Split) -> dict[str, float]:
    n = split.inputs.shape[0]
    if cfg.task == "cls":
        logits = []
        for s in range(0, n, cfg.eval_batch_size):
            x, _ = _batch(split, torch.arange(s, min(n, s + cfg.eval_batch_size)))
            logits.append(model(x, variant))
        logits = torch.cat(logits)
        k5 = min(5, cfg.classes)
        return {
            "top1": topk_accuracy(logits, split.targets, 1),
            f"top{k5}": topk_accuracy(logits, split.targets, k5),
        }
    rmses, maes = [], []
    for s in range(0, n, cfg.eval_batch_size):
        idx = torch.arange(s, min(n, s + cfg.eval_batch_size))
        x, gt = _batch(split, idx)
        pred = model(x, variant).depth
        for i in range(pred.shape[0]):
            r, m = rmse_mae_valid(pred[i], gt[i], torch.ones_like(gt[i], dtype=torch.bool))
            rmses.append(r)
            maes.append(m)
    return {"rmse": float(np.mean(rmses)), "mae": float(np.mean(maes))}


@dataclass
class RunResult:
    run_id: str
    variant: str
    seed: int
    token_padding: str
    metrics: MetricsLog
    model: torch.nn.Module
    checkpoint: Path | None
    final: dict[str, float]


def train_run(
    cfg: ExperimentConfig,
    variant: str,
    seed: int,
    token_padding: str | None = None,
    out_dir: Path | None = None,
    tag_padding: bool = False,
) -> RunResult:
    """Train one (variant, seed) model, evaluate it on the test split, checkpoint it."""
    torch.set_num_threads(1)
    padding = token_padding or cfg.token_padding
    name = run_name(cfg, variant, padding if tag_padding else None)
    run_id = f"{name}-s{seed}"
    mlog = MetricsLog(run_id, seed)
    train = load_split(cfg, seed, "train")
    test = load_split(cfg, seed, "test")
    model = build_model(cfg, variant, seed, padding)
    opt = Adam(model, lr=cfg.lr, grad_clip=cfg.grad_clip)
    gen = torch.Generator().manual_seed(seed)
    n = train.inputs.shape[0]
    for epoch in range(1, cfg.epochs + 1):
        model.train()
        perm = torch.randperm(n, generator=gen)
        total, seen = 0.0, 0
        for s in range(0, n, cfg.batch_size):
            idx = perm[s : s + cfg.batch_size]
            x, y = _batch(train, idx)
            if cfg.task == "cls":
                loss = cross_entropy(model(x, variant), y)
            else:
                pred = model(x, variant).depth
                loss = charbonnier_loss(pred, y, torch.ones_like(y, dtype=torch.bool))
            if not bool(torch.isfinite(loss)):
                raise NumericError(
                    f"non-finite loss in {run_id} at epoch {epoch}, batch starting {s}: {loss.item()}"
                )
            opt.step(loss)
            total += loss.item() * idx.numel()
            seen += idx.numel()
        loss_name = "cross_entropy" if cfg.task == "cls" else "charbonnier"
        mlog.log(epoch, "train", loss_name, total / seen)
        log.info("%s epoch %d %s %.5f", run_id, epoch, loss_name, total / seen)
    model.eval()
    final = evaluate(model, cfg, variant, test)
    for metric, value in final.items():
        mlog.log(cfg.epochs, "test", metric, value)
    ckpt = None
    if out_dir is not None:
        ckpt = Path(out_dir) / name / f"seed-{seed}"
        save_checkpoint(
            model, ckpt, cfg,
            {"task": cfg.task, "variant": variant, "seed": seed, "token_padding": padding},
        )
    return RunResult(run_id, variant, seed, padding, mlog, model, ckpt, final)


def train_sweep(cfg: ExperimentConfig, out_dir: Path | None = None) -> dict[str, list[RunResult]]:
    """Train every configured variant for every seed; one metrics file per variant."""
    results: dict[str, list[RunResult]] = {}
    for variant in cfg.variant:
        runs = [train_run(cfg, variant, seed, out_dir=out_dir) for seed in cfg.seeds]
        results[variant] = runs
        if out_dir is not None:
            records = [r for run in runs for r in run.metrics.records]
            write_records(Path(out_dir) / f"{run_name(cfg, variant)}.metrics.jsonl", records, append=True)
    return results


def eval_regimes(
    model, cfg: ExperimentConfig, variant: str, seed: int, regimes=REGIMES, run_id: str | None = None
) -> MetricsLog:
    """Evaluate a trained model under full-image stress masks, one record group per regime."""
    mlog = MetricsLog(run_id or f"{run_name(cfg, variant)}-s{seed}", seed)
    model.eval()
    for regime in regimes:
        split = load_split(cfg, seed, "test", regime=regime)
        for metric, value in evaluate(model, cfg, variant, split).items():
            mlog.log(cfg.epochs, f"test-{regime}", metric, value)
    return mlog


def eval_checkpoint(path: Path, cfg: ExperimentConfig, regimes=REGIMES) -> tuple[MetricsLog, dict]:
    model, meta = load_checkpoint(path, cfg)
    mlog = eval_regimes(model, cfg, meta["variant"], int(meta["seed"]), regimes)
    return mlog, meta


@dataclass
class AblationRow:
    strategy: str
    rmse_per_seed: list[float]
    mae_per_seed: list[float]

    @property
    def rmse(self) -> float:
        return float(np.mean(self.rmse_per_seed))

    @property
    def mae(self) -> float:
        return float(np.mean(self.mae_per_seed))


REFERENCE_TOKEN_PADDING_RMSE = {"zero": 1.415, "mean": 1.398, "learned": 1.383}
PADDING_LABELS = {"zero": "Zero-padding", "mean": "Mean token padding", "learned": "Learned token"}


def ablate_padding(cfg: ExperimentConfig, out_dir: Path | None = None) -> tuple[list[AblationRow], list[dict]]:
    """Train the pvm depth model once per token-padding strategy with shared seeds."""
    if cfg.task != "depth":
        raise ValueError("the token-padding ablation runs on the depth task")
    rows, records = [], []
    for strategy in ("zero", "mean", "learned"):
        runs = [
            train_run(cfg, "pvm", seed, token_padding=strategy, out_dir=out_dir, tag_padding=True)
            for seed in cfg.seeds
        ]
        rows.append(
            AblationRow(strategy, [r.final["rmse"] for r in runs], [r.final["mae"] for r in runs])
        )
        records.extend(rec for r in runs for rec in r.metrics.records)
    if out_dir is not None:
        write_records(Path(out_dir) / "ablate-padding.metrics.jsonl", records, append=True)
    return rows, records


def relative_gap(baseline: float, improved: float) -> float:
    """Relative reduction of ``improved`` with respect to ``baseline`` (positive is better)."""
    return (baseline - improved) / baseline if baseline else math.nan
