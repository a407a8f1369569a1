"""Experiment configuration: a single ``[experiment]`` INI section.

Every key is a field of :class:`ExperimentConfig`; unknown keys, bad types and
out-of-range values are rejected before anything runs.  Lists are
comma-separated.  ``PVM_OUT_DIR`` in the environment overrides ``out_dir``.
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass
from pathlib import Path

from .datagen import REGIME_BANDS, BrushGrid, MaskPolicy, Regime, SparseSample
from .errors import ConfigError
from .models import ClsConfig, DepthConfig

SECTION = "experiment"
OUT_DIR_ENV = "PVM_OUT_DIR"

_TASKS = ("cls", "depth")
_VARIANTS = ("pvm", "vm")
_PADDINGS = ("zero", "mean", "learned")
_POLICIES = ("brush_grid", "sparse", "easy", "hard", "extreme")


@dataclass
class ExperimentConfig:
    task: str = "cls"
    variant: tuple[str, ...] = ("pvm", "vm")
    token_padding: str = "learned"
    norm_before_substitution: bool = False
    # masks
    mask_policy: str = "brush_grid"
    mask_crop: int = 96
    mask_band: tuple[float, float] = (0.25, 0.50)
    mask_density: float = 0.05
    # data
    image_size: int = 32
    channels: int = 1
    classes: int = 10
    train_count: int = 5000
    test_count: int = 1000
    # model
    patch: int = 4
    dim: int = 64
    expand: int = 2
    state: int = 8
    blocks: int = 2
    features: int = 16
    rpssb: int = 6
    pvmm_per_block: int = 2
    fill_kernel: int = 3
    max_fill: int = 64
    # optimization
    lr: float = 1e-3
    epochs: int = 5
    batch_size: int = 32
    eval_batch_size: int = 100
    grad_clip: float = 1.0
    seeds: tuple[int, ...] = (0,)
    out_dir: str = "runs"

    def __post_init__(self) -> None:
        self.validate()

    def validate(self) -> None:
        def need(cond: bool, msg: str) -> None:
            if not cond:
                raise ConfigError(msg)

        need(self.task in _TASKS, f"task must be one of {_TASKS}, got {self.task!r}")
        need(len(self.variant) > 0, "at least one variant is required")
        for v in self.variant:
            need(v in _VARIANTS, f"variant must be one of {_VARIANTS}, got {v!r}")
        need(self.token_padding in _PADDINGS, f"token_padding must be one of {_PADDINGS}")
        need(self.mask_policy in _POLICIES, f"mask_policy must be one of {_POLICIES}")
        need(0.0 <= self.mask_band[0] < self.mask_band[1] < 1.0, "mask_band must satisfy 0 <= lo < hi < 1")
        need(0.0 < self.mask_density <= 1.0, "mask_density must be in (0, 1]")
        for name in ("image_size", "channels", "train_count", "test_count", "patch", "dim",
                     "expand", "state", "blocks", "features", "rpssb", "pvmm_per_block",
                     "max_fill", "epochs", "batch_size", "eval_batch_size", "mask_crop"):
            need(getattr(self, name) >= 1, f"{name} must be >= 1")
        need(self.classes >= 2, "classes must be >= 2")
        need(self.image_size % self.patch == 0, "image_size must be divisible by patch")
        need(self.fill_kernel % 2 == 1, "fill_kernel must be odd")
        need(self.lr > 0, "lr must be positive")
        need(len(self.seeds) > 0, "at least one seed is required")

    # derived objects -------------------------------------------------------

    def mask_policy_obj(self) -> MaskPolicy:
        if self.mask_policy == "brush_grid":
            return BrushGrid(crop=self.mask_crop, band=self.mask_band, patch=self.patch)
        if self.mask_policy == "sparse":
            return SparseSample(self.mask_density)
        return Regime(self.mask_policy)  # type: ignore[arg-type]

    def model_config(self, variant: str, token_padding: str | None = None):
        padding = token_padding or self.token_padding
        if self.task == "cls":
            return ClsConfig(
                image_size=self.image_size, channels=self.channels, patch=self.patch,
                dim=self.dim, expand=self.expand, state=self.state, blocks=self.blocks,
                classes=self.classes, token_padding=padding,
                norm_before_substitution=self.norm_before_substitution, variant=variant,
            )
        return DepthConfig(
            size=self.image_size, channels=self.channels, features=self.features,
            rpssb=self.rpssb, pvmm_per_block=self.pvmm_per_block, patch=self.patch,
            dim=self.dim, expand=self.expand, state=self.state, fill_kernel=self.fill_kernel,
            max_fill=self.max_fill, token_padding=padding,
            norm_before_substitution=self.norm_before_substitution, variant=variant,
        )

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def config_hash(self) -> str:
        """Hash of everything that determines model shapes and data, not where outputs go."""
        d = self.to_dict()
        for k in ("out_dir", "seeds", "variant"):
            d.pop(k)
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)


_FIELDS = {f.name: f for f in dataclasses.fields(ExperimentConfig)}


def _parse_value(name: str, raw: str):
    default = _FIELDS[name].default
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            items = [s.strip() for s in raw.split(",") if s.strip()]
            if name == "mask_band":
                if len(items) != 2:
                    raise ValueError("expected two numbers")
                return (float(items[0]), float(items[1]))
            if name == "seeds":
                return tuple(int(s) for s in items)
            return tuple(items)
        return raw
    except ValueError as exc:
        raise ConfigError(f"bad value for {name!r}: {raw!r} ({exc})") from None


def parse_config(text: str, source: str = "<string>") -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from None
    extra = [s for s in parser.sections() if s != SECTION]
    if extra:
        raise ConfigError(f"{source}: unknown sections {extra}; only [{SECTION}] is allowed")
    if not parser.has_section(SECTION):
        raise ConfigError(f"{source}: missing [{SECTION}] section")
    values = {}
    for key, raw in parser.items(SECTION):
        if key not in _FIELDS:
            raise ConfigError(f"{source}: unknown key {key!r}; allowed keys: {', '.join(_FIELDS)}")
        values[key] = _parse_value(key, raw)
    env_out = os.environ.get(OUT_DIR_ENV)
    if env_out:
        values["out_dir"] = env_out
    return ExperimentConfig(**values)


def load_config(path: str | Path) -> ExperimentConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    return parse_config(p.read_text(), source=str(p))


def dump_config(cfg: ExperimentConfig) -> str:
    lines = [f"[{SECTION}]"]
    for name, value in cfg.to_dict().items():
        if isinstance(value, (tuple, list)):
            value = ", ".join(str(v) for v in value)
        elif isinstance(value, bool):
            value = "true" if value else "false"
        lines.append(f"{name} = {value}")
    return "\n".join(lines) + "\n"


__all__ = [
    "ExperimentConfig",
    "parse_config",
    "load_config",
    "dump_config",
    "REGIME_BANDS",
    "OUT_DIR_ENV",
]
