"""Experiment configuration: flat key=value text with sections.

The file format is INI-style (configparser), chosen so diffs are
line-per-setting. Every path is resolved against the config file's
directory at load time. The seed is mandatory; all randomness anywhere in
a run derives from it by name.
"""

from __future__ import annotations

import configparser
import math
from dataclasses import dataclass, field
from pathlib import Path

from .data_model import DataError, Hyperparameters
from .ingestion import GRID_CELL_PIXELS

STRATEGIES = ("baseline", "sequential", "hierarchical")
HIERARCHY_MODES = ("scene-name", "label-cluster")


@dataclass(frozen=True)
class ExperimentConfig:
    manifest: str
    class_list: str
    seed: int
    out_dir: str
    hyper: Hyperparameters = field(default_factory=Hyperparameters)
    augment_copies: int = 0
    scale_range: tuple[float, float] = (0.9, 1.1)
    rotation_range: tuple[float, float] = (-8.0, 8.0)
    flip_probability: float = 0.5
    hierarchy_mode: str = "label-cluster"
    hierarchy_file: str | None = None
    infill_threshold: float = 0.9
    n_star: int | None = None
    strategy: str = "sequential"
    include_step3: bool = True
    iterations: tuple[int, ...] = (2000, 2000, 500, 2000)
    record_interval: int = 50
    early_stop: bool = True
    eval_stride: int = 4
    grid_cell_pixels: int = GRID_CELL_PIXELS
    conv_channels: tuple[int, int] = (16, 32)
    fc_dim: int = 64

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise DataError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        if self.hierarchy_mode not in HIERARCHY_MODES:
            raise DataError(
                f"hierarchy mode must be one of {HIERARCHY_MODES}, got {self.hierarchy_mode!r}"
            )
        if not 0 < self.infill_threshold <= 1:
            raise DataError("infill threshold must be in (0, 1]")

    def expected_stage_count(self) -> int:
        if self.strategy == "baseline":
            return 1
        if self.strategy == "hierarchical":
            return 2
        return 4 if self.include_step3 else 3


def _format_r(value: float) -> str:
    return "inf" if value == math.inf else str(int(value))


def _parse_r(text: str) -> float:
    return math.inf if text.strip().lower() == "inf" else float(int(text))


def save_config(path: Path, cfg: ExperimentConfig) -> None:
    cp = configparser.ConfigParser()
    cp["dataset"] = {"manifest": cfg.manifest, "classes": cfg.class_list}
    cp["hyper"] = {
        "rho": repr(cfg.hyper.rho),
        "r": _format_r(cfg.hyper.R),
        "alpha": repr(cfg.hyper.alpha),
        "beta": repr(cfg.hyper.beta),
        "patch_size": str(cfg.hyper.patch_size),
        "batch_size": str(cfg.hyper.batch_size),
        "lr0": repr(cfg.hyper.lr0),
        "lr_step": str(cfg.hyper.lr_step),
        "lr_factor": repr(cfg.hyper.lr_factor),
    }
    cp["augment"] = {
        "n_copies": str(cfg.augment_copies),
        "scale_lo": repr(cfg.scale_range[0]),
        "scale_hi": repr(cfg.scale_range[1]),
        "rotation_lo": repr(cfg.rotation_range[0]),
        "rotation_hi": repr(cfg.rotation_range[1]),
        "flip_probability": repr(cfg.flip_probability),
    }
    cp["hierarchy"] = {
        "mode": cfg.hierarchy_mode,
        "infill_threshold": repr(cfg.infill_threshold),
        "n_star": "auto" if cfg.n_star is None else str(cfg.n_star),
    }
    if cfg.hierarchy_file is not None:
        cp["hierarchy"]["file"] = cfg.hierarchy_file
    cp["schedule"] = {
        "strategy": cfg.strategy,
        "include_step3": str(cfg.include_step3).lower(),
        "iterations": ",".join(str(i) for i in cfg.iterations),
        "record_interval": str(cfg.record_interval),
        "early_stop": str(cfg.early_stop).lower(),
    }
    cp["model"] = {
        "conv1_channels": str(cfg.conv_channels[0]),
        "conv2_channels": str(cfg.conv_channels[1]),
        "fc_dim": str(cfg.fc_dim),
    }
    cp["run"] = {
        "seed": str(cfg.seed),
        "out_dir": cfg.out_dir,
        "eval_stride": str(cfg.eval_stride),
        "grid_cell_pixels": str(cfg.grid_cell_pixels),
    }
    with open(path, "w", encoding="utf-8") as fh:
        cp.write(fh)


def load_config(path: Path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise DataError(f"config file {path} does not exist")
    base = path.parent
    cp = configparser.ConfigParser()
    cp.read(path, encoding="utf-8")
    try:
        seed = cp.getint("run", "seed")
    except (configparser.Error, ValueError) as exc:
        raise DataError(f"{path}: mandatory [run] seed is missing or invalid") from exc

    def resolve(p: str) -> str:
        candidate = Path(p)
        return str(candidate if candidate.is_absolute() else (base / candidate))

    manifest = resolve(cp.get("dataset", "manifest"))
    class_list = resolve(cp.get("dataset", "classes"))
    for label, p in (("manifest", manifest), ("class list", class_list)):
        if not Path(p).exists():
            raise DataError(f"{path}: {label} path {p} does not exist")

    hyper = Hyperparameters(
        rho=cp.getfloat("hyper", "rho", fallback=0.93),
        R=_parse_r(cp.get("hyper", "r", fallback="129")),
        alpha=cp.getfloat("hyper", "alpha", fallback=1.0),
        beta=cp.getfloat("hyper", "beta", fallback=0.00025),
        patch_size=cp.getint("hyper", "patch_size", fallback=227),
        batch_size=cp.getint("hyper", "batch_size", fallback=64),
        lr0=cp.getfloat("hyper", "lr0", fallback=0.001),
        lr_step=cp.getint("hyper", "lr_step", fallback=20000),
        lr_factor=cp.getfloat("hyper", "lr_factor", fallback=10.0),
    )
    n_star_raw = cp.get("hierarchy", "n_star", fallback="auto")
    hierarchy_file = cp.get("hierarchy", "file", fallback=None)
    if hierarchy_file is not None:
        hierarchy_file = resolve(hierarchy_file)
        if not Path(hierarchy_file).exists():
            raise DataError(f"{path}: hierarchy file {hierarchy_file} does not exist")
    iterations = tuple(
        int(v) for v in cp.get("schedule", "iterations", fallback="2000,2000,500,2000").split(",")
    )
    return ExperimentConfig(
        manifest=manifest,
        class_list=class_list,
        seed=seed,
        out_dir=resolve(cp.get("run", "out_dir", fallback="out")),
        hyper=hyper,
        augment_copies=cp.getint("augment", "n_copies", fallback=0),
        scale_range=(
            cp.getfloat("augment", "scale_lo", fallback=0.9),
            cp.getfloat("augment", "scale_hi", fallback=1.1),
        ),
        rotation_range=(
            cp.getfloat("augment", "rotation_lo", fallback=-8.0),
            cp.getfloat("augment", "rotation_hi", fallback=8.0),
        ),
        flip_probability=cp.getfloat("augment", "flip_probability", fallback=0.5),
        hierarchy_mode=cp.get("hierarchy", "mode", fallback="label-cluster"),
        hierarchy_file=hierarchy_file,
        infill_threshold=cp.getfloat("hierarchy", "infill_threshold", fallback=0.9),
        n_star=None if n_star_raw == "auto" else int(n_star_raw),
        strategy=cp.get("schedule", "strategy", fallback="sequential"),
        include_step3=cp.getboolean("schedule", "include_step3", fallback=True),
        iterations=iterations,
        record_interval=cp.getint("schedule", "record_interval", fallback=50),
        early_stop=cp.getboolean("schedule", "early_stop", fallback=True),
        eval_stride=cp.getint("run", "eval_stride", fallback=4),
        grid_cell_pixels=cp.getint("run", "grid_cell_pixels", fallback=GRID_CELL_PIXELS),
        conv_channels=(
            cp.getint("model", "conv1_channels", fallback=16),
            cp.getint("model", "conv2_channels", fallback=32),
        ),
        fc_dim=cp.getint("model", "fc_dim", fallback=64),
    )
