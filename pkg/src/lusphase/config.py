"""Run configuration: TOML sections, command-line overrides, provenance records.

A config file looks like::

    seed = 7

    [pipeline]
    crop_side = 334
    side = 512

    [fusion]
    mode = "late"
    inputs = ["us", "e1", "e2"]

    [train]
    epochs = 50
    lr = 1e-5

Overrides use ``section.key=value`` with TOML literal values.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import tomli

from .data import PipelineConfig
from .enhance import EnhanceParams
from .errors import ConfigError, LusphaseError
from .frst import FRSTParams
from .net.model import ConvSpec, FusionSpec, ModelConfig, ResCNNBlockSpec
from .phasefilt import ASSDParams


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    batch_size: int = 8
    lr: float = 1e-5
    # Multiplier on ``lr`` for desk-scale runs; the product is what ADAM uses.
    lr_scale: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @property
    def effective_lr(self) -> float:
        return self.lr * self.lr_scale


@dataclass(frozen=True)
class ModelSection:
    initial_kernel: int = 7
    initial_depth: int = 16
    initial_stride: int = 2
    branch_kernels: tuple[int, ...] = (3, 5, 7)
    stage_depths: tuple[int, ...] = (16, 32, 64)
    downsample: bool = True
    dtype: str = "float32"
    batch_norm: bool = False


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    model: ModelSection = field(default_factory=ModelSection)
    fusion: FusionSpec = field(default_factory=FusionSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    folds: int = 5
    paths: dict[str, str] = field(default_factory=dict)

    def model_config(self, seed: int) -> ModelConfig:
        m = self.model
        return ModelConfig(
            image_side=self.pipeline.out_side,
            initial_conv=ConvSpec(m.initial_kernel, m.initial_depth, m.initial_stride),
            branches=tuple(ResCNNBlockSpec(k, tuple(m.stage_depths), m.downsample) for k in m.branch_kernels),
            seed=seed, dtype=m.dtype, batch_norm=m.batch_norm)

    # ------------------------------------------------------------ (de)serialize
    def to_dict(self) -> dict:
        p = self.pipeline
        return {
            "seed": self.seed,
            "pipeline": {"crop_side": p.crop_side,
                         "crop_offset": list(p.crop_offset) if p.crop_offset is not None else None,
                         "side": p.out_side},
            "phase": asdict(p.phase),
            "enhance": dict(asdict(p.enhance), beta_fractions=list(p.enhance.beta_fractions)),
            "frst": dict(asdict(p.frst), radii=list(p.frst.radii)),
            "model": {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self.model).items()},
            "fusion": self.fusion.to_dict(),
            "train": asdict(self.train),
            "cv": {"k": self.folds},
            "paths": dict(self.paths),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        known = {"seed", "pipeline", "phase", "enhance", "frst", "model", "fusion", "train", "cv", "paths"}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown config sections/keys: {sorted(unknown)}")
        try:
            pipe = dict(doc.get("pipeline", {}))
            _check_keys("pipeline", pipe, {"crop_side", "crop_offset", "side"})
            offset = pipe.get("crop_offset")
            pipeline = PipelineConfig(
                crop_side=int(pipe.get("crop_side", 334)),
                crop_offset=tuple(int(v) for v in offset) if offset is not None else None,
                out_side=int(pipe.get("side", 512)),
                phase=_build(ASSDParams, "phase", doc.get("phase", {})),
                enhance=_build(EnhanceParams, "enhance", doc.get("enhance", {}),
                               tuple_keys=("beta_fractions",)),
                frst=_build(FRSTParams, "frst", doc.get("frst", {}), tuple_keys=("radii",)),
            )
            model = _build(ModelSection, "model", doc.get("model", {}),
                           tuple_keys=("branch_kernels", "stage_depths"))
            fusion_doc = dict({"mode": "early", "inputs": ["us"]}, **doc.get("fusion", {}))
            _check_keys("fusion", fusion_doc, {"mode", "inputs", "weight_sharing"})
            fusion = FusionSpec.from_dict(fusion_doc)
            train = _build(TrainConfig, "train", doc.get("train", {}))
            cv = dict(doc.get("cv", {}))
            _check_keys("cv", cv, {"k"})
            cfg = cls(seed=int(doc.get("seed", 0)), pipeline=pipeline, model=model, fusion=fusion,
                      train=train, folds=int(cv.get("k", 5)),
                      paths={k: str(v) for k, v in doc.get("paths", {}).items()})
        except LusphaseError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        cfg.model_config(0)  # validates side / downsampling compatibility
        if cfg.train.epochs < 0 or cfg.train.batch_size < 1 or not cfg.train.effective_lr >= 0:
            raise ConfigError("train.epochs >= 0, train.batch_size >= 1 and a non-negative lr are required")
        return cfg


def _check_keys(section: str, d: dict, allowed: set[str]) -> None:
    extra = set(d) - allowed
    if extra:
        raise ConfigError(f"unknown keys in [{section}]: {sorted(extra)}")


def _build(cls, section: str, d: dict, tuple_keys=()):
    allowed = {f.name for f in fields(cls)}
    _check_keys(section, d, allowed)
    kwargs = {k: (tuple(v) if k in tuple_keys else v) for k, v in d.items()}
    return cls(**kwargs)


def parse_override(text: str) -> tuple[list[str], object]:
    """``"train.lr=1e-3"`` -> ``(["train", "lr"], 0.001)``."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} must look like section.key=value")
    key, raw = text.split("=", 1)
    try:
        value = tomli.loads(f"v = {raw}")["v"]
    except tomli.TOMLDecodeError:
        value = raw  # bare strings
    return key.strip().split("."), value


def load_config(path=None, overrides=()) -> RunConfig:
    doc: dict = {}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            doc = tomli.loads(path.read_text())
        except tomli.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    doc = merge_overrides(doc, overrides)
    return RunConfig.from_dict(doc)


def merge_overrides(doc: dict, overrides) -> dict:
    doc = json.loads(json.dumps(doc))
    for item in overrides:
        keys, value = parse_override(item) if isinstance(item, str) else item
        node = doc
        for k in keys[:-1]:
            node = node.setdefault(k, {})
            if not isinstance(node, dict):
                raise ConfigError(f"cannot override {'.'.join(keys)}: {k} is not a section")
        node[keys[-1]] = value
    return doc


def derive_seed(seed: int, *tags: int) -> int:
    """Independent, reproducible sub-seed for one purpose (e.g. one fold's init)."""
    return int(np.random.SeedSequence([seed, *tags]).generate_state(1)[0])


def write_run_record(out_dir, command: str, cfg: RunConfig, extra: dict | None = None) -> Path:
    """Write ``run.json``: the effective config plus the invoking command."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    from . import __version__
    doc = {"command": command, "version": __version__, "config": cfg.to_dict()}
    if extra:
        doc.update(extra)
    path = out_dir / "run.json"
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path
