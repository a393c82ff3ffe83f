"""Multi-scale residual classifier and its early/mid/late fusion variants."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from ..errors import ConfigError, ShapeError
from .layers import (BatchNorm2d, Conv2d, GlobalAvgPool, Layer, Linear, ReLU, ResidualSubBlock,
                     Sequential, softmax)

FEATURES = ("us", "e1", "e2", "s1", "s2")
EARLY, MID, LATE = "early", "mid", "late"


@dataclass(frozen=True)
class ConvSpec:
    kernel: int = 7
    depth: int = 16
    stride: int = 2

    def __post_init__(self):
        if self.kernel < 1 or self.kernel % 2 == 0 or self.depth < 1 or self.stride < 1:
            raise ConfigError(f"invalid conv spec {self}")


@dataclass(frozen=True)
class ResCNNBlockSpec:
    kernel: int = 3
    stage_depths: tuple[int, ...] = (16, 32, 64)
    downsample: bool = True

    def __post_init__(self):
        if len(self.stage_depths) != 3:
            raise ConfigError("a ResCNN block has exactly 3 sub-blocks")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ConfigError(f"branch kernel must be odd, got {self.kernel}")


def _default_branches():
    return tuple(ResCNNBlockSpec(kernel=k) for k in (3, 5, 7))


@dataclass(frozen=True)
class ModelConfig:
    image_side: int = 512
    initial_conv: ConvSpec = field(default_factory=ConvSpec)
    branches: tuple[ResCNNBlockSpec, ...] = field(default_factory=_default_branches)
    num_classes: int = 2
    seed: int = 0
    dtype: str = "float32"
    batch_norm: bool = False

    def __post_init__(self):
        factor = self.downsampling_factor
        if self.image_side < 1 or self.image_side % factor:
            raise ConfigError(
                f"image_side {self.image_side} is not divisible by the total downsampling factor {factor}")
        if not self.branches:
            raise ConfigError("at least one ResCNN branch is required")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"unsupported dtype {self.dtype!r}")

    @property
    def downsampling_factor(self) -> int:
        halvings = 3 if any(b.downsample for b in self.branches) else 0
        return self.initial_conv.stride * 2 ** halvings

    @property
    def pooled_width(self) -> int:
        return sum(b.stage_depths[-1] for b in self.branches)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["initial_conv"] = ConvSpec(**d.get("initial_conv", {}))
        if "branches" in d:
            d["branches"] = tuple(
                ResCNNBlockSpec(kernel=b["kernel"], stage_depths=tuple(b["stage_depths"]),
                                downsample=b.get("downsample", True)) for b in d["branches"])
        return cls(**d)


@dataclass(frozen=True)
class FusionSpec:
    mode: str = EARLY
    inputs: tuple[str, ...] = ("us",)
    weight_sharing: bool = False

    def __post_init__(self):
        if self.mode not in (EARLY, MID, LATE):
            raise ConfigError(f"unknown fusion mode {self.mode!r}")
        if not self.inputs:
            raise ConfigError("fusion needs at least one input image")
        unknown = [i for i in self.inputs if i not in FEATURES]
        if unknown:
            raise ConfigError(f"unknown fusion inputs {unknown}; choose from {FEATURES}")
        if len(set(self.inputs)) != len(self.inputs):
            raise ConfigError(f"duplicate fusion inputs {self.inputs}")
        if len(self.inputs) == 1 and self.mode != EARLY:
            raise ConfigError("single-input configurations must use early fusion")

    def to_dict(self) -> dict:
        return {"mode": self.mode, "inputs": list(self.inputs), "weight_sharing": self.weight_sharing}

    @classmethod
    def from_dict(cls, d: dict) -> "FusionSpec":
        return cls(mode=d["mode"], inputs=tuple(d["inputs"]), weight_sharing=bool(d.get("weight_sharing", False)))


def initial_block(c_in: int, spec: ConvSpec, dtype, batch_norm: bool = False) -> Sequential:
    layers = [("conv", Conv2d(c_in, spec.depth, spec.kernel, spec.stride, dtype))]
    if batch_norm:
        layers.append(("bn", BatchNorm2d(spec.depth, dtype)))
    return Sequential(*layers, ("relu", ReLU()))


class Branch(Sequential):
    """One ResCNN block: three residual sub-blocks followed by global pooling."""

    def __init__(self, c_in: int, spec: ResCNNBlockSpec, dtype, batch_norm: bool = False):
        layers = []
        c = c_in
        for i, depth in enumerate(spec.stage_depths):
            stride = 2 if spec.downsample else 1
            layers.append((f"sub{i}", ResidualSubBlock(c, depth, spec.kernel, stride, dtype, batch_norm)))
            c = depth
        layers.append(("pool", GlobalAvgPool()))
        super().__init__(*layers)


class Trunk(Layer):
    """Parallel multi-scale branches whose pooled outputs are concatenated."""

    def __init__(self, c_in: int, specs, dtype, batch_norm: bool = False):
        self.branches = [Branch(c_in, s, dtype, batch_norm) for s in specs]
        self.widths = [s.stage_depths[-1] for s in specs]

    def params(self):
        return [(f"branch{i}.{n}", t) for i, b in enumerate(self.branches) for n, t in b.params()]

    def buffers(self):
        return [(f"branch{i}.{n}", v) for i, b in enumerate(self.branches) for n, v in b.buffers()]

    def set_training(self, flag: bool) -> None:
        for b in self.branches:
            b.set_training(flag)

    def forward(self, x):
        return np.concatenate([b.forward(x) for b in self.branches], axis=1)

    def backward(self, grad):
        parts = np.split(grad, np.cumsum(self.widths)[:-1], axis=1)
        gx = None
        for b, g in zip(self.branches, parts):
            gb = b.backward(g)
            gx = gb if gx is None else gx + gb
        return gx


class Stream(Sequential):
    """Initial convolution followed by the multi-scale trunk, ending at pooling."""

    def __init__(self, c_in: int, cfg: ModelConfig, dtype):
        bn = cfg.batch_norm
        super().__init__(("initial", initial_block(c_in, cfg.initial_conv, dtype, bn)),
                         ("trunk", Trunk(cfg.initial_conv.depth, cfg.branches, dtype, bn)))


class Model(Layer):
    """Fusion classifier returning two logits per sample.

    ``forward`` takes either a stacked ``(N, C, S, S)`` array with channels in
    ``fusion.inputs`` order or a list of ``C`` single-channel ``(N, 1, S, S)``
    arrays.
    """

    def __init__(self, cfg: ModelConfig, fusion: FusionSpec):
        self.cfg = cfg
        self.fusion = fusion
        self.dtype = np.dtype(cfg.dtype)
        n = len(fusion.inputs)
        dt = self.dtype
        shared = 1 if fusion.weight_sharing else n
        if fusion.mode == EARLY:
            self.streams = [Stream(n, cfg, dt)]
            width = cfg.pooled_width
        elif fusion.mode == MID:
            self.initials = [initial_block(1, cfg.initial_conv, dt, cfg.batch_norm) for _ in range(shared)]
            self.trunk = Trunk(cfg.initial_conv.depth * n, cfg.branches, dt, cfg.batch_norm)
            width = cfg.pooled_width
        else:
            self.streams = [Stream(1, cfg, dt) for _ in range(shared)]
            width = cfg.pooled_width * n
        self.classifier = Linear(width, cfg.num_classes, dt)
        self._n_inputs = n
        self._init_params(np.random.default_rng(cfg.seed))

    # ----------------------------------------------------------------- params
    def _parts(self) -> list[tuple[str, Layer]]:
        if self.fusion.mode == MID:
            return [(f"initial{i}", b) for i, b in enumerate(self.initials)] + [("trunk", self.trunk)]
        return [(f"stream{i}", s) for i, s in enumerate(self.streams)]

    def buffers(self):
        return [(f"{name}.{n}", b) for name, part in self._parts() for n, b in part.buffers()]

    def set_training(self, flag: bool) -> None:
        for _, part in self._parts():
            part.set_training(flag)

    def params(self):
        out = []
        if self.fusion.mode == MID:
            for i, b in enumerate(self.initials):
                out += [(f"initial{i}.{n}", t) for n, t in b.params()]
            out += [(f"trunk.{n}", t) for n, t in self.trunk.params()]
        else:
            for i, s in enumerate(self.streams):
                out += [(f"stream{i}.{n}", t) for n, t in s.params()]
        out += [(f"classifier.{n}", t) for n, t in self.classifier.params()]
        return out

    def num_params(self) -> int:
        return sum(t.data.size for _, t in self.params())

    def zero_grad(self) -> None:
        for _, t in self.params():
            t.zero_grad()

    def _init_params(self, rng: np.random.Generator) -> None:
        # Kaiming-uniform (ReLU gain) for convolution weights; zero biases.
        # The classifier starts at zero so initial predictions are uniform.
        for name, t in self.params():
            if name.startswith("classifier") or name.endswith("bias"):
                t.data[...] = 0.0
                continue
            if name.endswith((".gamma", ".beta")):
                continue  # BatchNorm2d starts as the identity
            _, c, k, _ = t.shape
            bound = math.sqrt(6.0 / (c * k * k))
            t.data[...] = rng.uniform(-bound, bound, size=t.shape)

    # ---------------------------------------------------------------- compute
    def _stack(self, batch) -> np.ndarray:
        if isinstance(batch, (list, tuple)):
            batch = np.concatenate([np.asarray(b) for b in batch], axis=1)
        x = np.asarray(batch, dtype=self.dtype)
        side = self.cfg.image_side
        if x.ndim != 4 or x.shape[1] != self._n_inputs or x.shape[2] != side or x.shape[3] != side:
            raise ShapeError(
                f"expected batch of shape (N, {self._n_inputs}, {side}, {side}), got {x.shape}")
        return x

    def forward(self, batch) -> np.ndarray:
        x = self._stack(batch)
        n, c, h, w = x.shape
        mode = self.fusion.mode
        if mode == EARLY:
            feats = self.streams[0].forward(x)
        elif mode == MID:
            if self.fusion.weight_sharing:
                prim = self.initials[0].forward(x.reshape(n * c, 1, h, w))
                prim = prim.reshape(n, c * prim.shape[1], *prim.shape[2:])
            else:
                prim = np.concatenate([b.forward(x[:, i:i + 1]) for i, b in enumerate(self.initials)], axis=1)
            feats = self.trunk.forward(prim)
        else:
            if self.fusion.weight_sharing:
                feats = self.streams[0].forward(x.reshape(n * c, 1, h, w)).reshape(n, -1)
            else:
                feats = np.concatenate([s.forward(x[:, i:i + 1]) for i, s in enumerate(self.streams)], axis=1)
        return self.classifier.forward(feats)

    def backward(self, grad_logits: np.ndarray) -> np.ndarray:
        g = self.classifier.backward(grad_logits)
        mode = self.fusion.mode
        c = self._n_inputs
        if mode == EARLY:
            return self.streams[0].backward(g)
        if mode == MID:
            gp = self.trunk.backward(g)
            n, cc, h, w = gp.shape
            if self.fusion.weight_sharing:
                gx = self.initials[0].backward(gp.reshape(n * c, cc // c, h, w))
                return gx.reshape(n, c, *gx.shape[2:])
            parts = np.split(gp, c, axis=1)
            return np.concatenate([b.backward(p) for b, p in zip(self.initials, parts)], axis=1)
        n = g.shape[0]
        if self.fusion.weight_sharing:
            gx = self.streams[0].backward(g.reshape(n * c, -1))
            return gx.reshape(n, c, *gx.shape[2:])
        parts = np.split(g, c, axis=1)
        return np.concatenate([s.backward(p) for s, p in zip(self.streams, parts)], axis=1)


def build_model(cfg: ModelConfig, fusion: FusionSpec) -> Model:
    return Model(cfg, fusion)


def forward(model: Model, batch) -> np.ndarray:
    return model.forward(batch)


def predict(model: Model, batch) -> tuple[np.ndarray, np.ndarray]:
    """Class ids and softmax probabilities; ties resolve to class 0.

    Puts the model in inference mode; training steps switch it back.
    """
    model.set_training(False)
    probs = softmax(np.asarray(model.forward(batch), dtype=np.float64))
    return np.argmax(probs, axis=1), probs
