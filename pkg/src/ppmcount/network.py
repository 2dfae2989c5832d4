"""VGG19-prefix backbone, pyramid pooling enhancement, and multi-stage confidence-map heads."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Optional

import numpy as np

from .autodiff import (
    Tensor,
    adaptive_max_pool,
    bilinear_upsample,
    concat_channels,
    conv2d,
    max_pool_2x2,
    relu,
    sigmoid,
)
from .autodiff import checkpoint
from .autodiff.checkpoint import atomic_write

STRIDE = 8


@dataclass(frozen=True)
class NetworkConfig:
    """Architecture hyperparameters. Defaults reproduce the full-size network."""

    input_size: int = 512
    stages: int = 4
    backbone_widths: tuple = (64, 128, 256)
    ppm_scales: tuple = (1, 2, 3, 6)
    ppm_channels: int = 512
    stage1_widths: tuple = (128, 512)
    refine_width: int = 128
    refine_kernel: int = 7
    stride: int = STRIDE

    def __post_init__(self):
        for name in ("backbone_widths", "ppm_scales", "stage1_widths"):
            object.__setattr__(self, name, tuple(int(v) for v in getattr(self, name)))
        if self.stride != STRIDE:
            raise ValueError(f"the backbone has three 2x2 pools, so stride must be {STRIDE}")
        if self.stages < 1:
            raise ValueError("stages must be >= 1")
        if self.input_size % self.stride:
            raise ValueError(f"input_size {self.input_size} is not divisible by stride {self.stride}")
        if list(self.ppm_scales) != sorted(self.ppm_scales) or not self.ppm_scales or self.ppm_scales[0] < 1:
            raise ValueError(f"ppm_scales must be positive and ascending, got {self.ppm_scales}")
        if len(self.backbone_widths) != 3 or len(self.stage1_widths) != 2:
            raise ValueError("backbone_widths needs 3 entries and stage1_widths 2")
        if self.refine_kernel % 2 == 0:
            raise ValueError("refine_kernel must be odd for same-resolution convolution")
        if self.input_size // self.stride < self.ppm_scales[-1]:
            raise ValueError(
                f"feature map {self.input_size // self.stride}px is smaller than the largest ppm scale {self.ppm_scales[-1]}")

    @property
    def map_size(self) -> int:
        return self.input_size // self.stride

    @property
    def ppm_out_channels(self) -> int:
        return self.backbone_widths[2] + len(self.ppm_scales) * self.ppm_channels

    def to_text(self) -> str:
        lines = []
        for key, value in asdict(self).items():
            if isinstance(value, tuple):
                value = ",".join(str(v) for v in value)
            lines.append(f"{key}={value}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "NetworkConfig":
        known = {f.name: f for f in fields(cls)}
        kwargs = {}
        for raw in text.splitlines():
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            key, sep, value = line.partition("=")
            key = key.strip()
            if not sep or key not in known:
                raise ValueError(f"bad network config line: {raw!r}")
            value = value.strip()
            if isinstance(known[key].default, tuple):
                kwargs[key] = tuple(int(v) for v in value.split(",") if v)
            else:
                kwargs[key] = int(value)
        return cls(**kwargs)


def layer_specs(cfg: NetworkConfig) -> list[tuple[str, int, int, int]]:
    """(name, in_channels, out_channels, kernel) for every convolution, in creation order."""
    c1, c2, c3 = cfg.backbone_widths
    specs = [
        ("backbone.conv1_1", 3, c1, 3), ("backbone.conv1_2", c1, c1, 3),
        ("backbone.conv2_1", c1, c2, 3), ("backbone.conv2_2", c2, c2, 3),
        ("backbone.conv3_1", c2, c3, 3), ("backbone.conv3_2", c3, c3, 3),
        ("backbone.conv3_3", c3, c3, 3), ("backbone.conv3_4", c3, c3, 3),
    ]
    for k in cfg.ppm_scales:
        specs.append((f"ppm.level{k}", c3, cfg.ppm_channels, 1))
    feat = cfg.ppm_out_channels
    w1, w2 = cfg.stage1_widths
    specs += [
        ("stage1.conv1", feat, w1, 3), ("stage1.conv2", w1, w1, 3), ("stage1.conv3", w1, w1, 3),
        ("stage1.conv4", w1, w2, 1), ("stage1.conv5", w2, 1, 1),
    ]
    r, k = cfg.refine_width, cfg.refine_kernel
    for t in range(2, cfg.stages + 1):
        specs.append((f"stage{t}.conv1", feat + 1, r, k))
        specs += [(f"stage{t}.conv{i}", r, r, k) for i in range(2, 6)]
        specs += [(f"stage{t}.conv6", r, r, 1), (f"stage{t}.conv7", r, 1, 1)]
    return specs


def parameter_count(cfg: NetworkConfig) -> int:
    return sum(o * i * k * k + o for _, i, o, k in layer_specs(cfg))


class Model:
    """Parameter store plus the four-phase forward pass."""

    def __init__(self, config: NetworkConfig, seed: int = 0):
        self.config = config
        self.params: dict[str, Tensor] = {}
        rng = np.random.default_rng(seed)
        for name, cin, cout, k in layer_specs(config):
            std = np.sqrt(2.0 / (cin * k * k))
            self.params[f"{name}.w"] = Tensor(rng.normal(0.0, std, size=(cout, cin, k, k)), requires_grad=True)
            self.params[f"{name}.b"] = Tensor(np.zeros(cout), requires_grad=True)

    def _conv(self, name: str, x: Tensor) -> Tensor:
        w = self.params[f"{name}.w"]
        return conv2d(x, w, self.params[f"{name}.b"], stride=1, padding=(w.shape[2] - 1) // 2)

    def backbone_forward(self, image: Tensor) -> Tensor:
        """(n, 3, H, W) image -> (n, c3, H/8, W/8) feature map."""
        if image.ndim != 4 or image.shape[1] != 3:
            raise ValueError(f"backbone expects an (n, 3, H, W) image, got {image.shape}")
        h, w = image.shape[2:]
        if h % STRIDE or w % STRIDE:
            raise ValueError(f"image size {h}x{w} is not divisible by {STRIDE}")
        x = image
        for block in (("conv1_1", "conv1_2"), ("conv2_1", "conv2_2"),
                      ("conv3_1", "conv3_2", "conv3_3", "conv3_4")):
            for layer in block:
                x = relu(self._conv(f"backbone.{layer}", x))
            x = max_pool_2x2(x)
        return x

    def ppm_forward(self, features: Tensor) -> Tensor:
        h, w = features.shape[2:]
        top = self.config.ppm_scales[-1]
        if h < top or w < top:
            raise ValueError(f"feature map {h}x{w} is smaller than the largest pyramid scale {top}")
        levels = [features]
        for k in self.config.ppm_scales:
            pooled = adaptive_max_pool(features, k)
            levels.append(bilinear_upsample(relu(self._conv(f"ppm.level{k}", pooled)), h, w))
        return concat_channels(*levels)

    def stage_forward(self, t: int, ppm_out: Tensor, prev_map: Optional[Tensor] = None) -> Tensor:
        """Confidence map of stage ``t`` (1-based), shape (n, 1, h, w)."""
        if not 1 <= t <= self.config.stages:
            raise ValueError(f"stage index {t} outside 1..{self.config.stages}")
        if (t == 1) != (prev_map is None):
            raise ValueError("stage 1 takes no previous map; later stages require one")
        if t == 1:
            x = ppm_out
            for i in (1, 2, 3, 4):
                x = relu(self._conv(f"stage1.conv{i}", x))
            return sigmoid(self._conv("stage1.conv5", x))
        x = concat_channels(ppm_out, prev_map)
        for i in range(1, 7):
            x = relu(self._conv(f"stage{t}.conv{i}", x))
        return sigmoid(self._conv(f"stage{t}.conv7", x))

    def forward(self, image: Tensor) -> list[Tensor]:
        """Maps C_1..C_T; every stage reads the same PPM output."""
        feats = self.ppm_forward(self.backbone_forward(image))
        maps = []
        prev = None
        for t in range(1, self.config.stages + 1):
            prev = self.stage_forward(t, feats, prev)
            maps.append(prev)
        return maps

    __call__ = forward

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        expected = set(self.params)
        got = set(arrays)
        if expected != got:
            raise ValueError(f"checkpoint/config mismatch: missing {sorted(expected - got)[:4]}, "
                             f"unexpected {sorted(got - expected)[:4]}")
        for name, p in self.params.items():
            if arrays[name].shape != p.shape:
                raise ValueError(f"checkpoint/config mismatch for {name}: checkpoint shape "
                                 f"{arrays[name].shape}, model expects {p.shape}")
        for name, p in self.params.items():
            p.data = np.array(arrays[name], dtype=np.float64)


def config_path(ckpt_path) -> Path:
    return Path(ckpt_path).with_suffix(".cfg")


def save_model(model: Model, path) -> None:
    """Write ``path`` (PKC1 parameters) and a sibling ``.cfg`` architecture file."""
    atomic_write(config_path(path), model.config.to_text())
    checkpoint.save(path, model.state_arrays())


def load_model(path) -> Model:
    cfg = NetworkConfig.from_text(config_path(path).read_text(encoding="utf-8"))
    model = Model(cfg)
    model.load_arrays(checkpoint.load(path))
    return model


def image_tensor(images: np.ndarray) -> Tensor:
    """uint8 rasters (n, h, w, 3) -> float tensor (n, 3, h, w) scaled to [-1, 1]."""
    images = np.asarray(images)
    if images.ndim == 3:
        images = images[None]
    return Tensor(images.transpose(0, 3, 1, 2).astype(np.float64) / 127.5 - 1.0)
